"""Fine-tuning loop: Adam, gradient accumulation, checkpointed backward,
reduced-precision activation storage, AWP, and optional SiFT.

Micro-batch losses are token-count-weighted so an accumulation group
reproduces the concatenated big batch exactly: each essay's backward is
seeded with labeled_tokens / group_total, making grouping a no-op for
the resulting gradients. Dropout seeds derive from (epoch, step,
position-in-batch) child streams, so recomputation passes (AWP,
checkpoint replay) repeat the same masks.
"""

import math
import random
import statistics
from array import array
from dataclasses import dataclass, fields

from .corpus import IGNORE
from .engine import ops
from .engine.core import Precision, RngStream, Tape, Tensor, backward, no_grad
from .engine.kernels import kernels as K
from .errors import ArgscoreError, ContractError, ParseError


class TrainingError(ArgscoreError):
    """Training aborted (non-finite gradients or the like)."""


# ---------------------------------------------------------------------------
# config


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    micro_batch_size: int = 4
    accumulation_steps: int = 1
    epochs: int = 1
    seed: int = 0
    precision: str = Precision.FULL64
    checkpoint_activations: bool = False
    checkpoint_segment: int = 1
    awp_enabled: bool = False
    awp_loss_threshold: float | None = None  # None: first-epoch median loss
    awp_perturb_scale: float = 1e-3
    sift_enabled: bool = False
    sift_perturb_scale: float = 1e-3
    sift_consistency_weight: float = 1.0
    lr_warmup_steps: int = 0

    def __post_init__(self):
        if self.accumulation_steps < 1:
            raise ContractError("accumulation_steps must be >= 1")
        if self.micro_batch_size < 1:
            raise ContractError("micro_batch_size must be >= 1")
        if self.precision not in Precision.ACT_BYTES:
            raise ContractError(f"unknown precision mode: {self.precision!r}")
        if self.checkpoint_activations and self.checkpoint_segment < 1:
            raise ContractError("checkpoint_segment must be >= 1")
        if self.awp_enabled and self.awp_perturb_scale <= 0:
            raise ContractError("awp_perturb_scale must be > 0 when AWP is enabled")
        if self.sift_enabled and self.sift_perturb_scale <= 0:
            raise ContractError("sift_perturb_scale must be > 0 when SiFT is enabled")


_BOOL_WORDS = {"true": True, "1": True, "yes": True,
               "false": False, "0": False, "no": False}


def parse_train_config(path) -> TrainConfig:
    """key=value lines, '#' comments; keys mirror TrainConfig fields."""
    spec = {f.name: f for f in fields(TrainConfig)}
    kwargs = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"{path}:{lineno}: expected key=value")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in spec:
                raise ParseError(f"{path}:{lineno}: unknown key {key!r}")
            kwargs[key] = _coerce(key, value, path, lineno)
    return TrainConfig(**kwargs)


def _coerce(key, value, path, lineno):
    if key == "precision":
        return value
    if key == "awp_loss_threshold":
        return None if value.lower() == "none" else float(value)
    if key in ("checkpoint_activations", "awp_enabled", "sift_enabled"):
        flag = _BOOL_WORDS.get(value.lower())
        if flag is None:
            raise ParseError(f"{path}:{lineno}: {key} must be true/false")
        return flag
    if key in ("micro_batch_size", "accumulation_steps", "epochs", "seed",
               "checkpoint_segment", "lr_warmup_steps"):
        try:
            return int(value)
        except ValueError:
            raise ParseError(f"{path}:{lineno}: {key} must be an integer") from None
    try:
        return float(value)
    except ValueError:
        raise ParseError(f"{path}:{lineno}: {key} must be a number") from None


# ---------------------------------------------------------------------------
# losses and optimizer


def token_cross_entropy(logits, labels):
    """Mean CE over non-IGNORE tokens; None when every label is IGNORE."""
    return ops.token_ce(logits, labels)


class OptimizerState:
    def __init__(self, model):
        self.moments = {}
        for name, p in model.named_parameters():
            self.moments[name] = (K.new_d(p.size), K.new_d(p.size))
        self.step = 0


def adam_step(model, state: OptimizerState, cfg: TrainConfig, lr: float | None = None):
    """One bias-corrected Adam update; the step counter advances once."""
    if lr is None:
        lr = cfg.learning_rate
    state.step += 1
    for name, p in model.named_parameters():
        g = p.grad
        if g is None:
            g = K.new_d(p.size)
        elif K.has_non_finite(g):
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
        m, v = state.moments[name]
        K.adam_update(p.data, g, m, v, lr, cfg.adam_beta1, cfg.adam_beta2,
                      cfg.adam_eps, state.step)


def learning_rate_at(cfg: TrainConfig, step: int) -> float:
    """Constant schedule, with optional linear warmup over the first steps."""
    if cfg.lr_warmup_steps > 0 and step < cfg.lr_warmup_steps:
        return cfg.learning_rate * (step + 1) / cfg.lr_warmup_steps
    return cfg.learning_rate


# ---------------------------------------------------------------------------
# per-essay forward/backward


def _essay_ids_labels(enc):
    n = enc.n_tokens
    return list(enc.token_ids[:n]), list(enc.token_labels[:n])


def _labeled_count(enc) -> int:
    return sum(1 for t in enc.token_labels[:enc.n_tokens] if t != IGNORE)


def _sym_kl(clean_logits_data, n, c, adv_logits):
    """Symmetric KL between a frozen clean distribution and a live one."""
    lp = K.log_softmax_rows(clean_logits_data, n, c)
    p = array("d", [math.exp(v) for v in lp])
    p_t = Tensor((n, c), p)
    lp_t = Tensor((n, c), lp)
    lq = ops.log_softmax(adv_logits)
    q = ops.softmax(adv_logits)
    kl_pq = ops.sum_all(ops.mul(p_t, ops.sub(lp_t, lq)))
    kl_qp = ops.sum_all(ops.mul(q, ops.sub(lq, lp_t)))
    return ops.scale(ops.add(kl_pq, kl_qp), 1.0 / n)


def sift_perturbation(grad_data, scale: float):
    """Rescale a direction to norm exactly ``scale``; None for a zero vector."""
    norm = math.sqrt(K.sq_sum(grad_data))
    if norm == 0.0:
        return None
    return K.scale(grad_data, scale / norm)


def _sift_consistency(model, cfg, clean_logits, h0, stream, checkpoint_segment):
    """Perturb normalized embeddings adversarially; return weighted sym-KL.

    The probe pass runs on a throwaway tape with parameter gradients
    stashed: it exists only to estimate the worst-case direction, so its
    parameter gradients are discarded. The adversarial pass records on
    the caller's tape from a detached copy of the embedding output, so
    the consistency term regularizes the layers above the perturbation
    site.
    """
    n, c = clean_logits.shape
    clean_data = array("d", clean_logits.data)

    drng = random.Random(stream.next_seed())
    probe = Tensor(h0.shape,
                   array("d", [1e-3 * drng.gauss(0.0, 1.0) for _ in range(h0.size)]),
                   requires_grad=True)
    stash = [(p, p.grad) for _, p in model.named_parameters()]
    for p, _ in stash:
        p.grad = None
    try:
        with Tape(cfg.precision) as probe_tape:
            h_p = ops.add(h0.detach(), probe)
            hid = model.encode_from_embeddings(h_p, True, stream.child("sift-probe"),
                                               checkpoint_segment)
            logits_p = model.classification_logits(
                hid, True, stream.child("sift-probe-head"))
            c0 = _sym_kl(clean_data, n, c, logits_p)
            backward(probe_tape, c0)
        probe_tape.close()
    finally:
        for p, g in stash:
            p.grad = g
    if probe.grad is None:
        return None
    delta = sift_perturbation(probe.grad, cfg.sift_perturb_scale)
    if delta is None:
        return None

    # adversarial pass on the caller's tape
    h_adv = ops.add(h0.detach(), Tensor(h0.shape, delta))
    hid = model.encode_from_embeddings(h_adv, True, stream.child("sift-adv"),
                                       checkpoint_segment)
    logits_adv = model.classification_logits(hid, True, stream.child("sift-adv-head"))
    consistency = _sym_kl(clean_data, n, c, logits_adv)
    return ops.scale(consistency, cfg.sift_consistency_weight)


def batch_backward(model, batch, cfg: TrainConfig, step_stream: RngStream,
                   train: bool = True):
    """Forward+backward each essay, seeding with labeled/total weights.

    Gradients accumulate into the model parameters. Returns
    (weighted mean loss, max forward-stored activation bytes,
    max peak activation bytes) over the batch; loss is None if the batch
    has no labeled token.
    """
    seg = cfg.checkpoint_segment if cfg.checkpoint_activations else None
    total = sum(_labeled_count(e) for e in batch)
    if total == 0:
        return None, 0, 0
    loss_value = 0.0
    max_fwd = 0
    max_peak = 0
    for j, enc in enumerate(batch):
        n_lab = _labeled_count(enc)
        if n_lab == 0:
            continue
        ids, labels = _essay_ids_labels(enc)
        stream = step_stream.child(f"mb{j}")
        tape = Tape(cfg.precision)
        with tape:
            h0 = model.embed_ids(ids, train, stream)
            hid = model.encode_from_embeddings(h0, train, stream, seg)
            logits = model.classification_logits(hid, train, stream)
            loss = ops.token_ce(logits, labels)
            if cfg.sift_enabled and train:
                extra = _sift_consistency(model, cfg, logits, h0, stream, seg)
                if extra is not None:
                    loss = ops.add(loss, extra)
            max_fwd = max(max_fwd, tape.stats.current_bytes)
            w = n_lab / total
            backward(tape, loss, seed=w)
        max_peak = max(max_peak, tape.stats.peak_bytes)
        tape.close()
        loss_value += w * loss.item()
    return loss_value, max_fwd, max_peak


def checkpointed_backward(model, batch, segment_size: int, cfg: TrainConfig,
                          step_stream: RngStream):
    """batch_backward with activation checkpointing at the given segment size."""
    if segment_size < 1:
        raise ContractError("segment_size must be >= 1")
    sub = TrainConfig(**{**_cfg_dict(cfg), "checkpoint_activations": True,
                         "checkpoint_segment": segment_size})
    return batch_backward(model, batch, sub, step_stream)


def _cfg_dict(cfg: TrainConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(TrainConfig)}


# ---------------------------------------------------------------------------
# AWP


def save_params(model):
    return {name: array("d", p.data) for name, p in model.named_parameters()}


def restore_params(model, saved):
    for name, p in model.named_parameters():
        p.data[:] = saved[name]


def apply_awp_perturbation(model, gamma: float):
    """delta_w = gamma * g / (|g| + eps), added in place per tensor."""
    for _, p in model.named_parameters():
        g = p.grad
        if g is None:
            continue
        norm = math.sqrt(K.sq_sum(g))
        K.iadd_scaled(p.data, g, gamma / (norm + 1e-12))


def awp_step(model, batch, cfg: TrainConfig, step_stream: RngStream,
             base_loss: float, threshold: float | None):
    """Adversarial-weight pass when the batch loss is under the threshold.

    Expects plain gradients already accumulated (from batch_backward).
    Replaces them with adversarial ones computed at the perturbed
    weights; weights are restored bitwise. Returns True when triggered.
    """
    if not cfg.awp_enabled or threshold is None or base_loss >= threshold:
        return False
    saved = save_params(model)
    apply_awp_perturbation(model, cfg.awp_perturb_scale)
    model.zero_grad()
    batch_backward(model, batch, cfg, step_stream)
    restore_params(model, saved)
    return True


# ---------------------------------------------------------------------------
# training loops


def train_classifier(model, encoded, cfg: TrainConfig, log=None):
    """Token-classification training; returns one record per optimizer step.

    Each record: {step, loss, lr, awp, act_bytes}; ``log`` (if given)
    receives the formatted line. The loss logged is the clean
    (pre-perturbation) batch loss.
    """
    history = []
    run_stream = RngStream(cfg.seed)
    order_rng = random.Random(cfg.seed ^ 0x5EED)
    group = cfg.micro_batch_size * cfg.accumulation_steps
    threshold = cfg.awp_loss_threshold
    global_step = 0
    for epoch in range(cfg.epochs):
        idx = list(range(len(encoded)))
        order_rng.shuffle(idx)
        epoch_losses = []
        for b0 in range(0, len(idx), group):
            batch = [encoded[i] for i in idx[b0:b0 + group]]
            step_stream = run_stream.child(f"ep{epoch}.step{global_step}")
            model.zero_grad()
            loss, act_bytes, _ = batch_backward(model, batch, cfg, step_stream)
            if loss is None:
                continue
            triggered = awp_step(model, batch, cfg, step_stream, loss, threshold)
            lr = learning_rate_at(cfg, global_step)
            adam_step(model, _opt_state(model), cfg, lr)
            record = {"step": global_step, "loss": loss, "lr": lr,
                      "awp": 1 if triggered else 0, "act_bytes": act_bytes}
            history.append(record)
            epoch_losses.append(loss)
            if log is not None:
                log(format_log_line(record))
            global_step += 1
        if cfg.awp_enabled and cfg.awp_loss_threshold is None and epoch == 0 \
                and epoch_losses:
            threshold = statistics.median(epoch_losses)
    return history


def _opt_state(model):
    state = getattr(model, "_opt_state", None)
    if state is None:
        state = OptimizerState(model)
        model._opt_state = state
    return state


def format_log_line(record) -> str:
    return (f"step={record['step']} loss={record['loss']!r} "
            f"lr={record['lr']!r} awp={record['awp']} "
            f"act_bytes={record['act_bytes']}")


def corpus_token_loss(model, encoded) -> float:
    """Eval-mode token-weighted mean CE over a corpus (no recording)."""
    total = 0
    acc = 0.0
    with no_grad():
        for enc in encoded:
            n_lab = _labeled_count(enc)
            if n_lab == 0:
                continue
            ids, labels = _essay_ids_labels(enc)
            hid = model.forward_hidden(ids)
            logits = model.classification_logits(hid)
            loss = ops.token_ce(logits, labels)
            acc += n_lab * loss.item()
            total += n_lab
    if total == 0:
        raise ContractError("corpus has no labeled tokens")
    return acc / total


def train_pretrainer(gen, disc, encoded, cfg: TrainConfig, mask_rate: float,
                     mask_id: int, rtd_weight: float = 1.0, mode: str = "rtd",
                     log=None):
    """MLM ('mlm') or ELECTRA-style ('rtd') pretraining loop.

    In 'mlm' mode only the generator trains, on its masked-LM loss
    alone (``disc`` may be None). In 'rtd' mode the combined loss
    mlm + rtd_weight * rtd trains both models; the discriminator
    reaches the shared embedding only through its delta table.
    """
    from .model import mlm_pretrain_step, rtd_pretrain_step

    if mode not in ("mlm", "rtd"):
        raise ContractError(f"unknown pretraining mode: {mode!r}")
    history = []
    run_stream = RngStream(cfg.seed)
    order_rng = random.Random(cfg.seed ^ 0x5EED)
    group = cfg.micro_batch_size * cfg.accumulation_steps
    global_step = 0
    for epoch in range(cfg.epochs):
        idx = list(range(len(encoded)))
        order_rng.shuffle(idx)
        for b0 in range(0, len(idx), group):
            batch = [encoded[i] for i in idx[b0:b0 + group]]
            step_stream = run_stream.child(f"ep{epoch}.step{global_step}")
            gen.zero_grad()
            if disc is not None:
                disc.zero_grad()
            tape = Tape(cfg.precision)
            with tape:
                if mode == "mlm":
                    mlm_loss, stats = mlm_pretrain_step(
                        batch, gen, mask_rate, mask_id, step_stream, train=True)
                    rtd_loss = None
                    combined = mlm_loss
                else:
                    mlm_loss, rtd_loss, stats = rtd_pretrain_step(
                        batch, gen, disc, mask_rate, mask_id, step_stream,
                        train=True)
                    if rtd_loss is None:
                        combined = mlm_loss
                    elif mlm_loss is None:
                        combined = ops.scale(rtd_loss, rtd_weight)
                    else:
                        combined = ops.add(mlm_loss, ops.scale(rtd_loss, rtd_weight))
                act_bytes = tape.stats.current_bytes
                if combined is not None:
                    backward(tape, combined)
            tape.close()
            if combined is None:
                continue
            lr = learning_rate_at(cfg, global_step)
            adam_step(gen, _opt_state(gen), cfg, lr)
            if mode == "rtd":
                adam_step(disc, _opt_state(disc), cfg, lr)
            record = {"step": global_step,
                      "loss": combined.item(),
                      "mlm": None if mlm_loss is None else mlm_loss.item(),
                      "rtd": None if rtd_loss is None else rtd_loss.item(),
                      "lr": lr, "awp": 0, "act_bytes": act_bytes,
                      "n_masked": stats["n_masked"]}
            history.append(record)
            if log is not None:
                log(format_log_line(record))
            global_step += 1
    return history


# ---------------------------------------------------------------------------
# memory estimation


_GB = 10 ** 9


def estimate_memory(param_count: int, precision: str = "fp32",
                    optimizer: str = "adam") -> dict:
    """Bytes for weights/gradients/moments at a given storage width.

    'fp32' is the accounting mode (4-byte scalars): 4P + 4P + 8P = 16P.
    'native64' reports this artifact's actual 8-byte storage.
    """
    if precision == "fp32":
        unit = 4
    elif precision == "native64":
        unit = 8
    else:
        raise ContractError(f"unknown precision for memory estimate: {precision!r}")
    if param_count < 0:
        raise ContractError("param_count must be >= 0")
    weights = unit * param_count
    grads = unit * param_count
    moments = 2 * unit * param_count if optimizer == "adam" else 0
    return {"weights": weights, "gradients": grads, "moments": moments,
            "total": weights + grads + moments}
