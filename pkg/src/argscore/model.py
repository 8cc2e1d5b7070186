"""Disentangled-attention encoder, enhanced mask decoder, pretraining pair.

Attention scores decompose into content-to-content, content-to-position,
and position-to-content terms; position-to-position is omitted. Each
layer owns a relative-position embedding table P of 2k rows (row = clipped
relative distance + k) shared across heads, with per-layer position
projections. Absolute positions enter only through the enhanced mask
decoder, which re-attends with position-enriched queries before the
vocabulary projection.

The pretraining pair shares the word embedding through a delta
decomposition: the discriminator sees stop_gradient(E) + delta, so the
replaced-token-detection loss can never move the generator's embedding.
"""

import json
import math
import random
import sys
from array import array
from dataclasses import dataclass, field

from .corpus import IGNORE
from .engine import ops
from .engine.core import RngStream, Tensor, no_grad
from .engine.kernels import kernels as K
from .errors import CheckpointError, ContractError


@dataclass
class ModelConfig:
    vocab_size: int
    num_layers: int = 2
    hidden_size: int = 32
    num_heads: int = 2
    relative_window: int = 8
    max_len: int = 512
    num_classes: int = 3
    dropout_rates: tuple = (0.1, 0.2, 0.3, 0.4, 0.5)
    hidden_dropout: float = 0.1
    ffn_size: int | None = None
    attention_scale: float | None = None
    generator_layers: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.hidden_size % self.num_heads:
            raise ContractError(
                f"hidden_size {self.hidden_size} not divisible by "
                f"num_heads {self.num_heads}"
            )
        if self.relative_window < 1:
            raise ContractError("relative_window must be >= 1")
        if self.num_classes != 3:
            raise ContractError("exactly three effectiveness classes are supported")
        if not self.dropout_rates:
            raise ContractError("dropout_rates must be non-empty")
        for r in self.dropout_rates:
            if not 0.0 <= r < 1.0:
                raise ContractError(f"dropout rate {r} outside [0, 1)")
        self.dropout_rates = tuple(self.dropout_rates)

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    @property
    def ffn_hidden(self) -> int:
        return self.ffn_size if self.ffn_size else 2 * self.hidden_size

    @property
    def gen_layers(self) -> int:
        if self.generator_layers is not None:
            return self.generator_layers
        return max(1, self.num_layers // 2)

    @property
    def scale(self) -> float:
        if self.attention_scale is not None:
            return self.attention_scale
        return 1.0 / math.sqrt(3.0 * self.head_dim)

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "num_layers": self.num_layers,
            "hidden_size": self.hidden_size,
            "num_heads": self.num_heads,
            "relative_window": self.relative_window,
            "max_len": self.max_len,
            "num_classes": self.num_classes,
            "dropout_rates": list(self.dropout_rates),
            "hidden_dropout": self.hidden_dropout,
            "ffn_size": self.ffn_size,
            "attention_scale": self.attention_scale,
            "generator_layers": self.generator_layers,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["dropout_rates"] = tuple(d.get("dropout_rates", (0.1, 0.2, 0.3, 0.4, 0.5)))
        return cls(**d)


def relative_bucket(i: int, j: int, k: int) -> int:
    """Row index into P for query position i and key position j."""
    if k < 1:
        raise ContractError("relative window k must be >= 1")
    delta = i - j
    if delta < -k:
        delta = -k
    elif delta > k - 1:
        delta = k - 1
    return delta + k


_REL_IDX_CACHE: dict = {}


def _rel_index(n: int, k: int):
    """(c2p, p2c) index tables, flat n*n. c2p[i,j]=bucket(j,i), p2c[i,j]=bucket(i,j)."""
    key = (n, k)
    hit = _REL_IDX_CACHE.get(key)
    if hit is not None:
        return hit
    c2p = K.new_q(n * n)
    p2c = K.new_q(n * n)
    for i in range(n):
        row = i * n
        for j in range(n):
            c2p[row + j] = relative_bucket(j, i, k)
            p2c[row + j] = relative_bucket(i, j, k)
    _REL_IDX_CACHE[key] = (c2p, p2c)
    return c2p, p2c


# ---------------------------------------------------------------------------
# parameters


class LayerParams:
    """One encoder layer: disentangled attention + feed-forward, post-norm."""

    def __init__(self, cfg: ModelConfig, rng: random.Random, prefix: str):
        d, f, k = cfg.hidden_size, cfg.ffn_hidden, cfg.relative_window

        def p(shape, name, zero=False):
            n = 1
            for s in shape:
                n *= s
            vals = [0.0] * n if zero else [rng.gauss(0.0, 0.02) for _ in range(n)]
            return Tensor.param(shape, vals, name=f"{prefix}.{name}")

        self.w_qc = p((d, d), "w_qc")
        self.w_kc = p((d, d), "w_kc")
        self.w_vc = p((d, d), "w_vc")
        self.w_qr = p((d, d), "w_qr")
        self.w_kr = p((d, d), "w_kr")
        self.p_table = p((2 * k, d), "p_table")
        self.w_o = p((d, d), "w_o")
        self.b_o = p((d,), "b_o", zero=True)
        self.ln1_g = Tensor.param((d,), [1.0] * d, name=f"{prefix}.ln1_g")
        self.ln1_b = p((d,), "ln1_b", zero=True)
        self.ffn_w1 = p((f, d), "ffn_w1")
        self.ffn_b1 = p((f,), "ffn_b1", zero=True)
        self.ffn_w2 = p((d, f), "ffn_w2")
        self.ffn_b2 = p((d,), "ffn_b2", zero=True)
        self.ln2_g = Tensor.param((d,), [1.0] * d, name=f"{prefix}.ln2_g")
        self.ln2_b = p((d,), "ln2_b", zero=True)

    def named(self):
        for name in ("w_qc", "w_kc", "w_vc", "w_qr", "w_kr", "p_table", "w_o",
                     "b_o", "ln1_g", "ln1_b", "ffn_w1", "ffn_b1", "ffn_w2",
                     "ffn_b2", "ln2_g", "ln2_b"):
            yield getattr(self, name)


class EmdParams:
    """Enhanced-mask-decoder attention sublayer (no feed-forward)."""

    def __init__(self, cfg: ModelConfig, rng: random.Random, prefix: str = "emd"):
        d, k = cfg.hidden_size, cfg.relative_window

        def p(shape, name, zero=False):
            n = 1
            for s in shape:
                n *= s
            vals = [0.0] * n if zero else [rng.gauss(0.0, 0.02) for _ in range(n)]
            return Tensor.param(shape, vals, name=f"{prefix}.{name}")

        self.w_qc = p((d, d), "w_qc")
        self.w_kc = p((d, d), "w_kc")
        self.w_vc = p((d, d), "w_vc")
        self.w_qr = p((d, d), "w_qr")
        self.w_kr = p((d, d), "w_kr")
        self.p_table = p((2 * k, d), "p_table")
        self.w_o = p((d, d), "w_o")
        self.b_o = p((d,), "b_o", zero=True)
        self.ln_g = Tensor.param((d,), [1.0] * d, name=f"{prefix}.ln_g")
        self.ln_b = p((d,), "ln_b", zero=True)

    def named(self):
        for name in ("w_qc", "w_kc", "w_vc", "w_qr", "w_kr", "p_table", "w_o",
                     "b_o", "ln_g", "ln_b"):
            yield getattr(self, name)


class Model:
    """Encoder plus every head; GDES wiring via shared_embed."""

    def __init__(self, cfg: ModelConfig, shared_embed: Tensor | None = None):
        self.config = cfg
        rng = random.Random(cfg.seed)
        V, d = cfg.vocab_size, cfg.hidden_size

        def p(shape, name, zero=False):
            n = 1
            for s in shape:
                n *= s
            vals = [0.0] * n if zero else [rng.gauss(0.0, 0.02) for _ in range(n)]
            return Tensor.param(shape, vals, name=name)

        self.owns_embed = shared_embed is None
        if self.owns_embed:
            self.embed_table = p((V, d), "embed.E")
            self.embed_delta = None
        else:
            if shared_embed.shape != (V, d):
                raise ContractError(
                    f"shared embedding shape {shared_embed.shape} does not "
                    f"match (V={V}, d={d})"
                )
            self.embed_table = shared_embed
            self.embed_delta = p((V, d), "embed.delta", zero=True)
        self.embed_ln_g = Tensor.param((d,), [1.0] * d, name="embed.ln_g")
        self.embed_ln_b = p((d,), "embed.ln_b", zero=True)
        self.layers = [LayerParams(cfg, rng, f"layer{i}") for i in range(cfg.num_layers)]
        self.a_abs = p((cfg.max_len, d), "a_abs")
        self.emd = EmdParams(cfg, rng)
        self.mlm_w = p((V, d), "head.mlm_w")
        self.mlm_b = p((V,), "head.mlm_b", zero=True)
        self.cls_w = p((cfg.num_classes, d), "head.cls_w")
        self.cls_b = p((cfg.num_classes,), "head.cls_b", zero=True)
        self.rtd_w = p((1, d), "head.rtd_w")
        self.rtd_b = p((1,), "head.rtd_b", zero=True)

    def named_parameters(self):
        """Owned parameters only: a shared base embedding is not listed."""
        out = []
        if self.owns_embed:
            out.append(self.embed_table)
        else:
            out.append(self.embed_delta)
        out.extend([self.embed_ln_g, self.embed_ln_b])
        for lp in self.layers:
            out.extend(lp.named())
        out.append(self.a_abs)
        out.extend(self.emd.named())
        out.extend([self.mlm_w, self.mlm_b, self.cls_w, self.cls_b,
                    self.rtd_w, self.rtd_b])
        return [(t.name, t) for t in out]

    def zero_grad(self):
        for _, t in self.named_parameters():
            t.zero_grad()

    # -- forward pieces ----------------------------------------------------

    def _embedding(self) -> Tensor:
        if self.owns_embed:
            return self.embed_table
        return ops.add(self.embed_table.detach(), self.embed_delta)

    def effective_embedding_data(self):
        """Raw combined embedding buffer (for saving a GDES discriminator)."""
        if self.owns_embed:
            return self.embed_table.data
        return K.add(self.embed_table.data, self.embed_delta.data)

    def _attention(self, q_src: Tensor, kv_src: Tensor, lp, train: bool,
                   stream: RngStream, collect=None) -> Tensor:
        cfg = self.config
        n = kv_src.shape[0]
        dh = cfg.head_dim
        qc = ops.matmul_nt(q_src, lp.w_qc)
        kc = ops.matmul_nt(kv_src, lp.w_kc)
        vc = ops.matmul_nt(kv_src, lp.w_vc)
        kr = ops.matmul_nt(lp.p_table, lp.w_kr)
        qr = ops.matmul_nt(lp.p_table, lp.w_qr)
        idx_c2p, idx_p2c = _rel_index(n, cfg.relative_window)
        heads = []
        for h in range(cfg.num_heads):
            c0, c1 = h * dh, (h + 1) * dh
            qh = ops.slice_cols(qc, c0, c1)
            kh = ops.slice_cols(kc, c0, c1)
            vh = ops.slice_cols(vc, c0, c1)
            krh = ops.slice_cols(kr, c0, c1)
            qrh = ops.slice_cols(qr, c0, c1)
            c2c = ops.matmul_nt(qh, kh)
            c2p = ops.rel_gather_rows(ops.matmul_nt(qh, krh), idx_c2p)
            p2c = ops.rel_gather_cols(ops.matmul_nt(kh, qrh), idx_p2c)
            scores = ops.scale(ops.add(ops.add(c2c, c2p), p2c), cfg.scale)
            probs = ops.softmax(scores)
            if collect is not None:
                collect.append(array("d", probs.data))
            heads.append(ops.matmul(probs, vh))
        ctx = ops.concat_cols(heads)
        out = ops.linear(ctx, lp.w_o, lp.b_o)
        return ops.dropout(out, cfg.hidden_dropout, stream, train)

    def _layer(self, h: Tensor, lp: LayerParams, train: bool, stream: RngStream,
               collect=None) -> Tensor:
        cfg = self.config
        attn = self._attention(h, h, lp, train, stream, collect)
        h = ops.layer_norm(ops.add(h, attn), lp.ln1_g, lp.ln1_b)
        ff = ops.linear(ops.gelu(ops.linear(h, lp.ffn_w1, lp.ffn_b1)),
                        lp.ffn_w2, lp.ffn_b2)
        ff = ops.dropout(ff, cfg.hidden_dropout, stream, train)
        return ops.layer_norm(ops.add(h, ff), lp.ln2_g, lp.ln2_b)

    def embed_ids(self, ids, train: bool = False, stream: RngStream | None = None) -> Tensor:
        """Embedding lookup + layer norm; the SiFT perturbation site."""
        if not ids:
            raise ContractError("cannot embed an empty id sequence")
        n = len(ids)
        if n > self.config.max_len:
            raise ContractError(f"sequence length {n} exceeds max_len {self.config.max_len}")
        for t in ids:
            if not 0 <= t < self.config.vocab_size:
                raise ContractError(f"token id {t} outside vocabulary of "
                                    f"size {self.config.vocab_size}")
        emb = ops.embed(self._embedding(), ids)
        return ops.layer_norm(emb, self.embed_ln_g, self.embed_ln_b)

    def encode_from_embeddings(self, h: Tensor, train: bool = False,
                               stream: RngStream | None = None,
                               checkpoint_segment: int | None = None,
                               collect_attn=None) -> Tensor:
        from .engine.core import checkpoint as ckpt

        if stream is None:
            stream = RngStream(0)
        if collect_attn is not None or not checkpoint_segment:
            for lp in self.layers:
                layer_probs = [] if collect_attn is not None else None
                h = self._layer(h, lp, train, stream, layer_probs)
                if collect_attn is not None:
                    collect_attn.append(layer_probs)
            return h
        seg = checkpoint_segment
        for s0 in range(0, len(self.layers), seg):
            seg_layers = self.layers[s0:s0 + seg]

            def seg_fn(st, x, _layers=seg_layers):
                for lp in _layers:
                    x = self._layer(x, lp, train, st)
                return x

            h = ckpt(seg_fn, [h], stream)
        return h

    def forward_hidden(self, ids, train: bool = False,
                       stream: RngStream | None = None,
                       checkpoint_segment: int | None = None,
                       collect_attn=None) -> Tensor:
        if stream is None:
            stream = RngStream(0)
        h = self.embed_ids(ids, train, stream)
        return self.encode_from_embeddings(h, train, stream,
                                           checkpoint_segment, collect_attn)

    def emd_mlm_logits(self, hidden: Tensor, train: bool = False,
                       stream: RngStream | None = None) -> Tensor:
        """Position-enriched queries over content states, then vocab head."""
        if stream is None:
            stream = RngStream(0)
        n = hidden.shape[0]
        apos = ops.embed(self.a_abs, list(range(n)))
        hq = ops.add(hidden, apos)
        attn = self._attention(hq, hidden, self.emd, train, stream)
        x = ops.layer_norm(ops.add(hq, attn), self.emd.ln_g, self.emd.ln_b)
        return ops.linear(x, self.mlm_w, self.mlm_b)

    def classification_logits(self, hidden: Tensor, train: bool = False,
                              stream: RngStream | None = None) -> Tensor:
        """Mean over dropout rates of the shared linear head.

        Eval mode (or all-zero rates) short-circuits to one head
        application, bitwise identical to the single-sample path.
        """
        rates = self.config.dropout_rates
        if not train or all(r == 0.0 for r in rates):
            return ops.linear(hidden, self.cls_w, self.cls_b)
        acc = None
        for r in rates:
            y = ops.linear(ops.dropout(hidden, r, stream, True), self.cls_w, self.cls_b)
            acc = y if acc is None else ops.add(acc, y)
        return ops.scale(acc, 1.0 / len(rates))

    def rtd_logits(self, hidden: Tensor) -> Tensor:
        return ops.linear(hidden, self.rtd_w, self.rtd_b)


# ---------------------------------------------------------------------------
# ELECTRA-style pretraining step


def make_pretrain_pair(cfg: ModelConfig):
    """(generator, discriminator) with delta-shared word embedding.

    The generator keeps the configured depth ratio; the discriminator uses
    the full config. Both see the same vocabulary.
    """
    gen_cfg = ModelConfig.from_dict({**cfg.to_dict(), "num_layers": cfg.gen_layers,
                                     "seed": cfg.seed})
    disc_cfg = ModelConfig.from_dict({**cfg.to_dict(), "seed": cfg.seed + 1})
    gen = Model(gen_cfg)
    disc = Model(disc_cfg, shared_embed=gen.embed_table)
    return gen, disc


def _sample_row(logits, row, cols, rng: random.Random) -> int:
    """Categorical sample from one softmax row, computed from raw logits."""
    base = row * cols
    mx = logits[base]
    for j in range(1, cols):
        v = logits[base + j]
        if v > mx:
            mx = v
    total = 0.0
    weights = []
    for j in range(cols):
        e = math.exp(logits[base + j] - mx)
        weights.append(e)
        total += e
    r = rng.random() * total
    acc = 0.0
    for j in range(cols):
        acc += weights[j]
        if r < acc:
            return j
    return cols - 1


def mlm_pretrain_step(batch, gen: Model, mask_rate: float, mask_id: int,
                      stream: RngStream, train: bool = True):
    """Masked-LM-only forward over a batch (no discriminator).

    Same masking protocol as the replaced-token step; returns
    (mlm_loss or None, stats).
    """
    if not 0.0 < mask_rate < 1.0:
        raise ContractError(f"mask_rate must be inside (0, 1), got {mask_rate}")
    parts = []
    n_masked_total = 0
    n_tokens_total = 0
    for enc in batch:
        ids = list(enc.token_ids[:enc.n_tokens])
        n = len(ids)
        if n == 0:
            continue
        n_tokens_total += n
        rng = random.Random(stream.next_seed())
        masked_pos = [t for t in range(n) if rng.random() < mask_rate]
        if not masked_pos:
            continue
        gen_ids = list(ids)
        labels = [IGNORE] * n
        for t in masked_pos:
            gen_ids[t] = mask_id
            labels[t] = ids[t]
        ghid = gen.forward_hidden(gen_ids, train, stream)
        glogits = gen.emd_mlm_logits(ghid, train, stream)
        parts.append((ops.token_ce(glogits, labels), len(masked_pos)))
        n_masked_total += len(masked_pos)
    total = sum(w for _, w in parts)
    loss = None
    for part, w in parts:
        piece = ops.scale(part, w / total)
        loss = piece if loss is None else ops.add(loss, piece)
    stats = {"n_masked": n_masked_total, "n_replaced": 0,
             "n_tokens": n_tokens_total}
    return loss, stats


def rtd_pretrain_step(batch, gen: Model, disc: Model, mask_rate: float,
                      mask_id: int, stream: RngStream, train: bool = True):
    """One masked-LM + replaced-token-detection forward over a batch.

    Returns (mlm_loss, rtd_loss, stats); each loss is a tape tensor (the
    token-weighted mean over the batch) or None when it had no
    contributing position. Gradient flow into the generator embedding
    from rtd_loss is structurally impossible: the discriminator embeds
    through stop_gradient(E) + delta.
    """
    if not 0.0 < mask_rate < 1.0:
        raise ContractError(f"mask_rate must be inside (0, 1), got {mask_rate}")
    if gen.config.num_layers > disc.config.num_layers:
        raise ContractError("generator must not be deeper than the discriminator")

    mlm_parts = []  # (loss tensor, n_masked)
    rtd_parts = []  # (loss tensor, n_tokens)
    n_masked_total = 0
    n_replaced = 0
    n_tokens_total = 0
    for enc in batch:
        ids = list(enc.token_ids[:enc.n_tokens])
        n = len(ids)
        if n == 0:
            continue
        rng = random.Random(stream.next_seed())
        masked_pos = [t for t in range(n) if rng.random() < mask_rate]

        sampled = list(ids)
        if masked_pos:
            gen_ids = list(ids)
            labels = [IGNORE] * n
            for t in masked_pos:
                gen_ids[t] = mask_id
                labels[t] = ids[t]
            ghid = gen.forward_hidden(gen_ids, train, stream)
            glogits = gen.emd_mlm_logits(ghid, train, stream)
            mlm_loss = ops.token_ce(glogits, labels)
            mlm_parts.append((mlm_loss, len(masked_pos)))
            n_masked_total += len(masked_pos)
            srng = random.Random(stream.next_seed())
            V = gen.config.vocab_size
            for t in masked_pos:
                sampled[t] = _sample_row(glogits.data, t, V, srng)
                if sampled[t] != ids[t]:
                    n_replaced += 1

        targets = array("d", [1.0 if sampled[t] != ids[t] else 0.0 for t in range(n)])
        dhid = disc.forward_hidden(sampled, train, stream)
        dlogits = disc.rtd_logits(dhid)
        rtd_parts.append((ops.bce_logits(dlogits, targets), n))
        n_tokens_total += n

    def combine(parts):
        total = sum(w for _, w in parts)
        if total == 0:
            return None
        acc = None
        for loss, w in parts:
            piece = ops.scale(loss, w / total)
            acc = piece if acc is None else ops.add(acc, piece)
        return acc

    stats = {
        "n_masked": n_masked_total,
        "n_replaced": n_replaced,
        "n_tokens": n_tokens_total,
    }
    return combine(mlm_parts), combine(rtd_parts), stats


def rtd_detection_accuracy(batch, gen: Model, disc: Model, mask_rate: float,
                           mask_id: int, stream: RngStream) -> float:
    """Held-out replaced-vs-original accuracy of the discriminator."""
    correct = 0
    total = 0
    with no_grad():
        for enc in batch:
            ids = list(enc.token_ids[:enc.n_tokens])
            n = len(ids)
            if n == 0:
                continue
            rng = random.Random(stream.next_seed())
            masked_pos = [t for t in range(n) if rng.random() < mask_rate]
            sampled = list(ids)
            if masked_pos:
                gen_ids = list(ids)
                for t in masked_pos:
                    gen_ids[t] = mask_id
                glogits = gen.emd_mlm_logits(gen.forward_hidden(gen_ids))
                srng = random.Random(stream.next_seed())
                for t in masked_pos:
                    sampled[t] = _sample_row(glogits.data, t, gen.config.vocab_size, srng)
            dlogits = disc.rtd_logits(disc.forward_hidden(sampled))
            for t in range(n):
                pred = 1.0 if dlogits.data[t] > 0.0 else 0.0
                truth = 1.0 if sampled[t] != ids[t] else 0.0
                if pred == truth:
                    correct += 1
                total += 1
    return correct / total if total else 0.0


# ---------------------------------------------------------------------------
# checkpoint io


_CKPT_MAGIC = b"argscore-ckpt v1\n"


def _le_bytes(arr) -> bytes:
    if sys.byteorder == "little":
        return arr.tobytes()
    sw = array("d", arr)
    sw.byteswap()
    return sw.tobytes()


def _from_le(raw: bytes):
    arr = array("d")
    arr.frombytes(raw)
    if sys.byteorder == "big":
        arr.byteswap()
    return arr


def save_checkpoint(model: Model, path) -> None:
    """Write config + named tensors; read-back is bit-exact.

    A GDES discriminator is saved standalone: its effective embedding
    (base + delta) is materialized under the base name and the delta is
    dropped, so the loaded model needs no partner.
    """
    entries = []
    blobs = []
    offset = 0
    named = model.named_parameters()
    if not model.owns_embed:
        named = [("embed.E", None)] + [(n, t) for n, t in named if n != "embed.delta"]
    for name, t in named:
        data = model.effective_embedding_data() if t is None else t.data
        shape = (model.config.vocab_size, model.config.hidden_size) if t is None else t.shape
        entries.append({"name": name, "shape": list(shape), "offset": offset,
                        "elems": len(data)})
        blobs.append(_le_bytes(data))
        offset += len(data)
    header = json.dumps({"config": model.config.to_dict(), "tensors": entries},
                        sort_keys=True)
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(header.encode("utf-8") + b"\n")
        for b in blobs:
            fh.write(b)


def load_checkpoint(path, expect_config: ModelConfig | None = None) -> Model:
    """Rebuild a model from a checkpoint file.

    ``expect_config`` (when given) is compared field-by-field against
    the stored config; any difference is an error naming both values.
    """
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic != _CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
            cfg = ModelConfig.from_dict(header["config"])
            entries = header["tensors"]
        except (ValueError, KeyError, TypeError, ContractError) as e:
            raise CheckpointError(f"{path}: malformed header ({e})") from e
        raw = fh.read()
    if expect_config is not None:
        got, want = cfg.to_dict(), expect_config.to_dict()
        for key in sorted(want):
            if got.get(key) != want[key]:
                raise CheckpointError(
                    f"{path}: config mismatch on {key}: checkpoint has "
                    f"{got.get(key)!r}, expected {want[key]!r}"
                )
    model = Model(cfg)
    by_name = dict(model.named_parameters())
    seen = set()
    for e in entries:
        name, elems, off = e["name"], e["elems"], e["offset"]
        t = by_name.get(name)
        if t is None:
            raise CheckpointError(f"{path}: unknown tensor {name!r}")
        if tuple(e["shape"]) != t.shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {e['shape']}, "
                f"model expects {list(t.shape)}"
            )
        lo, hi = 8 * off, 8 * (off + elems)
        if hi > len(raw):
            raise CheckpointError(f"{path}: truncated blob for tensor {name!r}")
        vals = _from_le(raw[lo:hi])
        if len(vals) != len(t.data):
            raise CheckpointError(f"{path}: size mismatch for tensor {name!r}")
        t.data[:] = vals
        seen.add(name)
    missing = set(by_name) - seen
    if missing:
        raise CheckpointError(f"{path}: tensors missing from file: {sorted(missing)}")
    return model
