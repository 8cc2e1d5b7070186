"""K-fold cross-training, bagging, a bag-of-words boosted-tree baseline,
and a stacked meta-model.

The stacking protocol requires a dedicated holdout: every fold member
has trained on all folds but its own, so any essay inside the fold map
has been seen by most members and is rejected as leakage. Feature
layout for the meta-model is member triples in fold order followed by
the BoW triple as the last block.
"""

import json
import math
import random
from array import array
from dataclasses import dataclass, field

from .corpus import NUM_CLASSES, tokenize
from .engine import ops
from .engine.core import RngStream, Tape, Tensor, backward
from .engine.kernels import kernels as K
from .errors import ContractError, ParseError
from .evaluate import PredictionRecord, predict_corpus

# ---------------------------------------------------------------------------
# folds


@dataclass
class FoldAssignment:
    num_folds: int
    fold_of: dict  # essay_id -> fold index
    seed: int

    def held_out(self, fold: int):
        return sorted(e for e, f in self.fold_of.items() if f == fold)

    def to_dict(self):
        return {"num_folds": self.num_folds, "seed": self.seed,
                "fold_of": dict(sorted(self.fold_of.items()))}

    @classmethod
    def from_dict(cls, d):
        return cls(num_folds=int(d["num_folds"]), seed=int(d["seed"]),
                   fold_of={k: int(v) for k, v in d["fold_of"].items()})


def assign_folds(corpus, num_folds: int = 5, seed: int = 0) -> FoldAssignment:
    """Deterministic shuffled round-robin split by essay."""
    if num_folds < 1:
        raise ContractError("num_folds must be >= 1")
    ids = [e.essay_id for e in corpus]
    if len(ids) < num_folds:
        raise ContractError(
            f"corpus has {len(ids)} essays, fewer than {num_folds} folds")
    if len(set(ids)) != len(ids):
        raise ContractError("duplicate essay_id in corpus")
    ids = sorted(ids)
    random.Random(seed).shuffle(ids)
    return FoldAssignment(num_folds, {e: i % num_folds for i, e in enumerate(ids)},
                          seed)


# ---------------------------------------------------------------------------
# bagging


def bag_records(per_member):
    """Mean of aligned member prediction lists (probability space)."""
    if not per_member:
        raise ContractError("need at least one member prediction list")
    first = per_member[0]
    for recs in per_member[1:]:
        if len(recs) != len(first):
            raise ContractError("member prediction lists are not aligned")
        for a, b in zip(first, recs):
            if a.element_id != b.element_id:
                raise ContractError(
                    f"member predictions misaligned at element {a.element_id}")
            if len(a.p) != len(b.p):
                raise ContractError("members disagree on class count")
    m = len(per_member)
    out = []
    for i, ref in enumerate(first):
        p = tuple(sum(recs[i].p[j] for recs in per_member) / m
                  for j in range(len(ref.p)))
        out.append(PredictionRecord(element_id=ref.element_id,
                                    essay_id=ref.essay_id, p=p, y=ref.y,
                                    uniform_fallback=ref.uniform_fallback))
    return out


def bag_predict(members, encoded_list, average_logits: bool = False):
    """Average the members' per-element probabilities over a corpus."""
    if not members:
        raise ContractError("need at least one member")
    per_member = [predict_corpus(m, encoded_list, average_logits)
                  for m in members]
    return bag_records(per_member)


# ---------------------------------------------------------------------------
# bag-of-words features


def bow_features(essay, vocab):
    """L1-normalized token counts per element, markers excluded.

    Counting runs over each element's own text span, which the marker
    insertion step leaves verbatim, so marker tokens never appear.
    """
    out = []
    for el in essay.elements:
        counts = {}
        for tok in tokenize(essay.text[el.start:el.end]):
            tid = vocab.id_of(tok)
            counts[tid] = counts.get(tid, 0) + 1
        vec = [0.0] * len(vocab)
        total = sum(counts.values())
        if total:
            for tid, c in counts.items():
                vec[tid] = c / total
        out.append(vec)
    return out


# ---------------------------------------------------------------------------
# gradient-boosted trees (exact splits, depth-limited)


@dataclass
class GbmConfig:
    num_rounds: int = 100
    learning_rate: float = 0.1
    max_depth: int = 3
    min_gain: float = 1e-12
    reg_lambda: float = 1e-3

    def __post_init__(self):
        if self.num_rounds < 1:
            raise ContractError("num_rounds must be >= 1")
        if self.max_depth < 1:
            raise ContractError("max_depth must be >= 1")
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be > 0")


@dataclass
class BoostedBowModel:
    feature_dim: int
    num_classes: int
    trees: list  # per round: list of one tree per class
    learning_rate: float
    max_depth: int
    num_rounds: int
    train_losses: list = field(default_factory=list)


def _tree_value(tree, x):
    while tree[0] == "split":
        _, f, thr, left, right = tree
        tree = left if x[f] <= thr else right
    return tree[1]


def _leaf(idx, g, h, lam):
    G = sum(g[i] for i in idx)
    H = sum(h[i] for i in idx)
    return ("leaf", G / (H + lam))


def _fit_tree(X, idx, g, h, depth, cfg: GbmConfig):
    if depth >= cfg.max_depth or len(idx) < 2:
        return _leaf(idx, g, h, cfg.reg_lambda)
    lam = cfg.reg_lambda
    G = sum(g[i] for i in idx)
    H = sum(h[i] for i in idx)
    base = G * G / (H + lam)
    best = None  # (gain, feature, threshold, left_idx, right_idx)
    n_feat = len(X[idx[0]])
    for f in range(n_feat):
        order = sorted(idx, key=lambda i: X[i][f])
        gl = hl = 0.0
        for pos in range(len(order) - 1):
            i = order[pos]
            gl += g[i]
            hl += h[i]
            xv, xn = X[i][f], X[order[pos + 1]][f]
            if xv == xn:
                continue
            gr, hr = G - gl, H - hl
            gain = gl * gl / (hl + lam) + gr * gr / (hr + lam) - base
            if gain > cfg.min_gain and (best is None or gain > best[0]):
                thr = (xv + xn) / 2.0
                left = order[:pos + 1]
                right = order[pos + 1:]
                best = (gain, f, thr, left, right)
    if best is None:
        return _leaf(idx, g, h, lam)
    _, f, thr, left, right = best
    return ("split", f, thr,
            _fit_tree(X, left, g, h, depth + 1, cfg),
            _fit_tree(X, right, g, h, depth + 1, cfg))


def _scale_tree(tree, factor):
    if tree[0] == "leaf":
        return ("leaf", tree[1] * factor)
    return ("split", tree[1], tree[2],
            _scale_tree(tree[3], factor), _scale_tree(tree[4], factor))


def _softmax_vec(z):
    mx = max(z)
    e = [math.exp(v - mx) for v in z]
    s = sum(e)
    return [v / s for v in e]


def _gbm_loss(F, labels):
    total = 0.0
    for i, lab in enumerate(labels):
        p = _softmax_vec(F[i])
        total -= math.log(max(p[lab], 1e-15))
    return total / len(labels)


def gbm_train(features, labels, cfg: GbmConfig | None = None,
              num_classes: int = NUM_CLASSES) -> BoostedBowModel:
    """Multiclass softmax boosting with Newton leaf values.

    Each round fits one regression tree per class to the gradient
    residuals y - p. A round that would raise the training loss is
    geometrically damped (and dropped entirely if damping cannot fix
    it), so the training loss is non-increasing by construction.
    """
    if cfg is None:
        cfg = GbmConfig()
    if not features:
        raise ContractError("empty training set")
    if len(features) != len(labels):
        raise ContractError("features and labels differ in length")
    if len(set(labels)) < 2:
        raise ContractError("training data has a single class; need at least two")
    for lab in labels:
        if not 0 <= lab < num_classes:
            raise ContractError(f"label {lab} outside [0, {num_classes})")
    n = len(features)
    F = [[0.0] * num_classes for _ in range(n)]
    idx = list(range(n))
    rounds = []
    losses = [_gbm_loss(F, labels)]
    for _ in range(cfg.num_rounds):
        probs = [_softmax_vec(F[i]) for i in range(n)]
        round_trees = []
        deltas = []  # per class, per sample raw tree output
        for c in range(num_classes):
            g = [(1.0 if labels[i] == c else 0.0) - probs[i][c] for i in range(n)]
            h = [max(probs[i][c] * (1.0 - probs[i][c]), 1e-12) for i in range(n)]
            tree = _fit_tree(features, idx, g, h, 0, cfg)
            round_trees.append(tree)
            deltas.append([_tree_value(tree, features[i]) for i in range(n)])

        prev = losses[-1]
        shrink = cfg.learning_rate
        applied = None
        for _attempt in range(30):
            trial = [[F[i][c] + shrink * deltas[c][i] for c in range(num_classes)]
                     for i in range(n)]
            loss = _gbm_loss(trial, labels)
            if loss <= prev + 1e-12:
                applied = (trial, loss, shrink)
                break
            shrink *= 0.5
        if applied is None:
            rounds.append([("leaf", 0.0)] * num_classes)
            losses.append(prev)
            continue
        F, loss, shrink = applied
        rounds.append([_scale_tree(t, shrink) for t in round_trees])
        losses.append(loss)
    return BoostedBowModel(feature_dim=len(features[0]), num_classes=num_classes,
                           trees=rounds, learning_rate=cfg.learning_rate,
                           max_depth=cfg.max_depth, num_rounds=cfg.num_rounds,
                           train_losses=losses)


def gbm_predict(model: BoostedBowModel, features):
    """Probability rows (softmax over summed tree outputs)."""
    out = []
    for x in features:
        if len(x) != model.feature_dim:
            raise ContractError(f"feature width {len(x)} != model width "
                                f"{model.feature_dim}")
        z = [0.0] * model.num_classes
        for round_trees in model.trees:
            for c, tree in enumerate(round_trees):
                z[c] += _tree_value(tree, x)
        out.append(_softmax_vec(z))
    return out


def save_bow(model: BoostedBowModel, path) -> None:
    doc = {"feature_dim": model.feature_dim, "num_classes": model.num_classes,
           "learning_rate": model.learning_rate, "max_depth": model.max_depth,
           "num_rounds": model.num_rounds, "trees": model.trees,
           "train_losses": model.train_losses}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def _tuple_tree(t):
    if t[0] == "leaf":
        return ("leaf", float(t[1]))
    return ("split", int(t[1]), float(t[2]), _tuple_tree(t[3]), _tuple_tree(t[4]))


def load_bow(path) -> BoostedBowModel:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        return BoostedBowModel(
            feature_dim=int(doc["feature_dim"]),
            num_classes=int(doc["num_classes"]),
            trees=[[_tuple_tree(t) for t in rnd] for rnd in doc["trees"]],
            learning_rate=float(doc["learning_rate"]),
            max_depth=int(doc["max_depth"]),
            num_rounds=int(doc["num_rounds"]),
            train_losses=[float(v) for v in doc.get("train_losses", [])])
    except (ValueError, KeyError, TypeError, IndexError) as e:
        raise ParseError(f"{path}: malformed boosted-tree file ({e})") from e


# ---------------------------------------------------------------------------
# stacking meta-model


class MetaModel:
    """One-hidden-layer network over concatenated member probability triples.

    Initialized so that its output reproduces plain member averaging:
    hidden units 0..2 compute the member means (BoW block excluded),
    the remaining units start live-but-unread (random first layer, zero
    second-layer columns), giving training spare capacity without
    moving the initial prediction.
    """

    HIDDEN = 16

    def __init__(self, num_members: int, num_classes: int = NUM_CLASSES,
                 seed: int = 0):
        if num_members < 1:
            raise ContractError("need at least one member block")
        self.num_members = num_members
        self.num_classes = num_classes
        self.in_dim = num_classes * (num_members + 1)
        rng = random.Random(seed)
        H, F, C = self.HIDDEN, self.in_dim, num_classes
        w1 = K.new_d(H * F)
        for u in range(C, H):
            for f in range(F):
                w1[u * F + f] = rng.gauss(0.0, 0.01)
        for j in range(C):
            for member in range(num_members):
                w1[j * F + member * C + j] = 1.0 / num_members
        w2 = K.new_d(C * H)
        for c in range(C):
            w2[c * H + c] = 1.0
        self.w1 = Tensor.param((H, F), w1, name="meta.w1")
        self.b1 = Tensor.param((H,), K.new_d(H), name="meta.b1")
        self.w2 = Tensor.param((C, H), w2, name="meta.w2")
        self.b2 = Tensor.param((C,), K.new_d(C), name="meta.b2")

    def named_parameters(self):
        return [("meta.w1", self.w1), ("meta.b1", self.b1),
                ("meta.w2", self.w2), ("meta.b2", self.b2)]

    def zero_grad(self):
        for _, t in self.named_parameters():
            t.zero_grad()

    def forward(self, x: Tensor) -> Tensor:
        h = ops.relu(ops.linear(x, self.w1, self.b1))
        return ops.linear(h, self.w2, self.b2)

    def predict_rows(self, rows):
        """Probability rows: raw outputs clipped from below and renormalized."""
        x = Tensor((len(rows), self.in_dim),
                   array("d", [v for r in rows for v in r]))
        z = self.forward(x)
        out = []
        C = self.num_classes
        for i in range(len(rows)):
            row = [max(z.data[i * C + j], 1e-15) for j in range(C)]
            s = sum(row)
            out.append([v / s for v in row])
        return out

    def block_l1(self):
        """L1 mass of first-layer weights per input block (members, then BoW)."""
        C, F = self.num_classes, self.in_dim
        blocks = [0.0] * (self.num_members + 1)
        for u in range(self.HIDDEN):
            for f in range(F):
                blocks[f // C] += abs(self.w1.data[u * F + f])
        return blocks


def stack_features(member_records, bow_rows):
    """Concatenate aligned member triples plus the BoW triple per element."""
    if not member_records:
        raise ContractError("need at least one member prediction list")
    n = len(member_records[0])
    for recs in member_records:
        if len(recs) != n:
            raise ContractError("member prediction lists are not aligned")
    if len(bow_rows) != n:
        raise ContractError("BoW predictions are not aligned with members")
    rows = []
    for i in range(n):
        eid = member_records[0][i].element_id
        row = []
        for recs in member_records:
            if recs[i].element_id != eid:
                raise ContractError(f"member predictions misaligned at {eid}")
            row.extend(recs[i].p)
        row.extend(bow_rows[i])
        rows.append(row)
    return rows


def check_no_leakage(element_essays, assignment: FoldAssignment,
                     num_members: int) -> None:
    """Reject stacking rows whose essay any feature-source member trained on.

    Member f trains on every fold except f, so with two or more members
    any essay inside the fold map was part of some member's training
    set; stacking data must come from outside the fold map entirely.
    """
    if num_members < 2:
        return
    for eid, essay_id in element_essays:
        if essay_id in assignment.fold_of:
            raise ContractError(
                f"stacking leakage: element {eid} of essay {essay_id} lies in "
                f"fold {assignment.fold_of[essay_id]}, which the other members "
                f"trained on")


def stack_train(member_records, bow_rows, labels, num_members: int,
                epochs: int = 1500, lr: float = 0.05, l1: float = 0.02,
                seed: int = 0,
                assignment: FoldAssignment | None = None) -> MetaModel:
    """Fit the meta-model on log loss over out-of-fold stacking rows.

    Full-batch gradient descent with an L1 proximal step on the weight
    matrices (biases exempt), not Adam: Adam's per-coordinate
    normalization lets any consistently-signed gradient, however tiny,
    grow its weight as fast as a load-bearing one. Under plain descent
    a weight survives soft-thresholding only while its sustaining
    gradient exceeds l1, so feature blocks with no real signal are
    pinned to exact zeros while useful blocks settle where the
    restoring gradient balances the threshold. ``labels`` are element
    ratings; ``assignment`` (when given) enables the leakage check
    against the fold map.
    """
    if assignment is not None:
        pairs = [(r.element_id, r.essay_id) for r in member_records[0]]
        check_no_leakage(pairs, assignment, num_members)
    rows = stack_features(member_records, bow_rows)
    if len(labels) != len(rows):
        raise ContractError("labels are not aligned with stacking rows")
    meta = MetaModel(num_members, seed=seed)
    x = Tensor((len(rows), meta.in_dim),
               array("d", [v for r in rows for v in r]))
    params = [p for _, p in meta.named_parameters()]
    for ep in range(epochs):
        meta.zero_grad()
        with Tape() as tape:
            z = meta.forward(x)
            loss = ops.simplex_nll(z, labels)
            backward(tape, loss)
        tape.close()
        # anneal both the step and the threshold to zero: a constant
        # threshold forms a limit cycle (fit, erode, refit) and the end
        # state depends on cycle phase; fading them converges it.
        fade = 1.0 - ep / epochs
        lr_t = lr * fade
        shrink = lr_t * l1
        sq = 0.0
        for p in params:
            if p.grad is not None:
                sq += K.sq_sum(p.grad)
        norm = math.sqrt(sq)
        clip = min(1.0, 1.0 / norm) if norm > 0 else 1.0
        for p in params:
            if p.grad is not None:
                K.iadd_scaled(p.data, p.grad, -lr_t * clip)
        for w in (meta.w1.data, meta.w2.data):
            for i in range(len(w)):
                v = w[i]
                if v > shrink:
                    w[i] = v - shrink
                elif v < -shrink:
                    w[i] = v + shrink
                else:
                    w[i] = 0.0
    return meta


def stack_predict(meta: MetaModel, member_records, bow_rows):
    rows = stack_features(member_records, bow_rows)
    probs = meta.predict_rows(rows)
    ref = member_records[0]
    return [PredictionRecord(element_id=ref[i].element_id,
                             essay_id=ref[i].essay_id, p=tuple(probs[i]),
                             y=ref[i].y)
            for i in range(len(rows))]


def save_meta(meta: MetaModel, path) -> None:
    doc = {"num_members": meta.num_members, "num_classes": meta.num_classes,
           "w1": list(meta.w1.data), "b1": list(meta.b1.data),
           "w2": list(meta.w2.data), "b2": list(meta.b2.data)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_meta(path) -> MetaModel:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        meta = MetaModel(int(doc["num_members"]), int(doc["num_classes"]))
        for key, t in (("w1", meta.w1), ("b1", meta.b1),
                       ("w2", meta.w2), ("b2", meta.b2)):
            vals = doc[key]
            if len(vals) != len(t.data):
                raise ParseError(f"{path}: {key} has {len(vals)} values, "
                                 f"expected {len(t.data)}")
            t.data[:] = array("d", [float(v) for v in vals])
        return meta
    except (ValueError, KeyError, TypeError) as e:
        if isinstance(e, ParseError):
            raise
        raise ParseError(f"{path}: malformed meta-model file ({e})") from e


# ---------------------------------------------------------------------------
# bundle manifest


@dataclass
class EnsembleBundle:
    member_paths: list
    assignment: FoldAssignment
    seed: int
    bow_path: str | None = None
    meta_path: str | None = None

    def __post_init__(self):
        if not self.member_paths:
            raise ContractError("ensemble needs at least one member")


def save_manifest(bundle: EnsembleBundle, path) -> None:
    doc = {"members": list(bundle.member_paths),
           "assignment": bundle.assignment.to_dict(),
           "seed": bundle.seed, "bow": bundle.bow_path,
           "meta": bundle.meta_path}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_manifest(path) -> EnsembleBundle:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        return EnsembleBundle(
            member_paths=[str(p) for p in doc["members"]],
            assignment=FoldAssignment.from_dict(doc["assignment"]),
            seed=int(doc["seed"]),
            bow_path=doc.get("bow"),
            meta_path=doc.get("meta"))
    except (ValueError, KeyError, TypeError) as e:
        raise ParseError(f"{path}: malformed ensemble manifest ({e})") from e


def fold_train(corpus, encoded_by_id, assignment: FoldAssignment, model_cfg,
               train_cfg, out_dir, log=None):
    """Train one member per fold on everything outside its fold.

    Returns an EnsembleBundle whose member checkpoints live in out_dir.
    Member f's seed offsets the base seed by f so members differ.
    """
    import os

    from .model import Model, ModelConfig, save_checkpoint
    from .training import TrainConfig, train_classifier

    paths = []
    for f in range(assignment.num_folds):
        train_ids = [e.essay_id for e in corpus
                     if assignment.fold_of[e.essay_id] != f]
        train_enc = [encoded_by_id[i] for i in train_ids]
        mc = ModelConfig.from_dict({**model_cfg.to_dict(),
                                    "seed": model_cfg.seed + f})
        tc_fields = {k: getattr(train_cfg, k)
                     for k in TrainConfig.__dataclass_fields__}
        tc = TrainConfig(**{**tc_fields, "seed": train_cfg.seed + f})
        member = Model(mc)
        train_classifier(member, train_enc, tc,
                         log=(lambda s, _f=f: log(f"fold={_f} {s}")) if log else None)
        path = os.path.join(out_dir, f"member{f}.ckpt")
        save_checkpoint(member, path)
        paths.append(path)
    return EnsembleBundle(member_paths=paths, assignment=assignment,
                          seed=train_cfg.seed)
