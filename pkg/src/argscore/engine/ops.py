"""Differentiable ops over Tensors.

Each op computes its forward result with the kernel backend, then (if a
tape is active and an input requires grad) records a node whose closure
computes input gradients from the output gradient. Backward closures
only hold what they need; anything that can be regenerated (dropout
masks) is regenerated from a seed instead of stored.
"""

import math
import random
from array import array

from ..errors import ContractError, ShapeError
from .core import Precision, Tensor, active_tape
from .kernels import kernels as K


def _record(out, inputs, bwd, aux_elems=0):
    tape = active_tape()
    if tape is None:
        out.requires_grad = False
        return out
    out.requires_grad = any(i.requires_grad for i in inputs)
    if out.requires_grad:
        tape.record(out, inputs, bwd, aux_elems)
    elif tape.precision == Precision.HALF16 and not out.is_param:
        K.quant16_inplace(out.data)
    return out


def _rows_cols(t):
    if len(t.shape) < 2:
        raise ShapeError(f"need a 2-D tensor, got shape {t.shape}")
    cols = t.shape[-1]
    return t.size // cols, cols


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(m, k) @ (k, n)."""
    m, ka = _rows_cols(a)
    kb, n = _rows_cols(b)
    if ka != kb:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = Tensor((m, n), K.matmul(a.data, b.data, m, ka, n))

    def bwd(dout):
        da = K.matmul_nt(dout, b.data, m, n, ka) if a.requires_grad else None
        db = K.matmul_tn(a.data, dout, m, ka, n) if b.requires_grad else None
        return da, db

    return _record(out, [a, b], bwd)


def matmul_nt(a: Tensor, b: Tensor) -> Tensor:
    """(m, k) @ (n, k)^T; the second operand is stored row-major (n, k)."""
    m, ka = _rows_cols(a)
    n, kb = _rows_cols(b)
    if ka != kb:
        raise ShapeError(f"matmul_nt inner dims differ: {a.shape} x {b.shape}")
    out = Tensor((m, n), K.matmul_nt(a.data, b.data, m, ka, n))

    def bwd(dout):
        da = K.matmul(dout, b.data, m, n, ka) if a.requires_grad else None
        db = K.matmul_tn(dout, a.data, m, n, ka) if b.requires_grad else None
        return da, db

    return _record(out, [a, b], bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w^T + b with w stored (out_features, in_features)."""
    y = matmul_nt(x, w)
    if b is not None:
        y = add_bias(y, b)
    return y


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b)
    out = Tensor(a.shape, K.add(a.data, b.data))

    def bwd(dout):
        da = array("d", dout) if a.requires_grad else None
        db = array("d", dout) if b.requires_grad else None
        return da, db

    return _record(out, [a, b], bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b)
    out = Tensor(a.shape, K.sub(a.data, b.data))

    def bwd(dout):
        da = array("d", dout) if a.requires_grad else None
        db = K.scale(dout, -1.0) if b.requires_grad else None
        return da, db

    return _record(out, [a, b], bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b)
    out = Tensor(a.shape, K.mul(a.data, b.data))

    def bwd(dout):
        da = K.mul(dout, b.data) if a.requires_grad else None
        db = K.mul(dout, a.data) if b.requires_grad else None
        return da, db

    return _record(out, [a, b], bwd)


def scale(x: Tensor, s: float) -> Tensor:
    out = Tensor(x.shape, K.scale(x.data, s))

    def bwd(dout):
        return (K.scale(dout, s),)

    return _record(out, [x], bwd)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    rows, d = _rows_cols(x)
    if b.size != d:
        raise ShapeError(f"bias size {b.size} does not match row width {d}")
    out = Tensor(x.shape, K.add_row_vec(x.data, b.data, rows, d))

    def bwd(dout):
        dx = array("d", dout) if x.requires_grad else None
        db = K.col_sums(dout, rows, d) if b.requires_grad else None
        return dx, db

    return _record(out, [x, b], bwd)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor((1,), array("d", [K.sum_all(x.data)]))
    n = x.size

    def bwd(dout):
        g = dout[0]
        return (array("d", [g] * n),)

    return _record(out, [x], bwd)


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out = Tensor((1,), array("d", [K.sum_all(x.data) / n]))

    def bwd(dout):
        g = dout[0] / n
        return (array("d", [g] * n),)

    return _record(out, [x], bwd)


# ---------------------------------------------------------------------------
# activations


def gelu(x: Tensor) -> Tensor:
    out = Tensor(x.shape, K.gelu_fwd(x.data))

    def bwd(dout):
        return (K.gelu_bwd(x.data, dout),)

    return _record(out, [x], bwd)


def relu(x: Tensor) -> Tensor:
    out = Tensor(x.shape, K.relu_fwd(x.data))

    def bwd(dout):
        return (K.relu_bwd(x.data, dout),)

    return _record(out, [x], bwd)


def softmax(x: Tensor) -> Tensor:
    rows, cols = _rows_cols(x)
    out = Tensor(x.shape, K.softmax_rows(x.data, rows, cols))

    def bwd(dout):
        return (K.softmax_rows_bwd(out.data, dout, rows, cols),)

    return _record(out, [x], bwd)


def log_softmax(x: Tensor) -> Tensor:
    rows, cols = _rows_cols(x)
    out = Tensor(x.shape, K.log_softmax_rows(x.data, rows, cols))

    def bwd(dout):
        return (K.log_softmax_rows_bwd(out.data, dout, rows, cols),)

    return _record(out, [x], bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-7) -> Tensor:
    rows, d = _rows_cols(x)
    if gain.size != d or bias.size != d:
        raise ShapeError("layer_norm gain/bias must match the row width")
    y, means, rstds = K.layer_norm_fwd(x.data, gain.data, bias.data, rows, d, eps)
    out = Tensor(x.shape, y)

    def bwd(dout):
        dx, dgain, dbias = K.layer_norm_bwd(x.data, gain.data, means, rstds, dout, rows, d)
        return (
            dx if x.requires_grad else None,
            dgain if gain.requires_grad else None,
            dbias if bias.requires_grad else None,
        )

    return _record(out, [x, gain, bias], bwd, aux_elems=2 * rows)


# ---------------------------------------------------------------------------
# dropout


def _dropout_scales(n, rate, seed):
    rng = random.Random(seed)
    inv = 1.0 / (1.0 - rate)
    return [inv if rng.random() >= rate else 0.0 for _ in range(n)]


def dropout(x: Tensor, rate: float, stream, train: bool = True) -> Tensor:
    """Inverted dropout; the mask is regenerated from a seed in backward.

    Identity (the same tensor, bit for bit) when not training or rate 0.
    """
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    seed = stream.next_seed()
    n = x.size
    scales = _dropout_scales(n, rate, seed)
    data = K.new_d(n)
    xd = x.data
    for i in range(n):
        data[i] = xd[i] * scales[i]
    out = Tensor(x.shape, data)

    def bwd(dout):
        sc = _dropout_scales(n, rate, seed)
        dx = K.new_d(n)
        for i in range(n):
            dx[i] = dout[i] * sc[i]
        return (dx,)

    return _record(out, [x], bwd)


# ---------------------------------------------------------------------------
# gathers


def _as_q(ids):
    if isinstance(ids, array) and ids.typecode == "q":
        return ids
    return array("q", ids)


def embed(table: Tensor, ids) -> Tensor:
    """Row gather: out[t] = table[ids[t]]."""
    rows, d = _rows_cols(table)
    idv = _as_q(ids)
    for t in idv:
        if not 0 <= t < rows:
            raise ContractError(f"id {t} out of range for table with {rows} rows")
    out = Tensor((len(idv), d), K.embed_gather(table.data, d, idv))

    def bwd(dout):
        if table.requires_grad:
            K.embed_scatter_add(table.ensure_grad(), d, idv, dout)
        return (None,)

    return _record(out, [table], bwd)


def slice_cols(x: Tensor, c0: int, c1: int) -> Tensor:
    rows, d = _rows_cols(x)
    if not 0 <= c0 < c1 <= d:
        raise ShapeError(f"column slice [{c0}:{c1}] out of range for width {d}")
    out = Tensor((rows, c1 - c0), K.copy_cols(x.data, rows, d, c0, c1))

    def bwd(dout):
        dx = K.new_d(rows * d)
        K.add_into_cols(dx, rows, d, c0, c1, dout)
        return (dx,)

    return _record(out, [x], bwd)


def concat_cols(parts) -> Tensor:
    if not parts:
        raise ContractError("concat_cols needs at least one tensor")
    rows = parts[0].shape[0]
    widths = []
    for p in parts:
        r, w = _rows_cols(p)
        if r != rows:
            raise ShapeError("concat_cols tensors must share the row count")
        widths.append(w)
    total = sum(widths)
    data = K.new_d(rows * total)
    c0 = 0
    for p, w in zip(parts, widths):
        K.add_into_cols(data, rows, total, c0, c0 + w, p.data)
        c0 += w
    out = Tensor((rows, total), data)

    def bwd(dout):
        grads = []
        c = 0
        for p, w in zip(parts, widths):
            grads.append(K.copy_cols(dout, rows, total, c, c + w) if p.requires_grad else None)
            c += w
        return grads

    return _record(out, list(parts), bwd)


def rel_gather_rows(src: Tensor, idx) -> Tensor:
    """out[i, j] = src[i, idx[i, j]]; idx is flat (n*n), src is (n, w)."""
    n, w = _rows_cols(src)
    idv = _as_q(idx)
    if len(idv) != n * n:
        raise ShapeError(f"index table has {len(idv)} entries, expected {n * n}")
    out = Tensor((n, n), K.rel_gather(src.data, idv, n, w))

    def bwd(dout):
        dsrc = K.new_d(n * w)
        K.rel_scatter_add(dsrc, idv, dout, n, w)
        return (dsrc,)

    return _record(out, [src], bwd)


def rel_gather_cols(src: Tensor, idx) -> Tensor:
    """out[i, j] = src[j, idx[i, j]]; idx is flat (n*n), src is (n, w)."""
    n, w = _rows_cols(src)
    idv = _as_q(idx)
    if len(idv) != n * n:
        raise ShapeError(f"index table has {len(idv)} entries, expected {n * n}")
    out = Tensor((n, n), K.rel_gather_t(src.data, idv, n, w))

    def bwd(dout):
        dsrc = K.new_d(n * w)
        K.rel_scatter_add_t(dsrc, idv, dout, n, w)
        return (dsrc,)

    return _record(out, [src], bwd)


# ---------------------------------------------------------------------------
# losses


def token_ce(logits: Tensor, labels) -> Tensor | None:
    """Mean cross-entropy over rows with label >= 0; None if no such row."""
    rows, cols = _rows_cols(logits)
    labv = _as_q(labels)
    if len(labv) != rows:
        raise ShapeError(f"{len(labv)} labels for {rows} rows")
    for lb in labv:
        if lb >= cols:
            raise ContractError(f"label {lb} out of range for {cols} classes")
    loss, probs, count = K.ce_rows_fwd(logits.data, labv, rows, cols)
    if count == 0:
        return None
    out = Tensor((1,), array("d", [loss]))

    def bwd(dout):
        return (K.ce_rows_bwd(probs, labv, rows, cols, count, dout[0]),)

    return _record(out, [logits], bwd, aux_elems=rows * cols)


def bce_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy with logits; targets are 0/1 floats."""
    n = logits.size
    tg = targets if isinstance(targets, array) else array("d", targets)
    if len(tg) != n:
        raise ShapeError(f"{len(tg)} targets for {n} logits")
    loss, sig = K.bce_logits_fwd(logits.data, tg, n)
    out = Tensor((1,), array("d", [loss]))

    def bwd(dout):
        return (K.bce_logits_bwd(sig, tg, n, dout[0]),)

    return _record(out, [logits], bwd, aux_elems=n)


def simplex_nll(z: Tensor, labels, floor: float = 1e-6) -> Tensor:
    """NLL of p = clip(z, floor) / sum(clip(z, floor)), mean over rows.

    Lets a head emit near-probabilities directly; the floor keeps the
    normalization defined for any real input. The gradient is exact
    away from the floor. A clipped non-label coordinate gets zero (its
    true derivative), but a clipped label coordinate gets the rescue
    gradient -1/floor passed through: the exact zero there would strand
    the row below the floor permanently. Finite-difference checks must
    therefore sample label coordinates away from the floor.
    """
    rows, cols = _rows_cols(z)
    labv = _as_q(labels)
    if len(labv) != rows:
        raise ShapeError(f"{len(labv)} labels for {rows} rows")
    zd = z.data
    total = 0.0
    sums = array("d", bytes(8 * rows))
    for i in range(rows):
        lab = labv[i]
        if not 0 <= lab < cols:
            raise ContractError(f"label {lab} out of range for {cols} classes")
        row = i * cols
        s = 0.0
        for j in range(cols):
            c = zd[row + j]
            if c < floor:
                c = floor
            s += c
        sums[i] = s
        c_lab = zd[row + lab]
        if c_lab < floor:
            c_lab = floor
        total += math.log(s) - math.log(c_lab)
    out = Tensor((1,), array("d", [total / rows]))

    def bwd(dout):
        g = dout[0] / rows
        dz = K.new_d(rows * cols)
        for i in range(rows):
            lab = labv[i]
            row = i * cols
            s = sums[i]
            for j in range(cols):
                if zd[row + j] >= floor:
                    dz[row + j] = g / s
            c_lab = zd[row + lab]
            if c_lab < floor:
                c_lab = floor
            dz[row + lab] -= g / c_lab
        return (dz,)

    return _record(out, [z], bwd, aux_elems=rows)
