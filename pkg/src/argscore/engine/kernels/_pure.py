"""Pure-Python kernel backend.

Every function here has a compiled twin in ``_fast.pyx`` with identical
loop structure and accumulation order, so the two backends produce
bit-identical results. Keep the loops boring: any reordering here must be
mirrored in the Cython source.

Buffers are flat ``array('d')`` in row-major order; integer index buffers
are ``array('q')``.
"""

import math
from array import array

BACKEND = "pure"


def new_d(n):
    return array("d", bytes(8 * n))


def new_q(n):
    return array("q", bytes(8 * n))


# ---------------------------------------------------------------------------
# matmul family


def matmul(a, b, m, k, n):
    """C = A(m x k) @ B(k x n)."""
    out = new_d(m * n)
    for i in range(m):
        ik = i * k
        row = i * n
        for p in range(k):
            a_ip = a[ik + p]
            pn = p * n
            for j in range(n):
                out[row + j] += a_ip * b[pn + j]
    return out


def matmul_nt(a, b, m, k, n):
    """C = A(m x k) @ B^T where B is stored (n x k)."""
    out = new_d(m * n)
    for i in range(m):
        ik = i * k
        row = i * n
        for j in range(n):
            jk = j * k
            acc = 0.0
            for p in range(k):
                acc += a[ik + p] * b[jk + p]
            out[row + j] = acc
    return out


def matmul_tn(a, b, k, m, n):
    """C = A^T @ B where A is stored (k x m), B is (k x n); C is (m x n)."""
    out = new_d(m * n)
    for p in range(k):
        pm = p * m
        pn = p * n
        for i in range(m):
            a_pi = a[pm + i]
            row = i * n
            for j in range(n):
                out[row + j] += a_pi * b[pn + j]
    return out


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    out = new_d(len(a))
    for i in range(len(a)):
        out[i] = a[i] + b[i]
    return out


def sub(a, b):
    out = new_d(len(a))
    for i in range(len(a)):
        out[i] = a[i] - b[i]
    return out


def mul(a, b):
    out = new_d(len(a))
    for i in range(len(a)):
        out[i] = a[i] * b[i]
    return out


def scale(a, s):
    out = new_d(len(a))
    for i in range(len(a)):
        out[i] = a[i] * s
    return out


def add_scaled(a, b, s):
    """a + s * b."""
    out = new_d(len(a))
    for i in range(len(a)):
        out[i] = a[i] + s * b[i]
    return out


def iadd(a, b):
    """In-place a += b."""
    for i in range(len(a)):
        a[i] += b[i]


def iadd_scaled(a, b, s):
    """In-place a += s * b."""
    for i in range(len(a)):
        a[i] += s * b[i]


def add_row_vec(x, v, rows, d):
    out = new_d(rows * d)
    for i in range(rows):
        row = i * d
        for j in range(d):
            out[row + j] = x[row + j] + v[j]
    return out


def col_sums(x, rows, d):
    out = new_d(d)
    for i in range(rows):
        row = i * d
        for j in range(d):
            out[j] += x[row + j]
    return out


def sum_all(a):
    acc = 0.0
    for i in range(len(a)):
        acc += a[i]
    return acc


def dot(a, b):
    acc = 0.0
    for i in range(len(a)):
        acc += a[i] * b[i]
    return acc


def sq_sum(a):
    acc = 0.0
    for i in range(len(a)):
        acc += a[i] * a[i]
    return acc


def has_non_finite(a):
    for i in range(len(a)):
        v = a[i]
        if v != v or v == math.inf or v == -math.inf:
            return True
    return False


# ---------------------------------------------------------------------------
# activations

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu_fwd(x):
    out = new_d(len(x))
    for i in range(len(x)):
        v = x[i]
        t = math.tanh(_GELU_C * (v + _GELU_A * v * v * v))
        out[i] = 0.5 * v * (1.0 + t)
    return out


def gelu_bwd(x, dy):
    out = new_d(len(x))
    for i in range(len(x)):
        v = x[i]
        t = math.tanh(_GELU_C * (v + _GELU_A * v * v * v))
        inner = _GELU_C * (1.0 + 3.0 * _GELU_A * v * v)
        out[i] = dy[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * inner)
    return out


def relu_fwd(x):
    out = new_d(len(x))
    for i in range(len(x)):
        v = x[i]
        out[i] = v if v > 0.0 else 0.0
    return out


def relu_bwd(x, dy):
    out = new_d(len(x))
    for i in range(len(x)):
        if x[i] > 0.0:
            out[i] = dy[i]
    return out


# ---------------------------------------------------------------------------
# softmax / log-softmax, row-wise


def softmax_rows(x, rows, cols):
    out = new_d(rows * cols)
    for i in range(rows):
        row = i * cols
        mx = x[row]
        for j in range(1, cols):
            v = x[row + j]
            if v > mx:
                mx = v
        s = 0.0
        for j in range(cols):
            e = math.exp(x[row + j] - mx)
            out[row + j] = e
            s += e
        for j in range(cols):
            out[row + j] = out[row + j] / s
    return out


def softmax_rows_bwd(y, dy, rows, cols):
    out = new_d(rows * cols)
    for i in range(rows):
        row = i * cols
        acc = 0.0
        for j in range(cols):
            acc += y[row + j] * dy[row + j]
        for j in range(cols):
            out[row + j] = y[row + j] * (dy[row + j] - acc)
    return out


def log_softmax_rows(x, rows, cols):
    out = new_d(rows * cols)
    for i in range(rows):
        row = i * cols
        mx = x[row]
        for j in range(1, cols):
            v = x[row + j]
            if v > mx:
                mx = v
        s = 0.0
        for j in range(cols):
            s += math.exp(x[row + j] - mx)
        lse = mx + math.log(s)
        for j in range(cols):
            out[row + j] = x[row + j] - lse
    return out


def log_softmax_rows_bwd(y, dy, rows, cols):
    """y is the forward log-softmax output: dx = dy - exp(y) * rowsum(dy)."""
    out = new_d(rows * cols)
    for i in range(rows):
        row = i * cols
        acc = 0.0
        for j in range(cols):
            acc += dy[row + j]
        for j in range(cols):
            out[row + j] = dy[row + j] - math.exp(y[row + j]) * acc
    return out


# ---------------------------------------------------------------------------
# layer norm


def layer_norm_fwd(x, gain, bias, rows, d, eps):
    out = new_d(rows * d)
    means = new_d(rows)
    rstds = new_d(rows)
    for i in range(rows):
        row = i * d
        s = 0.0
        for j in range(d):
            s += x[row + j]
        mean = s / d
        var = 0.0
        for j in range(d):
            dv = x[row + j] - mean
            var += dv * dv
        var = var / d
        rstd = 1.0 / math.sqrt(var + eps)
        means[i] = mean
        rstds[i] = rstd
        for j in range(d):
            out[row + j] = (x[row + j] - mean) * rstd * gain[j] + bias[j]
    return out, means, rstds


def layer_norm_bwd(x, gain, means, rstds, dy, rows, d):
    dx = new_d(rows * d)
    dgain = new_d(d)
    dbias = new_d(d)
    for i in range(rows):
        row = i * d
        mean = means[i]
        rstd = rstds[i]
        s1 = 0.0
        s2 = 0.0
        for j in range(d):
            xhat = (x[row + j] - mean) * rstd
            g = dy[row + j] * gain[j]
            s1 += g
            s2 += g * xhat
        s1 /= d
        s2 /= d
        for j in range(d):
            xhat = (x[row + j] - mean) * rstd
            g = dy[row + j] * gain[j]
            dx[row + j] = (g - s1 - xhat * s2) * rstd
            dgain[j] += dy[row + j] * xhat
            dbias[j] += dy[row + j]
    return dx, dgain, dbias


# ---------------------------------------------------------------------------
# gathers / scatters


def embed_gather(table, d, ids):
    n = len(ids)
    out = new_d(n * d)
    for t in range(n):
        src = ids[t] * d
        dst = t * d
        for j in range(d):
            out[dst + j] = table[src + j]
    return out


def embed_scatter_add(dtable, d, ids, dout):
    for t in range(len(ids)):
        dst = ids[t] * d
        src = t * d
        for j in range(d):
            dtable[dst + j] += dout[src + j]


def copy_cols(x, rows, d, c0, c1):
    w = c1 - c0
    out = new_d(rows * w)
    for i in range(rows):
        src = i * d + c0
        dst = i * w
        for j in range(w):
            out[dst + j] = x[src + j]
    return out


def add_into_cols(dx, rows, d, c0, c1, dpart):
    w = c1 - c0
    for i in range(rows):
        dst = i * d + c0
        src = i * w
        for j in range(w):
            dx[dst + j] += dpart[src + j]


def rel_gather(src, idx, n, w):
    """out[i, j] = src[i, idx[i, j]] with src (n x w), idx (n x n)."""
    out = new_d(n * n)
    for i in range(n):
        srow = i * w
        irow = i * n
        for j in range(n):
            out[irow + j] = src[srow + idx[irow + j]]
    return out


def rel_scatter_add(dsrc, idx, dout, n, w):
    for i in range(n):
        srow = i * w
        irow = i * n
        for j in range(n):
            dsrc[srow + idx[irow + j]] += dout[irow + j]


def rel_gather_t(src, idx, n, w):
    """out[i, j] = src[j, idx[i, j]] with src (n x w), idx (n x n)."""
    out = new_d(n * n)
    for i in range(n):
        irow = i * n
        for j in range(n):
            out[irow + j] = src[j * w + idx[irow + j]]
    return out


def rel_scatter_add_t(dsrc, idx, dout, n, w):
    for i in range(n):
        irow = i * n
        for j in range(n):
            dsrc[j * w + idx[irow + j]] += dout[irow + j]


# ---------------------------------------------------------------------------
# losses


def ce_rows_fwd(logits, labels, rows, cols):
    """Mean cross-entropy over rows whose label is >= 0.

    Returns (loss, probs, count); probs holds row softmax for every row.
    """
    probs = new_d(rows * cols)
    total = 0.0
    count = 0
    for i in range(rows):
        row = i * cols
        mx = logits[row]
        for j in range(1, cols):
            v = logits[row + j]
            if v > mx:
                mx = v
        s = 0.0
        for j in range(cols):
            e = math.exp(logits[row + j] - mx)
            probs[row + j] = e
            s += e
        for j in range(cols):
            probs[row + j] = probs[row + j] / s
        lab = labels[i]
        if lab >= 0:
            total += math.log(s) - (logits[row + lab] - mx)
            count += 1
    loss = total / count if count else 0.0
    return loss, probs, count


def ce_rows_bwd(probs, labels, rows, cols, count, dloss):
    dlogits = new_d(rows * cols)
    if count == 0:
        return dlogits
    g = dloss / count
    for i in range(rows):
        lab = labels[i]
        if lab < 0:
            continue
        row = i * cols
        for j in range(cols):
            dlogits[row + j] = probs[row + j] * g
        dlogits[row + lab] -= g
    return dlogits


def bce_logits_fwd(logits, targets, n):
    """Mean binary cross-entropy with logits; returns (loss, sigmoids)."""
    sig = new_d(n)
    total = 0.0
    for i in range(n):
        z = logits[i]
        t = targets[i]
        if z >= 0.0:
            total += z - t * z + math.log1p(math.exp(-z))
            sig[i] = 1.0 / (1.0 + math.exp(-z))
        else:
            total += -t * z + math.log1p(math.exp(z))
            ez = math.exp(z)
            sig[i] = ez / (1.0 + ez)
    return total / n, sig


def bce_logits_bwd(sig, targets, n, dloss):
    out = new_d(n)
    g = dloss / n
    for i in range(n):
        out[i] = (sig[i] - targets[i]) * g
    return out


# ---------------------------------------------------------------------------
# optimizer


def adam_update(p, g, m, v, lr, b1, b2, eps, t):
    """In-place Adam step with bias correction; t is the 1-based step count."""
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i in range(len(p)):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / c1) / (math.sqrt(vi / c2) + eps)


# ---------------------------------------------------------------------------
# binary16 storage emulation


def f64_to_f16_bits(x):
    """Round a float64 to the nearest IEEE binary16 (ties to even).

    Conversion works on the raw float64 bits so no double rounding through
    float32 can occur. Out-of-range finite values become +/-inf.
    """
    import struct

    bits = struct.unpack("<Q", struct.pack("<d", x))[0]
    sign = (bits >> 48) & 0x8000
    exp = (bits >> 52) & 0x7FF
    frac = bits & 0xFFFFFFFFFFFFF
    if exp == 0x7FF:
        if frac:
            return sign | 0x7E00  # NaN
        return sign | 0x7C00  # inf
    # unbiased exponent; binary16 bias is 15, float64 bias is 1023
    e = exp - 1023
    if e >= 16:
        return sign | 0x7C00  # overflow to inf
    if e >= -14:
        # normal half: keep 10 mantissa bits of the 52
        half = ((e + 15) << 10) | (frac >> 42)
        rest = frac & 0x3FFFFFFFFFF  # dropped 42 bits
        halfway = 0x20000000000
        if rest > halfway or (rest == halfway and (half & 1)):
            half += 1  # may carry into the exponent; inf is then correct
        return sign | half
    if e >= -25:
        # subnormal half: implicit leading 1 joins the mantissa
        mant = (1 << 52) | frac
        shift = 42 + (-14 - e)
        half = mant >> shift
        rest = mant & ((1 << shift) - 1)
        halfway = 1 << (shift - 1)
        if rest > halfway or (rest == halfway and (half & 1)):
            half += 1
        return sign | half
    return sign  # underflow to signed zero


def f16_bits_to_f64(h):
    sign = -1.0 if h & 0x8000 else 1.0
    exp = (h >> 10) & 0x1F
    frac = h & 0x3FF
    if exp == 0x1F:
        if frac:
            return math.nan
        return sign * math.inf
    if exp == 0:
        return sign * frac * 2.0 ** -24
    return sign * (1024 + frac) * 2.0 ** (exp - 25)


def quant16_inplace(x):
    for i in range(len(x)):
        x[i] = f16_bits_to_f64(f64_to_f16_bits(x[i]))
