# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernel backend.

Mirror of ``_pure.py``: same functions, same loop structure, same
accumulation order, so results are bit-identical to the pure backend
(the extension is built with -ffp-contract=off to keep it that way).
"""

from cpython cimport array
import array as _array

from libc.math cimport exp, log, log1p, tanh, sqrt, isfinite, INFINITY, NAN, pow
from libc.string cimport memcpy

BACKEND = "fast"

cdef array.array _D_TEMPLATE = _array.array("d", [])
cdef array.array _Q_TEMPLATE = _array.array("q", [])


cdef array.array _alloc_d(Py_ssize_t n):
    return array.clone(_D_TEMPLATE, n, True)


def new_d(Py_ssize_t n):
    return _alloc_d(n)


def new_q(Py_ssize_t n):
    return array.clone(_Q_TEMPLATE, n, True)


# ---------------------------------------------------------------------------
# matmul family


def matmul(double[::1] a, double[::1] b, Py_ssize_t m, Py_ssize_t k, Py_ssize_t n):
    cdef array.array out_arr = _alloc_d(m * n)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, p, j, ik, row, pn
    cdef double a_ip
    for i in range(m):
        ik = i * k
        row = i * n
        for p in range(k):
            a_ip = a[ik + p]
            pn = p * n
            for j in range(n):
                out[row + j] += a_ip * b[pn + j]
    return out_arr


def matmul_nt(double[::1] a, double[::1] b, Py_ssize_t m, Py_ssize_t k, Py_ssize_t n):
    cdef array.array out_arr = _alloc_d(m * n)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j, p, ik, row, jk
    cdef double acc
    for i in range(m):
        ik = i * k
        row = i * n
        for j in range(n):
            jk = j * k
            acc = 0.0
            for p in range(k):
                acc += a[ik + p] * b[jk + p]
            out[row + j] = acc
    return out_arr


def matmul_tn(double[::1] a, double[::1] b, Py_ssize_t k, Py_ssize_t m, Py_ssize_t n):
    cdef array.array out_arr = _alloc_d(m * n)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t p, i, j, pm, pn, row
    cdef double a_pi
    for p in range(k):
        pm = p * m
        pn = p * n
        for i in range(m):
            a_pi = a[pm + i]
            row = i * n
            for j in range(n):
                out[row + j] += a_pi * b[pn + j]
    return out_arr


# ---------------------------------------------------------------------------
# elementwise


def add(double[::1] a, double[::1] b):
    cdef Py_ssize_t n = a.shape[0]
    cdef array.array out_arr = _alloc_d(n)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = a[i] + b[i]
    return out_arr


def sub(double[::1] a, double[::1] b):
    cdef Py_ssize_t n = a.shape[0]
    cdef array.array out_arr = _alloc_d(n)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = a[i] - b[i]
    return out_arr


def mul(double[::1] a, double[::1] b):
    cdef Py_ssize_t n = a.shape[0]
    cdef array.array out_arr = _alloc_d(n)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = a[i] * b[i]
    return out_arr


def scale(double[::1] a, double s):
    cdef Py_ssize_t n = a.shape[0]
    cdef array.array out_arr = _alloc_d(n)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = a[i] * s
    return out_arr


def add_scaled(double[::1] a, double[::1] b, double s):
    cdef Py_ssize_t n = a.shape[0]
    cdef array.array out_arr = _alloc_d(n)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = a[i] + s * b[i]
    return out_arr


def iadd(double[::1] a, double[::1] b):
    cdef Py_ssize_t i
    for i in range(a.shape[0]):
        a[i] += b[i]


def iadd_scaled(double[::1] a, double[::1] b, double s):
    cdef Py_ssize_t i
    for i in range(a.shape[0]):
        a[i] += s * b[i]


def add_row_vec(double[::1] x, double[::1] v, Py_ssize_t rows, Py_ssize_t d):
    cdef array.array out_arr = _alloc_d(rows * d)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j, row
    for i in range(rows):
        row = i * d
        for j in range(d):
            out[row + j] = x[row + j] + v[j]
    return out_arr


def col_sums(double[::1] x, Py_ssize_t rows, Py_ssize_t d):
    cdef array.array out_arr = _alloc_d(d)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j, row
    for i in range(rows):
        row = i * d
        for j in range(d):
            out[j] += x[row + j]
    return out_arr


def sum_all(double[::1] a):
    cdef double acc = 0.0
    cdef Py_ssize_t i
    for i in range(a.shape[0]):
        acc += a[i]
    return acc


def dot(double[::1] a, double[::1] b):
    cdef double acc = 0.0
    cdef Py_ssize_t i
    for i in range(a.shape[0]):
        acc += a[i] * b[i]
    return acc


def sq_sum(double[::1] a):
    cdef double acc = 0.0
    cdef Py_ssize_t i
    for i in range(a.shape[0]):
        acc += a[i] * a[i]
    return acc


def has_non_finite(double[::1] a):
    cdef Py_ssize_t i
    for i in range(a.shape[0]):
        if not isfinite(a[i]):
            return True
    return False


# ---------------------------------------------------------------------------
# activations

cdef double _GELU_C = 0.7978845608028654
cdef double _GELU_A = 0.044715


def gelu_fwd(double[::1] x):
    cdef Py_ssize_t n = x.shape[0]
    cdef array.array out_arr = _alloc_d(n)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    cdef double v, t
    for i in range(n):
        v = x[i]
        t = tanh(_GELU_C * (v + _GELU_A * v * v * v))
        out[i] = 0.5 * v * (1.0 + t)
    return out_arr


def gelu_bwd(double[::1] x, double[::1] dy):
    cdef Py_ssize_t n = x.shape[0]
    cdef array.array out_arr = _alloc_d(n)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    cdef double v, t, inner
    for i in range(n):
        v = x[i]
        t = tanh(_GELU_C * (v + _GELU_A * v * v * v))
        inner = _GELU_C * (1.0 + 3.0 * _GELU_A * v * v)
        out[i] = dy[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * inner)
    return out_arr


def relu_fwd(double[::1] x):
    cdef Py_ssize_t n = x.shape[0]
    cdef array.array out_arr = _alloc_d(n)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    cdef double v
    for i in range(n):
        v = x[i]
        out[i] = v if v > 0.0 else 0.0
    return out_arr


def relu_bwd(double[::1] x, double[::1] dy):
    cdef Py_ssize_t n = x.shape[0]
    cdef array.array out_arr = _alloc_d(n)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    for i in range(n):
        if x[i] > 0.0:
            out[i] = dy[i]
    return out_arr


# ---------------------------------------------------------------------------
# softmax / log-softmax


def softmax_rows(double[::1] x, Py_ssize_t rows, Py_ssize_t cols):
    cdef array.array out_arr = _alloc_d(rows * cols)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j, row
    cdef double mx, s, e, v
    for i in range(rows):
        row = i * cols
        mx = x[row]
        for j in range(1, cols):
            v = x[row + j]
            if v > mx:
                mx = v
        s = 0.0
        for j in range(cols):
            e = exp(x[row + j] - mx)
            out[row + j] = e
            s += e
        for j in range(cols):
            out[row + j] = out[row + j] / s
    return out_arr


def softmax_rows_bwd(double[::1] y, double[::1] dy, Py_ssize_t rows, Py_ssize_t cols):
    cdef array.array out_arr = _alloc_d(rows * cols)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j, row
    cdef double acc
    for i in range(rows):
        row = i * cols
        acc = 0.0
        for j in range(cols):
            acc += y[row + j] * dy[row + j]
        for j in range(cols):
            out[row + j] = y[row + j] * (dy[row + j] - acc)
    return out_arr


def log_softmax_rows(double[::1] x, Py_ssize_t rows, Py_ssize_t cols):
    cdef array.array out_arr = _alloc_d(rows * cols)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j, row
    cdef double mx, s, v, lse
    for i in range(rows):
        row = i * cols
        mx = x[row]
        for j in range(1, cols):
            v = x[row + j]
            if v > mx:
                mx = v
        s = 0.0
        for j in range(cols):
            s += exp(x[row + j] - mx)
        lse = mx + log(s)
        for j in range(cols):
            out[row + j] = x[row + j] - lse
    return out_arr


def log_softmax_rows_bwd(double[::1] y, double[::1] dy, Py_ssize_t rows, Py_ssize_t cols):
    cdef array.array out_arr = _alloc_d(rows * cols)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j, row
    cdef double acc
    for i in range(rows):
        row = i * cols
        acc = 0.0
        for j in range(cols):
            acc += dy[row + j]
        for j in range(cols):
            out[row + j] = dy[row + j] - exp(y[row + j]) * acc
    return out_arr


# ---------------------------------------------------------------------------
# layer norm


def layer_norm_fwd(double[::1] x, double[::1] gain, double[::1] bias,
                   Py_ssize_t rows, Py_ssize_t d, double eps):
    cdef array.array out_arr = _alloc_d(rows * d)
    cdef array.array means_arr = _alloc_d(rows)
    cdef array.array rstds_arr = _alloc_d(rows)
    cdef double[::1] out = out_arr
    cdef double[::1] means = means_arr
    cdef double[::1] rstds = rstds_arr
    cdef Py_ssize_t i, j, row
    cdef double s, mean, var, dv, rstd
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
        rstd = 1.0 / sqrt(var + eps)
        means[i] = mean
        rstds[i] = rstd
        for j in range(d):
            out[row + j] = (x[row + j] - mean) * rstd * gain[j] + bias[j]
    return out_arr, means_arr, rstds_arr


def layer_norm_bwd(double[::1] x, double[::1] gain, double[::1] means,
                   double[::1] rstds, double[::1] dy, Py_ssize_t rows, Py_ssize_t d):
    cdef array.array dx_arr = _alloc_d(rows * d)
    cdef array.array dg_arr = _alloc_d(d)
    cdef array.array db_arr = _alloc_d(d)
    cdef double[::1] dx = dx_arr
    cdef double[::1] dgain = dg_arr
    cdef double[::1] dbias = db_arr
    cdef Py_ssize_t i, j, row
    cdef double mean, rstd, s1, s2, xhat, g
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
    return dx_arr, dg_arr, db_arr


# ---------------------------------------------------------------------------
# gathers / scatters


def embed_gather(double[::1] table, Py_ssize_t d, long long[::1] ids):
    cdef Py_ssize_t n = ids.shape[0]
    cdef array.array out_arr = _alloc_d(n * d)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t t, j, src, dst
    for t in range(n):
        src = <Py_ssize_t> ids[t] * d
        dst = t * d
        for j in range(d):
            out[dst + j] = table[src + j]
    return out_arr


def embed_scatter_add(double[::1] dtable, Py_ssize_t d, long long[::1] ids, double[::1] dout):
    cdef Py_ssize_t t, j, src, dst
    for t in range(ids.shape[0]):
        dst = <Py_ssize_t> ids[t] * d
        src = t * d
        for j in range(d):
            dtable[dst + j] += dout[src + j]


def copy_cols(double[::1] x, Py_ssize_t rows, Py_ssize_t d, Py_ssize_t c0, Py_ssize_t c1):
    cdef Py_ssize_t w = c1 - c0
    cdef array.array out_arr = _alloc_d(rows * w)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j, src, dst
    for i in range(rows):
        src = i * d + c0
        dst = i * w
        for j in range(w):
            out[dst + j] = x[src + j]
    return out_arr


def add_into_cols(double[::1] dx, Py_ssize_t rows, Py_ssize_t d,
                  Py_ssize_t c0, Py_ssize_t c1, double[::1] dpart):
    cdef Py_ssize_t w = c1 - c0
    cdef Py_ssize_t i, j, src, dst
    for i in range(rows):
        dst = i * d + c0
        src = i * w
        for j in range(w):
            dx[dst + j] += dpart[src + j]


def rel_gather(double[::1] src, long long[::1] idx, Py_ssize_t n, Py_ssize_t w):
    cdef array.array out_arr = _alloc_d(n * n)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j, srow, irow
    for i in range(n):
        srow = i * w
        irow = i * n
        for j in range(n):
            out[irow + j] = src[srow + <Py_ssize_t> idx[irow + j]]
    return out_arr


def rel_scatter_add(double[::1] dsrc, long long[::1] idx, double[::1] dout,
                    Py_ssize_t n, Py_ssize_t w):
    cdef Py_ssize_t i, j, srow, irow
    for i in range(n):
        srow = i * w
        irow = i * n
        for j in range(n):
            dsrc[srow + <Py_ssize_t> idx[irow + j]] += dout[irow + j]


def rel_gather_t(double[::1] src, long long[::1] idx, Py_ssize_t n, Py_ssize_t w):
    cdef array.array out_arr = _alloc_d(n * n)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j, irow
    for i in range(n):
        irow = i * n
        for j in range(n):
            out[irow + j] = src[j * w + <Py_ssize_t> idx[irow + j]]
    return out_arr


def rel_scatter_add_t(double[::1] dsrc, long long[::1] idx, double[::1] dout,
                      Py_ssize_t n, Py_ssize_t w):
    cdef Py_ssize_t i, j, irow
    for i in range(n):
        irow = i * n
        for j in range(n):
            dsrc[j * w + <Py_ssize_t> idx[irow + j]] += dout[irow + j]


# ---------------------------------------------------------------------------
# losses


def ce_rows_fwd(double[::1] logits, long long[::1] labels, Py_ssize_t rows, Py_ssize_t cols):
    cdef array.array probs_arr = _alloc_d(rows * cols)
    cdef double[::1] probs = probs_arr
    cdef double total = 0.0
    cdef Py_ssize_t count = 0
    cdef Py_ssize_t i, j, row
    cdef long long lab
    cdef double mx, s, e, v, loss
    for i in range(rows):
        row = i * cols
        mx = logits[row]
        for j in range(1, cols):
            v = logits[row + j]
            if v > mx:
                mx = v
        s = 0.0
        for j in range(cols):
            e = exp(logits[row + j] - mx)
            probs[row + j] = e
            s += e
        for j in range(cols):
            probs[row + j] = probs[row + j] / s
        lab = labels[i]
        if lab >= 0:
            total += log(s) - (logits[row + <Py_ssize_t> lab] - mx)
            count += 1
    loss = total / count if count else 0.0
    return loss, probs_arr, count


def ce_rows_bwd(double[::1] probs, long long[::1] labels, Py_ssize_t rows,
                Py_ssize_t cols, Py_ssize_t count, double dloss):
    cdef array.array out_arr = _alloc_d(rows * cols)
    cdef double[::1] dlogits = out_arr
    cdef Py_ssize_t i, j, row
    cdef long long lab
    cdef double g
    if count == 0:
        return out_arr
    g = dloss / count
    for i in range(rows):
        lab = labels[i]
        if lab < 0:
            continue
        row = i * cols
        for j in range(cols):
            dlogits[row + j] = probs[row + j] * g
        dlogits[row + <Py_ssize_t> lab] -= g
    return out_arr


def bce_logits_fwd(double[::1] logits, double[::1] targets, Py_ssize_t n):
    cdef array.array sig_arr = _alloc_d(n)
    cdef double[::1] sig = sig_arr
    cdef double total = 0.0
    cdef Py_ssize_t i
    cdef double z, t, ez
    for i in range(n):
        z = logits[i]
        t = targets[i]
        if z >= 0.0:
            total += z - t * z + log1p(exp(-z))
            sig[i] = 1.0 / (1.0 + exp(-z))
        else:
            total += -t * z + log1p(exp(z))
            ez = exp(z)
            sig[i] = ez / (1.0 + ez)
    return total / n, sig_arr


def bce_logits_bwd(double[::1] sig, double[::1] targets, Py_ssize_t n, double dloss):
    cdef array.array out_arr = _alloc_d(n)
    cdef double[::1] out = out_arr
    cdef double g = dloss / n
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = (sig[i] - targets[i]) * g
    return out_arr


# ---------------------------------------------------------------------------
# optimizer


def adam_update(double[::1] p, double[::1] g, double[::1] m, double[::1] v,
                double lr, double b1, double b2, double eps, long long t):
    cdef double c1 = 1.0 - pow(b1, <double> t)
    cdef double c2 = 1.0 - pow(b2, <double> t)
    cdef Py_ssize_t i
    cdef double gi, mi, vi
    for i in range(p.shape[0]):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / c1) / (sqrt(vi / c2) + eps)


# ---------------------------------------------------------------------------
# binary16 storage emulation


cdef unsigned short _f64_to_f16(double x):
    cdef unsigned long long bits
    memcpy(&bits, &x, 8)
    cdef unsigned short sign = <unsigned short> ((bits >> 48) & 0x8000ULL)
    cdef long long exp_ = <long long> ((bits >> 52) & 0x7FFULL)
    cdef unsigned long long frac = bits & 0xFFFFFFFFFFFFFULL
    cdef long long e
    cdef unsigned long long half, rest, halfway, mant
    cdef long long shift
    if exp_ == 0x7FF:
        if frac:
            return sign | 0x7E00
        return sign | 0x7C00
    e = exp_ - 1023
    if e >= 16:
        return sign | 0x7C00
    if e >= -14:
        half = (<unsigned long long> (e + 15) << 10) | (frac >> 42)
        rest = frac & 0x3FFFFFFFFFFULL
        halfway = 0x20000000000ULL
        if rest > halfway or (rest == halfway and (half & 1)):
            half += 1
        return sign | <unsigned short> half
    if e >= -25:
        mant = (1ULL << 52) | frac
        shift = 42 + (-14 - e)
        half = mant >> shift
        rest = mant & ((1ULL << shift) - 1)
        halfway = 1ULL << (shift - 1)
        if rest > halfway or (rest == halfway and (half & 1)):
            half += 1
        return sign | <unsigned short> half
    return sign


cdef double _f16_to_f64(unsigned short h):
    cdef double sign = -1.0 if h & 0x8000 else 1.0
    cdef long long exp_ = (h >> 10) & 0x1F
    cdef long long frac = h & 0x3FF
    if exp_ == 0x1F:
        if frac:
            return NAN
        return sign * INFINITY
    if exp_ == 0:
        return sign * frac * (2.0 ** -24)
    return sign * (1024 + frac) * (2.0 ** <double> (exp_ - 25))


def f64_to_f16_bits(double x):
    return _f64_to_f16(x)


def f16_bits_to_f64(unsigned short h):
    return _f16_to_f64(h)


def quant16_inplace(double[::1] x):
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        x[i] = _f16_to_f64(_f64_to_f16(x[i]))
