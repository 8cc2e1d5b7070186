"""Reverse-mode autodiff tape over flat float64 buffers.

Tensors are thin wrappers around ``array('d')`` in row-major order. Ops
(see ``ops.py``) record nodes onto the active tape; ``backward`` walks the
node list in reverse, which is a valid topological order for a
define-by-run trace.

Precision is handled by the tape, not the containers: under
``Precision.HALF16`` every non-parameter tensor recorded on the tape is
rounded through IEEE binary16 in place at record time, emulating half
storage while all arithmetic stays float64. Activation byte accounting
uses a float32 reference frame (4 bytes/element full, 2 bytes/element
half) so the two modes are directly comparable; physical float64 bytes
are tracked separately.
"""

from array import array

from ..errors import ContractError, ShapeError
from .kernels import kernels as K

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix64(z):
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) & _MASK64
    return h


class RngStream:
    """Counter-based deterministic seed stream (splitmix-style).

    ``next_seed`` advances a counter and hashes it, so a stream can be
    forked at any point and replayed bit-for-bit: ``fork()`` snapshots
    (seed, counter), ``child(tag)`` derives an independent named stream.
    """

    __slots__ = ("seed", "counter")

    def __init__(self, seed: int, counter: int = 0):
        self.seed = seed & _MASK64
        self.counter = counter

    def next_seed(self) -> int:
        self.counter += 1
        return _mix64(self.seed + _GOLDEN * self.counter)

    def child(self, tag: str) -> "RngStream":
        return RngStream(_mix64(self.seed ^ _fnv1a64(tag.encode("utf-8"))))

    def fork(self) -> "RngStream":
        return RngStream(self.seed, self.counter)


class Precision:
    FULL64 = "full64"
    HALF16 = "half16"

    # activation bytes per element in the float32 accounting frame
    ACT_BYTES = {FULL64: 4, HALF16: 2}


def shape_size(shape):
    n = 1
    for s in shape:
        n *= s
    return n


class Tensor:
    __slots__ = ("shape", "data", "grad", "requires_grad", "is_param", "name")

    def __init__(self, shape, data=None, requires_grad=False, is_param=False, name=None):
        self.shape = tuple(shape)
        n = shape_size(self.shape)
        if data is None:
            data = K.new_d(n)
        elif len(data) != n:
            raise ShapeError(f"data has {len(data)} elements, shape {self.shape} needs {n}")
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self.is_param = is_param
        self.name = name

    @property
    def size(self) -> int:
        return len(self.data)

    def item(self) -> float:
        if len(self.data) != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return self.data[0]

    def detach(self) -> "Tensor":
        return Tensor(self.shape, self.data, requires_grad=False, is_param=self.is_param)

    def ensure_grad(self):
        if self.grad is None:
            self.grad = K.new_d(len(self.data))
        return self.grad

    def zero_grad(self):
        self.grad = None

    def tolist(self):
        return list(self.data)

    def __repr__(self):
        tag = self.name or ("param" if self.is_param else "tensor")
        return f"Tensor({tag}, shape={self.shape})"

    @classmethod
    def from_list(cls, shape, values, **kw):
        return cls(shape, array("d", values), **kw)

    @classmethod
    def param(cls, shape, values=None, name=None):
        data = array("d", values) if values is not None else None
        return cls(shape, data, requires_grad=True, is_param=True, name=name)


class Node:
    __slots__ = ("out", "inputs", "bwd")

    def __init__(self, out, inputs, bwd):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd


class TapeStats:
    """Activation storage counters shared by a tape and its recompute sub-tapes.

    ``current_bytes``/``peak_bytes`` use the float32 accounting frame;
    ``phys_*`` count the real float64 container bytes (8 per element).
    """

    __slots__ = ("current_bytes", "peak_bytes", "phys_current_bytes", "phys_peak_bytes")

    def __init__(self):
        self.current_bytes = 0
        self.peak_bytes = 0
        self.phys_current_bytes = 0
        self.phys_peak_bytes = 0

    def add(self, acct_bytes, phys_bytes):
        self.current_bytes += acct_bytes
        self.phys_current_bytes += phys_bytes
        if self.current_bytes > self.peak_bytes:
            self.peak_bytes = self.current_bytes
        if self.phys_current_bytes > self.phys_peak_bytes:
            self.phys_peak_bytes = self.phys_current_bytes

    def release(self, acct_bytes, phys_bytes):
        self.current_bytes -= acct_bytes
        self.phys_current_bytes -= phys_bytes


_ACTIVE: list = []


def active_tape():
    return _ACTIVE[-1] if _ACTIVE else None


class Tape:
    """Records ops for one forward pass. Use as a context manager."""

    def __init__(self, precision: str = Precision.FULL64, stats: TapeStats | None = None):
        if precision not in Precision.ACT_BYTES:
            raise ContractError(f"unknown precision mode: {precision!r}")
        self.precision = precision
        self.stats = stats if stats is not None else TapeStats()
        self.nodes: list[Node] = []
        self._acct_bytes = 0
        self._phys_bytes = 0
        self._closed = False

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def record(self, out: Tensor, inputs, bwd, aux_elems: int = 0):
        """Register an op output.

        Under half precision the output buffer is rounded through
        binary16 in place (parameters are never rounded). The accounting
        counter covers activation tensors only (4 bytes/element full,
        2 half, so halving is exact); ``aux_elems`` — extra full-precision
        buffers a backward closure keeps alive, like softmax
        probabilities — appear in the physical counter alone.
        """
        if self.precision == Precision.HALF16 and not out.is_param:
            K.quant16_inplace(out.data)
        acct = Precision.ACT_BYTES[self.precision] * len(out.data)
        phys = 8 * (len(out.data) + aux_elems)
        self._acct_bytes += acct
        self._phys_bytes += phys
        self.stats.add(acct, phys)
        self.nodes.append(Node(out, inputs, bwd))

    def close(self):
        """Release this tape's storage from the shared counters."""
        if not self._closed:
            self.stats.release(self._acct_bytes, self._phys_bytes)
            self._closed = True
            self.nodes = []


class no_grad:
    """Context that disables recording (ops just compute forward)."""

    def __enter__(self):
        _ACTIVE.append(None)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False


def _run_backward(tape: Tape, seeds):
    for t, g in seeds:
        K.iadd(t.ensure_grad(), g)
    for node in reversed(tape.nodes):
        dout = node.out.grad
        if dout is None:
            continue
        grads = node.bwd(dout)
        if grads is None:
            continue
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.grad is None:
                inp.grad = gi
            else:
                K.iadd(inp.grad, gi)


def backward(tape: Tape, loss: Tensor, seed: float = 1.0):
    """Accumulate d(seed * loss)/d(leaf) into .grad of every reachable leaf.

    ``loss`` must be a scalar (single-element) tensor recorded on ``tape``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    _run_backward(tape, [(loss, array("d", [seed]))])


def checkpoint(fn, inputs, stream: RngStream) -> Tensor:
    """Run ``fn(stream, *inputs)`` without retaining interior activations.

    The segment is executed on a throwaway sub-tape (so half-precision
    rounding happens exactly as it would on the main tape), only the
    boundary output survives, and the backward pass re-runs the segment
    from a forked copy of ``stream`` to rebuild interior state. Gradients
    are bit-identical to the unsegmented run: the replay repeats the same
    kernels in the same order with the same seeds.

    Parameters used inside ``fn`` receive their gradients directly during
    the replay. Each explicit input must be consumed only by this segment.
    """
    tape = active_tape()
    if tape is None:
        return fn(stream, *inputs)
    snap = stream.fork()
    sub = Tape(tape.precision, stats=tape.stats)
    with sub:
        out1 = fn(stream, *inputs)
    if not isinstance(out1, Tensor):
        raise ContractError("checkpointed function must return a single Tensor")
    data = out1.data
    shape = out1.shape
    sub.close()

    boundary = Tensor(shape, data, requires_grad=any(i.requires_grad for i in inputs))

    def bwd(dout):
        sub2 = Tape(tape.precision, stats=tape.stats)
        with sub2:
            out2 = fn(snap.fork(), *inputs)
        _run_backward(sub2, [(out2, dout)])
        sub2.close()
        return None  # input grads were accumulated by the replay itself

    tape.record(boundary, list(inputs), bwd)
    return boundary
