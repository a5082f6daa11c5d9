"""Tape-based reverse-mode automatic differentiation over dense numpy arrays.

A ``Tensor`` wraps a real numpy array. Tensors created through
``Tape.parameter`` (or produced by ops involving such tensors) carry a node
handle into the recording tape; tensors without a tape are constants and are
never differentiated. Complex quantities are represented as separate
real/imaginary channels so the tape only ever sees real arrays.

A Tape is single-threaded. Tensors without a tape handle are immutable in
practice and safe to share between tapes and threads.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "lift",
    "backward",
    "grad_check",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "tanh",
    "relu",
    "sqrt",
    "hypot",
    "tsum",
    "tmean",
    "dot",
    "pad1d",
    "slice1d",
    "frame",
    "overlap_add",
    "rfft_ri",
    "irfft_ri",
    "take_row",
    "stack_rows",
    "col_slice",
    "col_concat",
]


class Tape:
    """Ordered record of operations for one backward pass.

    Entries are appended in execution order, so every entry's parents precede
    it and a single reverse sweep computes all gradients.
    """

    def __init__(self):
        self._entries = []  # (out_id, parent_ids, backward_fn)
        self._next_id = 0
        self._params = {}  # node id -> (shape, dtype)

    def _new_id(self):
        nid = self._next_id
        self._next_id += 1
        return nid

    def parameter(self, data) -> "Tensor":
        """Register a leaf tensor whose gradient backward() will report."""
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        arr = np.array(arr, copy=True)
        t = Tensor(arr, tape=self, node=self._new_id())
        self._params[t.node] = (arr.shape, arr.dtype)
        return t

    def _record(self, data, parents, backward_fn):
        node = self._new_id()
        self._entries.append((node, tuple(p.node for p in parents), backward_fn))
        return Tensor(data, tape=self, node=node)

    def __len__(self):
        return len(self._entries)


class Tensor:
    """Dense real array, optionally attached to a tape node."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Tape | None = None, node: int | None = None):
        self.data = np.asarray(data)
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = "const" if self.tape is None else f"node={self.node}"
        return f"Tensor({tag}, shape={self.data.shape})"

    # arithmetic sugar; constants on either side are lifted
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def lift(x) -> Tensor:
    """Wrap array-likes as constant tensors; pass tensors through."""
    return _lift(x)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    return Tensor(arr)


def _tape_of(*tensors) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ValueError("operands recorded on different tapes")
    return tape


def _emit(tape, data, parents, backward_fn) -> Tensor:
    if tape is None:
        return Tensor(data)
    return tape._record(data, parents, backward_fn)


def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _broadcast_kind(a, b, op):
    """Shape rule: equal shapes, scalar, or trailing rank-1 broadcast."""
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0:
        return "b_scalar"
    if a.ndim == 0:
        return "a_scalar"
    if b.ndim == 1 and a.ndim >= 2 and a.shape[-1] == b.shape[0]:
        return "b_row"
    if a.ndim == 1 and b.ndim >= 2 and b.shape[-1] == a.shape[0]:
        return "a_row"
    raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(grad, kind, side):
    """Collapse a broadcast gradient back onto the operand's shape."""
    if kind == "same":
        return grad
    if (kind == "b_scalar" and side == "b") or (kind == "a_scalar" and side == "a"):
        return np.sum(grad)
    if (kind == "b_row" and side == "b") or (kind == "a_row" and side == "a"):
        return grad.reshape(-1, grad.shape[-1]).sum(axis=0)
    return grad


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    kind = _broadcast_kind(a, b, "add")
    out = a.data + b.data
    tape = _tape_of(a, b)
    parents = [t for t in (a, b) if t.tape is not None]

    def bw(g):
        grads = []
        if a.tape is not None:
            grads.append(_reduce_to(g, kind, "a"))
        if b.tape is not None:
            grads.append(_reduce_to(g, kind, "b"))
        return grads

    return _emit(tape, out, parents, bw)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    kind = _broadcast_kind(a, b, "sub")
    out = a.data - b.data
    tape = _tape_of(a, b)
    parents = [t for t in (a, b) if t.tape is not None]

    def bw(g):
        grads = []
        if a.tape is not None:
            grads.append(_reduce_to(g, kind, "a"))
        if b.tape is not None:
            grads.append(_reduce_to(-g, kind, "b"))
        return grads

    return _emit(tape, out, parents, bw)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    kind = _broadcast_kind(a, b, "mul")
    out = a.data * b.data
    tape = _tape_of(a, b)
    parents = [t for t in (a, b) if t.tape is not None]
    a_data, b_data = a.data, b.data

    def bw(g):
        grads = []
        if a.tape is not None:
            grads.append(_reduce_to(g * b_data, kind, "a"))
        if b.tape is not None:
            grads.append(_reduce_to(g * a_data, kind, "b"))
        return grads

    return _emit(tape, out, parents, bw)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    kind = _broadcast_kind(a, b, "div")
    out = a.data / b.data
    tape = _tape_of(a, b)
    parents = [t for t in (a, b) if t.tape is not None]
    a_data, b_data = a.data, b.data

    def bw(g):
        grads = []
        if a.tape is not None:
            grads.append(_reduce_to(g / b_data, kind, "a"))
        if b.tape is not None:
            grads.append(_reduce_to(-g * a_data / (b_data * b_data), kind, "b"))
        return grads

    return _emit(tape, out, parents, bw)


def neg(a) -> Tensor:
    a = _lift(a)
    return _emit(_tape_of(a), -a.data, [a] if a.tape is not None else [], lambda g: [-g])


def matmul(a, b) -> Tensor:
    """Matrix product for 2-D @ 2-D, 1-D @ 2-D and 2-D @ 1-D operands."""
    a, b = _lift(a), _lift(b)
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul: inner dims {a.shape} @ {b.shape}")
    elif a.ndim == 1 and b.ndim == 2:
        if a.shape[0] != b.shape[0]:
            raise ValueError(f"matmul: inner dims {a.shape} @ {b.shape}")
    elif a.ndim == 2 and b.ndim == 1:
        if a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul: inner dims {a.shape} @ {b.shape}")
    else:
        raise ValueError(f"matmul: unsupported ranks {a.ndim} @ {b.ndim}")
    out = a.data @ b.data
    tape = _tape_of(a, b)
    parents = [t for t in (a, b) if t.tape is not None]
    a_data, b_data = a.data, b.data

    def bw(g):
        grads = []
        if a.ndim == 2 and b.ndim == 2:
            ga = g @ b_data.T
            gb = a_data.T @ g
        elif a.ndim == 1:  # (k,) @ (k,n) -> (n,)
            ga = b_data @ g
            gb = np.outer(a_data, g)
        else:  # (m,k) @ (k,) -> (m,)
            ga = np.outer(g, b_data)
            gb = a_data.T @ g
        if a.tape is not None:
            grads.append(ga)
        if b.tape is not None:
            grads.append(gb)
        return grads

    return _emit(tape, out, parents, bw)


def tanh(a) -> Tensor:
    a = _lift(a)
    out = np.tanh(a.data)
    return _emit(_tape_of(a), out, [a] if a.tape is not None else [], lambda g: [g * (1.0 - out * out)])


def relu(a) -> Tensor:
    a = _lift(a)
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0
    return _emit(_tape_of(a), out, [a] if a.tape is not None else [], lambda g: [g * mask])


def sqrt(a) -> Tensor:
    a = _lift(a)
    out = np.sqrt(a.data)
    return _emit(_tape_of(a), out, [a] if a.tape is not None else [], lambda g: [g * 0.5 / out])


def hypot(re, im) -> Tensor:
    """sqrt(re^2 + im^2) with the gradient at exact zero defined as 0."""
    re, im = _lift(re), _lift(im)
    _check_same_shape(re, im, "hypot")
    out = np.hypot(re.data, im.data)
    tape = _tape_of(re, im)
    parents = [t for t in (re, im) if t.tape is not None]
    re_data, im_data = re.data, im.data

    def bw(g):
        safe = np.where(out > 0.0, out, 1.0)
        scale = np.where(out > 0.0, g / safe, 0.0)
        grads = []
        if re.tape is not None:
            grads.append(scale * re_data)
        if im.tape is not None:
            grads.append(scale * im_data)
        return grads

    return _emit(tape, out, parents, bw)


def tsum(a) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    a = _lift(a)
    out = np.sum(a.data)
    shape = a.shape

    def bw(g):
        return [np.full(shape, g, dtype=a.data.dtype)]

    return _emit(_tape_of(a), out, [a] if a.tape is not None else [], bw)


def tmean(a) -> Tensor:
    a = _lift(a)
    n = a.size
    return div(tsum(a), float(n))


def dot(a, b) -> Tensor:
    """Inner product of two same-shape tensors."""
    a, b = _lift(a), _lift(b)
    _check_same_shape(a, b, "dot")
    return tsum(mul(a, b))


def pad1d(a, before: int, after: int) -> Tensor:
    a = _lift(a)
    if a.ndim != 1:
        raise ValueError("pad1d expects a 1-D tensor")
    out = np.pad(a.data, (before, after))
    n = a.shape[0]

    def bw(g):
        return [g[before:before + n]]

    return _emit(_tape_of(a), out, [a] if a.tape is not None else [], bw)


def slice1d(a, start: int, stop: int) -> Tensor:
    a = _lift(a)
    if a.ndim != 1:
        raise ValueError("slice1d expects a 1-D tensor")
    if not (0 <= start <= stop <= a.shape[0]):
        raise ValueError(f"slice1d: [{start}:{stop}] out of range for length {a.shape[0]}")
    out = a.data[start:stop].copy()
    n = a.shape[0]

    def bw(g):
        full = np.zeros(n, dtype=g.dtype)
        full[start:stop] = g
        return [full]

    return _emit(_tape_of(a), out, [a] if a.tape is not None else [], bw)


def frame(a, size: int, hop: int, n_frames: int) -> Tensor:
    """Gather overlapping frames of a 1-D signal into a (n_frames, size) matrix."""
    a = _lift(a)
    if a.ndim != 1:
        raise ValueError("frame expects a 1-D tensor")
    need = (n_frames - 1) * hop + size
    if a.shape[0] < need:
        raise ValueError(f"frame: signal length {a.shape[0]} < required {need}")
    idx = hop * np.arange(n_frames)[:, None] + np.arange(size)[None, :]
    out = a.data[idx]
    n = a.shape[0]

    def bw(g):
        full = np.zeros(n, dtype=g.dtype)
        np.add.at(full, idx.ravel(), g.ravel())
        return [full]

    return _emit(_tape_of(a), out, [a] if a.tape is not None else [], bw)


def overlap_add(frames_t, hop: int) -> Tensor:
    """Scatter-add (T, size) frames at multiples of hop into a 1-D signal."""
    frames_t = _lift(frames_t)
    if frames_t.ndim != 2:
        raise ValueError("overlap_add expects a 2-D tensor")
    n_frames, size = frames_t.shape
    out_len = (n_frames - 1) * hop + size
    idx = hop * np.arange(n_frames)[:, None] + np.arange(size)[None, :]
    out = np.zeros(out_len, dtype=frames_t.data.dtype)
    np.add.at(out, idx.ravel(), frames_t.data.ravel())

    def bw(g):
        return [g[idx]]

    return _emit(_tape_of(frames_t), out, [frames_t] if frames_t.tape is not None else [], bw)


def rfft_ri(a) -> Tensor:
    """Row-wise real FFT of a (T, n) tensor, packed as (T, 2F) = [real | imag]."""
    a = _lift(a)
    if a.ndim != 2:
        raise ValueError("rfft_ri expects a 2-D tensor")
    n = a.shape[1]
    spec = np.fft.rfft(a.data, axis=1)
    out = np.concatenate([spec.real, spec.imag], axis=1)
    f = n // 2 + 1

    def bw(g):
        # adjoint of the linear map x -> (Re rfft x, Im rfft x)
        full = np.zeros((g.shape[0], n), dtype=complex)
        full[:, :f] = g[:, :f] + 1j * g[:, f:]
        return [n * np.fft.ifft(full, axis=1).real]

    return _emit(_tape_of(a), out, [a] if a.tape is not None else [], bw)


def irfft_ri(a, n: int) -> Tensor:
    """Row-wise inverse real FFT of packed (T, 2F) back to (T, n).

    Matches numpy's irfft, which ignores the imaginary parts of the DC and
    Nyquist bins; the adjoint therefore returns zero gradient there.
    """
    a = _lift(a)
    if a.ndim != 2:
        raise ValueError("irfft_ri expects a 2-D tensor")
    f = n // 2 + 1
    if a.shape[1] != 2 * f:
        raise ValueError(f"irfft_ri: expected {2 * f} packed columns, got {a.shape[1]}")
    spec = a.data[:, :f] + 1j * a.data[:, f:]
    out = np.fft.irfft(spec, n=n, axis=1)
    weights = np.full(f, 2.0)
    weights[0] = 1.0
    weights[-1] = 1.0

    def bw(g):
        gspec = np.fft.rfft(g, axis=1)
        d_re = weights * gspec.real / n
        d_im = weights * gspec.imag / n
        d_im[:, 0] = 0.0
        d_im[:, -1] = 0.0
        return [np.concatenate([d_re, d_im], axis=1)]

    return _emit(_tape_of(a), out, [a] if a.tape is not None else [], bw)


def take_row(a, i: int) -> Tensor:
    a = _lift(a)
    if a.ndim != 2:
        raise ValueError("take_row expects a 2-D tensor")
    rows, cols = a.shape
    if not 0 <= i < rows:
        raise ValueError(f"take_row: row {i} out of range {rows}")
    out = a.data[i].copy()

    def bw(g):
        full = np.zeros((rows, cols), dtype=g.dtype)
        full[i] = g
        return [full]

    return _emit(_tape_of(a), out, [a] if a.tape is not None else [], bw)


def stack_rows(rows) -> Tensor:
    """Stack equal-length 1-D tensors into a (len(rows), n) matrix."""
    rows = [_lift(r) for r in rows]
    if not rows:
        raise ValueError("stack_rows: empty input")
    n = rows[0].shape[0]
    for r in rows:
        if r.ndim != 1 or r.shape[0] != n:
            raise ValueError("stack_rows: rows must be 1-D with equal length")
    out = np.stack([r.data for r in rows])
    tape = _tape_of(*rows)
    parents = [r for r in rows if r.tape is not None]
    on_tape = [r.tape is not None for r in rows]

    def bw(g):
        return [g[i] for i, rec in enumerate(on_tape) if rec]

    return _emit(tape, out, parents, bw)


def col_concat(a, b) -> Tensor:
    """Concatenate two 2-D tensors along columns."""
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ValueError(f"col_concat: incompatible shapes {a.shape}, {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    tape = _tape_of(a, b)
    parents = [t for t in (a, b) if t.tape is not None]

    def bw(g):
        grads = []
        if a.tape is not None:
            grads.append(g[:, :ca])
        if b.tape is not None:
            grads.append(g[:, ca:])
        return grads

    return _emit(tape, out, parents, bw)


def col_slice(a, start: int, stop: int) -> Tensor:
    a = _lift(a)
    if a.ndim != 2:
        raise ValueError("col_slice expects a 2-D tensor")
    rows, cols = a.shape
    if not (0 <= start <= stop <= cols):
        raise ValueError(f"col_slice: [{start}:{stop}] out of range for {cols} columns")
    out = a.data[:, start:stop].copy()

    def bw(g):
        full = np.zeros((rows, cols), dtype=g.dtype)
        full[:, start:stop] = g
        return [full]

    return _emit(_tape_of(a), out, [a] if a.tape is not None else [], bw)


def backward(tape: Tape, loss: Tensor) -> dict[int, Tensor]:
    """Reverse sweep; returns dLoss/dParam for every parameter leaf.

    Parameters that the loss does not depend on map to zero tensors. The
    gradient of the loss with respect to itself is 1.
    """
    if loss.tape is not tape or loss.node is None:
        raise ValueError("loss was not produced on this tape")
    if loss.data.shape != ():
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {loss.node: np.ones((), dtype=loss.data.dtype)}
    for out_id, parent_ids, bw in reversed(tape._entries):
        g = grads.pop(out_id, None)
        if g is None:
            continue
        for pid, pg in zip(parent_ids, bw(g)):
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    result = {}
    for pid, (shape, dtype) in tape._params.items():
        g = grads.get(pid)
        if g is None:
            g = np.zeros(shape, dtype=dtype)
        result[pid] = Tensor(np.asarray(g))
    return result


def grad_check(f, params, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a list of tensors to a scalar tensor and must be deterministic.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    arrays = [np.array(p.data if isinstance(p, Tensor) else p, dtype=np.float64) for p in params]

    tape = Tape()
    leaves = [tape.parameter(a) for a in arrays]
    loss = f(leaves)
    grads = backward(tape, loss)
    analytic = [grads[leaf.node].data for leaf in leaves]

    def eval_at(arrs) -> float:
        out = f([Tensor(a) for a in arrs]).item()
        if not np.isfinite(out):
            raise FloatingPointError("non-finite value encountered in grad_check")
        return out

    worst = 0.0
    for i, base in enumerate(arrays):
        flat_an = analytic[i].ravel()
        for k in range(base.size):
            bumped = [a.copy() for a in arrays]
            bumped[i].ravel()[k] = base.ravel()[k] + step
            hi = eval_at(bumped)
            bumped[i].ravel()[k] = base.ravel()[k] - step
            lo = eval_at(bumped)
            cd = (hi - lo) / (2.0 * step)
            an = flat_an[k]
            if not (np.isfinite(an) and np.isfinite(cd)):
                raise FloatingPointError("non-finite gradient in grad_check")
            err = abs(an - cd) / max(abs(an), abs(cd), 1e-8)
            if err > worst:
                worst = err
    return worst
