"""Dense tensors with reverse-mode automatic differentiation.

A small, auditable engine: float32/float64 numpy storage, primitive ops
that record closed-form adjoints, and a tape replayed in reverse
topological order. Only the primitives the denoiser needs are provided.
Broadcasting follows numpy's trailing-dimension rule, used here for
leading batch dimensions and bias addition only.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "ShapeError",
    "NumericError",
    "no_grad",
    "set_finite_checks",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "matmul",
    "sum_",
    "mean_",
    "reshape",
    "transpose",
    "silu",
    "softplus",
    "softmax",
    "log_softmax",
    "layernorm",
    "embedding",
    "gather_last",
    "conv1d",
    "conv1d_transposed",
    "depthwise_conv1d_causal",
    "ssm_scan",
    "grad_check",
    "zero_grads",
]


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """A non-finite value appeared in a forward or backward pass."""


_GRAD_ENABLED = True
_FINITE_CHECKS = True


class no_grad:
    """Context manager: ops executed inside record no adjoints."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._saved
        return False


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op NaN/Inf checks; returns the previous setting."""
    global _FINITE_CHECKS
    previous = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    return previous


def _require_finite(arr, what: str):
    if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {what}")


class Tensor:
    """A dense array with an optional same-shape gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, seed=None):
        """Accumulate gradients of this value into every reachable leaf."""
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        if seed is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed requires a scalar")
            seed = np.ones_like(self.data)
        seed = np.asarray(seed, dtype=self.data.dtype).reshape(self.data.shape)
        self.grad = seed if self.grad is None else self.grad + seed
        tape = GradTape.from_root(self)
        tape.replay()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class GradTape:
    """Reverse-topological record of the recorded ops reachable from a root.

    ``nodes`` lists non-leaf tensors root-first; ``replay`` invokes each
    node's adjoint exactly once.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "GradTape":
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited or node._backward is None:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent._backward is not None and id(parent) not in visited:
                    stack.append((parent, False))
        order.reverse()
        return cls(order)

    def replay(self):
        for node in self.nodes:
            if node.grad is not None:
                node._backward()


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents, what: str) -> Tensor:
    _require_finite(data, what)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
    return out


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    _require_finite(g, "a backward pass")
    g = np.asarray(g, dtype=t.data.dtype)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = _result(a.data + b.data, (a, b), "add")
    if out.requires_grad:

        def bw():
            _accum(a, _unbroadcast(out.grad, a.shape))
            _accum(b, _unbroadcast(out.grad, b.shape))

        out._backward = bw
    return out


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = _result(a.data - b.data, (a, b), "sub")
    if out.requires_grad:

        def bw():
            _accum(a, _unbroadcast(out.grad, a.shape))
            _accum(b, _unbroadcast(-out.grad, b.shape))

        out._backward = bw
    return out


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = _result(a.data * b.data, (a, b), "mul")
    if out.requires_grad:

        def bw():
            _accum(a, _unbroadcast(out.grad * b.data, a.shape))
            _accum(b, _unbroadcast(out.grad * a.data, b.shape))

        out._backward = bw
    return out


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = _result(a.data / b.data, (a, b), "div")
    if out.requires_grad:

        def bw():
            _accum(a, _unbroadcast(out.grad / b.data, a.shape))
            _accum(b, _unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape))

        out._backward = bw
    return out


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = _result(-a.data, (a,), "neg")
    if out.requires_grad:

        def bw():
            _accum(a, -out.grad)

        out._backward = bw
    return out


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = _result(np.exp(a.data), (a,), "exp")
    if out.requires_grad:

        def bw():
            _accum(a, out.grad * out.data)

        out._backward = bw
    return out


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = _result(np.log(a.data), (a,), "log")
    if out.requires_grad:

        def bw():
            _accum(a, out.grad / a.data)

        out._backward = bw
    return out


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = _result(np.matmul(a.data, b.data), (a, b), "matmul")
    if out.requires_grad:

        def bw():
            ga = np.matmul(out.grad, np.swapaxes(b.data, -1, -2))
            gb = np.matmul(np.swapaxes(a.data, -1, -2), out.grad)
            _accum(a, _unbroadcast(ga, a.shape))
            _accum(b, _unbroadcast(gb, b.shape))

        out._backward = bw
    return out


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum")
    if out.requires_grad:

        def bw():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.shape))

        out._backward = bw
    return out


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = _result(a.data.reshape(shape), (a,), "reshape")
    if out.requires_grad:

        def bw():
            _accum(a, out.grad.reshape(a.shape))

        out._backward = bw
    return out


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    out = _result(a.data.transpose(axes), (a,), "transpose")
    if out.requires_grad:
        inverse = np.argsort(axes)

        def bw():
            _accum(a, out.grad.transpose(inverse))

        out._backward = bw
    return out


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(a) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid(a.data)
    out = _result(a.data * s, (a,), "silu")
    if out.requires_grad:

        def bw():
            _accum(a, out.grad * s * (1.0 + a.data * (1.0 - s)))

        out._backward = bw
    return out


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    out = _result(np.logaddexp(0.0, a.data), (a,), "softplus")
    if out.requires_grad:

        def bw():
            _accum(a, out.grad * _sigmoid(a.data))

        out._backward = bw
    return out


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(invalid="ignore"):  # non-finite inputs surface via _result
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        p = e / e.sum(axis=axis, keepdims=True)
    out = _result(p, (a,), "softmax")
    if out.requires_grad:

        def bw():
            g = out.grad
            inner = (g * p).sum(axis=axis, keepdims=True)
            _accum(a, p * (g - inner))

        out._backward = bw
    return out


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(invalid="ignore"):  # non-finite inputs surface via _result
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        ls = shifted - lse
    out = _result(ls, (a,), "log_softmax")
    if out.requires_grad:

        def bw():
            g = out.grad
            _accum(a, g - np.exp(ls) * g.sum(axis=axis, keepdims=True))

        out._backward = bw
    return out


def layernorm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last dimension, then scale and shift."""
    a = _as_tensor(a)
    gain = _as_tensor(gain, like=a)
    bias = _as_tensor(bias, like=a)
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm gain/bias must have shape ({d},)")
    mu = a.data.mean(axis=-1, keepdims=True)
    centred = a.data - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv
    out = _result(xhat * gain.data + bias.data, (a, gain, bias), "layernorm")
    if out.requires_grad:

        def bw():
            g = out.grad
            lead = tuple(range(g.ndim - 1))
            _accum(gain, (g * xhat).sum(axis=lead))
            _accum(bias, g.sum(axis=lead))
            gx = g * gain.data
            ga = inv * (
                gx
                - gx.mean(axis=-1, keepdims=True)
                - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            )
            _accum(a, ga)

        out._backward = bw
    return out


# ---------------------------------------------------------------------------
# lookups


def embedding(table, indices) -> Tensor:
    """Row lookup ``table[indices]``; gradient scatters back into the table."""
    table = _as_tensor(table)
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding index out of range [0, {table.shape[0]}): "
            f"min={idx.min()}, max={idx.max()}"
        )
    out = _result(table.data[idx], (table,), "embedding")
    if out.requires_grad:

        def bw():
            g = np.zeros_like(table.data)
            np.add.at(g, idx.ravel(), out.grad.reshape(-1, table.shape[-1]))
            _accum(table, g)

        out._backward = bw
    return out


def gather_last(a, indices) -> Tensor:
    """Pick one entry along the last axis per leading position."""
    a = _as_tensor(a)
    idx = np.asarray(indices)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"gather_last indices {idx.shape} must match {a.shape[:-1]}")
    picked = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]
    out = _result(picked, (a,), "gather_last")
    if out.requires_grad:

        def bw():
            g = np.zeros_like(a.data)
            np.put_along_axis(g, idx[..., None], out.grad[..., None], axis=-1)
            _accum(a, g)

        out._backward = bw
    return out


# ---------------------------------------------------------------------------
# convolutions


def conv1d(x, kernel, stride: int = 1, causal: bool = False) -> Tensor:
    """1-d convolution of ``x[B,L,Cin]`` with ``kernel[k,Cin,Cout]``.

    ``causal=True`` left-pads with k-1 zeros (stride must be 1), preserving
    length; otherwise no padding and ``L_out = floor((L-k)/stride) + 1``.
    """
    x = _as_tensor(x)
    kernel = _as_tensor(kernel, like=x)
    if x.data.ndim != 3 or kernel.data.ndim != 3:
        raise ShapeError(f"conv1d expects x[B,L,Cin], kernel[k,Cin,Cout]; got {x.shape}, {kernel.shape}")
    k, cin, _ = kernel.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv1d channel mismatch: x {x.shape} vs kernel {kernel.shape}")
    if causal and stride != 1:
        raise ShapeError("causal conv1d requires stride 1")
    if stride < 1 or k < 1:
        raise ShapeError("conv1d needs stride >= 1 and kernel size >= 1")
    xv = x.data
    if causal:
        xv = np.pad(xv, ((0, 0), (k - 1, 0), (0, 0)))
    length = xv.shape[1]
    if length < k:
        raise ShapeError(f"conv1d input length {x.shape[1]} shorter than kernel {k}")
    l_out = (length - k) // stride + 1
    span = stride * (l_out - 1) + 1
    data = np.zeros((x.shape[0], l_out, kernel.shape[2]), dtype=xv.dtype)
    for j in range(k):
        data += np.matmul(xv[:, j : j + span : stride, :], kernel.data[j])
    out = _result(data, (x, kernel), "conv1d")
    if out.requires_grad:

        def bw():
            g = out.grad
            gx = np.zeros_like(xv)
            gk = np.zeros_like(kernel.data)
            for j in range(k):
                sl = slice(j, j + span, stride)
                gx[:, sl, :] += np.matmul(g, kernel.data[j].T)
                gk[j] = np.einsum("bli,blo->io", xv[:, sl, :], g)
            if causal:
                gx = gx[:, k - 1 :, :]
            _accum(x, gx)
            _accum(kernel, gk)

        out._backward = bw
    return out


def conv1d_transposed(x, kernel, stride: int, out_len: int) -> Tensor:
    """Adjoint-style upsampling of ``x[B,Lc,Cin]`` with ``kernel[k,Cin,Cout]``.

    ``out_len`` must be a length that conv1d with the same kernel size and
    stride would have reduced to ``Lc``; the composition restores it exactly.
    """
    x = _as_tensor(x)
    kernel = _as_tensor(kernel, like=x)
    if x.data.ndim != 3 or kernel.data.ndim != 3:
        raise ShapeError(
            f"conv1d_transposed expects x[B,Lc,Cin], kernel[k,Cin,Cout]; got {x.shape}, {kernel.shape}"
        )
    k, cin, cout = kernel.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv1d_transposed channel mismatch: x {x.shape} vs kernel {kernel.shape}")
    l_c = x.shape[1]
    if out_len < k or (out_len - k) // stride + 1 != l_c:
        raise ShapeError(
            f"conv1d_transposed cannot reconstruct length {out_len} from {l_c} "
            f"frames with kernel {k}, stride {stride}"
        )
    span = stride * (l_c - 1) + 1
    data = np.zeros((x.shape[0], out_len, cout), dtype=x.data.dtype)
    for j in range(k):
        data[:, j : j + span : stride, :] += np.matmul(x.data, kernel.data[j])
    out = _result(data, (x, kernel), "conv1d_transposed")
    if out.requires_grad:

        def bw():
            g = out.grad
            gx = np.zeros_like(x.data)
            gk = np.zeros_like(kernel.data)
            for j in range(k):
                g_slice = g[:, j : j + span : stride, :]
                gx += np.matmul(g_slice, kernel.data[j].T)
                gk[j] = np.einsum("bli,blo->io", x.data, g_slice)
            _accum(x, gx)
            _accum(kernel, gk)

        out._backward = bw
    return out


def depthwise_conv1d_causal(x, kernel, bias=None) -> Tensor:
    """Per-channel causal convolution of ``x[B,L,C]`` with ``kernel[k,C]``."""
    x = _as_tensor(x)
    kernel = _as_tensor(kernel, like=x)
    if x.data.ndim != 3 or kernel.data.ndim != 2 or x.shape[-1] != kernel.shape[-1]:
        raise ShapeError(
            f"depthwise conv expects x[B,L,C], kernel[k,C]; got {x.shape}, {kernel.shape}"
        )
    k = kernel.shape[0]
    length = x.shape[1]
    xp = np.pad(x.data, ((0, 0), (k - 1, 0), (0, 0)))
    data = np.zeros_like(x.data)
    for j in range(k):
        data += xp[:, j : j + length, :] * kernel.data[j]
    parents = (x, kernel)
    if bias is not None:
        bias = _as_tensor(bias, like=x)
        data = data + bias.data
        parents = (x, kernel, bias)
    out = _result(data, parents, "depthwise_conv1d_causal")
    if out.requires_grad:

        def bw():
            g = out.grad
            gx = np.zeros_like(xp)
            gk = np.zeros_like(kernel.data)
            for j in range(k):
                gx[:, j : j + length, :] += g * kernel.data[j]
                gk[j] = (xp[:, j : j + length, :] * g).sum(axis=(0, 1))
            _accum(x, gx[:, k - 1 :, :])
            _accum(kernel, gk)
            if bias is not None:
                _accum(bias, g.sum(axis=(0, 1)))

        out._backward = bw
    return out


# ---------------------------------------------------------------------------
# selective-state-space recurrence


def ssm_scan(u, delta, a_diag, b_seq, c_seq) -> Tensor:
    """Input-dependent diagonal state-space recurrence.

    Shapes: ``u[B,L,E]``, ``delta[B,L,E]`` (positive step sizes),
    ``a_diag[E,N]`` (strictly negative), ``b_seq[B,L,N]``, ``c_seq[B,L,N]``.
    Per position the state updates as ``h_t = exp(delta_t * A) h_{t-1} +
    ((exp(delta_t * A) - 1)/A) * B_t * u_t`` and emits ``y_t = <C_t, h_t>``
    per channel. Forward is vectorized over batch and channels with a single
    loop over positions; the adjoint runs the mirrored reverse recurrence.
    """
    u = _as_tensor(u)
    delta = _as_tensor(delta, like=u)
    a_diag = _as_tensor(a_diag, like=u)
    b_seq = _as_tensor(b_seq, like=u)
    c_seq = _as_tensor(c_seq, like=u)
    if u.data.ndim != 3 or u.shape != delta.shape:
        raise ShapeError(f"ssm_scan expects u and delta of shape [B,L,E]; got {u.shape}, {delta.shape}")
    bsz, length, e_dim = u.shape
    if a_diag.data.ndim != 2 or a_diag.shape[0] != e_dim:
        raise ShapeError(f"ssm_scan A must be [E,N] with E={e_dim}; got {a_diag.shape}")
    n_dim = a_diag.shape[1]
    if b_seq.shape != (bsz, length, n_dim) or c_seq.shape != (bsz, length, n_dim):
        raise ShapeError(
            f"ssm_scan B/C must be [B,L,N]=({bsz},{length},{n_dim}); got {b_seq.shape}, {c_seq.shape}"
        )

    av = a_diag.data
    da = np.exp(delta.data[..., None] * av)  # [B,L,E,N]
    phi = np.expm1(delta.data[..., None] * av) / av
    dbu = phi * b_seq.data[:, :, None, :] * u.data[..., None]
    hs = np.empty_like(da)
    h = np.zeros((bsz, e_dim, n_dim), dtype=u.data.dtype)
    for t in range(length):
        h = da[:, t] * h + dbu[:, t]
        hs[:, t] = h
    if not np.all(np.isfinite(hs)):
        bad = int(np.argwhere(~np.isfinite(hs).all(axis=(0, 2, 3)))[0][0])
        raise NumericError(f"non-finite scan state at position {bad}")
    y = (hs * c_seq.data[:, :, None, :]).sum(axis=-1)
    out = _result(y, (u, delta, a_diag, b_seq, c_seq), "ssm_scan")
    if out.requires_grad:

        def bw():
            gy = out.grad
            gu = np.zeros_like(u.data)
            gdelta = np.zeros_like(delta.data)
            ga = np.zeros_like(av)
            gb = np.zeros_like(b_seq.data)
            gc = np.einsum("ble,blen->bln", gy, hs)
            gh_carry = np.zeros((bsz, e_dim, n_dim), dtype=u.data.dtype)
            for t in range(length - 1, -1, -1):
                gh = gh_carry + gy[:, t, :, None] * c_seq.data[:, t, None, :]
                h_prev = hs[:, t - 1] if t > 0 else 0.0
                g_da = gh * h_prev
                g_dbu = gh
                gh_carry = gh * da[:, t]
                # dbu = phi * B * u
                g_phi = g_dbu * b_seq.data[:, t, None, :] * u.data[:, t, :, None]
                gb[:, t] = (g_dbu * phi[:, t] * u.data[:, t, :, None]).sum(axis=-2)
                gu[:, t] = (g_dbu * phi[:, t] * b_seq.data[:, t, None, :]).sum(axis=-1)
                # d(da)/d(delta) = A*da, d(phi)/d(delta) = da
                gdelta[:, t] = ((g_da * av + g_phi) * da[:, t]).sum(axis=-1)
                # d(da)/dA = delta*da, d(phi)/dA = (delta*da - phi)/A
                ga += (
                    g_da * delta.data[:, t, :, None] * da[:, t]
                    + g_phi * (delta.data[:, t, :, None] * da[:, t] - phi[:, t]) / av
                ).sum(axis=0)
            _accum(u, gu)
            _accum(delta, gdelta)
            _accum(a_diag, ga)
            _accum(b_seq, gb)
            _accum(c_seq, gc)

        out._backward = bw
    return out


# ---------------------------------------------------------------------------
# verification oracle


def zero_grads(params):
    for p in params:
        p.zero_grad()


def grad_check(f, params, h: float = 1e-5, max_entries: int | None = None, rng=None) -> float:
    """Compare tape gradients of scalar-valued ``f()`` against central differences.

    ``params`` are the leaf tensors perturbed in place (64-bit data expected).
    Returns the worst relative error, where the denominator is floored at
    1e-2 so near-zero gradients are compared absolutely. ``max_entries``
    caps the number of entries probed per parameter (random subset).
    """
    params = list(params)
    zero_grads(params)
    loss = f()
    if loss.data.size != 1:
        raise ShapeError("grad_check requires a scalar-valued function")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idxs = rng.choice(flat.size, size=max_entries, replace=False)
        an_flat = an.reshape(-1)
        for i in idxs:
            orig = flat[i]
            step = h * (1.0 + abs(orig))
            flat[i] = orig + step
            up = f().item()
            flat[i] = orig - step
            down = f().item()
            flat[i] = orig
            fd = (up - down) / (2.0 * step)
            err = abs(fd - an_flat[i]) / max(abs(fd), abs(an_flat[i]), 1e-2)
            worst = max(worst, err)
    zero_grads(params)
    return worst
