"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Supports exactly the primitives the texture-attack pipeline composes:
elementwise arithmetic, exp/log/sigmoid/relu/tanh, reductions, matmul,
2D convolution, 2D max-pool, bilinear gather/scatter at fixed coordinates,
concatenation, slicing, reshape, and numpy-style broadcasting. Gradients
are exact; accumulation for shared subexpressions is by summation in
reverse construction order.
"""

import threading
from functools import lru_cache

import numpy as np


class EngineError(Exception):
    """Raised when a graph is built from invalid inputs or primitives."""


class ShapeError(EngineError):
    """Raised on operand shape mismatch; message reports both shapes."""


_STATE = threading.local()


def _tape_stack():
    if not hasattr(_STATE, "stack"):
        _STATE.stack = []
    return _STATE.stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array with an optional gradient requirement.

    Engine ops never mutate tensor data. A tensor participates in
    gradient recording only while a GradientTape is active on the
    current thread.
    """

    __slots__ = ("data", "requires_grad", "name")

    # make numpy defer to Tensor operators instead of coercing
    __array_priority__ = 1000
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __array__(self, dtype=None):
        raise EngineError(
            "Tensor cannot be consumed by raw numpy functions; "
            "use the engine primitives"
        )

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __neg__(self):
        return negate(self)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


def as_tensor(value):
    """Lift scalars/arrays to constant tensors; pass tensors through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class GradientTape:
    """Ordered record of primitive ops for one forward pass.

    Construction order is a topological order of the graph, so the
    backward sweep is a single reversed scan that visits each recorded
    node exactly once. One tape is confined to one thread.
    """

    def __init__(self):
        self._records = []
        self._produced = set()

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise EngineError("GradientTape exited out of order")
        stack.pop()
        return False

    def _is_tracked(self, t):
        return t.requires_grad or id(t) in self._produced

    def _append(self, out, inputs, backward):
        self._records.append((out, inputs, backward))
        self._produced.add(id(out))

    def gradients(self, output, leaves):
        """Backpropagate from a scalar output to the given leaf tensors.

        Returns one ndarray per leaf (zeros when no path connects the
        leaf to the output), aligned with `leaves`.
        """
        if output.data.size != 1:
            raise ShapeError(
                f"backward requires a scalar output, got shape {output.shape}"
            )
        adjoint = {id(output): np.ones_like(output.data)}
        for out, inputs, backward in reversed(self._records):
            g = adjoint.pop(id(out), None)
            if g is None:
                continue
            input_grads = backward(g)
            for t, ig in zip(inputs, input_grads):
                if ig is None or not self._is_tracked(t):
                    continue
                prev = adjoint.get(id(t))
                adjoint[id(t)] = ig if prev is None else prev + ig
        results = []
        for leaf in leaves:
            g = adjoint.get(id(leaf))
            if g is None:
                g = np.zeros_like(leaf.data)
            elif g.shape != leaf.data.shape:
                g = np.broadcast_to(g, leaf.data.shape).copy()
            results.append(g)
        return results


def _record(out, inputs, backward):
    tape = _active_tape()
    if tape is not None and any(tape._is_tracked(t) for t in inputs):
        tape._append(out, inputs, backward)
    return out


def _check_broadcast(a, b, op_name):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{op_name}: shapes {a.shape} and {b.shape} do not broadcast"
        ) from None


def _unbroadcast(grad, shape):
    """Sum-reduce a broadcast gradient back to the operand shape."""
    g = grad
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(
        i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1
    )
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    if g.shape != tuple(shape):
        g = g.reshape(shape)
    return g


def _require_finite(arr, op_name):
    if not np.all(np.isfinite(arr)):
        raise EngineError(f"{op_name} produced non-finite values")
    return arr


# -- elementwise primitives ---------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), backward)


def subtract(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "subtract")
    out = Tensor(a.data - b.data)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, (a, b), backward)


def multiply(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "multiply")
    out = Tensor(a.data * b.data)

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return _record(out, (a, b), backward)


def divide(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "divide")
    out = Tensor(_require_finite(a.data / b.data, "divide"))

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _record(out, (a, b), backward)


def negate(a):
    a = as_tensor(a)
    out = Tensor(-a.data)

    def backward(g):
        return (-g,)

    return _record(out, (a,), backward)


def power(a, exponent):
    a = as_tensor(a)
    if isinstance(exponent, Tensor):
        raise EngineError("power exponent must be a fixed scalar")
    p = float(exponent)
    out = Tensor(_require_finite(a.data**p, "power"))

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return _record(out, (a,), backward)


def exp(a):
    a = as_tensor(a)
    out = Tensor(_require_finite(np.exp(a.data), "exp"))

    def backward(g):
        return (g * out.data,)

    return _record(out, (a,), backward)


def log(a):
    a = as_tensor(a)
    out = Tensor(_require_finite(np.log(a.data), "log"))

    def backward(g):
        return (g / a.data,)

    return _record(out, (a,), backward)


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y)

    def backward(g):
        return (g * out.data * (1.0 - out.data),)

    return _record(out, (a,), backward)


def relu(a):
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))

    def backward(g):
        return (g * (a.data > 0.0),)

    return _record(out, (a,), backward)


def tanh(a):
    a = as_tensor(a)
    out = Tensor(np.tanh(a.data))

    def backward(g):
        return (g * (1.0 - out.data * out.data),)

    return _record(out, (a,), backward)


def clip01(a):
    """Clamp to [0,1], composed from relu (identity inside the range)."""
    a = as_tensor(a)
    return subtract(relu(a), relu(subtract(a, 1.0)))


# -- reductions -----------------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _record(out, (a,), backward)


def mean_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.data.size if axis is None else a.data.shape[axis]

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, a.shape).copy(),)

    return _record(out, (a,), backward)


def max_(a, axis=None, keepdims=False):
    """Max-reduction; the gradient routes to the first argmax (ties)."""
    a = as_tensor(a)
    out = Tensor(a.data.max(axis=axis, keepdims=keepdims))

    def backward(g):
        grad = np.zeros_like(a.data)
        if axis is None:
            grad.reshape(-1)[int(np.argmax(a.data))] = np.asarray(g).reshape(())
        else:
            am = np.expand_dims(np.argmax(a.data, axis=axis), axis)
            gg = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(grad, am, np.broadcast_to(gg, am.shape), axis)
        return (grad,)

    return _record(out, (a,), backward)


# -- linear algebra & structure -------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _record(out, (a, b), backward)


def reshape(a, shape):
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def backward(g):
        return (g.reshape(a.shape),)

    return _record(out, (a,), backward)


def slice_(a, key):
    a = as_tensor(a)
    out = Tensor(a.data[key])

    def backward(g):
        grad = np.zeros_like(a.data)
        grad[key] = g
        return (grad,)

    return _record(out, (a,), backward)


def concat(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of empty sequence")
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        grads = []
        for i in range(len(ts)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _record(out, tuple(ts), backward)


# -- convolution / pooling -------------------------------------------------


@lru_cache(maxsize=128)
def _conv_geometry(h, w, c, kh, kw, stride, pad):
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(
            f"conv2d: kernel ({kh},{kw}) too large for padded input ({hp},{wp})"
        )
    r = np.arange(ho) * stride
    cidx = np.arange(wo) * stride
    rows = r[:, None, None, None, None] + np.arange(kh)[None, None, :, None, None]
    cols = cidx[None, :, None, None, None] + np.arange(kw)[None, None, None, :, None]
    chan = np.arange(c)[None, None, None, None, :]
    flat = (rows * wp + cols) * c + chan
    idx = np.ascontiguousarray(
        np.broadcast_to(flat, (ho, wo, kh, kw, c)).reshape(ho * wo, kh * kw * c)
    )
    idx.setflags(write=False)
    return idx, hp, wp, ho, wo


def conv2d(x, w, stride=1, pad=0):
    """2D convolution: x [H,W,Cin] * w [kh,kw,Cin,Cout] -> [Ho,Wo,Cout]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d: need x [H,W,Cin], w [kh,kw,Cin,Cout]; "
                         f"got {x.shape} and {w.shape}")
    if x.shape[2] != w.shape[2]:
        raise ShapeError(
            f"conv2d: channel mismatch between x {x.shape} and w {w.shape}"
        )
    if stride < 1:
        raise EngineError("conv2d: stride must be >= 1")
    h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    idx, hp, wp, ho, wo = _conv_geometry(h, wd, cin, kh, kw, stride, pad)
    if pad:
        xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0)))
    else:
        xp = x.data
    cols = xp.reshape(-1)[idx]
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = Tensor((cols @ wmat).reshape(ho, wo, cout))

    def backward(g):
        gm = g.reshape(-1, cout)
        gw = (cols.T @ gm).reshape(w.shape)
        gcols = gm @ wmat.T
        gxp = np.bincount(
            idx.reshape(-1), weights=gcols.reshape(-1), minlength=hp * wp * cin
        ).reshape(hp, wp, cin)
        gx = gxp[pad:pad + h, pad:pad + wd, :] if pad else gxp
        return gx, gw

    return _record(out, (x, w), backward)


@lru_cache(maxsize=128)
def _pool_geometry(h, w, k, stride):
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"maxpool2d: window {k} too large for input ({h},{w})")
    r = np.arange(ho) * stride
    cidx = np.arange(wo) * stride
    rows = r[:, None, None, None] + np.arange(k)[None, None, :, None]
    cols = cidx[None, :, None, None] + np.arange(k)[None, None, None, :]
    idx = np.ascontiguousarray(
        np.broadcast_to(rows * w + cols, (ho, wo, k, k)).reshape(ho * wo, k * k)
    )
    idx.setflags(write=False)
    return idx, ho, wo


def maxpool2d(x, k, stride=None):
    """2D max-pool over [H,W,C] with square window k (default stride k)."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"maxpool2d: need [H,W,C], got {x.shape}")
    stride = k if stride is None else stride
    h, w, c = x.shape
    idx, ho, wo = _pool_geometry(h, w, k, stride)
    windows = x.data.reshape(h * w, c)[idx]  # [Ho*Wo, k*k, C]
    am = np.argmax(windows, axis=1)  # [Ho*Wo, C]
    out_flat = np.take_along_axis(windows, am[:, None, :], axis=1)[:, 0, :]
    out = Tensor(out_flat.reshape(ho, wo, c))

    def backward(g):
        gm = g.reshape(-1, c)
        spatial = np.take_along_axis(idx, am, axis=1)  # [Ho*Wo, C]
        flat = spatial * c + np.arange(c)[None, :]
        gx = np.bincount(
            flat.reshape(-1), weights=gm.reshape(-1), minlength=h * w * c
        ).reshape(h, w, c)
        return (gx,)

    return _record(out, (x,), backward)


# -- fixed-coordinate resampling -------------------------------------------


def sample_bilinear(tex, rows, cols, wrap_cols=False):
    """Bilinear gather from tex [H,W] or [H,W,C] at fixed float coords.

    Differentiates w.r.t. texture values only; the coordinates are data.
    Rows clamp to the valid range; columns wrap cyclically when
    `wrap_cols` is set (garment textures are cylindrical).
    """
    tex = as_tensor(tex)
    rows = np.asarray(rows, dtype=np.float64).reshape(-1)
    cols = np.asarray(cols, dtype=np.float64).reshape(-1)
    if rows.shape != cols.shape:
        raise ShapeError(
            f"sample_bilinear: coord shapes {rows.shape} vs {cols.shape}"
        )
    squeeze = tex.ndim == 2
    h, w = tex.shape[0], tex.shape[1]
    c = 1 if squeeze else tex.shape[2]

    r = np.clip(rows, 0.0, h - 1.0)
    r0 = np.minimum(np.floor(r), h - 2 if h > 1 else 0).astype(np.int64)
    r0 = np.maximum(r0, 0)
    dr = r - r0
    if wrap_cols:
        c0 = np.floor(cols).astype(np.int64)
        dc = cols - c0
        c0w = np.mod(c0, w)
        c1w = np.mod(c0 + 1, w)
    else:
        cc = np.clip(cols, 0.0, w - 1.0)
        c0 = np.minimum(np.floor(cc), w - 2 if w > 1 else 0).astype(np.int64)
        c0 = np.maximum(c0, 0)
        dc = cc - c0
        c0w, c1w = c0, c0 + 1
    r1 = np.minimum(r0 + 1, h - 1)

    i00 = r0 * w + c0w
    i01 = r0 * w + c1w
    i10 = r1 * w + c0w
    i11 = r1 * w + c1w
    w00 = (1.0 - dr) * (1.0 - dc)
    w01 = (1.0 - dr) * dc
    w10 = dr * (1.0 - dc)
    w11 = dr * dc

    tf = tex.data.reshape(h * w, c)
    out_data = (
        w00[:, None] * tf[i00]
        + w01[:, None] * tf[i01]
        + w10[:, None] * tf[i10]
        + w11[:, None] * tf[i11]
    )
    out = Tensor(out_data[:, 0] if squeeze else out_data)

    def backward(g):
        gm = g.reshape(-1, c)
        idx_all = np.concatenate([i00, i01, i10, i11])
        wts = np.concatenate([w00, w01, w10, w11])
        contrib = np.repeat(wts[:, None], c, axis=1) * np.tile(gm, (4, 1))
        flat = idx_all[:, None] * c + np.arange(c)[None, :]
        gtex = np.bincount(
            flat.reshape(-1), weights=contrib.reshape(-1), minlength=h * w * c
        )
        return (gtex.reshape(tex.shape),)

    return _record(out, (tex,), backward)


def embed(values, flat_index, out_hw, fill=0.0):
    """Scatter values [n] or [n,C] into a zero (or fill) canvas [H,W(,C)].

    `flat_index` holds unique spatial positions (row*W + col). This is
    the adjoint of a gather, used to place sprite pixels on a canvas.
    """
    values = as_tensor(values)
    flat_index = np.asarray(flat_index, dtype=np.int64).reshape(-1)
    h, w = out_hw
    squeeze = values.ndim == 1
    c = 1 if squeeze else values.shape[1]
    if values.data.reshape(-1, c).shape[0] != flat_index.shape[0]:
        raise ShapeError(
            f"embed: {values.shape} values vs {flat_index.shape} indices"
        )
    canvas = np.full((h * w, c), float(fill))
    canvas[flat_index] = values.data.reshape(-1, c)
    out = Tensor(canvas.reshape((h, w) if squeeze else (h, w, c)))

    def backward(g):
        gv = g.reshape(h * w, c)[flat_index]
        return (gv.reshape(values.shape),)

    return _record(out, (values,), backward)


# -- the module-level operations the spec names ----------------------------


def value_and_grad(objective, leaves):
    """Evaluate a scalar objective of leaf tensors and its exact gradients.

    Returns (float value, list of gradient Tensors aligned with `leaves`;
    None for leaves that do not require grad).
    """
    tape = GradientTape()
    with tape:
        out = objective(*leaves)
    if not isinstance(out, Tensor):
        raise EngineError("objective must return an engine Tensor")
    if out.data.size != 1:
        raise ShapeError(f"objective must be scalar, got shape {out.shape}")
    _require_finite(out.data, "objective")
    grads = tape.gradients(out, leaves)
    result = []
    for leaf, g in zip(leaves, grads):
        if leaf.requires_grad:
            _require_finite(g, "gradient")
            result.append(Tensor(g))
        else:
            result.append(None)
    return out.item(), result


def block_gradient(grad, mask, mode):
    """Zero gradient entries selected by a binary mask.

    mode "keep-where-one": entries survive where mask==1.
    mode "keep-where-zero": entries survive where mask==0.
    Surviving entries are bit-identical to the input.
    """
    grad = as_tensor(grad)
    mask_arr = np.asarray(mask)
    if mask_arr.shape != grad.shape:
        raise ShapeError(
            f"block_gradient: grad {grad.shape} vs mask {mask_arr.shape}"
        )
    if not np.all((mask_arr == 0) | (mask_arr == 1)):
        raise EngineError("block_gradient: mask entries must be 0 or 1")
    if mode == "keep-where-one":
        keep = mask_arr == 1
    elif mode == "keep-where-zero":
        keep = mask_arr == 0
    else:
        raise EngineError(f"block_gradient: unknown mode {mode!r}")
    out = np.where(keep, grad.data, 0.0)
    return Tensor(out)


def sgd_step(leaf, grad, eta):
    """Plain descent step: leaf - eta * grad, elementwise."""
    leaf, grad = as_tensor(leaf), as_tensor(grad)
    if leaf.shape != grad.shape:
        raise ShapeError(f"sgd_step: leaf {leaf.shape} vs grad {grad.shape}")
    if not eta > 0:
        raise EngineError("sgd_step: eta must be positive")
    if not np.all(np.isfinite(grad.data)):
        raise EngineError(
            f"sgd_step: non-finite gradient for leaf {leaf.name or '<unnamed>'}"
        )
    return Tensor(leaf.data - eta * grad.data, name=leaf.name)


def finite_difference_check(objective, leaves, step=1e-5):
    """Max relative error of analytic grads vs central differences.

    error = |analytic - central| / max(1e-8, |central|), maximized over
    every entry of every grad-requiring leaf.
    """
    if not step > 0:
        raise EngineError("finite_difference_check: step must be positive")
    _, grads = value_and_grad(objective, leaves)
    datas = [leaf.data.copy() for leaf in leaves]

    def eval_plain():
        ts = [Tensor(d) for d in datas]
        out = objective(*ts)
        return float(out.data.reshape(()))

    worst = 0.0
    for li, (leaf, g) in enumerate(zip(leaves, grads)):
        if g is None:
            continue
        flat = datas[li].reshape(-1)
        gflat = g.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            f_plus = eval_plain()
            flat[k] = orig - step
            f_minus = eval_plain()
            flat[k] = orig
            central = (f_plus - f_minus) / (2.0 * step)
            err = abs(gflat[k] - central) / max(1e-8, abs(central))
            worst = max(worst, err)
    return worst
