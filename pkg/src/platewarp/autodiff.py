"""Dense float64 tensors with reverse-mode automatic differentiation.

Activations are laid out batch x height x width x channels; convolution
kernels are kh x kw x in_channels x out_channels.  The graph is a tape:
each op returns a new Tensor holding a closure that scatters its output
gradient into its parents.  Leaves (parameters, inputs) are reusable
across forward passes as long as grads are cleared between iterations.

Everything runs in double precision; determinism in single-threaded mode
is relied on by the training and gradient-check tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent with an op's contract."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def backward(self, seed=None):
        """Reverse-mode pass from this tensor; seed defaults to ones."""
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))
        if seed is None:
            seed = np.ones_like(self.data)
        _accumulate(self, np.asarray(seed, dtype=np.float64))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar; every op lives at module level
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
        return mul(self, -1.0)


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    ad, bd = a.data, b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * bd, ad.shape))
        _accumulate(b, _unbroadcast(g * ad, bd.shape))

    return _make(ad * bd, (a, b), backward)


def relu(x) -> Tensor:
    x = _coerce(x)
    mask = x.data > 0.0

    def backward(g):
        _accumulate(x, g * mask)

    return _make(np.where(mask, x.data, 0.0), (x,), backward)


def log(x) -> Tensor:
    x = _coerce(x)

    def backward(g):
        _accumulate(x, g / x.data)

    return _make(np.log(x.data), (x,), backward)


def sqrt(x) -> Tensor:
    x = _coerce(x)
    out_data = np.sqrt(x.data)

    def backward(g):
        _accumulate(x, g * (0.5 / out_data))

    return _make(out_data, (x,), backward)


def clip(x, lo: float, hi: float) -> Tensor:
    x = _coerce(x)
    mask = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        _accumulate(x, g * mask)

    return _make(np.clip(x.data, lo, hi), (x,), backward)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _coerce(x)
    shape = x.data.shape
    axes = (axis,) if isinstance(axis, int) else axis

    def backward(g):
        if axes is None:
            _accumulate(x, np.broadcast_to(g, shape).copy())
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axes)
        _accumulate(x, np.broadcast_to(gg, shape).copy())

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def channel_slice(x, lo: int, hi: int) -> Tensor:
    """Slice [lo, hi) along the last (channel) axis."""
    x = _coerce(x)

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[..., lo:hi] = g
            _accumulate(x, full)

    return _make(x.data[..., lo:hi].copy(), (x,), backward)


def concat_channels(a, b) -> Tensor:
    """Concatenate along the channel axis; batch/spatial dims must match."""
    a, b = _coerce(a), _coerce(b)
    if a.data.shape[:-1] != b.data.shape[:-1]:
        raise ShapeError(
            f"concat_channels needs matching leading dims, got {a.data.shape} and {b.data.shape}"
        )
    ca = a.data.shape[-1]

    def backward(g):
        _accumulate(a, g[..., :ca])
        _accumulate(b, g[..., ca:])

    return _make(np.concatenate([a.data, b.data], axis=-1), (a, b), backward)


def softmax_pair(x) -> Tensor:
    """Numerically stable softmax over a last axis of size 2."""
    x = _coerce(x)
    if x.data.shape[-1] != 2:
        raise ShapeError(f"softmax_pair expects last dim 2, got {x.data.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        _accumulate(x, p * (g - dot))

    return _make(p, (x,), backward)


def replicate_pad2d(x, pad: int) -> Tensor:
    """Clamp-to-edge padding of the two spatial axes of a BHWC tensor."""
    x = _coerce(x)
    b, h, w, c = x.data.shape
    out_data = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="edge")

    def backward(g):
        if not x.requires_grad:
            return
        gx = g[:, pad : pad + h, pad : pad + w, :].copy()
        gx[:, 0, :, :] += g[:, :pad, pad : pad + w, :].sum(axis=1)
        gx[:, -1, :, :] += g[:, pad + h :, pad : pad + w, :].sum(axis=1)
        gx[:, :, 0, :] += g[:, pad : pad + h, :pad, :].sum(axis=2)
        gx[:, :, -1, :] += g[:, pad : pad + h, pad + w :, :].sum(axis=2)
        # the four corner blocks fold entirely onto the corner pixels
        gx[:, 0, 0, :] += g[:, :pad, :pad, :].sum(axis=(1, 2))
        gx[:, 0, -1, :] += g[:, :pad, pad + w :, :].sum(axis=(1, 2))
        gx[:, -1, 0, :] += g[:, pad + h :, :pad, :].sum(axis=(1, 2))
        gx[:, -1, -1, :] += g[:, pad + h :, pad + w :, :].sum(axis=(1, 2))
        _accumulate(x, gx)

    return _make(out_data, (x,), backward)


def _window_view(x: np.ndarray, kh: int, kw: int, stride: int):
    b, h, w, c = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    sb, sh, sw, sc = x.strides
    return (
        np.lib.stride_tricks.as_strided(
            x,
            (b, oh, ow, kh, kw, c),
            (sb, stride * sh, stride * sw, sh, sw, sc),
            writeable=False,
        ),
        oh,
        ow,
    )


def _zero_pad(x: np.ndarray, pt, pb, pl, pr):
    if pt == pb == pl == pr == 0:
        return x
    return np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))


def conv2d(x, kernel, bias=None, stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlation of a BHWC tensor with a kh x kw x Cin x Cout kernel.

    padding "same" zero-pads so output spatial dims are ceil(dim / stride);
    "valid" uses no padding.  Gradients flow to input, kernel and bias.
    """
    x = _coerce(_param_tensor(x))
    k = _coerce(_param_tensor(kernel))
    b = _coerce(_param_tensor(bias)) if bias is not None else None
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if k.data.ndim != 4:
        raise ShapeError(f"kernel must be kh x kw x Cin x Cout, got {k.data.shape}")
    kh, kw, cin, cout = k.data.shape
    if x.data.ndim != 4 or x.data.shape[3] != cin:
        raise ShapeError(
            f"input {x.data.shape} incompatible with kernel {k.data.shape}"
        )
    if b is not None and b.data.shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {b.data.shape}")

    bsz, h, w, _ = x.data.shape
    if padding == "same":
        oh = -(-h // stride)
        ow = -(-w // stride)
        ph = max((oh - 1) * stride + kh - h, 0)
        pw = max((ow - 1) * stride + kw - w, 0)
        pt, pb_, pl, pr = ph // 2, ph - ph // 2, pw // 2, pw - pw // 2
    elif padding == "valid":
        pt = pb_ = pl = pr = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")

    xp = _zero_pad(x.data, pt, pb_, pl, pr)
    win, oh, ow = _window_view(xp, kh, kw, stride)
    cols = win.reshape(bsz * oh * ow, kh * kw * cin)
    kmat = k.data.reshape(kh * kw * cin, cout)
    out_data = cols @ kmat
    if b is not None:
        out_data += b.data
    out_data = out_data.reshape(bsz, oh, ow, cout)

    def backward(g):
        gmat = g.reshape(bsz * oh * ow, cout)
        if b is not None and b.requires_grad:
            _accumulate(b, gmat.sum(axis=0))
        if k.requires_grad:
            _accumulate(k, (cols.T @ gmat).reshape(kh, kw, cin, cout))
        if x.requires_grad:
            # transpose convolution: dilate g by stride, full-pad, correlate
            # with the spatially flipped kernel (in/out channels swapped)
            if stride > 1:
                gd = np.zeros((bsz, (oh - 1) * stride + 1, (ow - 1) * stride + 1, cout))
                gd[:, ::stride, ::stride, :] = g
            else:
                gd = g
            gp = _zero_pad(gd, kh - 1, kh - 1, kw - 1, kw - 1)
            kflip = k.data[::-1, ::-1, :, :].transpose(0, 1, 3, 2)
            gwin, gh, gw = _window_view(gp, kh, kw, 1)
            gcols = gwin.reshape(bsz * gh * gw, kh * kw * cout)
            dxp_core = (gcols @ kflip.reshape(kh * kw * cout, cin)).reshape(
                bsz, gh, gw, cin
            )
            hp, wp = xp.shape[1], xp.shape[2]
            if (gh, gw) != (hp, wp):
                dxp = np.zeros((bsz, hp, wp, cin))
                dxp[:, :gh, :gw, :] = dxp_core
            else:
                dxp = dxp_core
            _accumulate(x, dxp[:, pt : pt + h, pl : pl + w, :])

    return _make(out_data, tuple(t for t in (x, k, b) if t is not None), backward)


def maxpool2d(x) -> Tensor:
    """2x2 max pooling with stride 2; H and W must be even.

    Gradient routes to the first maximal element in row-major window order.
    """
    x = _coerce(x)
    bsz, h, w, c = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even spatial dims, got {h}x{w}")
    oh, ow = h // 2, w // 2
    win = (
        x.data.reshape(bsz, oh, 2, ow, 2, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(bsz, oh, ow, 4, c)
    )
    arg = win.argmax(axis=3)  # first max in row-major window order
    out_data = np.take_along_axis(win, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def backward(g):
        gw = np.zeros((bsz, oh, ow, 4, c))
        np.put_along_axis(gw, arg[:, :, :, None, :], g[:, :, :, None, :], axis=3)
        gx = (
            gw.reshape(bsz, oh, ow, 2, 2, c)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(bsz, h, w, c)
        )
        _accumulate(x, gx)

    return _make(out_data, (x,), backward)


def batchnorm(
    x,
    gamma,
    beta,
    running_mean,
    running_var,
    training: bool,
    momentum: float = 0.99,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over batch and spatial axes.

    In training mode normalizes by batch statistics and updates the running
    buffers in place (running = momentum * running + (1 - momentum) * batch).
    In inference mode the running buffers are used and nothing is mutated.
    """
    x = _coerce(x)
    gamma_t = _param_tensor(gamma)
    beta_t = _param_tensor(beta)
    rm = _param_array(running_mean)
    rv = _param_array(running_var)
    c = x.data.shape[-1]
    if gamma_t.data.shape != (c,) or beta_t.data.shape != (c,):
        raise ShapeError("gamma/beta must be per-channel vectors")

    axes = tuple(range(x.data.ndim - 1))
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        rm *= momentum
        rm += (1.0 - momentum) * mean
        rv *= momentum
        rv += (1.0 - momentum) * var
    else:
        mean = rm
        var = rv
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out_data = gamma_t.data * xhat + beta_t.data

    n = int(np.prod([x.data.shape[a] for a in axes]))

    def backward(g):
        if gamma_t.requires_grad:
            _accumulate(gamma_t, (g * xhat).sum(axis=axes))
        if beta_t.requires_grad:
            _accumulate(beta_t, g.sum(axis=axes))
        if x.requires_grad:
            dxhat = g * gamma_t.data
            if training:
                s1 = dxhat.sum(axis=axes)
                s2 = (dxhat * xhat).sum(axis=axes)
                _accumulate(x, inv_std / n * (n * dxhat - s1 - xhat * s2))
            else:
                _accumulate(x, dxhat * inv_std)

    return _make(out_data, (x, gamma_t, beta_t), backward)


class Parameter:
    """Named leaf tensor plus Adam moment buffers.

    Non-trainable parameters (frozen kernels, batchnorm running stats) are
    saved in checkpoints but never touched by the optimizer; their tensors
    do not require grad.
    """

    def __init__(self, name: str, value, trainable: bool = True):
        self.name = name
        self.tensor = Tensor(np.array(value, dtype=np.float64), requires_grad=trainable)
        self.adam_m = np.zeros_like(self.tensor.data)
        self.adam_v = np.zeros_like(self.tensor.data)
        self.trainable = trainable

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape}, trainable={self.trainable})"


def _param_tensor(p):
    return p.tensor if isinstance(p, Parameter) else p


def _param_array(p):
    if isinstance(p, Parameter):
        return p.tensor.data
    if isinstance(p, Tensor):
        return p.data
    return np.asarray(p)


@dataclass
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must be in [0, 1)")


def zero_grads(params):
    for p in params:
        p.tensor.grad = None


def adam_step(params, config: AdamConfig):
    """One Adam update with bias correction over all trainable parameters.

    Parameters with no populated gradient, and non-trainable parameters,
    are left untouched (moments included).
    """
    config.step_count += 1
    t = config.step_count
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for p in params:
        if not p.trainable:
            continue
        g = p.tensor.grad
        if g is None:
            continue
        p.adam_m *= b1
        p.adam_m += (1.0 - b1) * g
        p.adam_v *= b2
        p.adam_v += (1.0 - b2) * g * g
        mhat = p.adam_m / bc1
        vhat = p.adam_v / bc2
        p.tensor.data -= config.learning_rate * mhat / (np.sqrt(vhat) + config.epsilon)


def grad_check(
    loss_fn,
    params,
    perturbation: float = 1e-4,
    max_entries: int = 4,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    `params` items may be Parameters or leaf Tensors; entries are sampled
    per parameter (all of them when small).  Relative error is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    report = grad_check_report(loss_fn, params, perturbation, max_entries, seed)
    return max(report.values()) if report else 0.0


def grad_check_report(
    loss_fn,
    params,
    perturbation: float = 1e-4,
    max_entries: int = 4,
    seed: int = 0,
) -> dict:
    rng = np.random.default_rng(seed)
    leaves = []
    for p in params:
        t = p.tensor if isinstance(p, Parameter) else p
        name = p.name if isinstance(p, Parameter) else "tensor"
        if t.requires_grad:
            leaves.append((name, t))
    for _, t in leaves:
        t.grad = None
    out = loss_fn()
    out.backward()
    analytic = {id(t): (t.grad.copy() if t.grad is not None else None) for _, t in leaves}
    h = perturbation
    report = {}
    for name, t in leaves:
        size = t.data.size
        if size <= max_entries:
            idxs = np.arange(size)
        else:
            idxs = rng.choice(size, size=max_entries, replace=False)
        ana_full = analytic[id(t)]
        worst = 0.0
        flat = t.data.reshape(-1)
        for idx in idxs:
            orig = flat[idx]
            flat[idx] = orig + h
            f_plus = float(loss_fn().data)
            flat[idx] = orig - h
            f_minus = float(loss_fn().data)
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            ana = float(ana_full.reshape(-1)[idx]) if ana_full is not None else 0.0
            rel = abs(ana - numeric) / max(1e-8, abs(ana) + abs(numeric))
            worst = max(worst, rel)
        report[name] = worst
    return report
