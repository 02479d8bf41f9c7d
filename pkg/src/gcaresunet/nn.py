"""Neural-network kernels on top of the tape, plus a minimal module system.

Convolution runs through an im2col + batched matmul path.  ``conv2d_direct``
is a plain loop implementation kept as the correctness reference for it.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, make_op, decide

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _check_conv(x_shape, w_shape, stride, padding, groups):
    c_in = x_shape[1]
    c_out, c_in_g, kh, kw = w_shape
    if stride < 1 or padding < 0 or groups < 1:
        raise ValueError(f"bad conv geometry stride={stride} padding={padding} groups={groups}")
    if c_in % groups or c_out % groups:
        raise ValueError(f"groups={groups} must divide C_in={c_in} and C_out={c_out}")
    if c_in_g * groups != c_in:
        raise ValueError(
            f"weight expects {c_in_g * groups} input channels ({c_in_g} x {groups} groups), "
            f"input has {c_in}"
        )
    ho = conv_out_size(x_shape[2], kh, stride, padding)
    wo = conv_out_size(x_shape[3], kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"kernel {kh}x{kw} does not fit input {x_shape[2:]} with padding {padding}")
    return ho, wo


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[:2]
    if kh == 1 and kw == 1:
        sub = xp[:, :, : stride * ho : stride, : stride * wo : stride]
        return np.ascontiguousarray(sub).reshape(b, c, ho * wo)
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(b, c * kh * kw, ho * wo)


def _col2im(cols, padded_shape, kh, kw, stride, ho, wo):
    b, c = padded_shape[:2]
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    xp = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return xp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation.  ``bias`` has shape (1, C_out, 1, 1)."""
    ho, wo = _check_conv(x.shape, weight.shape, stride, padding, groups)
    b, c_in, h, w = x.shape
    c_out, c_in_g, kh, kw = weight.shape
    c_out_g = c_out // groups
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    wmat = weight.data.reshape(groups, c_out_g, c_in_g * kh * kw)
    out = np.empty((b, c_out, ho * wo), dtype=np.result_type(xd, weight.data))
    cols = []
    for g in range(groups):
        col = _im2col(xp[:, g * c_in_g : (g + 1) * c_in_g], kh, kw, stride, ho, wo)
        out[:, g * c_out_g : (g + 1) * c_out_g] = np.matmul(wmat[g], col)
        cols.append(col)
    out = out.reshape(b, c_out, ho, wo)
    if bias is not None:
        out += bias.data

    def bw(grad):
        gmat = grad.reshape(b, c_out, ho * wo)
        gw = np.empty(wmat.shape, dtype=grad.dtype) if weight.requires_grad else None
        gxp = np.zeros(xp.shape, dtype=grad.dtype) if x.requires_grad else None
        for g in range(groups):
            gg = gmat[:, g * c_out_g : (g + 1) * c_out_g]
            if gw is not None:
                gw[g] = np.tensordot(gg, cols[g], axes=([0, 2], [0, 2]))
            if gxp is not None:
                dcol = np.matmul(wmat[g].T, gg)
                sl = slice(g * c_in_g, (g + 1) * c_in_g)
                if kh == 1 and kw == 1:
                    gxp[:, sl, : stride * ho : stride, : stride * wo : stride] = dcol.reshape(b, c_in_g, ho, wo)
                else:
                    gxp[:, sl] = _col2im(dcol, (b, c_in_g) + xp.shape[2:], kh, kw, stride, ho, wo)
        gx = None
        if gxp is not None:
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        gwt = gw.reshape(weight.shape) if gw is not None else None
        gb = grad.sum(axis=(0, 2, 3), keepdims=True) if bias is not None else None
        return (gx, gwt, gb) if bias is not None else (gx, gwt)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return make_op(out, "conv2d", inputs, bw)


def conv2d_direct(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
                  stride: int = 1, padding: int = 0, groups: int = 1) -> np.ndarray:
    """Reference convolution by explicit loops over every output element."""
    ho, wo = _check_conv(x.shape, weight.shape, stride, padding, groups)
    b, c_in, _, _ = x.shape
    c_out, c_in_g, kh, kw = weight.shape
    c_out_g = c_out // groups
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((b, c_out, ho, wo))
    for n in range(b):
        for co in range(c_out):
            g = co // c_out_g
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(c_in_g):
                        for u in range(kh):
                            for v in range(kw):
                                acc += (xp[n, g * c_in_g + ci, i * stride + u, j * stride + v]
                                        * weight[co, ci, u, v])
                    out[n, co, i, j] = acc
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64).reshape(1, c_out, 1, 1)
    return out


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor,
                running_var: Tensor, training: bool, momentum: float = BN_MOMENTUM,
                eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics over (B, H, W) are used and the
    running estimates move toward them by ``momentum`` (the running variance
    tracks the unbiased batch variance).  In eval mode only the running
    statistics are read.
    """
    c = x.shape[1]
    if gamma.shape != (1, c, 1, 1):
        raise ValueError(f"batchnorm over {c} channels got gamma of shape {gamma.shape}")
    xd, gd = x.data, gamma.data
    if training:
        n = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        unbiased = var * (n / (n - 1)) if n > 1 else var
        running_mean.data = ((1.0 - momentum) * running_mean.data + momentum * mu).astype(running_mean.data.dtype)
        running_var.data = ((1.0 - momentum) * running_var.data + momentum * unbiased).astype(running_var.data.dtype)

        def bw(g):
            gx = None
            if x.requires_grad:
                dxhat = g * gd
                gx = (inv / n) * (
                    n * dxhat
                    - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                )
            return gx, (g * xhat).sum(axis=(0, 2, 3), keepdims=True), g.sum(axis=(0, 2, 3), keepdims=True)

    else:
        inv = 1.0 / np.sqrt(running_var.data + eps)
        xhat = (xd - running_mean.data) * inv

        def bw(g):
            return (g * gd * inv,
                    (g * xhat).sum(axis=(0, 2, 3), keepdims=True),
                    g.sum(axis=(0, 2, 3), keepdims=True))

    return make_op(xhat * gd + beta.data, "batchnorm2d", (x, gamma, beta), bw)


def _upsample_matrix(n: int, dtype) -> np.ndarray:
    # half-pixel centres: src = (dst + 0.5) / 2 - 0.5, clamped to [0, n - 1]
    m = np.zeros((2 * n, n), dtype=dtype)
    for o in range(2 * n):
        src = min(max((o + 0.5) / 2.0 - 0.5, 0.0), n - 1.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def bilinear_upsample_x2(x: Tensor) -> Tensor:
    _, _, h, w = x.shape
    mh = _upsample_matrix(h, x.data.dtype)
    mw = _upsample_matrix(w, x.data.dtype)
    y = np.matmul(np.matmul(mh, x.data), mw.T)
    return make_op(y, "upsample2x", (x,), lambda g: (np.matmul(np.matmul(mh.T, g), mw),))


def maxpool2d_3x3_s2(x: Tensor) -> Tensor:
    """3x3 max pooling, stride 2, padding 1.  Ties go to the first window slot."""
    b, c, h, w = x.shape
    ho, wo = conv_out_size(h, 3, 2, 1), conv_out_size(w, 3, 2, 1)
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    windows = np.stack([xp[:, :, i : i + 2 * ho : 2, j : j + 2 * wo : 2]
                        for i in range(3) for j in range(3)])
    arg = decide(windows.argmax(axis=0))
    y = np.take_along_axis(windows, arg[None], axis=0)[0]

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for k in range(9):
            i, j = divmod(k, 3)
            gxp[:, :, i : i + 2 * ho : 2, j : j + 2 * wo : 2] += np.where(arg == k, g, 0)
        return (gxp[:, :, 1 : 1 + h, 1 : 1 + w],)

    return make_op(y, "maxpool3x3s2", (x,), bw)


def relu(x: Tensor) -> Tensor:
    mask = decide(x.data > 0)
    return make_op(np.where(mask, x.data, 0), "relu", (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)
    return make_op(y, "sigmoid", (x,), lambda g: (g * y * (1.0 - y),))


def softmax_c(x: Tensor) -> Tensor:
    """Softmax over the channel (class) axis."""
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    return make_op(p, "softmax", (x,), lambda g: (p * (g - (g * p).sum(axis=1, keepdims=True)),))


def log_softmax_c(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return make_op(out, "log_softmax", (x,), lambda g: (g - p * g.sum(axis=1, keepdims=True),))


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------


_mac_log: list | None = None


class mac_profile:
    """Collect ``(conv module, MACs)`` for every Conv2d call inside the block."""

    def __enter__(self):
        global _mac_log
        self.calls = []
        _mac_log = self.calls
        return self.calls

    def __exit__(self, *exc):
        global _mac_log
        _mac_log = None


def record_macs(owner, out_shape, weight_shape) -> None:
    if _mac_log is not None:
        _mac_log.append((owner, int(np.prod(out_shape)) * int(np.prod(weight_shape[1:]))))


def kaiming_uniform(shape, rng: np.random.Generator, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Module:
    """Attribute-order container of tensors and child modules.

    Learnable tensors have ``requires_grad=True``; buffers (BN running
    statistics) are plain tensors.  Lists of modules are walked as
    ``name.index``.
    """

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _items(self):
        for k, v in vars(self).items():
            if isinstance(v, (Tensor, Module)):
                yield k, v
            elif isinstance(v, (list, tuple)) and v and all(isinstance(m, Module) for m in v):
                for i, m in enumerate(v):
                    yield f"{k}.{i}", m

    def named_tensors(self, prefix: str = ""):
        for k, v in self._items():
            if isinstance(v, Tensor):
                yield prefix + k, v
            else:
                yield from v.named_tensors(prefix + k + ".")

    def named_parameters(self, prefix: str = ""):
        return [(k, t) for k, t in self.named_tensors(prefix) if t.requires_grad]

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def modules(self):
        return [m for _, m in self.named_modules()]

    def named_modules(self, prefix: str = ""):
        yield prefix.rstrip("."), self
        for k, v in self._items():
            if isinstance(v, Module):
                yield from v.named_modules(prefix + k + ".")

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_elements(self) -> int:
        return sum(t.size for _, t in self.named_tensors())


def _param(arr, decay=True) -> Tensor:
    t = Tensor(arr, requires_grad=True, dtype=np.float32)
    t.decay = decay
    return t


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel=1, stride=1, padding=0, groups=1, bias=False,
                 rng: np.random.Generator | None = None):
        if c_in % groups or c_out % groups:
            raise ValueError(f"groups={groups} must divide C_in={c_in} and C_out={c_out}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.padding, self.groups = stride, padding, groups
        fan_in = c_in // groups * kernel * kernel
        self.weight = _param(kaiming_uniform((c_out, c_in // groups, kernel, kernel), rng, fan_in))
        self.bias = _param(np.zeros((1, c_out, 1, 1)), decay=False) if bias else None

    def forward(self, x):
        out = conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)
        record_macs(self, out.shape, self.weight.shape)
        return out

    def macs(self, out_shape) -> int:
        c_out, c_in_g, kh, kw = self.weight.shape
        return int(np.prod(out_shape)) * c_in_g * kh * kw


class BatchNorm2d(Module):
    def __init__(self, c, eps=BN_EPS, momentum=BN_MOMENTUM):
        self.eps, self.momentum = eps, momentum
        self.weight = _param(np.ones((1, c, 1, 1)), decay=False)
        self.bias = _param(np.zeros((1, c, 1, 1)), decay=False)
        self.running_mean = Tensor(np.zeros((1, c, 1, 1)), dtype=np.float32)
        self.running_var = Tensor(np.ones((1, c, 1, 1)), dtype=np.float32)

    def forward(self, x):
        return batchnorm2d(x, self.weight, self.bias, self.running_mean, self.running_var,
                           self.training, self.momentum, self.eps)
