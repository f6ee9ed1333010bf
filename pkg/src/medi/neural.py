"""Deterministic NCHW tensor layers with explicit reverse-mode gradients.

Exactly the layer set the fusion network needs: same-pad convolution,
group normalization, ReLU, sigmoid, channel softmax, 2x2 max pooling,
global average pooling, fully connected, and a squeeze-excite block, plus
cross-entropy and Adam. Every layer caches what its backward pass needs;
no autodiff graph. Convolutions run as im2col GEMMs; the input-gradient
runs as a GEMM followed by a column scatter-add, which also covers
strided convolution.

Dtype follows the parameters: float32 for training, float64 for the
finite-difference gradient checks.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import DataError, NumericalError

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


if HAVE_NUMBA:

    @numba.njit(cache=True, fastmath=True)
    def _conv_fw_f32(xp, w, out):
        n, c, _, _ = xp.shape
        f = w.shape[0]
        k = w.shape[2]
        ho, wo = out.shape[2], out.shape[3]
        for ni in range(n):
            for fi in range(f):
                for ci in range(c):
                    for i in range(k):
                        for j in range(k):
                            ws = w[fi, ci, i, j]
                            for y in range(ho):
                                orow = out[ni, fi, y]
                                xrow = xp[ni, ci, y + i]
                                for x in range(wo):
                                    orow[x] += ws * xrow[j + x]

    @numba.njit(cache=True, fastmath=True)
    def _conv_dw_f32(xp, dy, dw):
        n, c, _, _ = xp.shape
        f, _, k, _ = dw.shape
        ho, wo = dy.shape[2], dy.shape[3]
        for ni in range(n):
            for fi in range(f):
                for ci in range(c):
                    for i in range(k):
                        for j in range(k):
                            acc = numba.float32(0.0)
                            for y in range(ho):
                                row_dy = dy[ni, fi, y]
                                row_x = xp[ni, ci, y + i]
                                s = numba.float32(0.0)
                                for x in range(wo):
                                    s += row_dy[x] * row_x[j + x]
                                acc += s
                            dw[fi, ci, i, j] += acc


class Param:
    """A learnable tensor with its gradient and Adam moment state."""

    __slots__ = ("name", "data", "grad", "m", "v", "step")

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.data = data
        self.grad = np.zeros_like(data)
        self.m = np.zeros_like(data)
        self.v = np.zeros_like(data)
        self.step = 0

    def zero_grad(self):
        self.grad[...] = 0.0


def _uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    """Base: layers expose params() plus forward/backward."""

    def params(self) -> list[Param]:
        return []


class Conv2d(Layer):
    """Cross-correlation with same-size padding by default (pad = k // 2).

    Float32 stride-1 convolutions run through direct stencil kernels (no
    im2col materialization; input planes stay cache-resident). Other dtypes
    and strides use an im2col GEMM path with identical semantics; gradient
    checks run the latter in float64.
    """

    def __init__(
        self, cin, cout, kernel, stride=1, pad=None, *, rng, name, dtype=np.float32, input_grad=True
    ):
        self.cin, self.cout, self.k = cin, cout, kernel
        self.stride = stride
        self.pad = kernel // 2 if pad is None else pad
        self.input_grad = input_grad  # False for convs fed by raw images
        self.weight = Param(f"{name}.w", _uniform_init(rng, (cout, cin, kernel, kernel), cin * kernel * kernel, dtype))
        self.bias = Param(f"{name}.b", np.zeros(cout, dtype=dtype))
        self._cols = None
        self._xp = None
        self._xshape = None

    def params(self):
        return [self.weight, self.bias]

    def _use_stencil(self, x: np.ndarray) -> bool:
        return (
            HAVE_NUMBA
            and self.stride == 1
            and x.dtype == np.float32
            and self.weight.data.dtype == np.float32
        )

    def _im2col(self, xp: np.ndarray, ho: int, wo: int) -> np.ndarray:
        n, c = xp.shape[0], xp.shape[1]
        k, s = self.k, self.stride
        st = xp.strides
        view = np.lib.stride_tricks.as_strided(
            xp,
            shape=(n, ho, wo, c, k, k),
            strides=(st[0], st[2] * s, st[3] * s, st[1], st[2], st[3]),
        )
        return np.ascontiguousarray(view).reshape(n * ho * wo, c * k * k)

    def forward(self, x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        if c != self.cin:
            raise ValueError(f"expected {self.cin} input channels, got {c}")
        k, s, p = self.k, self.stride, self.pad
        ho = (h + 2 * p - k) // s + 1
        wo = (w + 2 * p - k) // s + 1
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else np.ascontiguousarray(x)
        self._xshape = (n, c, h, w, ho, wo)
        if self._use_stencil(x):
            out = np.zeros((n, self.cout, ho, wo), dtype=np.float32)
            _conv_fw_f32(xp, self.weight.data, out)
            out += self.bias.data[None, :, None, None]
            self._xp, self._cols = xp, None
            return out
        cols = self._im2col(xp, ho, wo)
        out2d = cols @ self.weight.data.reshape(self.cout, -1).T
        out2d += self.bias.data[None, :]
        self._cols, self._xp = cols, None
        return np.ascontiguousarray(out2d.reshape(n, ho, wo, self.cout).transpose(0, 3, 1, 2))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        n, c, h, w, ho, wo = self._xshape
        k, s, p = self.k, self.stride, self.pad
        if self._xp is not None:
            dy = np.ascontiguousarray(dy, dtype=np.float32)
            self.bias.grad += dy.sum(axis=(0, 2, 3))
            _conv_dw_f32(self._xp, dy, self.weight.grad)
            self._xp = None
            if not self.input_grad:
                return None
            # dx is a full convolution of dy with the flipped, transposed
            # kernel: reuse the forward stencil on re-padded dy.
            pd = k - 1 - p
            dyp = np.pad(dy, ((0, 0), (0, 0), (pd, pd), (pd, pd))) if pd else dy
            wr = np.ascontiguousarray(self.weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            dx = np.zeros((n, c, h, w), dtype=np.float32)
            _conv_fw_f32(dyp, wr, dx)
            return dx
        dy2d = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(n * ho * wo, self.cout)
        self.bias.grad += dy2d.sum(axis=0)
        dw2d = self._cols.T @ dy2d
        self.weight.grad += dw2d.T.reshape(self.weight.data.shape)
        if not self.input_grad:
            self._cols = None
            return None
        # Input gradient: GEMM directly into a (C, k, k, N*Ho*Wo) layout so
        # each tap slice is a run of contiguous blocks, then scatter-add taps
        # into a channel-first padded buffer and transpose once at the end.
        dcols_t = self.weight.data.reshape(self.cout, -1).T @ dy2d.T
        dcols_t = dcols_t.reshape(c, k, k, n, ho, wo)
        dxp = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + ho * s : s, j : j + wo * s : s] += dcols_t[:, i, j]
        dx = dxp[:, :, p : p + h, p : p + w] if p else dxp
        self._cols = None
        return np.ascontiguousarray(dx.transpose(1, 0, 2, 3))


class GroupNorm(Layer):
    """Per-sample, per-group normalization with a per-channel affine."""

    def __init__(self, channels, groups, eps=1e-5, *, name, dtype=np.float32):
        if channels % groups:
            raise ValueError(f"channels {channels} not divisible by groups {groups}")
        self.c, self.g, self.eps = channels, groups, eps
        self.gamma = Param(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = Param(f"{name}.beta", np.zeros(channels, dtype=dtype))
        self._cache = None

    def params(self):
        return [self.gamma, self.beta]

    def forward(self, x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        xg = x.reshape(n, self.g, -1)
        cnt = xg.shape[2]
        s1 = xg.sum(axis=2)
        s2 = np.einsum("ngk,ngk->ng", xg, xg)
        mu = s1 / cnt
        var = np.maximum(s2 / cnt - mu * mu, 0.0)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = ((xg - mu[:, :, None]) * inv[:, :, None]).reshape(n, c, h, w)
        self._cache = (xhat, inv)
        return xhat * self.gamma.data[None, :, None, None] + self.beta.data[None, :, None, None]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xhat, inv = self._cache
        n, c, h, w = dy.shape
        self.gamma.grad += np.einsum("nchw,nchw->c", dy, xhat)
        self.beta.grad += dy.sum(axis=(0, 2, 3))
        dxhat = dy * self.gamma.data[None, :, None, None]
        dg = dxhat.reshape(n, self.g, -1)
        xg = xhat.reshape(n, self.g, -1)
        cnt = dg.shape[2]
        sum_d = dg.sum(axis=2, keepdims=True)
        sum_dx = np.einsum("ngk,ngk->ng", dg, xg)[:, :, None]
        dx = (dg - sum_d / cnt - xg * (sum_dx / cnt)) * inv[:, :, None]
        self._cache = None
        return dx.reshape(n, c, h, w)


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dy):
        out = dy * self._mask
        self._mask = None
        return out


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class MaxPool2(Layer):
    """2x2 max pooling with stride 2; ties route to the first occurrence."""

    def forward(self, x):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"spatial dims must be even for 2x2 pooling, got {h}x{w}")
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        self._argmax = win.argmax(axis=4)
        self._inshape = (n, c, h, w)
        return np.take_along_axis(win, self._argmax[..., None], axis=4)[..., 0]

    def backward(self, dy):
        n, c, h, w = self._inshape
        dwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=dy.dtype)
        np.put_along_axis(dwin, self._argmax[..., None], dy[..., None], axis=4)
        dx = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        self._argmax = None
        return np.ascontiguousarray(dx)


class GlobalAvgPool(Layer):
    """(N, C, H, W) -> (N, C) spatial mean."""

    def forward(self, x):
        self._inshape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dy):
        n, c, h, w = self._inshape
        return np.broadcast_to(dy[:, :, None, None] / (h * w), (n, c, h, w)).astype(dy.dtype)


class Linear(Layer):
    def __init__(self, cin, cout, *, rng, name, dtype=np.float32):
        self.weight = Param(f"{name}.w", _uniform_init(rng, (cout, cin), cin, dtype))
        self.bias = Param(f"{name}.b", np.zeros(cout, dtype=dtype))

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x):
        self._x = x
        return x @ self.weight.data.T + self.bias.data[None, :]

    def backward(self, dy):
        self.weight.grad += dy.T @ self._x
        self.bias.grad += dy.sum(axis=0)
        dx = dy @ self.weight.data
        self._x = None
        return dx


class SEBlock(Layer):
    """Squeeze-excite: global pool, bottleneck FC pair, sigmoid channel gate."""

    def __init__(self, channels, reduction=4, *, rng, name, dtype=np.float32):
        if channels % reduction:
            raise ValueError(f"channels {channels} not divisible by reduction {reduction}")
        self.fc1 = Linear(channels, channels // reduction, rng=rng, name=f"{name}.fc1", dtype=dtype)
        self.fc2 = Linear(channels // reduction, channels, rng=rng, name=f"{name}.fc2", dtype=dtype)

    def params(self):
        return self.fc1.params() + self.fc2.params()

    def forward(self, x):
        n, c, h, w = x.shape
        squeezed = x.mean(axis=(2, 3))
        z1 = self.fc1.forward(squeezed)
        h1 = np.maximum(z1, 0.0)
        self._relu_mask = z1 > 0
        gate = sigmoid(self.fc2.forward(h1))
        self._x, self._gate = x, gate
        return x * gate[:, :, None, None]

    def backward(self, dy):
        x, gate = self._x, self._gate
        n, c, h, w = x.shape
        dgate = np.einsum("nchw,nchw->nc", dy, x)
        dz2 = dgate * gate * (1.0 - gate)
        dh1 = self.fc2.backward(dz2)
        dz1 = dh1 * self._relu_mask
        dsq = self.fc1.backward(dz1)
        dx = dy * gate[:, :, None, None]
        dx += (dsq / (h * w))[:, :, None, None]
        self._x = self._gate = self._relu_mask = None
        return dx

    def gate_values(self, x):
        """Excitation weights alone, for inspection."""
        h1 = np.maximum(self.fc1.forward(x.mean(axis=(2, 3))), 0.0)
        return sigmoid(self.fc2.forward(h1))


def softmax(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(y: np.ndarray, dy: np.ndarray, axis: int) -> np.ndarray:
    inner = (dy * y).sum(axis=axis, keepdims=True)
    return y * (dy - inner)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def adam_step(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-4):
    """Classic Adam with L2-in-gradient weight decay and bias correction."""
    for p in params:
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.data
        p.step += 1
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * g * g
        mhat = p.m / (1.0 - beta1 ** p.step)
        vhat = p.v / (1.0 - beta2 ** p.step)
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)


# ---------------------------------------------------------------------------
# Checkpoint format: magic "AFN1", length-prefixed UTF-8 JSON config, then a
# u32-counted section of named parameter tensors, then a u32-counted section
# of optimizer moments in the same (name length, name, u32 rank, dims,
# float32 payload) layout. Moment entries are "<param>.m", "<param>.v", and a
# rank-0 "<param>.step".
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"AFN1"


def _write_tensor(fh, name: str, arr: np.ndarray):
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    arr = np.asarray(arr, dtype="<f4")  # keeps rank-0 scalars rank 0
    if arr.ndim:
        arr = np.ascontiguousarray(arr)
    fh.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(arr.tobytes())


def _read_tensor(fh):
    raw = fh.read(4)
    if len(raw) != 4:
        raise DataError("truncated checkpoint (tensor name length)")
    (nlen,) = struct.unpack("<I", raw)
    name = fh.read(nlen).decode("utf-8")
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(rank))
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = fh.read(count * 4)
    if len(payload) != count * 4:
        raise DataError(f"truncated checkpoint payload for {name!r}")
    arr = np.frombuffer(payload, dtype="<f4")
    return name, (arr.reshape(shape).copy() if rank else np.float32(arr[0]))


def save_checkpoint(path, config: dict, params) -> None:
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        blob = json.dumps(config, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            _write_tensor(fh, p.name, p.data)
        fh.write(struct.pack("<I", 3 * len(params)))
        for p in params:
            _write_tensor(fh, p.name + ".m", p.m)
            _write_tensor(fh, p.name + ".v", p.v)
            _write_tensor(fh, p.name + ".step", np.float32(p.step))


def load_checkpoint(path) -> tuple[dict, dict, dict]:
    """Returns (config, {name: tensor}, {moment_name: tensor})."""
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise DataError(f"not a checkpoint file: {path}")
        (blen,) = struct.unpack("<I", fh.read(4))
        config = json.loads(fh.read(blen).decode("utf-8"))
        (nparams,) = struct.unpack("<I", fh.read(4))
        tensors = dict(_read_tensor(fh) for _ in range(nparams))
        (nmoments,) = struct.unpack("<I", fh.read(4))
        moments = dict(_read_tensor(fh) for _ in range(nmoments))
    return config, tensors, moments


def restore_params(params, tensors: dict, moments: dict | None = None) -> None:
    for p in params:
        if p.name not in tensors:
            raise DataError(f"checkpoint missing parameter {p.name!r}")
        saved = tensors[p.name]
        if saved.shape != p.data.shape:
            raise DataError(f"shape mismatch for {p.name!r}: {saved.shape} vs {p.data.shape}")
        p.data[...] = saved
        if moments:
            p.m[...] = moments[p.name + ".m"]
            p.v[...] = moments[p.name + ".v"]
            p.step = int(moments[p.name + ".step"])


def check_finite(arr: np.ndarray, context: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericalError(f"non-finite values in {context}")
