"""Minimal numpy layer engine with explicit forward/backward passes.

Every layer caches what its backward pass needs; parameters and their
gradients are flat dicts of named arrays, so optimizers and checkpoints
stay simple and bit-reproducible.  float32 is the training default;
float64 is used by the gradient-check tests.
"""

from __future__ import annotations

import numpy as np


class Layer:
    """Base layer: stateless unless it declares params/buffers."""

    name = "layer"

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def grads(self) -> dict[str, np.ndarray]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def zero_grads(self) -> None:
        for g in self.grads().values():
            g[...] = 0.0


def _he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
               dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Layer):
    """2-D convolution with 'same' zero padding (stride 1) or explicit stride."""

    def __init__(self, in_ch: int, out_ch: int, kernel: tuple[int, int],
                 stride: int = 1, rng: np.random.Generator | None = None,
                 dtype=np.float32, name: str = "conv"):
        kh, kw = kernel
        rng = rng or np.random.default_rng(0)
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kh, self.kw, self.stride = kh, kw, stride
        self.name = name
        fan_in = in_ch * kh * kw
        self.w = _he_normal(rng, (out_ch, in_ch, kh, kw), fan_in, dtype)
        self.b = np.zeros(out_ch, dtype=dtype)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._cache = None

    def params(self):
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}

    def grads(self):
        return {f"{self.name}.w": self.dw, f"{self.name}.b": self.db}

    def _pad(self):
        return (self.kh - 1) // 2, self.kh // 2, (self.kw - 1) // 2, self.kw // 2

    def forward(self, x, train=True):
        n, c, h, w = x.shape
        if c != self.in_ch:
            raise ValueError(f"{self.name}: expected {self.in_ch} input channels, got {c}")
        pt, pb, pl, pr = self._pad()
        xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
        s = self.stride
        ho = (h + pt + pb - self.kh) // s + 1
        wo = (w + pl + pr - self.kw) // s + 1
        win = np.lib.stride_tricks.sliding_window_view(xp, (self.kh, self.kw), axis=(2, 3))
        win = win[:, :, ::s, ::s][:, :, :ho, :wo]      # (n, c, ho, wo, kh, kw)
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, -1)
        wmat = self.w.reshape(self.out_ch, -1)
        y = cols @ wmat.T + self.b
        y = y.reshape(n, ho, wo, self.out_ch).transpose(0, 3, 1, 2)
        self._cache = (cols, x.shape, xp.shape, ho, wo)
        return np.ascontiguousarray(y)

    def backward(self, dy):
        cols, x_shape, xp_shape, ho, wo = self._cache
        n = x_shape[0]
        dy_mat = dy.transpose(0, 2, 3, 1).reshape(n * ho * wo, self.out_ch)
        self.dw += (dy_mat.T @ cols).reshape(self.w.shape)
        self.db += dy_mat.sum(axis=0)
        dcols = dy_mat @ self.w.reshape(self.out_ch, -1)
        dcols = dcols.reshape(n, ho, wo, self.in_ch, self.kh, self.kw)
        dxp = np.zeros(xp_shape, dtype=dy.dtype)
        s = self.stride
        for i in range(self.kh):
            for j in range(self.kw):
                dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        pt, pb, pl, pr = self._pad()
        h, w = x_shape[2], x_shape[3]
        return dxp[:, :, pt:pt + h, pl:pl + w]


class BatchNorm2d(Layer):
    """Per-channel batch normalization with running statistics."""

    def __init__(self, ch: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float32, name: str = "bn"):
        self.ch = ch
        self.momentum = momentum
        self.eps = eps
        self.name = name
        self.gamma = np.ones(ch, dtype=dtype)
        self.beta = np.zeros(ch, dtype=dtype)
        self.dgamma = np.zeros_like(self.gamma)
        self.dbeta = np.zeros_like(self.beta)
        self.running_mean = np.zeros(ch, dtype=dtype)
        self.running_var = np.ones(ch, dtype=dtype)
        self._cache = None

    def params(self):
        return {f"{self.name}.gamma": self.gamma, f"{self.name}.beta": self.beta}

    def grads(self):
        return {f"{self.name}.gamma": self.dgamma, f"{self.name}.beta": self.dbeta}

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}

    def forward(self, x, train=True):
        if train:
            axes = (0, 2, 3)
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            count = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * count / max(count - 1, 1)
            self.running_mean += self.momentum * (mean.astype(self.running_mean.dtype)
                                                  - self.running_mean)
            self.running_var += self.momentum * (unbiased.astype(self.running_var.dtype)
                                                 - self.running_var)
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[:, None, None]) * inv_std[:, None, None]
        self._cache = (xhat, inv_std, train, x.shape)
        return self.gamma[:, None, None] * xhat + self.beta[:, None, None]

    def backward(self, dy):
        xhat, inv_std, train, x_shape = self._cache
        axes = (0, 2, 3)
        self.dgamma += (dy * xhat).sum(axis=axes)
        self.dbeta += dy.sum(axis=axes)
        g = dy * self.gamma[:, None, None]
        if not train:
            return g * inv_std[:, None, None]
        m = x_shape[0] * x_shape[2] * x_shape[3]
        dxhat_sum = g.sum(axis=axes)
        dxhat_xhat_sum = (g * xhat).sum(axis=axes)
        return (inv_std[:, None, None] / m) * (
            m * g - dxhat_sum[:, None, None] - xhat * dxhat_xhat_sum[:, None, None])


class ReLU(Layer):
    def __init__(self, name: str = "relu"):
        self.name = name
        self._mask = None

    def forward(self, x, train=True):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class MaxPool2d(Layer):
    """k x k max pooling with stride k; trailing rows/cols are dropped."""

    def __init__(self, k: int = 2, name: str = "pool"):
        self.k = k
        self.name = name
        self._cache = None

    def forward(self, x, train=True):
        n, c, h, w = x.shape
        k = self.k
        ho, wo = h // k, w // k
        win = x[:, :, :ho * k, :wo * k].reshape(n, c, ho, k, wo, k)
        win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
        arg = win.argmax(axis=-1)
        y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        self._cache = (arg, x.shape)
        return y

    def backward(self, dy):
        arg, x_shape = self._cache
        n, c, h, w = x_shape
        k = self.k
        ho, wo = h // k, w // k
        dwin = np.zeros((n, c, ho, wo, k * k), dtype=dy.dtype)
        np.put_along_axis(dwin, arg[..., None], dy[..., None], axis=-1)
        dx = np.zeros(x_shape, dtype=dy.dtype)
        dx[:, :, :ho * k, :wo * k] = (dwin.reshape(n, c, ho, wo, k, k)
                                      .transpose(0, 1, 2, 4, 3, 5)
                                      .reshape(n, c, ho * k, wo * k))
        return dx


class GlobalAvgPool2d(Layer):
    """(n, c, h, w) -> (n, c) mean over the spatial axes."""

    def __init__(self, name: str = "gap"):
        self.name = name
        self._shape = None

    def forward(self, x, train=True):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dy):
        n, c, h, w = self._shape
        return np.broadcast_to(dy[:, :, None, None], self._shape) / (h * w)


class Linear(Layer):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None,
                 dtype=np.float32, name: str = "fc"):
        rng = rng or np.random.default_rng(0)
        self.name = name
        self.w = _he_normal(rng, (out_dim, in_dim), in_dim, dtype)
        self.b = np.zeros(out_dim, dtype=dtype)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._x = None

    def params(self):
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}

    def grads(self):
        return {f"{self.name}.w": self.dw, f"{self.name}.b": self.db}

    def forward(self, x, train=True):
        self._x = x
        return x @ self.w.T + self.b

    def backward(self, dy):
        self.dw += dy.T @ self._x
        self.db += dy.sum(axis=0)
        return dy @ self.w


class GradientReversal(Layer):
    """Identity forward; backward scales the gradient by -lambda."""

    def __init__(self, lam: float = 1.0, name: str = "grl"):
        self.lam = float(lam)
        self.name = name

    def forward(self, x, train=True):
        return x

    def backward(self, dy):
        return -self.lam * dy


def grl(x: np.ndarray, lam: float) -> np.ndarray:
    """Functional form of the reversal layer's forward pass (the identity)."""
    return x


def grl_backward(dy: np.ndarray, lam: float) -> np.ndarray:
    """Gradient rule of the reversal layer: upstream grad is -lambda * dy."""
    return -float(lam) * dy


class Sequential(Layer):
    def __init__(self, layers: list[Layer], name: str = ""):
        self.layers = layers
        self.name = name

    def _key(self, sub: str) -> str:
        return f"{self.name}.{sub}" if self.name else sub

    def forward(self, x, train=True):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def params(self):
        out = {}
        for layer in self.layers:
            out.update({self._key(k): v for k, v in layer.params().items()})
        return out

    def grads(self):
        out = {}
        for layer in self.layers:
            out.update({self._key(k): v for k, v in layer.grads().items()})
        return out

    def buffers(self):
        out = {}
        for layer in self.layers:
            out.update({self._key(k): v for k, v in layer.buffers().items()})
        return out


class ResidualBlock(Layer):
    """conv-bn-relu-conv-bn plus a skip path, then ReLU.

    The skip is the identity when channel counts match, otherwise a 1x1
    projection conv with its own batch norm.
    """

    def __init__(self, in_ch: int, out_ch: int, kernels: tuple[int, int],
                 rng: np.random.Generator | None = None, dtype=np.float32,
                 name: str = "block"):
        rng = rng or np.random.default_rng(0)
        self.name = name
        k1, k2 = kernels
        self.main = Sequential([
            Conv2d(in_ch, out_ch, (k1, k1), rng=rng, dtype=dtype, name="conv1"),
            BatchNorm2d(out_ch, dtype=dtype, name="bn1"),
            ReLU(name="relu1"),
            Conv2d(out_ch, out_ch, (k2, k2), rng=rng, dtype=dtype, name="conv2"),
            BatchNorm2d(out_ch, dtype=dtype, name="bn2"),
        ], name=f"{name}.main")
        if in_ch != out_ch:
            self.skip = Sequential([
                Conv2d(in_ch, out_ch, (1, 1), rng=rng, dtype=dtype, name="conv"),
                BatchNorm2d(out_ch, dtype=dtype, name="bn"),
            ], name=f"{name}.skip")
        else:
            self.skip = None
        self.out_relu = ReLU(name=f"{name}.relu_out")

    def forward(self, x, train=True):
        main = self.main.forward(x, train)
        skip = self.skip.forward(x, train) if self.skip is not None else x
        return self.out_relu.forward(main + skip, train)

    def backward(self, dy):
        d_sum = self.out_relu.backward(dy)
        dx = self.main.backward(d_sum)
        if self.skip is not None:
            dx = dx + self.skip.backward(d_sum)
        else:
            dx = dx + d_sum
        return dx

    def _subs(self):
        return [self.main] + ([self.skip] if self.skip is not None else [])

    def params(self):
        out = {}
        for sub in self._subs():
            out.update(sub.params())
        return out

    def grads(self):
        out = {}
        for sub in self._subs():
            out.update(sub.grads())
        return out

    def buffers(self):
        out = {}
        for sub in self._subs():
            out.update(sub.buffers())
        return out


# ---------------------------------------------------------------------------
# Losses


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all elements; returns (loss, dloss/dpred)."""
    diff = pred - target
    loss = float(np.mean(diff * diff))
    return loss, (2.0 / diff.size) * diff.astype(pred.dtype)


def bce_with_logits(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Numerically stable binary cross-entropy on logits; mean reduction."""
    z = logits.astype(np.float64)
    y = labels.astype(np.float64)
    loss = float(np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))))
    sig = 1.0 / (1.0 + np.exp(-z))
    return loss, ((sig - y) / z.size).astype(logits.dtype)


# ---------------------------------------------------------------------------
# Optimization


class Adam:
    """Standard Adam with bias correction; updates parameters in place."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m += (1.0 - self.b1) * (g - m)
            v += (1.0 - self.b2) * (g * g - v)
            p -= (self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.dtype)


class MultiStepLR:
    """lr(epoch) = base * decay^(number of milestones <= epoch)."""

    def __init__(self, base_lr: float, milestones: tuple[int, ...] = (),
                 decay: float = 0.1):
        if list(milestones) != sorted(set(milestones)):
            raise ValueError("milestones must be strictly increasing")
        if not (0.0 < decay < 1.0):
            raise ValueError("decay must lie in (0, 1)")
        self.base_lr = base_lr
        self.milestones = tuple(milestones)
        self.decay = decay

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for m in self.milestones if m <= epoch)
        return self.base_lr * (self.decay ** drops)


def numeric_gradient(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, elementwise in x."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
