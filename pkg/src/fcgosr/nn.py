"""A small layer-chain network engine in double precision numpy.

Every layer caches what it needs during ``forward`` and returns the input
gradient from ``backward`` while storing parameter gradients in ``grads``.
Losses return ``(value, gradient w.r.t. their input)``.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(None if seed is None else int(seed) & 0xFFFFFFFFFFFFFFFF)


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray, train: bool, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def config(self) -> dict:
        return {}

    def describe(self) -> str:
        return self.kind


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in: int, n_out: int, rng=None, init: str = "he"):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        if init == "zeros":
            w = np.zeros((n_in, n_out))
        else:
            w = _rng(rng).normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out))
        self.params = {"W": w, "b": np.zeros(n_out)}

    def forward(self, x, train, rng):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"{self.describe()} expects (N, {self.n_in}), got {x.shape}")
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, g):
        self.grads = {"W": self._x.T @ g, "b": g.sum(axis=0)}
        return g @ self.params["W"].T

    def config(self):
        return {"n_in": self.n_in, "n_out": self.n_out}

    def describe(self):
        return f"dense({self.n_in},{self.n_out})"


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train, rng):
        self._mask = x > 0
        return x * self._mask

    def backward(self, g):
        return g * self._mask


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, train, rng):
        # tanh form never overflows
        self._y = 0.5 * (1.0 + np.tanh(0.5 * x))
        return self._y

    def backward(self, g):
        return g * self._y * (1.0 - self._y)


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)`` in training."""

    kind = "dropout"

    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.rate = rate

    def forward(self, x, train, rng):
        if not train or self.rate == 0.0:
            self._scale = None
            return x
        keep = rng.random(x.shape) >= self.rate
        self._scale = keep / (1.0 - self.rate)
        return x * self._scale

    def backward(self, g):
        return g if self._scale is None else g * self._scale

    def config(self):
        return {"rate": self.rate}

    def describe(self):
        return f"dropout({self.rate})"


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train, rng):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g):
        return g.reshape(self._shape)


class Reshape(Layer):
    kind = "reshape"

    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(int(s) for s in shape)

    def forward(self, x, train, rng):
        self._shape = x.shape
        if int(np.prod(x.shape[1:])) != int(np.prod(self.shape)):
            raise ShapeError(f"{self.describe()} cannot take input {x.shape}")
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, g):
        return g.reshape(self._shape)

    def config(self):
        return {"shape": list(self.shape)}

    def describe(self):
        return f"reshape{self.shape}"


class Conv2D(Layer):
    """Stride-1 2-D convolution over ``(N, C, H, W)`` inputs with zero padding."""

    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3,
                 padding: int = 1, rng=None):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.padding = kernel, padding
        fan_in = in_channels * kernel * kernel
        self.params = {
            "W": _rng(rng).normal(0.0, np.sqrt(2.0 / fan_in),
                                  size=(out_channels, in_channels, kernel, kernel)),
            "b": np.zeros(out_channels),
        }

    def forward(self, x, train, rng):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"{self.describe()} expects (N, {self.in_channels}, H, W), got {x.shape}")
        p = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        self._xshape = x.shape
        self._win = sliding_window_view(xp, (self.kernel, self.kernel), axis=(2, 3))
        out = np.einsum("nchwij,ocij->nohw", self._win, self.params["W"], optimize=True)
        return out + self.params["b"][None, :, None, None]

    def backward(self, g):
        k, p = self.kernel, self.padding
        w = self.params["W"]
        self.grads = {
            "W": np.einsum("nchwij,nohw->ocij", self._win, g, optimize=True),
            "b": g.sum(axis=(0, 2, 3)),
        }
        n, c, h, wd = self._xshape
        ho, wo = g.shape[2], g.shape[3]
        dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + ho, j:j + wo] += np.einsum("nohw,oc->nchw", g, w[:, :, i, j])
        return dxp[:, :, p:p + h, p:p + wd]

    def config(self):
        return {"in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel": self.kernel, "padding": self.padding}

    def describe(self):
        return f"conv2d({self.in_channels},{self.out_channels},k={self.kernel})"


class MaxPool2D(Layer):
    kind = "maxpool2d"

    def __init__(self, kernel: int = 3, stride: int = 2):
        super().__init__()
        self.kernel, self.stride = kernel, stride

    def forward(self, x, train, rng):
        if x.ndim != 4:
            raise ShapeError(f"{self.describe()} expects a 4-D input, got {x.shape}")
        k, s = self.kernel, self.stride
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        flat = win.reshape(win.shape[:4] + (k * k,))
        self._idx = flat.argmax(axis=-1)
        self._xshape = x.shape
        return np.take_along_axis(flat, self._idx[..., None], axis=-1)[..., 0]

    def backward(self, g):
        k, s = self.kernel, self.stride
        dx = np.zeros(self._xshape)
        ho, wo = g.shape[2], g.shape[3]
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += g * (self._idx == i * k + j)
        return dx

    def config(self):
        return {"kernel": self.kernel, "stride": self.stride}

    def describe(self):
        return f"maxpool2d(k={self.kernel},s={self.stride})"


LAYER_TYPES = {cls.kind: cls for cls in (Dense, ReLU, Sigmoid, Dropout, Flatten, Reshape, Conv2D, MaxPool2D)}


class Sequential:
    """A chain of layers evaluated in order."""

    def __init__(self, layers: list[Layer]):
        self.layers = list(layers)
        self.activations: list[np.ndarray] = []

    def __add__(self, other: "Sequential") -> "Sequential":
        return Sequential(self.layers + other.layers)

    def forward(self, x, mode: str = "eval", seed=None) -> np.ndarray:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        rng = _rng(seed)
        train = mode == "train"
        acts = [x]
        for layer in self.layers:
            x = layer.forward(x, train, rng)
            acts.append(x)
        self.activations = acts
        return x

    def backward(self, g: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def named_params(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params.items():
                out[f"{prefix}{i}.{k}"] = v
        return out

    def named_grads(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for k in layer.params:
                out[f"{prefix}{i}.{k}"] = layer.grads[k]
        return out

    def output_dim(self, input_shape) -> tuple[int, ...]:
        x = np.zeros((1,) + tuple(input_shape))
        return self.forward(x, "eval").shape[1:]


def forward(net: Sequential, batch: np.ndarray, mode: str = "eval", seed=None) -> list[np.ndarray]:
    """Run ``net`` and return every intermediate activation, input first, output last."""
    net.forward(batch, mode, seed)
    return list(net.activations)


# losses ---------------------------------------------------------------------

def dtae_loss_with_grad(originals: np.ndarray, reconstructions) -> tuple[float, np.ndarray]:
    """Half the summed squared error between each original and every view's reconstruction.

    ``reconstructions`` has shape ``(M, N, ...)``; the gradient has the same shape.
    """
    x = np.asarray(originals, dtype=np.float64)
    xh = np.asarray(reconstructions, dtype=np.float64)
    if xh.ndim == x.ndim:
        xh = xh[None]
    if xh.shape[1:] != x.shape or xh.shape[0] < 1:
        raise ShapeError(f"reconstructions {xh.shape} do not match originals {x.shape}")
    diff = xh - x[None]
    return 0.5 * float(np.sum(diff * diff)), diff


def dtae_loss(originals, reconstructions) -> float:
    return dtae_loss_with_grad(originals, reconstructions)[0]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_with_grad(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(log_norm - z[np.arange(n), labels]))
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def cross_entropy_loss(logits, labels) -> float:
    return cross_entropy_with_grad(logits, labels)[0]


class DegenerateBatchError(ValueError):
    pass


def triplet_hinges(reps: np.ndarray, labels, margin: float) -> np.ndarray:
    """Hinge value ``d(a,p)^2 - d(a,n)^2 + margin`` for every valid triplet, NaN elsewhere."""
    reps = np.asarray(reps, dtype=np.float64)
    labels = np.asarray(labels)
    sq = np.sum((reps[:, None, :] - reps[None, :, :]) ** 2, axis=-1)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    valid = pos[:, :, None] & ~same[:, None, :]
    h = sq[:, :, None] - sq[:, None, :] + margin
    return np.where(valid, h, np.nan)


def triplet_with_grad(reps: np.ndarray, labels, margin: float = 0.5) -> tuple[float, np.ndarray]:
    """Batch-all triplet loss averaged over the triplets with positive hinge."""
    reps = np.asarray(reps, dtype=np.float64)
    h = triplet_hinges(reps, labels, margin)
    valid = ~np.isnan(h)
    if not valid.any():
        raise DegenerateBatchError("batch has no (anchor, positive, negative) triplet")
    active = valid & (h > 0)
    count = int(active.sum())
    if count == 0:
        return 0.0, np.zeros_like(reps)
    loss = float(h[active].sum()) / count
    w = active.astype(np.float64) / count
    # loss = sum A_ap[a,p] |r_a - r_p|^2 - sum A_an[a,n] |r_a - r_n|^2 (+ const)
    w_ap = w.sum(axis=2)
    w_an = w.sum(axis=1)

    def pair_grad(a):
        return (a.sum(1) + a.sum(0))[:, None] * reps - (a + a.T) @ reps

    return loss, 2.0 * (pair_grad(w_ap) - pair_grad(w_an))


def triplet_loss(reps, labels, margin: float = 0.5) -> float:
    return triplet_with_grad(reps, labels, margin)[0]


# optimisation ---------------------------------------------------------------

class Adam:
    def __init__(self, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {name}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


LossFn = Callable[[np.ndarray], tuple[float, np.ndarray]]


def backward_and_step(net: Sequential, loss_grad: np.ndarray, adam: Adam, prefix: str = "") -> None:
    """Backpropagate ``loss_grad`` (d loss / d output of the last forward) and apply one Adam step."""
    net.backward(loss_grad)
    adam.step(net.named_params(prefix), net.named_grads(prefix))


def grad_check(net: Sequential, loss_fn: LossFn, batch: np.ndarray, eps: float = 1e-5,
               num_params: int = 100, seed: int = 0, mode: str = "eval",
               forward_seed: int = 0) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``num_params`` entries are sampled without replacement across all parameter
    tensors (all of them if there are fewer). Train mode is allowed because
    the dropout mask is a fixed function of ``forward_seed``.
    """
    out = net.forward(batch, mode, forward_seed)
    _, g = loss_fn(out)
    net.backward(g)
    params = net.named_params()
    grads = {k: v.copy() for k, v in net.named_grads().items()}
    slots = [(k, i) for k, p in params.items() for i in range(p.size)]
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(slots), size=min(num_params, len(slots)), replace=False)
    worst = 0.0
    for s in pick:
        k, i = slots[s]
        p = params[k].reshape(-1)
        old = p[i]
        p[i] = old + eps
        lp = loss_fn(net.forward(batch, mode, forward_seed))[0]
        p[i] = old - eps
        lm = loss_fn(net.forward(batch, mode, forward_seed))[0]
        p[i] = old
        num = (lp - lm) / (2.0 * eps)
        ana = grads[k].reshape(-1)[i]
        worst = max(worst, abs(ana - num) / max(1e-8, abs(ana) + abs(num)))
    return worst


def input_grad_check(net: Sequential, loss_fn: LossFn, batch: np.ndarray, eps: float = 1e-5,
                     num_entries: int = 100, seed: int = 0, mode: str = "eval",
                     forward_seed: int = 0) -> float:
    """Like :func:`grad_check` but for the gradient with respect to the input batch."""
    batch = np.array(batch, dtype=np.float64)
    out = net.forward(batch, mode, forward_seed)
    _, g = loss_fn(out)
    gin = net.backward(g).reshape(-1)
    flat = batch.reshape(-1)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in rng.choice(flat.size, size=min(num_entries, flat.size), replace=False):
        old = flat[i]
        flat[i] = old + eps
        lp = loss_fn(net.forward(batch, mode, forward_seed))[0]
        flat[i] = old - eps
        lm = loss_fn(net.forward(batch, mode, forward_seed))[0]
        flat[i] = old
        num = (lp - lm) / (2.0 * eps)
        worst = max(worst, abs(gin[i] - num) / max(1e-8, abs(gin[i]) + abs(num)))
    return worst


# serialisation helpers -------------------------------------------------------

def layer_to_dict(layer: Layer) -> dict:
    d = {"kind": layer.kind, "config": layer.config()}
    if layer.params:
        d["shape"] = list(layer.params["W"].shape)
        d["weights"] = layer.params["W"].reshape(-1).tolist()
        d["bias"] = layer.params["b"].tolist()
    return d


def layer_from_dict(d: dict) -> Layer:
    kind = d["kind"]
    if kind not in LAYER_TYPES:
        raise ValueError(f"unknown layer kind {kind!r}")
    cfg = d.get("config", {})
    if kind == "dense":
        layer = Dense(cfg["n_in"], cfg["n_out"], init="zeros")
    elif kind == "conv2d":
        layer = Conv2D(cfg["in_channels"], cfg["out_channels"], cfg["kernel"], cfg["padding"], rng=0)
    else:
        layer = LAYER_TYPES[kind](**cfg)
    if layer.params:
        shape = tuple(d["shape"])
        layer.params["W"] = np.asarray(d["weights"], dtype=np.float64).reshape(shape)
        layer.params["b"] = np.asarray(d["bias"], dtype=np.float64)
    return layer
