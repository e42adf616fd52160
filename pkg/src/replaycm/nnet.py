"""A small differentiable-network engine.

Only what the countermeasure CNN and the x-vector TDNN need: dense,
context (conv1d / tdnn) layers, batch norm, relu, tanh, additive Gaussian
noise, non-overlapping max pooling, statistics pooling and flatten; MSE and
softmax cross-entropy losses; Adam with early stopping.

Activations are laid out as (batch, time, channels) for sequence layers and
(batch, features) after pooling/flatten. Training runs in float64; trained
parameters are rounded to float32 so that a network and its checkpoint
score identically.
"""
import copy
import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels

log = logging.getLogger(__name__)

LAYER_KINDS = ("dense", "conv1d", "tdnn", "batch_norm", "relu", "tanh",
               "gaussian_noise", "max_pool1d", "stats_pool", "flatten")
CKPT_MAGIC = b"RDNET01"


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    """Raised when training produces a non-finite loss."""


class ModeError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# layers


class Layer:
    kind = ""
    has_l2 = False

    def __init__(self, **cfg):
        self.cfg = cfg
        self.params = {}
        self.buffers = {}

    def spec(self) -> dict:
        return {"kind": self.kind, **self.cfg}

    def build(self, in_shape, rng):
        return in_shape

    def forward(self, x, train, rng):
        """Return (y, cache). ``cache`` is only consumed by ``backward``."""
        raise NotImplementedError

    def backward(self, dy, cache):
        """Return (dx, {param_name: grad})."""
        raise NotImplementedError

    @property
    def l2(self) -> float:
        return float(self.cfg.get("l2", 0.0)) if self.has_l2 else 0.0

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.cfg.items())
        return f"{self.kind}({args})"


def _uniform_init(rng, fan_in, shape):
    lim = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-lim, lim, size=shape)


class Dense(Layer):
    kind = "dense"
    has_l2 = True

    def __init__(self, units, l2=0.0):
        super().__init__(units=int(units), l2=float(l2))

    def build(self, in_shape, rng):
        d_in = in_shape[-1]
        if d_in is None:
            raise ShapeError("dense needs a known input width")
        u = self.cfg["units"]
        self.params = {"W": _uniform_init(rng, d_in, (d_in, u)), "b": np.zeros(u)}
        return in_shape[:-1] + (u,)

    def forward(self, x, train, rng):
        W = self.params["W"]
        if x.shape[-1] != W.shape[0]:
            raise ShapeError(f"dense expects width {W.shape[0]}, got {x.shape[-1]}")
        return x @ W + self.params["b"], x

    def backward(self, dy, x):
        W = self.params["W"]
        x2 = x.reshape(-1, x.shape[-1])
        dy2 = dy.reshape(-1, dy.shape[-1])
        return dy @ W.T, {"W": x2.T @ dy2, "b": dy2.sum(axis=0)}


class Context(Layer):
    """Shared machinery for conv1d (same padding) and tdnn (valid, explicit offsets)."""

    has_l2 = True

    def offsets(self):
        raise NotImplementedError

    def _geometry(self, T):
        off = self.offsets()
        if self.cfg.get("padding", "valid") == "same":
            return 0, T
        start = -min(off)
        return start, T - (max(off) - min(off))

    def build(self, in_shape, rng):
        if len(in_shape) != 2:
            raise ShapeError(f"{self.kind} expects (time, channels) input, got {in_shape}")
        T, C = in_shape
        off = self.offsets()
        u = self._units()
        fan_in = len(off) * C
        self.params = {"W": _uniform_init(rng, fan_in, (fan_in, u)), "b": np.zeros(u)}
        if T is None:
            return (None, u)
        _, out_len = self._geometry(T)
        if out_len < 1:
            raise ShapeError(f"{self.kind}: input length {T} too short for context {off}")
        return (out_len, u)

    def forward(self, x, train, rng):
        B, T, C = x.shape
        W = self.params["W"]
        off = np.asarray(self.offsets(), dtype=np.int64)
        if len(off) * C != W.shape[0]:
            raise ShapeError(f"{self.kind} expects {W.shape[0] // len(off)} channels, got {C}")
        start, out_len = self._geometry(T)
        if out_len < 1:
            raise ShapeError(f"{self.kind}: input length {T} too short for context {off.tolist()}")
        U = kernels.context_unfold(x, off, start, out_len)
        return U @ W + self.params["b"], (U, T, start)

    def backward(self, dy, cache):
        U, T, start = cache
        W = self.params["W"]
        K = U.shape[-1]
        grads = {
            "W": U.reshape(-1, K).T @ dy.reshape(-1, dy.shape[-1]),
            "b": dy.sum(axis=(0, 1)),
        }
        dx = kernels.context_fold(dy @ W.T, np.asarray(self.offsets(), dtype=np.int64), start, T)
        return dx, grads


class Conv1D(Context):
    kind = "conv1d"

    def __init__(self, filters, kernel, dilation=1, padding="same", l2=0.0):
        if kernel < 1 or filters < 1:
            raise ValueError("conv1d needs kernel >= 1 and filters >= 1")
        if padding not in ("same", "valid"):
            raise ValueError("padding must be 'same' or 'valid'")
        super().__init__(filters=int(filters), kernel=int(kernel), dilation=int(dilation),
                         padding=padding, l2=float(l2))

    def _units(self):
        return self.cfg["filters"]

    def offsets(self):
        k, d = self.cfg["kernel"], self.cfg["dilation"]
        return [d * (i - (k - 1) // 2) for i in range(k)]


class TDNN(Context):
    kind = "tdnn"

    def __init__(self, units, context, l2=0.0):
        ctx = [int(c) for c in context]
        if not ctx or sorted(set(ctx)) != ctx:
            raise ValueError("tdnn context offsets must be distinct and increasing")
        super().__init__(units=int(units), context=ctx, padding="valid", l2=float(l2))

    def _units(self):
        return self.cfg["units"]

    def offsets(self):
        return self.cfg["context"]


class BatchNorm(Layer):
    kind = "batch_norm"

    def __init__(self, momentum=0.99, eps=1e-5):
        super().__init__(momentum=float(momentum), eps=float(eps))

    def build(self, in_shape, rng):
        c = in_shape[-1]
        self.params = {"gamma": np.ones(c), "beta": np.zeros(c)}
        self.buffers = {"running_mean": np.zeros(c), "running_var": np.ones(c)}
        return in_shape

    def forward(self, x, train, rng):
        axes = tuple(range(x.ndim - 1))
        eps = self.cfg["eps"]
        if train:
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.cfg["momentum"]
            self.buffers["running_mean"] = m * self.buffers["running_mean"] + (1 - m) * mu
            self.buffers["running_var"] = m * self.buffers["running_var"] + (1 - m) * var
        else:
            mu, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu) * inv
        return self.params["gamma"] * xhat + self.params["beta"], (xhat, inv)

    def backward(self, dy, cache):
        xhat, inv = cache
        axes = tuple(range(dy.ndim - 1))
        n = dy.size // dy.shape[-1]
        dxhat = dy * self.params["gamma"]
        dx = (inv / n) * (n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        return dx, {"gamma": (dy * xhat).sum(axis=axes), "beta": dy.sum(axis=axes)}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train, rng):
        return np.maximum(x, 0.0), x > 0

    def backward(self, dy, mask):
        return dy * mask, {}


class Tanh(Layer):
    kind = "tanh"

    def forward(self, x, train, rng):
        y = np.tanh(x)
        return y, y

    def backward(self, dy, y):
        return dy * (1.0 - y * y), {}


class GaussianNoise(Layer):
    """Additive N(0, std^2) noise in training mode; identity at inference."""

    kind = "gaussian_noise"

    def __init__(self, std):
        if std < 0:
            raise ValueError("noise std must be >= 0")
        super().__init__(std=float(std))

    def forward(self, x, train, rng):
        std = self.cfg["std"]
        if train and std > 0:
            return x + rng.normal(0.0, std, size=x.shape), None
        return x, None

    def backward(self, dy, cache):
        return dy, {}


class MaxPool1D(Layer):
    kind = "max_pool1d"

    def __init__(self, pool=2, stride=None):
        stride = pool if stride is None else stride
        if stride != pool:
            raise ValueError("only non-overlapping pooling (stride == pool) is supported")
        super().__init__(pool=int(pool), stride=int(stride))

    def build(self, in_shape, rng):
        if len(in_shape) != 2:
            raise ShapeError(f"max_pool1d expects (time, channels), got {in_shape}")
        T, C = in_shape
        if T is None:
            return in_shape
        if T // self.cfg["pool"] < 1:
            raise ShapeError(f"max_pool1d: length {T} shorter than pool {self.cfg['pool']}")
        return (T // self.cfg["pool"], C)

    def forward(self, x, train, rng):
        if x.shape[1] // self.cfg["pool"] < 1:
            raise ShapeError(f"max_pool1d: length {x.shape[1]} shorter than pool")
        y, idx = kernels.maxpool_forward(x, self.cfg["pool"])
        return y, (idx, x.shape[1])

    def backward(self, dy, cache):
        idx, T = cache
        return kernels.maxpool_backward(dy, idx, T), {}


class StatsPool(Layer):
    """Concatenated mean and (population) standard deviation over time."""

    kind = "stats_pool"

    def build(self, in_shape, rng):
        if len(in_shape) != 2:
            raise ShapeError(f"stats_pool expects (time, channels), got {in_shape}")
        T, C = in_shape
        if T is not None and T < 2:
            raise ShapeError("stats_pool needs at least 2 frames")
        return (2 * C,)

    def forward(self, x, train, rng):
        if x.shape[1] < 2:
            raise ShapeError(f"stats_pool needs at least 2 frames, got {x.shape[1]}")
        mu = x.mean(axis=1)
        d = x - mu[:, None, :]
        sd = np.sqrt((d * d).mean(axis=1))
        return np.concatenate([mu, sd], axis=1), (d, sd)

    def backward(self, dy, cache):
        d, sd = cache
        T = d.shape[1]
        C = sd.shape[1]
        dmu, dsd = dy[:, :C], dy[:, C:]
        safe = np.where(sd > 0, sd, 1.0)
        dx = dmu[:, None, :] / T + d * (dsd / (T * safe))[:, None, :]
        return dx, {}


class Flatten(Layer):
    kind = "flatten"

    def build(self, in_shape, rng):
        if any(s is None for s in in_shape):
            raise ShapeError("flatten needs fixed input shape")
        return (int(np.prod(in_shape)),)

    def forward(self, x, train, rng):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, shape):
        return dy.reshape(shape), {}


_REGISTRY = {
    "dense": Dense, "conv1d": Conv1D, "tdnn": TDNN, "batch_norm": BatchNorm,
    "relu": ReLU, "tanh": Tanh, "gaussian_noise": GaussianNoise,
    "max_pool1d": MaxPool1D, "stats_pool": StatsPool, "flatten": Flatten,
}


def make_layer(spec: dict) -> Layer:
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind not in _REGISTRY:
        raise ValueError(f"unknown layer kind {kind!r}")
    if kind == "tdnn":
        spec.pop("padding", None)
    return _REGISTRY[kind](**spec)


# ---------------------------------------------------------------------------
# losses


def mse_loss(y, t):
    y = y.reshape(y.shape[0], -1)
    t = np.asarray(t, dtype=np.float64).reshape(y.shape)
    diff = y - t
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def softmax_xent_loss(logits, labels):
    labels = np.asarray(labels, dtype=np.int64)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    g = np.exp(logp)
    g[np.arange(n), labels] -= 1.0
    return loss, g / n


LOSSES = {"mse": mse_loss, "softmax_cross_entropy": softmax_xent_loss}


# ---------------------------------------------------------------------------
# network


class Network:
    def __init__(self, specs, input_shape, seed=0):
        self.specs = [dict(s) for s in specs]
        self.input_shape = tuple(input_shape)
        self.seed = int(seed)
        self.layers = [make_layer(s) for s in self.specs]
        self.mode = "infer"
        self._tape = None
        self.input_grad = None
        init_rng = np.random.default_rng([self.seed, 0])
        shape = self.input_shape
        self.shapes = [shape]
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.build(shape, init_rng)
            except ShapeError as e:
                raise ShapeError(f"layer {i} ({layer.kind}): {e}") from None
            self.shapes.append(shape)
        self.reseed_noise(self.seed)

    @property
    def output_shape(self):
        return self.shapes[-1]

    def reseed_noise(self, seed):
        self.noise_rng = np.random.default_rng([int(seed), 1])

    def train_mode(self):
        self.mode = "train"
        return self

    def infer_mode(self):
        self.mode = "infer"
        self._tape = None
        return self

    def n_params(self) -> int:
        return sum(p.size for layer in self.layers for p in layer.params.values())

    def _check_input(self, x):
        if x.ndim != len(self.input_shape) + 1:
            raise ShapeError(f"layer 0 ({self.layers[0].kind}): expected input of rank "
                             f"{len(self.input_shape) + 1}, got shape {x.shape}")
        for want, got in zip(self.input_shape, x.shape[1:]):
            if want is not None and want != got:
                raise ShapeError(f"layer 0 ({self.layers[0].kind}): expected input shape "
                                 f"{self.input_shape}, got {x.shape[1:]}")

    def forward(self, x):
        """Run the stack in the current mode. Train mode records a tape for ``backward``."""
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x)
        train = self.mode == "train"
        caches = []
        for i, layer in enumerate(self.layers):
            try:
                x, cache = layer.forward(x, train, self.noise_rng)
            except ShapeError as e:
                raise ShapeError(f"layer {i} ({layer.kind}): {e}") from None
            caches.append(cache)
        if train:
            self._tape = (caches, x)
        return x

    def predict(self, x, batch_size=256):
        """Inference-mode forward in batches. Does not touch training state."""
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x)
        if x.shape[0] == 0:
            raise ValueError("empty batch")
        outs = []
        for s in range(0, x.shape[0], batch_size):
            h = x[s:s + batch_size]
            for layer in self.layers:
                h, _ = layer.forward(h, False, None)
            outs.append(h)
        return np.concatenate(outs, axis=0)

    def trace(self, x):
        """Inference-mode activations after every layer (index 0 is the input)."""
        acts = [np.asarray(x, dtype=np.float64)]
        for layer in self.layers:
            acts.append(layer.forward(acts[-1], False, None)[0])
        return acts

    def backward(self, targets, loss="mse"):
        """Loss value and per-layer gradients for the last train-mode forward.

        L2 terms contribute ``0.5 * l2 * ||W||^2`` to the loss and ``l2 * W`` to
        the gradient of every regularised weight matrix.
        """
        if self.mode != "train":
            raise ModeError("backward called in infer mode")
        if self._tape is None:
            raise ModeError("backward called before a train-mode forward")
        caches, out = self._tape
        value, dy = LOSSES[loss](out, targets)
        dy = dy.reshape(out.shape)
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            dy, g = self.layers[i].backward(dy, caches[i])
            grads[i] = g
        self.input_grad = dy
        value += self.l2_penalty()
        for layer, g in zip(self.layers, grads):
            if layer.l2 > 0:
                g["W"] = g["W"] + layer.l2 * layer.params["W"]
        self._tape = None
        return value, grads

    def l2_penalty(self) -> float:
        return sum(0.5 * layer.l2 * float(np.sum(layer.params["W"] ** 2))
                   for layer in self.layers if layer.l2 > 0)

    # -- state ---------------------------------------------------------------

    def state(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params.items():
                out[f"{i}.{name}"] = arr
            for name, arr in layer.buffers.items():
                out[f"{i}.{name}"] = arr
        return out

    def load_state(self, state: dict):
        for key, arr in state.items():
            i, name = key.split(".", 1)
            layer = self.layers[int(i)]
            target = layer.params if name in layer.params else layer.buffers
            if name not in target:
                raise KeyError(f"unknown tensor {key}")
            if target[name].shape != np.shape(arr):
                raise ShapeError(f"tensor {key}: shape {np.shape(arr)} != {target[name].shape}")
            target[name] = np.array(arr, dtype=np.float64)

    def copy_state(self) -> dict:
        return {k: v.copy() for k, v in self.state().items()}

    def round_to_float32(self):
        self.load_state({k: v.astype(np.float32).astype(np.float64) for k, v in self.state().items()})

    def to_bytes(self, config_hash: str = "") -> bytes:
        out = [CKPT_MAGIC, _pack_str(config_hash)]
        meta = {"input_shape": list(self.input_shape), "seed": self.seed}
        out.append(_pack_str(json.dumps(meta, sort_keys=True)))
        out.append(struct.pack("<I", len(self.specs)))
        for s in self.specs:
            out.append(_pack_str(json.dumps(s, sort_keys=True)))
        st = self.state()
        out.append(struct.pack("<I", len(st)))
        for name, arr in st.items():
            out.append(_pack_str(name))
            out.append(struct.pack("<I", arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Network":
        net, _ = load_checkpoint_bytes(buf)
        return net

    def save(self, path, config_hash=""):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes(config_hash))

    @classmethod
    def load(cls, path) -> "Network":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def __repr__(self):
        body = "\n".join(f"  {i}: {layer!r} -> {self.shapes[i + 1]}" for i, layer in enumerate(self.layers))
        return f"Network(input={self.input_shape}\n{body}\n)"


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _read_str(buf, pos):
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    return buf[pos:pos + n].decode("utf-8"), pos + n


def load_checkpoint_bytes(buf: bytes):
    """Parse a checkpoint; returns (network, config_hash)."""
    if buf[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ValueError("not a network checkpoint (bad magic)")
    pos = len(CKPT_MAGIC)
    chash, pos = _read_str(buf, pos)
    meta_s, pos = _read_str(buf, pos)
    meta = json.loads(meta_s)
    (n_layers,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    specs = []
    for _ in range(n_layers):
        s, pos = _read_str(buf, pos)
        specs.append(json.loads(s))
    shape = tuple(None if d is None else int(d) for d in meta["input_shape"])
    net = Network(specs, shape, seed=meta.get("seed", 0))
    (n_t,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    state = {}
    for _ in range(n_t):
        name, pos = _read_str(buf, pos)
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        count = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += 4 * count
        state[name] = arr.astype(np.float64)
    if pos != len(buf):
        raise ValueError(f"checkpoint has {len(buf) - pos} trailing bytes")
    net.load_state(state)
    return net, chash


def read_checkpoint_hash(path) -> str:
    with open(path, "rb") as fh:
        buf = fh.read(4096)
    if buf[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a network checkpoint")
    return _read_str(buf, len(CKPT_MAGIC))[0]


# ---------------------------------------------------------------------------
# optimisation


def stats_pool(frame_outputs):
    """Mean and standard deviation over the time axis, concatenated.

    Accepts (frames, dim) or (batch, frames, dim).
    """
    x = np.asarray(frame_outputs, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.shape[1] < 2:
        raise ValueError("stats pooling needs at least 2 frames")
    y, _ = StatsPool().forward(x, False, None)
    return y[0] if squeeze else y


@dataclass
class TrainConfig:
    loss: str = "mse"
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2: float | None = None  # overrides the per-layer coefficient when set
    min_delta: float = 0.0
    patience: int = 5
    batch_size: int = 64
    max_epochs: int = 100
    validation_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")


class Adam:
    def __init__(self, net: Network, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.net = net
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [{k: np.zeros_like(v) for k, v in layer.params.items()} for layer in net.layers]
        self.v = [{k: np.zeros_like(v) for k, v in layer.params.items()} for layer in net.layers]

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for layer, g, m, v in zip(self.net.layers, grads, self.m, self.v):
            for name, p in layer.params.items():
                gi = g[name]
                m[name] = self.b1 * m[name] + (1.0 - self.b1) * gi
                v[name] = self.b2 * v[name] + (1.0 - self.b2) * gi * gi
                p -= self.lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + self.eps)


@dataclass
class TrainResult:
    history: list = field(default_factory=list)  # (epoch, train_loss, val_loss)
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    stopped_early: bool = False

    def history_text(self) -> str:
        return "".join(f"{e} {tr:.8f} {va:.8f}\n" for e, tr, va in self.history)


def split_validation(n, fraction, seed):
    """Seeded (train_idx, val_idx) split with at least one sample on each side."""
    if n < 2:
        raise ValueError("need at least 2 samples to hold out a validation set")
    perm = np.random.default_rng([int(seed), 3]).permutation(n)
    n_val = min(n - 1, max(1, int(round(fraction * n))))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def evaluate_loss(net: Network, X, y, loss="mse", batch_size=256) -> float:
    out = net.predict(X, batch_size)
    return LOSSES[loss](out, y)[0] + net.l2_penalty()


def _first_nonfinite_layer(net, X):
    h = np.asarray(X, dtype=np.float64)
    for i, layer in enumerate(net.layers):
        h, _ = layer.forward(h, False, None)
        if not np.all(np.isfinite(h)):
            return i
    return None


def train(net: Network, X, y, cfg: TrainConfig, X_val=None, y_val=None) -> TrainResult:
    """Adam + early stopping on validation loss; restores the best epoch's weights.

    If no validation set is passed, ``cfg.validation_fraction`` of ``X`` is held
    out with a seeded split. An epoch counts as an improvement only when the
    validation loss drops by more than ``min_delta``; training stops after
    ``patience`` consecutive non-improving epochs (the first one when
    ``patience`` is 0).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.shape[0] != y.shape[0]:
        raise ValueError("X and y disagree on sample count")
    if X_val is None:
        tr, va = split_validation(X.shape[0], cfg.validation_fraction, cfg.seed)
        X, X_val, y, y_val = X[tr], X[va], y[tr], y[va]
    if X.shape[0] < 1:
        raise ValueError("no training batches after the validation split")
    if cfg.l2 is not None:
        for layer in net.layers:
            if layer.has_l2 and layer.cfg.get("l2", 0.0) > 0:
                layer.cfg["l2"] = float(cfg.l2)

    opt = Adam(net, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    shuffle_rng = np.random.default_rng([int(cfg.seed), 2])
    res = TrainResult()
    best_state = net.copy_state()
    wait = 0
    n = X.shape[0]
    for epoch in range(1, cfg.max_epochs + 1):
        net.train_mode()
        order = shuffle_rng.permutation(n)
        losses, weights = [], []
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            net.forward(X[idx])
            value, grads = net.backward(y[idx], cfg.loss)
            if not np.isfinite(value):
                net.infer_mode()
                where = _first_nonfinite_layer(net, X[idx])
                lname = "loss" if where is None else f"layer {where} ({net.layers[where].kind})"
                raise NumericError(f"non-finite training loss at epoch {epoch}; first bad output: {lname}")
            opt.step(grads)
            losses.append(value)
            weights.append(len(idx))
        net.infer_mode()
        train_loss = float(np.average(losses, weights=weights))
        val_loss = evaluate_loss(net, X_val, y_val, cfg.loss)
        if not np.isfinite(val_loss):
            where = _first_nonfinite_layer(net, X_val)
            lname = "loss" if where is None else f"layer {where} ({net.layers[where].kind})"
            raise NumericError(f"non-finite validation loss at epoch {epoch}; first bad output: {lname}")
        res.history.append((epoch, train_loss, val_loss))
        log.debug("epoch %d train %.6f val %.6f", epoch, train_loss, val_loss)
        if val_loss < res.best_val_loss - cfg.min_delta:
            res.best_val_loss = val_loss
            res.best_epoch = epoch
            best_state = net.copy_state()
            wait = 0
            continue
        wait += 1
        if wait >= cfg.patience:
            res.stopped_early = True
            break
    net.load_state(best_state)
    net.round_to_float32()
    net.infer_mode()
    return res


# ---------------------------------------------------------------------------
# gradient verification


GRAD_FLOOR = 1e-7


def _loss_of(net, x, t, loss, noise_seed):
    net.reseed_noise(noise_seed)
    net.train_mode()
    net.forward(x)
    value, grads = net.backward(t, loss)
    return value, grads


def gradient_check(net: Network, x, t, loss="mse", eps=1e-5, noise_seed=1234, check_input=False):
    """Compare analytic gradients with central differences for every parameter.

    Returns ``{tensor_name: relative_error}`` where the error is
    ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-7). The floor
    keeps exactly-zero gradients (e.g. a bias feeding batch norm) from
    turning finite-difference round-off into a relative error of 1. Noise draws are
    replayed identically for every evaluation; batch-norm running statistics
    are restored afterwards. With ``check_input`` the gradient with respect to
    ``x`` is checked too (key ``"input"``).
    """
    saved = copy.deepcopy([layer.buffers for layer in net.layers])
    x = np.array(x, dtype=np.float64)
    _, grads = _loss_of(net, x, t, loss, noise_seed)
    dx = net.input_grad
    errors = {}
    for i, layer in enumerate(net.layers):
        for name, p in layer.params.items():
            num = np.zeros_like(p)
            for j in np.ndindex(p.shape):
                old = p[j]
                p[j] = old + eps
                fp, _ = _loss_of(net, x, t, loss, noise_seed)
                p[j] = old - eps
                fm, _ = _loss_of(net, x, t, loss, noise_seed)
                p[j] = old
                num[j] = (fp - fm) / (2 * eps)
            a = grads[i][name]
            denom = max(np.linalg.norm(a), np.linalg.norm(num), GRAD_FLOOR)
            errors[f"{i}.{name}"] = float(np.linalg.norm(a - num) / denom)
    if check_input:
        num = np.zeros_like(x)
        for j in np.ndindex(x.shape):
            old = x[j]
            x[j] = old + eps
            fp, _ = _loss_of(net, x, t, loss, noise_seed)
            x[j] = old - eps
            fm, _ = _loss_of(net, x, t, loss, noise_seed)
            x[j] = old
            num[j] = (fp - fm) / (2 * eps)
        denom = max(np.linalg.norm(dx), np.linalg.norm(num), GRAD_FLOOR)
        errors["input"] = float(np.linalg.norm(dx - num) / denom)
    for layer, b in zip(net.layers, saved):
        layer.buffers = b
    net.infer_mode()
    return errors
