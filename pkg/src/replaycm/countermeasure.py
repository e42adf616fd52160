"""CNN regression countermeasure.

Input vectors are read as length-L, single-channel sequences. Layer order:
gaussian_noise -> batch_norm -> 3 x (conv1d -> max_pool1d) -> flatten ->
dense(1) -> tanh. Targets are +1 (bona fide) and -1 (spoof); the tanh
output is the score, higher meaning more likely bona fide.
"""
from dataclasses import dataclass

import numpy as np

from .nnet import Network, TrainConfig, TrainResult, train

BONAFIDE_TARGET = 1.0
SPOOF_TARGET = -1.0


class CountermeasureError(ValueError):
    pass


@dataclass(frozen=True)
class CmModelConfig:
    input_len: int = 410
    noise_std: float = 0.001
    conv_layers: int = 3
    filters: int = 32
    kernel: int = 3
    pool: int = 2
    l2: float = 1e-4
    use_noise_layer: bool = True


def cm_specs(cfg: CmModelConfig) -> list:
    specs = []
    if cfg.use_noise_layer:
        specs.append({"kind": "gaussian_noise", "std": cfg.noise_std})
    specs.append({"kind": "batch_norm"})
    for _ in range(cfg.conv_layers):
        specs.append({"kind": "conv1d", "filters": cfg.filters, "kernel": cfg.kernel,
                      "padding": "same", "l2": cfg.l2})
        specs.append({"kind": "max_pool1d", "pool": cfg.pool, "stride": cfg.pool})
    specs += [{"kind": "flatten"}, {"kind": "dense", "units": 1}, {"kind": "tanh"}]
    return specs


def build_cm(cfg: CmModelConfig = CmModelConfig(), seed: int = 0) -> Network:
    min_len = cfg.pool ** cfg.conv_layers
    if cfg.input_len < min_len:
        raise CountermeasureError(
            f"input length {cfg.input_len} too short for {cfg.conv_layers} pool-by-{cfg.pool} stages "
            f"(need >= {min_len})")
    return Network(cm_specs(cfg), (cfg.input_len, 1), seed=seed)


def flatten_length(net: Network) -> int:
    for i, layer in enumerate(net.layers):
        if layer.kind == "flatten":
            return net.shapes[i + 1][0]
    raise CountermeasureError("network has no flatten layer")


def targets_from_bonafide(flags) -> np.ndarray:
    return np.where(np.asarray(flags, dtype=bool), BONAFIDE_TARGET, SPOOF_TARGET)


def _as_sequences(vectors, length=None):
    V = np.asarray(vectors, dtype=np.float64)
    if V.ndim != 2:
        raise CountermeasureError("expected a 2-D array of feature vectors")
    if length is not None and V.shape[1] != length:
        raise CountermeasureError(f"vector length {V.shape[1]} != model input length {length}")
    return V[:, :, None]


def train_cm(net: Network, vectors, targets, cfg: TrainConfig | None = None) -> TrainResult:
    """MSE regression onto +/-1 targets with Adam and early stopping."""
    if cfg is None:
        cfg = TrainConfig()
    if isinstance(vectors, (list, tuple)):
        if len(vectors) == 0:
            raise CountermeasureError("empty training set")
        lens = {len(v) for v in vectors}
        if len(lens) != 1:
            raise CountermeasureError(f"mixed vector lengths: {sorted(lens)}")
    V = np.asarray(vectors, dtype=np.float64)
    if V.size == 0 or V.shape[0] == 0:
        raise CountermeasureError("empty training set")
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if t.shape[0] != V.shape[0]:
        raise CountermeasureError("one target per vector required")
    if not np.all(np.isin(t, (BONAFIDE_TARGET, SPOOF_TARGET))):
        raise CountermeasureError("targets must be +1 (bona fide) or -1 (spoof)")
    if cfg.loss != "mse":
        raise CountermeasureError("the countermeasure is trained with MSE")
    X = _as_sequences(V, net.input_shape[0])
    return train(net, X, t[:, None], cfg)


def score(net: Network, vectors) -> np.ndarray:
    """Scores in (-1, 1) for a batch (or a single vector)."""
    V = np.asarray(vectors, dtype=np.float64)
    single = V.ndim == 1
    if single:
        V = V[None]
    out = net.predict(_as_sequences(V, net.input_shape[0]))[:, 0]
    return out[0] if single else out


def score_histogram(scores, bins=20):
    """Counts of scores over equal-width bins spanning [-1, 1]."""
    return np.histogram(np.asarray(scores), bins=bins, range=(-1.0, 1.0))
