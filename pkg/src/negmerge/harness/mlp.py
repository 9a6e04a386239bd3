"""Minimal fully-connected classifier trained with minibatch gradient descent.

Everything is float64 numpy.  Weights live in TensorMaps under the names
``layers.<k>.weight`` / ``layers.<k>.bias`` so the depth-grouping analytics
apply to them directly.  Training is bit-deterministic for a given seed: the
parameter init, the shuffle order, and the input-jitter draws all come from
one generator consumed in a fixed order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import TrainingDiverged
from ..tensor_store import TensorMap


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden: tuple[int, ...] = (32,)
    n_classes: int = 2
    activation: str = "relu"

    def __post_init__(self):
        if len(self.hidden) < 1 or any(h <= 0 for h in self.hidden):
            raise ValueError("at least one hidden layer with positive width is required")
        if self.input_dim <= 0 or self.n_classes <= 1:
            raise ValueError("input_dim must be positive and n_classes >= 2")
        if self.activation != "relu":
            raise ValueError("only the rectifier activation is supported")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden, self.n_classes]
        return list(zip(dims[:-1], dims[1:]))


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 0.1
    epochs: int = 50
    weight_decay: float = 0.0
    label_smoothing: float = 0.0
    batch_size: int = 64
    seed: int = 0
    jitter: float = 0.0  # stddev of Gaussian input noise, fresh each presentation


def init_params(cfg: MlpConfig, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    rng = np.random.default_rng(seed)
    params = []
    for fan_in, fan_out in cfg.layer_dims:
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        b = np.zeros(fan_out)
        params.append((w, b))
    return params


def params_to_map(params) -> TensorMap:
    tensors = {}
    for k, (w, b) in enumerate(params):
        tensors[f"layers.{k}.weight"] = w
        tensors[f"layers.{k}.bias"] = b
    return TensorMap(tensors)


def map_to_params(m: TensorMap, cfg: MlpConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    params = []
    for k, (fan_in, fan_out) in enumerate(cfg.layer_dims):
        w = np.asarray(m[f"layers.{k}.weight"], dtype=np.float64)
        b = np.asarray(m[f"layers.{k}.bias"], dtype=np.float64)
        if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
            raise ValueError(f"layer {k} has shape {w.shape}/{b.shape}, expected {(fan_in, fan_out)}")
        params.append((w, b))
    return params


def logits(params, x: np.ndarray) -> np.ndarray:
    a = x
    last = len(params) - 1
    for k, (w, b) in enumerate(params):
        z = a @ w + b
        a = np.maximum(z, 0.0) if k < last else z
    return a


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def per_sample_loss(params, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Plain cross-entropy per sample (no smoothing, no penalty)."""
    logp = _log_softmax(logits(params, x))
    return -logp[np.arange(y.size), y]


def loss_and_grads(params, x: np.ndarray, y: np.ndarray, weight_decay: float = 0.0,
                   label_smoothing: float = 0.0):
    """Mean smoothed cross-entropy plus an L2 penalty on weights, with gradients."""
    n, c = x.shape[0], params[-1][0].shape[1]
    activations = [x]
    pre = []
    a = x
    last = len(params) - 1
    for k, (w, b) in enumerate(params):
        z = a @ w + b
        pre.append(z)
        a = np.maximum(z, 0.0) if k < last else z
        activations.append(a)

    logp = _log_softmax(activations[-1])
    target = np.full((n, c), label_smoothing / c)
    target[np.arange(n), y] += 1.0 - label_smoothing
    loss = float(-(target * logp).mean(axis=0).sum())
    loss += 0.5 * weight_decay * sum(float((w * w).sum()) for w, _ in params)

    grads = []
    dz = (np.exp(logp) - target) / n
    for k in range(last, -1, -1):
        w, _ = params[k]
        gw = activations[k].T @ dz + weight_decay * w
        gb = dz.sum(axis=0)
        grads.append((gw, gb))
        if k > 0:
            dz = (dz @ w.T) * (pre[k - 1] > 0.0)
    grads.reverse()
    return loss, grads


def train(cfg: MlpConfig, data: tuple[np.ndarray, np.ndarray], hyper: TrainHyper,
          start: TensorMap | None = None) -> TensorMap:
    """Minibatch gradient descent; returns the weights as a TensorMap.

    ``start`` continues from existing weights (fine-tuning); otherwise the
    seeded init is used.  Zero epochs returns the starting point unchanged.
    """
    x, y = data
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    rng = np.random.default_rng(hyper.seed)
    params = map_to_params(start, cfg) if start is not None else init_params(cfg, hyper.seed)
    params = [(w.copy(), b.copy()) for w, b in params]

    n = x.shape[0]
    batch = max(1, min(hyper.batch_size, n))
    for _ in range(hyper.epochs):
        perm = rng.permutation(n)
        for lo in range(0, n, batch):
            sel = perm[lo : lo + batch]
            xb = x[sel]
            if hyper.jitter > 0.0:
                xb = xb + rng.normal(0.0, hyper.jitter, size=xb.shape)
            loss, grads = loss_and_grads(params, xb, y[sel], hyper.weight_decay,
                                         hyper.label_smoothing)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became non-finite ({loss}) with hyper {hyper}")
            params = [(w - hyper.lr * gw, b - hyper.lr * gb)
                      for (w, b), (gw, gb) in zip(params, grads)]
    return params_to_map(params)


def predict(model: TensorMap, x: np.ndarray, cfg: MlpConfig) -> np.ndarray:
    return np.argmax(logits(map_to_params(model, cfg), np.asarray(x, dtype=np.float64)), axis=1)


def accuracy(model: TensorMap, x: np.ndarray, y: np.ndarray, cfg: MlpConfig) -> float:
    if y.size == 0:
        raise ValueError("cannot compute accuracy on an empty split")
    return float(np.mean(predict(model, x, cfg) == y))


def sample_losses(model: TensorMap, x: np.ndarray, y: np.ndarray, cfg: MlpConfig) -> np.ndarray:
    return per_sample_loss(map_to_params(model, cfg), np.asarray(x, dtype=np.float64), y)
