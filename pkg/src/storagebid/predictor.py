"""Trainable price predictor: feed-forward network with reverse-mode
gradients, Adam updates, and mean-squared-error pretraining.

Everything is plain numpy. Inputs are z-scored per channel with statistics
frozen at training time and carried inside the weights object, so a saved
checkpoint reproduces the exact function.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace

import numpy as np

from .domain import LOOKBACK_INTERVALS, FeatureWindow, Sample

__all__ = [
    "NetSpec",
    "Weights",
    "AdamState",
    "PretrainResult",
    "init_weights",
    "forward",
    "forward_batch",
    "vjp",
    "adam_step",
    "pretrain_mse",
    "save_checkpoint",
    "load_checkpoint",
]

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "storagebid-checkpoint-1"


@dataclass(frozen=True)
class NetSpec:
    """Layer widths from input to output; hidden layers use a rectifier, the
    output layer is linear. Weights start uniform, scaled by fan-in."""

    layers: tuple[int, ...] = (72, 128, 128, 24)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(int(w) for w in self.layers))
        if len(self.layers) < 2:
            raise ValueError("need at least an input and an output layer")

    @property
    def num_params(self) -> int:
        return sum(
            o * i + o for i, o in zip(self.layers[:-1], self.layers[1:])
        )


@dataclass(frozen=True)
class Weights:
    """Flat parameter vector plus the metadata needed to evaluate it."""

    values: np.ndarray
    spec: NetSpec
    feat_mean: np.ndarray
    feat_std: np.ndarray
    step: int = 0

    def __post_init__(self):
        for name in ("values", "feat_mean", "feat_std"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.values.size != self.spec.num_params:
            raise ValueError("flat vector length does not match the layer spec")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("weights must be finite")


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def fresh(num_params: int, lr: float = 1e-4) -> "AdamState":
        return AdamState(m=np.zeros(num_params), v=np.zeros(num_params), lr=lr)


@dataclass(frozen=True)
class PretrainResult:
    weights: Weights
    losses: list[float]


def _unpack(values: np.ndarray, spec: NetSpec):
    mats = []
    pos = 0
    for i, o in zip(spec.layers[:-1], spec.layers[1:]):
        W = values[pos : pos + o * i].reshape(o, i)
        pos += o * i
        bvec = values[pos : pos + o]
        pos += o
        mats.append((W, bvec))
    return mats


def init_weights(spec: NetSpec, feat_mean=None, feat_std=None) -> Weights:
    rng = np.random.default_rng(spec.seed)
    chunks = []
    for i, o in zip(spec.layers[:-1], spec.layers[1:]):
        bound = 1.0 / np.sqrt(i)
        chunks.append(rng.uniform(-bound, bound, size=o * i))
        chunks.append(rng.uniform(-bound, bound, size=o))
    dim = spec.layers[0]
    return Weights(
        values=np.concatenate(chunks),
        spec=spec,
        feat_mean=np.zeros(dim) if feat_mean is None else feat_mean,
        feat_std=np.ones(dim) if feat_std is None else feat_std,
    )


def _coerce_input(x) -> np.ndarray:
    if isinstance(x, FeatureWindow):
        return x.x
    return np.asarray(x, dtype=float)


def forward(x, w: Weights) -> np.ndarray:
    """Deterministic prediction for one feature vector."""
    return forward_batch(_coerce_input(x)[None, :], w)[0]


def forward_batch(X, w: Weights) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.shape[1] != w.spec.layers[0]:
        raise ValueError("input width does not match the network spec")
    h = (X - w.feat_mean) / w.feat_std
    mats = _unpack(w.values, w.spec)
    for k, (W, bvec) in enumerate(mats):
        h = h @ W.T + bvec
        if k < len(mats) - 1:
            h = np.maximum(h, 0.0)
    return h


def vjp(x, w: Weights, upstream) -> np.ndarray:
    """upstream' @ d(prediction)/d(weights) by reverse accumulation."""
    return _vjp_batch(_coerce_input(x)[None, :], w, np.asarray(upstream, dtype=float)[None, :])


def _vjp_batch(X, w: Weights, U) -> np.ndarray:
    """Sum of per-row vector-Jacobian products for a batch."""
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    if U.shape[1] != w.spec.layers[-1]:
        raise ValueError("upstream width does not match the output layer")
    mats = _unpack(w.values, w.spec)
    h = (X - w.feat_mean) / w.feat_std
    acts = [h]
    pre = []
    for k, (W, bvec) in enumerate(mats):
        zk = acts[-1] @ W.T + bvec
        pre.append(zk)
        acts.append(np.maximum(zk, 0.0) if k < len(mats) - 1 else zk)
    grads = [None] * len(mats)
    g = U
    for k in reversed(range(len(mats))):
        W, _ = mats[k]
        grads[k] = (g.T @ acts[k], g.sum(axis=0))
        if k > 0:
            g = (g @ W) * (pre[k - 1] > 0.0)
    return np.concatenate([np.concatenate([gm.ravel(), gb]) for gm, gb in grads])


def adam_step(w: Weights, grad, state: AdamState) -> tuple[Weights, AdamState]:
    """One bias-corrected Adam update. A non-finite gradient is skipped with
    a warning rather than poisoning the weights."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape != w.values.shape:
        raise ValueError("gradient length does not match the weights")
    if not np.all(np.isfinite(grad)):
        log.warning("skipping adam step %d: non-finite gradient", state.step + 1)
        return w, state
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_values = w.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return (
        replace(w, values=new_values, step=w.step + 1),
        replace(state, m=m, v=v, step=t),
    )


def channel_stats(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel z-score statistics for channel-major lookback features."""
    B, dim = X.shape
    channels = dim // LOOKBACK_INTERVALS
    grouped = X.reshape(B, channels, LOOKBACK_INTERVALS)
    mean = grouped.mean(axis=(0, 2))
    std = np.maximum(grouped.std(axis=(0, 2)), 1e-8)
    return (
        np.repeat(mean, LOOKBACK_INTERVALS),
        np.repeat(std, LOOKBACK_INTERVALS),
    )


def pretrain_mse(
    dataset,
    spec: NetSpec,
    epochs: int,
    batch_size: int = 32,
    lr: float = 1e-4,
    seed: int = 0,
) -> PretrainResult:
    """Minimize mean squared prediction error over the dataset.

    Accepts either full samples or bare feature windows. Normalization
    statistics come from the training features and are frozen into the
    returned weights. The shuffle order derives from ``seed``, so a fixed
    seed reproduces the final weights exactly.
    """
    if not dataset:
        raise ValueError("pretraining needs a nonempty dataset")
    windows = [s.features if isinstance(s, Sample) else s for s in dataset]
    X = np.stack([fw.x for fw in windows])
    Y = np.stack([fw.target for fw in windows])
    mean, std = channel_stats(X)
    w = init_weights(spec, feat_mean=mean, feat_std=std)
    state = AdamState.fresh(spec.num_params, lr=lr)
    rng = np.random.default_rng(seed)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(dataset))
        epoch_loss = 0.0
        for start in range(0, len(dataset), batch_size):
            idx = order[start : start + batch_size]
            pred = forward_batch(X[idx], w)
            err = pred - Y[idx]
            epoch_loss += float(np.mean(err**2)) * len(idx)
            upstream = 2.0 * err / err.size
            grad = _vjp_batch(X[idx], w, upstream)
            w, state = adam_step(w, grad, state)
        losses.append(epoch_loss / len(dataset))
    return PretrainResult(weights=w, losses=losses)


def save_checkpoint(w: Weights, path, adam: AdamState | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "spec": {"layers": list(w.spec.layers), "seed": w.spec.seed},
        "feat_mean": list(w.feat_mean),
        "feat_std": list(w.feat_std),
        "step": w.step,
        "weights": list(w.values),
    }
    if adam is not None:
        payload["adam"] = {
            "m": list(adam.m),
            "v": list(adam.v),
            "step": adam.step,
            "lr": adam.lr,
            "beta1": adam.beta1,
            "beta2": adam.beta2,
            "eps": adam.eps,
        }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> tuple[Weights, AdamState | None]:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {payload.get('format')!r}")
    spec = NetSpec(layers=tuple(payload["spec"]["layers"]), seed=payload["spec"]["seed"])
    w = Weights(
        values=np.array(payload["weights"], dtype=float),
        spec=spec,
        feat_mean=np.array(payload["feat_mean"], dtype=float),
        feat_std=np.array(payload["feat_std"], dtype=float),
        step=payload["step"],
    )
    adam = None
    if "adam" in payload:
        a = payload["adam"]
        adam = AdamState(
            m=np.array(a["m"], dtype=float),
            v=np.array(a["v"], dtype=float),
            step=a["step"],
            lr=a["lr"],
            beta1=a["beta1"],
            beta2=a["beta2"],
            eps=a["eps"],
        )
    return w, adam
