"""Combining per-layer flow NLL maps into one anomaly score map.

Each layer's NLL is shifted by its training-set mean so layers become
comparable; maps are then bilinearly resized to the output grid and merged by
a pixel-wise minimum or by a logistic combiner fitted on labelled pixels.
Also hosts the sign-gradient input perturbation that lowers the NLL.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .encoder import ToyEncoder, encode_all, input_gradient
from .errors import ContractViolation, DegenerateFit, NumericOverflow
from .flow import FlowModel, flow_nll, flow_nll_grad
from .numerics import atomic_write, resize_bilinear, sigmoid

OOD_LABEL = 1
IGNORE_LABEL = 255


@dataclass
class NormalizedNllMap:
    values: np.ndarray
    layer_id: str
    train_mean_nll: float


def normalize_nll(nll, train_mean_nll: float, layer_id: str = "") -> NormalizedNllMap:
    nll = np.asarray(nll, dtype=np.float64)
    if not np.isfinite(train_mean_nll) or not np.all(np.isfinite(nll)):
        raise ContractViolation("NLL map and training mean must be finite")
    return NormalizedNllMap(nll - float(train_mean_nll), layer_id, float(train_mean_nll))


def _values(m) -> np.ndarray:
    return m.values if isinstance(m, NormalizedNllMap) else np.asarray(m, dtype=np.float64)


def resize_maps(maps: Sequence, target: tuple[int, int]) -> np.ndarray:
    """Stack of maps resized to ``target``, shape ``(L, H, W)``."""
    return np.stack([resize_bilinear(_values(m), tuple(target)) for m in maps])


def aggregate_min(maps: Sequence, target: tuple[int, int]) -> np.ndarray:
    """Pixel-wise minimum of the resized maps: a pixel stays anomalous only if every layer agrees."""
    if len(maps) == 0:
        raise ContractViolation("aggregate_min needs at least one map")
    return resize_maps(maps, target).min(axis=0)


@dataclass
class LogisticConfig:
    learning_rate: float = 0.1
    iterations: int = 500
    seed: int = 0


@dataclass
class LogisticCombiner:
    weights: np.ndarray
    bias: float
    layer_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        self.bias = float(self.bias)
        if not np.all(np.isfinite(self.weights)) or not np.isfinite(self.bias):
            raise ContractViolation("combiner parameters must be finite")
        if self.layer_ids and len(self.layer_ids) != len(self.weights):
            raise ContractViolation("one layer id per weight is required")

    def to_json(self) -> str:
        return json.dumps(
            {"weights": self.weights.tolist(), "bias": self.bias, "layer_ids": list(self.layer_ids)},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "LogisticCombiner":
        data = json.loads(text)
        return cls(data["weights"], data["bias"], list(data.get("layer_ids", [])))

    def save(self, path) -> None:
        atomic_write(path, (self.to_json() + "\n").encode("utf-8"))

    @classmethod
    def load(cls, path) -> "LogisticCombiner":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def fit_logistic_combiner(
    features,
    labels,
    config: LogisticConfig | None = None,
    layer_ids: Sequence[str] = (),
) -> LogisticCombiner:
    """Full-batch gradient descent on the mean logistic loss.

    ``features`` is ``(N, L)``; labels use 0 = ID, 1 = OoD, 255 = ignored.
    Features are standardized with the fit-set statistics (a zero spread is
    replaced by 1) and the scaling is folded back into the returned weights.
    """
    config = config or LogisticConfig()
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    y = np.asarray(labels).reshape(-1)
    if len(y) != len(f):
        raise ContractViolation("features and labels differ in length")
    keep = y != IGNORE_LABEL
    f, y = f[keep], (y[keep] == OOD_LABEL).astype(np.float64)
    if len(y) == 0 or y.min() == y.max():
        raise DegenerateFit("logistic fit needs both ID and OoD samples")
    mu = f.mean(axis=0)
    sd = f.std(axis=0)
    sd[sd == 0] = 1.0
    x = (f - mu) / sd
    w = np.zeros(x.shape[1])
    b = 0.0
    n = len(y)
    for _ in range(config.iterations):
        r = sigmoid(x @ w + b) - y
        w -= config.learning_rate * (x.T @ r) / n
        b -= config.learning_rate * float(r.mean())
    w_raw = w / sd
    return LogisticCombiner(w_raw, b - float(w_raw @ mu), list(layer_ids))


def apply_logistic_combiner(combiner: LogisticCombiner, maps: Sequence, target: tuple[int, int]) -> np.ndarray:
    if len(maps) != len(combiner.weights):
        raise ContractViolation(f"{len(maps)} maps for a combiner with {len(combiner.weights)} weights")
    stack = resize_maps(maps, target)
    return sigmoid(np.tensordot(combiner.weights, stack, axes=1) + combiner.bias)


@dataclass
class DensityPipeline:
    """Encoder plus one trained flow (and its training-set mean NLL) per tap."""

    encoder: ToyEncoder
    flows: Mapping[str, tuple[FlowModel, float]]

    def nll_maps(self, image) -> dict[str, np.ndarray]:
        taps, _ = encode_all(self.encoder, image)
        out = {}
        for layer, (flow, _) in self.flows.items():
            t = taps[layer]
            out[layer] = flow_nll(flow, t.reshape(-1, t.shape[-1])).reshape(t.shape[:2])
        return out

    def normalized_maps(self, image) -> list[NormalizedNllMap]:
        raw = self.nll_maps(image)
        return [normalize_nll(raw[k], self.flows[k][1], k) for k in self.flows]

    def mean_nll(self, image) -> float:
        """Objective of the input perturbation: sum over taps of the cell-averaged NLL."""
        return float(sum(np.mean(v) for v in self.nll_maps(image).values()))

    def mean_nll_grad(self, image) -> np.ndarray:
        taps, _ = encode_all(self.encoder, image)
        grads = {}
        for layer, (flow, _) in self.flows.items():
            t = taps[layer]
            _, g = flow_nll_grad(flow, t.reshape(-1, t.shape[-1]))
            grads[layer] = g.reshape(t.shape) / (t.shape[0] * t.shape[1])
        return input_gradient(self.encoder, image, grads)


def input_preprocess(
    image, pipeline: DensityPipeline, epsilon: float = 0.25, value_range=(0.0, 1.0), intensity_scale: float = 255.0
) -> np.ndarray:
    """``clip(x - step * sign(d meanNLL / dx))``: one signed step towards higher likelihood.

    ``epsilon`` is measured in intensity levels: the step is
    ``epsilon * (hi - lo) / intensity_scale``, so the default treats it as an
    8-bit pixel offset. Pass ``intensity_scale=1`` to step by ``epsilon`` in
    the raw value range.
    """
    if epsilon < 0:
        raise ContractViolation("epsilon must be >= 0")
    if intensity_scale <= 0:
        raise ContractViolation("intensity_scale must be > 0")
    image = np.asarray(image, dtype=np.float64)
    if epsilon == 0:
        return image.copy()
    g = pipeline.mean_nll_grad(image)
    if not np.all(np.isfinite(g)):
        raise NumericOverflow("non-finite input gradient during preprocessing")
    lo, hi = value_range
    step = epsilon * (hi - lo) / intensity_scale
    return np.clip(image - step * np.sign(g), lo, hi)
