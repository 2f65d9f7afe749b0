"""End-to-end toy experiment: synthesize data, train the encoder and flows, score, evaluate.

:class:`Scorer` turns an image into a per-pixel anomaly map for any of the
supported methods given the artifacts it needs; the CLI and the experiment
runner share it.
"""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .aggregation import (
    DensityPipeline,
    LogisticCombiner,
    LogisticConfig,
    aggregate_min,
    apply_logistic_combiner,
    fit_logistic_combiner,
    input_preprocess,
    resize_maps,
)
from .encoder import STRIDES, ToyEncoder, ToyTrainConfig, encode_all, make_encoder, mc_samples, train_toy
from .errors import ConfigError, ContractViolation
from .flow import FlowModel, FlowTrainConfig, flow_mean_nll, flow_train
from .knn import EmbeddingSet, KnnConfig, knn_score_map, patch_class_association
from .metrics import BinaryEvalAccumulator, summarize
from .numerics import derive_rng, resize_bilinear
from .scores import (
    dirichlet_entropy_from_logits,
    entropy_score,
    max_prob_score,
    mutual_information,
    predictive_entropy,
    softmax,
    void_class_score,
)
from .synth import SynthConfig, bundled_dataset

log = logging.getLogger(__name__)

METHODS = (
    "random",
    "softmax_max_prob",
    "softmax_entropy",
    "mc_predictive_entropy",
    "mc_mutual_information",
    "dirichlet_entropy",
    "void_class",
    "knn_density",
    "knn_relative_density",
    "learned_density",
    "learned_density_min",
    "learned_density_logistic",
)


def tap_embeddings(enc: ToyEncoder, images: np.ndarray, layer: str) -> np.ndarray:
    taps, _ = encode_all(enc, images)
    t = taps[layer]
    return t.reshape(-1, t.shape[-1])


def tap_class_sets(labels: np.ndarray, layer: str, grid: tuple[int, int]) -> list[frozenset]:
    """Class set per tap cell, row-major, for a stack of ``(N, H, W)`` label rasters."""
    out = []
    for lab in labels:
        cells = patch_class_association(lab, STRIDES[layer])
        for row in cells[: grid[0]]:
            out.extend(row[: grid[1]])
    return out


def build_reference(
    enc: ToyEncoder, images: np.ndarray, labels: np.ndarray | None, layer: str, size: int, seed: int
) -> EmbeddingSet:
    taps, _ = encode_all(enc, images)
    t = taps[layer]
    vecs = t.reshape(-1, t.shape[-1])
    sets = tap_class_sets(labels, layer, t.shape[1:3]) if labels is not None else None
    ref = EmbeddingSet(vecs, sets, STRIDES[layer])
    return ref.subsample(size, derive_rng(seed, "knn-reference", layer))


@dataclass
class Scorer:
    """Artifacts for scoring; each method checks that what it needs is present."""

    encoder: ToyEncoder
    flows: dict[str, tuple[FlowModel, float]] = field(default_factory=dict)
    knn_reference: EmbeddingSet | None = None
    knn_layer: str = "s1"
    knn: KnnConfig = field(default_factory=KnnConfig)
    combiner: LogisticCombiner | None = None
    void_encoder: ToyEncoder | None = None
    dirichlet_encoder: ToyEncoder | None = None
    mc_samples: int = 8
    preprocess_epsilon: float = 0.0
    seed: int = 0

    def _require(self, ok: bool, what: str):
        if not ok:
            raise ContractViolation(f"missing model artifact: {what}")

    def _nll_maps(self, image) -> list:
        self._require(bool(self.flows), "flow models")
        pipe = DensityPipeline(self.encoder, self.flows)
        if self.preprocess_epsilon > 0:
            image = input_preprocess(image, pipe, self.preprocess_epsilon)
        return pipe.normalized_maps(image)

    def score(self, method: str, image, index: int = 0) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        shape = image.shape[:2]
        if method == "random":
            return derive_rng(self.seed, "random-scores", index).random(shape)
        if method in ("softmax_max_prob", "softmax_entropy"):
            _, logits = encode_all(self.encoder, image)
            p = softmax(logits)
            s = max_prob_score(p) if method == "softmax_max_prob" else entropy_score(p)
            return resize_bilinear(s, shape)
        if method in ("mc_predictive_entropy", "mc_mutual_information"):
            stack = mc_samples(self.encoder, image, self.mc_samples, int(derive_rng(self.seed, "mc", index).integers(2**31)))
            s = predictive_entropy(stack) if method == "mc_predictive_entropy" else mutual_information(stack)
            return resize_bilinear(s, shape)
        if method == "dirichlet_entropy":
            self._require(self.dirichlet_encoder is not None, "prior-network encoder")
            _, logits = encode_all(self.dirichlet_encoder, image)
            return resize_bilinear(dirichlet_entropy_from_logits(logits), shape)
        if method == "void_class":
            self._require(self.void_encoder is not None, "void-class encoder")
            _, logits = encode_all(self.void_encoder, image)
            return resize_bilinear(void_class_score(softmax(logits), self.void_encoder.n_classes), shape)
        if method in ("knn_density", "knn_relative_density"):
            self._require(self.knn_reference is not None, "kNN reference embeddings")
            taps, logits = encode_all(self.encoder, image)
            q = taps[self.knn_layer]
            if method == "knn_density":
                return knn_score_map(self.knn_reference, q, self.knn, "density", out_shape=shape)
            pred = np.argmax(resize_bilinear(logits, q.shape[:2]), axis=-1)
            return knn_score_map(self.knn_reference, q, self.knn, "relative", pred, out_shape=shape)
        if method == "learned_density":
            maps = self._nll_maps(image)
            return resize_bilinear(maps[-1].values, shape)
        if method == "learned_density_min":
            return aggregate_min(self._nll_maps(image), shape)
        if method == "learned_density_logistic":
            self._require(self.combiner is not None, "logistic combiner")
            return apply_logistic_combiner(self.combiner, self._nll_maps(image), shape)
        raise ConfigError(f"unknown method {method!r}")

    def layer_features(self, image) -> np.ndarray:
        """``(H * W, L)`` normalized NLL features for fitting the combiner."""
        maps = self._nll_maps(image)
        stack = resize_maps(maps, np.asarray(image).shape[:2])
        return stack.reshape(len(maps), -1).T


def train_flows(
    enc: ToyEncoder, images: np.ndarray, layers: Sequence[str], cfg: FlowTrainConfig, max_vectors: int, seed: int
) -> dict[str, tuple[FlowModel, float]]:
    """One flow per tap plus its training-set mean NLL (the normalization shift)."""
    taps, _ = encode_all(enc, images)
    out = {}
    for layer in layers:
        t = taps[layer]
        e = t.reshape(-1, t.shape[-1])
        if len(e) > max_vectors:
            e = e[np.sort(derive_rng(seed, "flow-subsample", layer).permutation(len(e))[:max_vectors])]
        model, curve = flow_train(e, dataclasses.replace(cfg, seed=int(derive_rng(seed, "flow", layer).integers(2**31))))
        out[layer] = (model, flow_mean_nll(model, e))
        log.info("flow %s: %d vectors, final holdout NLL %.3f", layer, len(e), curve[-1][1] if curve else float("nan"))
    return out


@dataclass
class ExperimentConfig:
    dataset: SynthConfig = field(default_factory=lambda: SynthConfig(n_train=40, n_validation=10, n_test=40))
    encoder_iterations: int = 300
    dropout_rate: float = 0.2
    flow_layers: tuple[str, ...] = ("s1", "s2")
    flow: FlowTrainConfig = field(
        default_factory=lambda: FlowTrainConfig(iterations=1000, learning_rate=1e-3, steps=8, batch_size=256)
    )
    flow_max_vectors: int = 20000
    knn_layer: str = "s1"
    knn_k: int = 20
    knn_reference_size: int = 10000
    mc_samples: int = 8
    methods: tuple[str, ...] = ("random", "softmax_entropy", "knn_density", "learned_density_min")
    train_auxiliary_encoders: bool = False

    def __post_init__(self):
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ConfigError(f"unknown methods {sorted(unknown)}")


def run_experiment(config: ExperimentConfig, seed: int) -> dict[str, dict]:
    """Full toy run; returns per-method summaries (AP, FPR@95TPR, max J)."""
    t0 = time.perf_counter()
    _, samples = bundled_dataset(config.dataset, seed)
    train_images = np.stack([s.image for s in samples["train"]])
    train_labels = np.stack([s.semantic for s in samples["train"]])
    train_pairs = [(s.image, s.semantic) for s in samples["train"]]
    enc = train_toy(
        make_encoder(3, dropout_rate=config.dropout_rate, seed=seed),
        train_pairs,
        ToyTrainConfig(iterations=config.encoder_iterations, seed=seed),
    )
    scorer = Scorer(enc, knn=KnnConfig(config.knn_k), knn_layer=config.knn_layer, mc_samples=config.mc_samples, seed=seed)
    methods = set(config.methods)
    if methods & {"learned_density", "learned_density_min", "learned_density_logistic"}:
        scorer.flows = train_flows(enc, train_images, config.flow_layers, config.flow, config.flow_max_vectors, seed)
    if methods & {"knn_density", "knn_relative_density"}:
        scorer.knn_reference = build_reference(
            enc, train_images, train_labels, config.knn_layer, config.knn_reference_size, seed
        )
    if "learned_density_logistic" in methods:
        feats = np.concatenate([scorer.layer_features(s.image) for s in samples["validation"]])
        labels = np.concatenate([s.mask.reshape(-1) for s in samples["validation"]])
        scorer.combiner = fit_logistic_combiner(feats, labels, LogisticConfig(), list(config.flow_layers))
    if config.train_auxiliary_encoders:
        scorer.void_encoder = train_toy(
            make_encoder(3, seed=seed, void_class=True), train_pairs, ToyTrainConfig(config.encoder_iterations, seed=seed)
        )
        scorer.dirichlet_encoder = train_toy(
            make_encoder(3, seed=seed),
            train_pairs,
            ToyTrainConfig(config.encoder_iterations, seed=seed, loss="prior_network"),
        )
    results = {}
    for method in config.methods:
        acc = BinaryEvalAccumulator()
        for i, s in enumerate(samples["test"]):
            acc.add(scorer.score(method, s.image, i), s.mask)
        results[method] = summarize(acc)
    log.info("seed %d done in %.1fs: %s", seed, time.perf_counter() - t0,
             {k: round(v["AP"], 4) for k, v in results.items()})
    return results

