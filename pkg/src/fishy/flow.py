"""Real-NVP density over embedding vectors.

A model is a list of steps, each an affine coupling layer, a batch-norm
bijector or a fixed permutation. ``flow_forward`` maps an embedding ``z`` to
a latent ``eta`` with a standard normal prior and returns the accumulated
log |det J|, so that ``NLL(z) = D/2 log(2 pi) + |eta|^2 / 2 - log_det``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import ContractViolation, NumericOverflow, TrainingDivergence
from .knn import EmbeddingSet
from .numerics import (
    AdamState,
    Mlp,
    adam_update,
    derive_rng,
    load_container,
    mlp_backward,
    mlp_forward,
    mlp_init,
    save_container,
)

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class CouplingLayer:
    """``y_b = x_b * exp(s(x_a)) + t(x_a)``, ``y_a = x_a``.

    ``parity`` 0 conditions on the first ``D // 2`` dimensions and transforms
    the rest; parity 1 swaps the roles. Raw scales are squashed with
    ``c * tanh(s / c)``.
    """

    dim: int
    parity: int
    scale_net: Mlp
    shift_net: Mlp
    scale_clamp: float = 2.0

    def __post_init__(self):
        half = self.dim // 2
        first, second = slice(0, half), slice(half, self.dim)
        self.cond_idx, self.tran_idx = (first, second) if self.parity == 0 else (second, first)
        n_first, n_second = half, self.dim - half
        n_cond, n_tran = (n_first, n_second) if self.parity == 0 else (n_second, n_first)
        for net in (self.scale_net, self.shift_net):
            if net.in_dim != n_cond or net.out_dim != n_tran:
                raise ContractViolation("conditioner widths do not match the coupling split")

    def _scales(self, xa):
        s_raw, s_cache = mlp_forward(self.scale_net, xa)
        th = np.tanh(s_raw / self.scale_clamp)
        t, t_cache = mlp_forward(self.shift_net, xa)
        return self.scale_clamp * th, th, t, s_cache, t_cache

    def forward(self, x):
        xa, xb = x[:, self.cond_idx], x[:, self.tran_idx]
        s, th, t, s_cache, t_cache = self._scales(xa)
        es = np.exp(s)
        y = np.empty_like(x)
        y[:, self.cond_idx] = xa
        y[:, self.tran_idx] = xb * es + t
        return y, s.sum(axis=1), (xb, es, th, s_cache, t_cache)

    def inverse(self, y):
        ya, yb = y[:, self.cond_idx], y[:, self.tran_idx]
        s, _, t, _, _ = self._scales(ya)
        x = np.empty_like(y)
        x[:, self.cond_idx] = ya
        x[:, self.tran_idx] = (yb - t) * np.exp(-s)
        return x

    def backward(self, cache, gy, gld):
        xb, es, th, s_cache, t_cache = cache
        gyb = gy[:, self.tran_idx]
        gs = gyb * xb * es + gld[:, None]
        gs_raw = gs * (1.0 - th * th)
        ga_s, grads_s = mlp_backward(self.scale_net, s_cache, gs_raw)
        ga_t, grads_t = mlp_backward(self.shift_net, t_cache, gyb)
        gx = np.empty_like(gy)
        gx[:, self.cond_idx] = gy[:, self.cond_idx] + ga_s + ga_t
        gx[:, self.tran_idx] = gyb * es
        return gx, [p for pair in grads_s + grads_t for p in pair]

    def params(self):
        return self.scale_net.params() + self.shift_net.params()

    def set_params(self, flat):
        n = len(self.scale_net.layers)
        self.scale_net = Mlp([(flat[2 * i], flat[2 * i + 1]) for i in range(n)])
        rest = flat[2 * n :]
        self.shift_net = Mlp([(rest[2 * i], rest[2 * i + 1]) for i in range(len(rest) // 2)])


@dataclass
class BatchNormBijector:
    """Per-dimension standardisation; batch statistics while training, running ones otherwise."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    eps: float = 1e-5

    def forward(self, x, training=False):
        if training:
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            self.running_mean = self.momentum * self.running_mean + (1 - self.momentum) * mean
            self.running_var = self.momentum * self.running_var + (1 - self.momentum) * var
        else:
            mean, var = self.running_mean, self.running_var
        denom = np.sqrt(var + self.eps)
        y = (x - mean) / denom
        log_det = np.full(x.shape[0], -0.5 * np.sum(np.log(var + self.eps)))
        return y, log_det, (training, y, x - mean, var, denom)

    def inverse(self, y):
        return y * np.sqrt(self.running_var + self.eps) + self.running_mean

    def backward(self, cache, gy, gld):
        training, y, centred, var, denom = cache
        if not training:
            return gy / denom, []
        n = gy.shape[0]
        gx = (gy - gy.mean(axis=0) - y * (gy * y).mean(axis=0)) / denom
        # log-det depends on x through the batch variance
        gvar = -0.5 * gld.sum() / (var + self.eps)
        gx += gvar * 2.0 * centred / n
        return gx, []

    def params(self):
        return []

    def set_params(self, flat):
        pass


@dataclass
class Permutation:
    perm: np.ndarray

    def __post_init__(self):
        self.perm = np.asarray(self.perm, dtype=np.int64)
        if not np.array_equal(np.sort(self.perm), np.arange(len(self.perm))):
            raise ContractViolation("permutation is not a bijection")
        self.inv = np.argsort(self.perm)

    def forward(self, x, training=False):
        return x[:, self.perm], np.zeros(x.shape[0]), None

    def inverse(self, y):
        return y[:, self.inv]

    def backward(self, cache, gy, gld):
        return gy[:, self.inv], []

    def params(self):
        return []

    def set_params(self, flat):
        pass


FlowStep = Union[CouplingLayer, BatchNormBijector, Permutation]


@dataclass
class FlowModel:
    dim: int
    steps: list

    def params(self) -> list[np.ndarray]:
        return [p for step in self.steps for p in step.params()]

    def set_params(self, flat: list[np.ndarray]) -> None:
        i = 0
        for step in self.steps:
            n = len(step.params())
            if n:
                step.set_params(list(flat[i : i + n]))
                i += n

    def n_couplings(self) -> int:
        return sum(isinstance(s, CouplingLayer) for s in self.steps)


@dataclass
class FlowTrainConfig:
    iterations: int = 5000
    batch_size: int = 256
    learning_rate: float = 1e-4
    seed: int = 0
    holdout_fraction: float = 0.1
    holdout_count: int = 2000
    steps: int = 32
    hidden: int | None = None
    scale_clamp: float = 2.0
    eval_every: int = 250

    def __post_init__(self):
        if self.iterations < 0:
            raise ContractViolation("iterations must be >= 0")
        if self.batch_size < 2:
            raise ContractViolation("batch_size must be >= 2 for batch-norm statistics")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ContractViolation("holdout_fraction must lie in (0, 1)")


def flow_init(
    dim: int, steps: int, seed: int = 0, hidden: int | None = None, scale_clamp: float = 2.0, eps: float = 1e-5
) -> FlowModel:
    """Identity-initialised model of ``steps`` (coupling, batch-norm, permutation) triples."""
    if dim < 2 or steps < 1:
        raise ContractViolation("flow needs dim >= 2 and steps >= 1")
    hidden = hidden or max(32, 2 * dim)
    rng = derive_rng(seed, "flow-init")
    half = dim // 2
    out = []
    for k in range(steps):
        parity = k % 2
        n_cond, n_tran = (half, dim - half) if parity == 0 else (dim - half, half)
        sizes = [n_cond, hidden, hidden, n_tran]
        out.append(
            CouplingLayer(
                dim,
                parity,
                mlp_init(sizes, rng, zero_last=True),
                mlp_init(sizes, rng, zero_last=True),
                scale_clamp,
            )
        )
        # running_var + eps == 1 exactly, so a fresh model is an exact identity
        out.append(BatchNormBijector(np.zeros(dim), np.full(dim, 1.0 - eps), eps=eps))
        out.append(Permutation(rng.permutation(dim)))
    return FlowModel(dim, out)


def _as_matrix(model: FlowModel, z) -> np.ndarray:
    if isinstance(z, EmbeddingSet):
        z = z.vectors
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    if z.ndim != 2 or z.shape[1] != model.dim:
        raise ContractViolation(f"expected (batch, {model.dim}) embeddings, got {z.shape}")
    return z


def _forward(model: FlowModel, z: np.ndarray, training: bool, keep_cache: bool):
    x = z
    log_det = np.zeros(z.shape[0])
    caches = []
    for i, step in enumerate(model.steps):
        if isinstance(step, CouplingLayer):
            x, ld, cache = step.forward(x)
        else:
            x, ld, cache = step.forward(x, training=training)
        if not np.all(np.isfinite(x)):
            raise NumericOverflow(f"non-finite values after flow step {i}", step_index=i)
        log_det = log_det + ld
        if keep_cache:
            caches.append(cache)
    return x, log_det, caches


def _backward(model: FlowModel, caches, g_eta, g_ld):
    grads: list[list[np.ndarray]] = []
    g = g_eta
    for step, cache in zip(reversed(model.steps), reversed(caches)):
        g, pg = step.backward(cache, g, g_ld)
        grads.append(pg)
    flat = [p for pg in reversed(grads) for p in pg]
    return g, flat


def flow_forward(model: FlowModel, z, training: bool = False):
    """``(eta, log_det)``. ``training`` switches batch-norm to batch statistics."""
    z = _as_matrix(model, z)
    if not np.all(np.isfinite(z)):
        raise ContractViolation("flow input must be finite")
    eta, log_det, _ = _forward(model, z, training, keep_cache=False)
    return eta, log_det


def flow_inverse(model: FlowModel, eta) -> np.ndarray:
    x = _as_matrix(model, eta)
    for i in range(len(model.steps) - 1, -1, -1):
        x = model.steps[i].inverse(x)
        if not np.all(np.isfinite(x)):
            raise NumericOverflow(f"non-finite values inverting flow step {i}", step_index=i)
    return x


def nll_from_latent(eta: np.ndarray, log_det: np.ndarray) -> np.ndarray:
    d = eta.shape[1]
    return 0.5 * d * LOG_2PI + 0.5 * np.sum(eta * eta, axis=1) - log_det


def flow_nll(model: FlowModel, z) -> np.ndarray:
    eta, log_det = flow_forward(model, z)
    return nll_from_latent(eta, log_det)


def flow_nll_grad(model: FlowModel, z) -> tuple[np.ndarray, np.ndarray]:
    """Per-vector NLL and its gradient with respect to the input (inference mode)."""
    z = _as_matrix(model, z)
    eta, log_det, caches = _forward(model, z, training=False, keep_cache=True)
    gz, _ = _backward(model, caches, eta, -np.ones(z.shape[0]))
    return nll_from_latent(eta, log_det), gz


def flow_mean_nll(model: FlowModel, embeddings, chunk: int = 8192) -> float:
    """Mean NLL over a set of vectors, evaluated in chunks."""
    z = _as_matrix(model, embeddings)
    if len(z) == 0:
        raise ContractViolation("mean NLL of an empty set is undefined")
    total = 0.0
    for start in range(0, len(z), chunk):
        total += float(np.sum(flow_nll(model, z[start : start + chunk])))
    return total / len(z)


def _loss_and_grads(model: FlowModel, batch: np.ndarray):
    eta, log_det, caches = _forward(model, batch, training=True, keep_cache=True)
    n = batch.shape[0]
    loss = float(np.mean(nll_from_latent(eta, log_det)))
    _, grads = _backward(model, caches, eta / n, np.full(n, -1.0 / n))
    return loss, grads


def finalize_batchnorm(model: FlowModel, data: np.ndarray) -> None:
    """Replace running statistics by the exact statistics of ``data`` propagated step by step."""
    x = np.asarray(data, dtype=np.float64)
    for step in model.steps:
        if isinstance(step, BatchNormBijector):
            step.running_mean = x.mean(axis=0)
            step.running_var = x.var(axis=0)
        x = step.forward(x)[0]


def split_holdout(n: int, config: FlowTrainConfig) -> tuple[np.ndarray, np.ndarray]:
    n_hold = max(1, min(config.holdout_count, int(config.holdout_fraction * n)))
    order = derive_rng(config.seed, "flow-holdout").permutation(n)
    return order[n_hold:], order[:n_hold]


def flow_train(embeddings, config: FlowTrainConfig, callback=None):
    """Fit a fresh model by Adam on mean NLL.

    Returns ``(model, curve)`` where ``curve`` lists ``(iteration, holdout mean NLL)``.
    The last curve point is measured after batch-norm statistics are finalised.
    """
    z = embeddings.vectors if isinstance(embeddings, EmbeddingSet) else np.asarray(embeddings)
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise ContractViolation("embeddings must be a (N, D) matrix")
    model = flow_init(z.shape[1], config.steps, config.seed, config.hidden, config.scale_clamp)
    if config.iterations == 0:
        return model, []
    if len(z) < 10 * config.batch_size:
        raise ContractViolation(f"need at least {10 * config.batch_size} embeddings, got {len(z)}")
    train_idx, hold_idx = split_holdout(len(z), config)
    train, hold = z[train_idx], z[hold_idx]
    rng = derive_rng(config.seed, "flow-batches")
    params = model.params()
    state = AdamState.for_params(params)
    curve: list[tuple[int, float]] = []
    last_good = 0
    for it in range(1, config.iterations + 1):
        batch = train[rng.integers(0, len(train), config.batch_size)]
        try:
            loss, grads = _loss_and_grads(model, batch)
            if not math.isfinite(loss):
                raise TrainingDivergence("non-finite loss")
            params, state = adam_update(params, grads, state, config.learning_rate)
        except (NumericOverflow, TrainingDivergence) as exc:
            raise TrainingDivergence(
                f"flow training diverged at iteration {it}: {exc}", last_good_iteration=last_good
            ) from exc
        model.set_params(params)
        last_good = it
        if it % config.eval_every == 0 and it != config.iterations:
            curve.append((it, flow_mean_nll(model, hold)))
            log.debug("flow iter %d loss %.4f holdout %.4f", it, loss, curve[-1][1])
            if callback is not None:
                callback(it, curve[-1][1])
    finalize_batchnorm(model, train[: min(len(train), 200_000)])
    curve.append((config.iterations, flow_mean_nll(model, hold)))
    return model, curve


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def flow_to_container(model: FlowModel) -> tuple[dict, list[np.ndarray]]:
    steps, tensors = [], []
    for step in model.steps:
        if isinstance(step, CouplingLayer):
            steps.append(
                {
                    "kind": "coupling",
                    "parity": step.parity,
                    "scale_clamp": step.scale_clamp,
                    "scale_layers": len(step.scale_net.layers),
                    "shift_layers": len(step.shift_net.layers),
                }
            )
            tensors.extend(step.params())
        elif isinstance(step, BatchNormBijector):
            steps.append({"kind": "batchnorm", "momentum": step.momentum, "eps": step.eps})
            tensors.extend([step.running_mean, step.running_var])
        else:
            steps.append({"kind": "permutation"})
            tensors.append(step.perm.astype(np.float64))
    return {"format": "fishy-flow", "version": 1, "dim": model.dim, "steps": steps}, tensors


def flow_from_container(header: dict, tensors: list[np.ndarray]) -> FlowModel:
    if header.get("format") != "fishy-flow":
        raise ContractViolation("container does not hold a flow model")
    dim = int(header["dim"])
    it = iter(tensors)
    steps: list = []
    for spec in header["steps"]:
        kind = spec["kind"]
        if kind == "coupling":
            s = Mlp([(next(it), next(it)) for _ in range(spec["scale_layers"])])
            t = Mlp([(next(it), next(it)) for _ in range(spec["shift_layers"])])
            steps.append(CouplingLayer(dim, int(spec["parity"]), s, t, float(spec["scale_clamp"])))
        elif kind == "batchnorm":
            steps.append(BatchNormBijector(next(it), next(it), float(spec["momentum"]), float(spec["eps"])))
        elif kind == "permutation":
            steps.append(Permutation(np.rint(next(it)).astype(np.int64)))
        else:
            raise ContractViolation(f"unknown flow step kind {kind!r}")
    return FlowModel(dim, steps)


def save_flow(model: FlowModel, path, extra: dict | None = None) -> None:
    header, tensors = flow_to_container(model)
    if extra:
        header["meta"] = extra
    save_container(path, header, tensors)


def load_flow(path) -> tuple[FlowModel, dict]:
    header, tensors = load_container(path)
    return flow_from_container(header, tensors), header.get("meta", {})
