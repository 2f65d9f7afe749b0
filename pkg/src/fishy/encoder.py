"""Small deterministic convolutional encoder standing in for a segmentation net.

Three stages of 3x3 / stride-2 convolutions with tanh give taps ``s1``,
``s2``, ``s3`` at strides 2, 4, 8. Taps are read *before* the activation.
A 1x1 head maps the last stage to class logits at stride 8. Dropout sits on
the activations of the middle stage and is only active for MC sampling or
training.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractViolation, TrainingDivergence
from .numerics import AdamState, adam_update, derive_rng, load_container, resize_matrix, save_container
from .scores import prior_network_loss, softmax

log = logging.getLogger(__name__)

TAPS = ("s1", "s2", "s3")
STRIDES = {"s1": 2, "s2": 4, "s3": 8}
DROPOUT_STAGE = 1  # index of the stage whose activations are dropped
IGNORE_LABEL = 255


@dataclass
class ToyEncoder:
    convs: list[tuple[np.ndarray, np.ndarray]]  # W: (9 * C_in, C_out), b: (C_out,)
    head: tuple[np.ndarray, np.ndarray]  # W: (C_last, n_out), b: (n_out,)
    n_classes: int
    dropout_rate: float = 0.0
    seed: int = 0
    void_class: bool = False
    train_history: list[float] = field(default_factory=list, compare=False, repr=False)

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(w.shape[1] for w, _ in self.convs)

    @property
    def n_outputs(self) -> int:
        return self.head[0].shape[1]

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.convs for p in layer] + list(self.head)

    def with_params(self, flat: Sequence[np.ndarray]) -> "ToyEncoder":
        convs = [(flat[2 * i], flat[2 * i + 1]) for i in range(len(self.convs))]
        return ToyEncoder(
            convs, (flat[-2], flat[-1]), self.n_classes, self.dropout_rate, self.seed, self.void_class
        )


def make_encoder(
    n_classes: int = 3,
    widths: Sequence[int] = (16, 32, 64),
    dropout_rate: float = 0.0,
    seed: int = 0,
    in_channels: int = 3,
    void_class: bool = False,
    zero_bias: bool = True,
) -> ToyEncoder:
    if not 0.0 <= dropout_rate < 1.0:
        raise ContractViolation("dropout_rate must lie in [0, 1)")
    rng = derive_rng(seed, "encoder-init")
    convs = []
    c_in = in_channels
    for c_out in widths:
        fan_in = 9 * c_in
        w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, c_out))
        b = np.zeros(c_out) if zero_bias else rng.normal(0.0, 0.1, size=c_out)
        convs.append((w, b))
        c_in = c_out
    n_out = n_classes + (1 if void_class else 0)
    head = (rng.normal(0.0, 1.0 / np.sqrt(c_in), size=(c_in, n_out)), np.zeros(n_out))
    return ToyEncoder(convs, head, n_classes, dropout_rate, seed, void_class)


# ---------------------------------------------------------------------------
# convolution primitives (3x3 kernel, stride 2, zero padding 1)
# ---------------------------------------------------------------------------


def _out_size(n: int) -> int:
    return (n + 1) // 2


def _im2col(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    ho, wo = _out_size(h), _out_size(w)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((n, ho, wo, 9, c))
    for i in range(3):
        for j in range(3):
            cols[:, :, :, 3 * i + j, :] = xp[:, i : i + 2 * ho - 1 : 2, j : j + 2 * wo - 1 : 2, :]
    return cols.reshape(n, ho, wo, 9 * c)


def _col2im(dcols: np.ndarray, x_shape: tuple[int, ...]) -> np.ndarray:
    n, h, w, c = x_shape
    ho, wo = dcols.shape[1:3]
    dxp = np.zeros((n, h + 2, w + 2, c))
    dc = dcols.reshape(n, ho, wo, 9, c)
    for i in range(3):
        for j in range(3):
            dxp[:, i : i + 2 * ho - 1 : 2, j : j + 2 * wo - 1 : 2, :] += dc[:, :, :, 3 * i + j, :]
    return dxp[:, 1:-1, 1:-1, :]


def _as_batch(image) -> tuple[np.ndarray, bool]:
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ContractViolation(f"expected (H, W, C) or (N, H, W, C) images, got {x.shape}")
    return x, False


def _forward(enc: ToyEncoder, x: np.ndarray, masks=None, keep_cache=False):
    """Batched forward pass. ``masks`` is a dropout keep-mask for the middle stage (already scaled)."""
    if x.shape[-1] != enc.convs[0][0].shape[0] // 9:
        raise ContractViolation("image channel count does not match the encoder")
    taps = {}
    cache = {"x_shapes": [], "cols": [], "acts": []}
    a = x
    for k, (w, b) in enumerate(enc.convs):
        cols = _im2col(a)
        pre = cols @ w + b
        taps[TAPS[k]] = pre
        act = np.tanh(pre)
        if keep_cache:
            cache["x_shapes"].append(a.shape)
            cache["cols"].append(cols)
            cache["acts"].append(act)
        if k == DROPOUT_STAGE and masks is not None:
            act = act * masks
        a = act
    logits = a @ enc.head[0] + enc.head[1]
    if keep_cache:
        cache["last"] = a
        cache["masks"] = masks
    return taps, logits, cache


def _backward(enc: ToyEncoder, cache, g_logits=None, g_taps=None, need_input=False):
    """Gradients for all parameters (and optionally the input) given upstream grads."""
    g_taps = g_taps or {}
    n_stages = len(enc.convs)
    last = cache["last"]
    grads_conv: list = [None] * n_stages
    if g_logits is not None:
        g_head_w = np.tensordot(last, g_logits, axes=([0, 1, 2], [0, 1, 2]))
        g_head_b = g_logits.sum(axis=(0, 1, 2))
        g_a = g_logits @ enc.head[0].T
    else:
        g_head_w = np.zeros_like(enc.head[0])
        g_head_b = np.zeros_like(enc.head[1])
        g_a = np.zeros_like(last)
    g_x = None
    for k in range(n_stages - 1, -1, -1):
        act = cache["acts"][k]
        if k == DROPOUT_STAGE and cache["masks"] is not None:
            g_a = g_a * cache["masks"]
        g_pre = g_a * (1.0 - act * act)
        if TAPS[k] in g_taps:
            g_pre = g_pre + g_taps[TAPS[k]]
        w = enc.convs[k][0]
        cols = cache["cols"][k]
        grads_conv[k] = (
            np.tensordot(cols, g_pre, axes=([0, 1, 2], [0, 1, 2])),
            g_pre.sum(axis=(0, 1, 2)),
        )
        if k > 0 or need_input:
            g_cols = g_pre @ w.T
            g_a = _col2im(g_cols, cache["x_shapes"][k])
        if k == 0 and need_input:
            g_x = g_a
    flat = [p for pair in grads_conv for p in pair] + [g_head_w, g_head_b]
    return flat, g_x


def _dropout_masks(enc: ToyEncoder, shape, rng: np.random.Generator) -> np.ndarray:
    keep = 1.0 - enc.dropout_rate
    return (rng.random(shape) < keep) / keep


def _stage_shape(enc: ToyEncoder, x_shape, stage: int) -> tuple[int, ...]:
    n, h, w, _ = x_shape
    for _ in range(stage + 1):
        h, w = _out_size(h), _out_size(w)
    return (n, h, w, enc.widths[stage])


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------


def encode(enc: ToyEncoder, image, layer_id: str) -> np.ndarray:
    """Pre-activation embedding map ``(H', W', D)`` (or batched) at tap ``layer_id``."""
    if layer_id not in TAPS[: len(enc.convs)]:
        raise ContractViolation(f"unknown layer id {layer_id!r}; expected one of {TAPS[:len(enc.convs)]}")
    x, single = _as_batch(image)
    taps, _, _ = _forward(enc, x)
    out = taps[layer_id]
    return out[0] if single else out


def encode_all(enc: ToyEncoder, image) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """All taps and logits in one pass."""
    x, single = _as_batch(image)
    taps, logits, _ = _forward(enc, x)
    if single:
        return {k: v[0] for k, v in taps.items()}, logits[0]
    return taps, logits


def predict(enc: ToyEncoder, image) -> np.ndarray:
    """Deterministic logits at stride 8."""
    x, single = _as_batch(image)
    _, logits, _ = _forward(enc, x)
    return logits[0] if single else logits


def mc_samples(enc: ToyEncoder, image, T: int, seed: int) -> np.ndarray:
    """``(T, H', W', C)`` softmax outputs under independent dropout masks."""
    if T < 1:
        raise ContractViolation("T must be >= 1")
    if enc.dropout_rate == 0.0 and T > 1:
        warnings.warn("dropout_rate is 0: all MC slices are identical", RuntimeWarning, stacklevel=2)
    x, single = _as_batch(image)
    if not single:
        raise ContractViolation("mc_samples takes a single image")
    out = []
    mshape = _stage_shape(enc, x.shape, DROPOUT_STAGE)
    for t in range(T):
        masks = None
        if enc.dropout_rate > 0:
            masks = _dropout_masks(enc, mshape, derive_rng(seed, "mc", t))
        _, logits, _ = _forward(enc, x, masks)
        out.append(softmax(logits[0]))
    return np.stack(out)


def input_gradient(enc: ToyEncoder, image, tap_grads: dict[str, np.ndarray]) -> np.ndarray:
    """Gradient of ``sum_l <tap_grads[l], tap_l(image)>`` with respect to the image."""
    x, single = _as_batch(image)
    _, _, cache = _forward(enc, x, keep_cache=True)
    g = {k: (v[None] if single else v) for k, v in tap_grads.items()}
    _, g_x = _backward(enc, cache, None, g, need_input=True)
    return g_x[0] if single else g_x


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class ToyTrainConfig:
    iterations: int = 300
    batch_size: int = 4
    learning_rate: float = 1e-2
    seed: int = 0
    loss: str = "ce"  # "ce" | "prior_network"
    ood_entropy_weight: float = 0.0
    prior_alpha0: float = 100.0
    prior_label_eps: float = 0.01
    prior_term_weights: tuple[float, float] = (0.1, 0.1)


def _upsample_logits(logits: np.ndarray, shape) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rh = resize_matrix(logits.shape[1], shape[0])
    rw = resize_matrix(logits.shape[2], shape[1])
    return np.einsum("Hh,nhwc,Ww->nHWc", rh, logits, rw, optimize=True), rh, rw


def _pixel_loss(enc: ToyEncoder, logits_full: np.ndarray, labels: np.ndarray, cfg: ToyTrainConfig):
    """Loss and gradient with respect to full-resolution logits."""
    c = enc.n_classes
    void = labels == IGNORE_LABEL
    if cfg.loss == "prior_network":
        return prior_network_loss(
            logits_full,
            np.where(void, IGNORE_LABEL, labels),
            void.astype(np.uint8),
            cfg.prior_alpha0,
            cfg.prior_label_eps,
            cfg.prior_term_weights,
            return_grad=True,
        )
    if cfg.loss != "ce":
        raise ContractViolation(f"unknown loss {cfg.loss!r}")
    target = labels.astype(np.int64)
    if enc.void_class:
        target = np.where(void, c, target)
        valid = np.ones_like(void)
    else:
        valid = ~void & (target < c)
    z = logits_full - logits_full.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(logp)
    grad = np.zeros_like(logits_full)
    n_valid = max(int(valid.sum()), 1)
    t_safe = np.where(valid, target, 0)
    picked = np.take_along_axis(logp, t_safe[..., None], axis=-1)[..., 0]
    loss = -float(np.sum(picked[valid])) / n_valid
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, t_safe[..., None], 1.0, axis=-1)
    grad += np.where(valid[..., None], p - onehot, 0.0) / n_valid
    if cfg.ood_entropy_weight > 0 and void.any():
        n_void = int(void.sum())
        ent = -np.sum(p * logp, axis=-1)
        loss -= cfg.ood_entropy_weight * float(np.sum(ent[void])) / n_void
        # d(-H)/dz = p * (log p + H)
        g_neg_ent = p * (logp + ent[..., None])
        grad += cfg.ood_entropy_weight * np.where(void[..., None], g_neg_ent, 0.0) / n_void
    return loss, grad


def train_toy(enc: ToyEncoder, dataset: Sequence[tuple[np.ndarray, np.ndarray]], config: ToyTrainConfig) -> ToyEncoder:
    """Supervised training on ``(image, class raster)`` pairs; returns a new encoder.

    ``train_history`` on the result holds the per-iteration loss.
    """
    if not dataset:
        raise ContractViolation("empty training set")
    images = np.stack([np.asarray(im, dtype=np.float64) for im, _ in dataset])
    labels = np.stack([np.asarray(lb) for _, lb in dataset])
    if config.iterations == 0:
        return enc
    rng = derive_rng(config.seed, "toy-train")
    params = enc.params()
    state = AdamState.for_params(params)
    history = []
    current = enc
    for it in range(config.iterations):
        idx = rng.choice(len(images), size=min(config.batch_size, len(images)), replace=False)
        x, y = images[idx], labels[idx]
        masks = None
        if current.dropout_rate > 0:
            masks = _dropout_masks(current, _stage_shape(current, x.shape, DROPOUT_STAGE), rng)
        _, logits, cache = _forward(current, x, masks, keep_cache=True)
        full, rh, rw = _upsample_logits(logits, y.shape[1:3])
        loss, g_full = _pixel_loss(current, full, y, config)
        if not np.isfinite(loss):
            raise TrainingDivergence(f"toy encoder loss diverged at iteration {it}", last_good_iteration=it - 1)
        g_logits = np.einsum("Hh,nHWc,Ww->nhwc", rh, g_full, rw, optimize=True)
        grads, _ = _backward(current, cache, g_logits)
        params, state = adam_update(params, grads, state, config.learning_rate)
        current = current.with_params(params)
        history.append(loss)
        if it % 50 == 0:
            log.debug("toy encoder iter %d loss %.4f", it, loss)
    current.train_history = history
    return current


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_encoder(enc: ToyEncoder, path) -> None:
    header = {
        "format": "fishy-encoder",
        "version": 1,
        "n_classes": enc.n_classes,
        "widths": list(enc.widths),
        "in_channels": enc.convs[0][0].shape[0] // 9,
        "dropout_rate": enc.dropout_rate,
        "seed": enc.seed,
        "void_class": enc.void_class,
    }
    save_container(path, header, enc.params())


def load_encoder(path) -> ToyEncoder:
    header, tensors = load_container(path)
    if header.get("format") != "fishy-encoder":
        raise ContractViolation("container does not hold an encoder")
    n = len(header["widths"])
    convs = [(tensors[2 * i], tensors[2 * i + 1]) for i in range(n)]
    return ToyEncoder(
        convs,
        (tensors[2 * n], tensors[2 * n + 1]),
        int(header["n_classes"]),
        float(header["dropout_rate"]),
        int(header["seed"]),
        bool(header["void_class"]),
    )
