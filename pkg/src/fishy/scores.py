"""Per-pixel uncertainty scores from categorical and Dirichlet outputs.

Every score map is oriented so that higher means more anomalous. Logs are
natural. Class probabilities live on the last axis.
"""
from __future__ import annotations

import numpy as np
from scipy.special import digamma, gammaln, log_softmax

from .errors import ContractViolation, TrainingDivergence

OOD_LABEL = 1
IGNORE_LABEL = 255


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _xlogx(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)


def max_prob_score(p: np.ndarray) -> np.ndarray:
    return 1.0 - np.max(p, axis=-1)


def entropy_score(p: np.ndarray) -> np.ndarray:
    return -np.sum(_xlogx(np.asarray(p, dtype=np.float64)), axis=-1)


def _check_stack(stack) -> np.ndarray:
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim < 2 or stack.shape[0] < 1:
        raise ContractViolation("MC stack needs a leading sample axis with T >= 1")
    return stack


def _sample_mean(x: np.ndarray) -> np.ndarray:
    """Mean over axis 0 taken as first slice plus mean deviation; identical slices average to themselves exactly."""
    return x[0] + (x - x[0]).mean(axis=0)


def predictive_entropy(stack: np.ndarray) -> np.ndarray:
    """Entropy of the sample-averaged categorical. ``stack`` is ``(T, ..., C)``."""
    stack = _check_stack(stack)
    return entropy_score(_sample_mean(stack))


def mutual_information(stack: np.ndarray) -> np.ndarray:
    """Predictive entropy minus mean per-sample entropy, floored at zero."""
    stack = _check_stack(stack)
    mi = predictive_entropy(stack) - _sample_mean(entropy_score(stack))
    return np.maximum(mi, 0.0)


def _check_alpha(alpha) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(~(alpha > 0)):
        raise ContractViolation("Dirichlet concentrations must be positive")
    return alpha


def dirichlet_differential_entropy(alpha: np.ndarray) -> np.ndarray:
    """Differential entropy of ``Dir(alpha)`` per pixel, concentrations on the last axis."""
    alpha = _check_alpha(alpha)
    c = alpha.shape[-1]
    a0 = alpha.sum(axis=-1)
    log_beta = gammaln(alpha).sum(axis=-1) - gammaln(a0)
    return log_beta + (a0 - c) * digamma(a0) - np.sum((alpha - 1.0) * digamma(alpha), axis=-1)


def dirichlet_kl(alpha_p, alpha_q) -> np.ndarray:
    """``KL(Dir(alpha_p) || Dir(alpha_q))`` along the last axis."""
    ap = _check_alpha(alpha_p)
    aq = _check_alpha(alpha_q)
    if ap.shape[-1] != aq.shape[-1]:
        raise ContractViolation("Dirichlet parameters have different class counts")
    ap0 = ap.sum(axis=-1)
    aq0 = aq.sum(axis=-1)
    # grouped so that equal arguments cancel exactly
    kl = (
        (gammaln(ap0) - gammaln(aq0))
        + np.sum(gammaln(aq) - gammaln(ap), axis=-1)
        + np.sum((ap - aq) * (digamma(ap) - digamma(ap0)[..., None]), axis=-1)
    )
    return np.maximum(kl, 0.0)


def _dkl_dalpha_q(ap, aq):
    """Gradient of ``KL(Dir(ap) || Dir(aq))`` with respect to ``aq``."""
    aq0 = aq.sum(axis=-1, keepdims=True)
    ap0 = ap.sum(axis=-1, keepdims=True)
    return digamma(aq) - digamma(aq0) - (digamma(ap) - digamma(ap0))


def smoothed_targets(labels: np.ndarray, n_classes: int, eps: float) -> np.ndarray:
    """``(1 - eps) * one_hot + eps / C``; ignored labels give an all-zero row."""
    labels = np.asarray(labels)
    valid = (labels >= 0) & (labels < n_classes)
    out = np.zeros(labels.shape + (n_classes,))
    out[valid] = eps / n_classes
    rows = np.nonzero(valid)
    out[rows + (labels[valid].astype(np.int64),)] += 1.0 - eps
    return out


def prior_network_loss(
    logits: np.ndarray,
    labels: np.ndarray,
    ood_mask: np.ndarray,
    alpha0: float = 100.0,
    label_eps: float = 0.01,
    term_weights: tuple[float, float] = (0.1, 0.1),
    return_grad: bool = False,
):
    """Dirichlet prior-network objective on an ``(H, W, C)`` logit map.

    Logits are log-concentrations. In-distribution pixels (``ood_mask == 0``
    with a valid class label) are pulled towards ``alpha0 * smoothed one-hot``
    and also receive a cross-entropy term against the smoothed target; pixels
    flagged OoD or void (``ood_mask != 0``) are pulled towards the flat
    ``alpha = 1``. Each term is averaged over its own pixel population.
    With ``return_grad`` the gradient with respect to ``logits`` is returned too.
    """
    if alpha0 <= 0 or not 0.0 < label_eps < 1.0:
        raise ContractViolation("need alpha0 > 0 and label_eps in (0, 1)")
    logits = np.asarray(logits, dtype=np.float64)
    c = logits.shape[-1]
    labels = np.asarray(labels)
    ood_mask = np.asarray(ood_mask)
    if labels.shape != logits.shape[:-1] or ood_mask.shape != logits.shape[:-1]:
        raise ContractViolation("labels / mask shape differs from the logit map")
    alpha = np.exp(logits)
    in_px = (ood_mask == 0) & (labels >= 0) & (labels < c)
    out_px = ood_mask != 0
    w_in, w_out = term_weights
    grad = np.zeros_like(logits)
    loss = 0.0

    n_in = int(in_px.sum())
    if n_in:
        target = smoothed_targets(labels[in_px], c, label_eps)
        a_in = alpha0 * target
        a_pred = alpha[in_px]
        loss += w_in * float(np.mean(dirichlet_kl(a_in, a_pred)))
        ls = log_softmax(logits[in_px], axis=-1)
        loss += float(np.mean(-np.sum(target * ls, axis=-1)))
        g = w_in * _dkl_dalpha_q(a_in, a_pred) * a_pred / n_in
        g += (np.exp(ls) - target) / n_in
        grad[in_px] += g
    n_out = int(out_px.sum())
    if n_out:
        a_pred = alpha[out_px]
        flat = np.ones_like(a_pred)
        loss += w_out * float(np.mean(dirichlet_kl(flat, a_pred)))
        grad[out_px] += w_out * _dkl_dalpha_q(flat, a_pred) * a_pred / n_out
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise TrainingDivergence("prior-network loss is not finite")
    return (loss, grad) if return_grad else loss


def void_class_score(p: np.ndarray, void_index: int) -> np.ndarray:
    p = np.asarray(p)
    if not 0 <= void_index < p.shape[-1]:
        raise ContractViolation(f"void index {void_index} out of range for {p.shape[-1]} classes")
    return p[..., void_index].astype(np.float64)


def dirichlet_entropy_from_logits(logits: np.ndarray) -> np.ndarray:
    return dirichlet_differential_entropy(np.exp(np.asarray(logits, dtype=np.float64)))

