"""Training losses: Wasserstein score gap, gradient penalty, cross-entropy
alternative, and the supervised composite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import UsageError
from .nets import eval_f, eval_logits

CE_CLAMP_EPS = 1e-12  # sigmoid outputs are clamped here before the log


@dataclass(frozen=True)
class LossReport:
    """Scalars of one classification iteration, all float64.

    total decomposes exactly as data_term + penalty_weight * penalty_term
    (penalty_term is the unweighted mean of the squared norm gaps).
    """
    mode: str
    data_term: float
    penalty_term: float
    penalty_weight: float
    total: float
    mean_f_pos: float
    mean_f_neg: float
    n_pos: int
    n_neg: int
    clamped: bool = False


def wasserstein_loss(f_pos: ad.Tensor, f_neg: ad.Tensor) -> ad.Tensor:
    """Negated mean score gap, -(mean f_pos - mean f_neg).

    Minimizing this drives real scores above synthetic ones; with the
    gradient penalty it is the critic objective of the training loop.
    """
    if f_pos.size == 0 or f_neg.size == 0:
        raise UsageError("wasserstein_loss: empty score batch")
    return ad.neg(ad.reduce_mean(f_pos) - ad.reduce_mean(f_neg))


# The loss used by the earlier introspective formulation; kept as a
# selectable mode.
def binary_cross_entropy_loss(f_pos: ad.Tensor, f_neg: ad.Tensor):
    """-(mean ln sigma(f_pos) + mean ln sigma(-f_neg)); returns (loss, clamped)."""
    if f_pos.size == 0 or f_neg.size == 0:
        raise UsageError("binary_cross_entropy_loss: empty score batch")
    sp = ad.sigmoid(f_pos)
    sn = ad.sigmoid(ad.neg(f_neg))
    clamped = bool(np.any(sp.data < CE_CLAMP_EPS) or np.any(sn.data < CE_CLAMP_EPS))
    loss = ad.neg(ad.reduce_mean(ad.log(ad.clamp_min(sp, CE_CLAMP_EPS)))
                  + ad.reduce_mean(ad.log(ad.clamp_min(sn, CE_CLAMP_EPS))))
    return loss, clamped


def interpolates(x_pos: np.ndarray, x_neg: np.ndarray, alphas: np.ndarray) -> np.ndarray:
    """Per-pair convex mixes alpha*x_pos + (1-alpha)*x_neg."""
    if x_pos.shape != x_neg.shape:
        raise UsageError(f"interpolates: batch shapes differ, {x_pos.shape} vs {x_neg.shape}")
    alphas = np.asarray(alphas, dtype=np.float64)
    if alphas.shape != (x_pos.shape[0],):
        raise UsageError("interpolates: need one alpha per pair")
    if np.any(alphas < 0) or np.any(alphas > 1):
        raise UsageError("interpolates: alphas must lie in [0, 1]")
    a = alphas.reshape((-1,) + (1,) * (x_pos.ndim - 1))
    return a * x_pos + (1.0 - a) * x_neg


def gradient_norm_gap_penalty(params, spec, x_hat: np.ndarray,
                              train=False, dropout_rng=None) -> ad.Tensor:
    """Mean squared gap between input-gradient norms and 1.

    Backpropagates through the input gradient itself (double backprop),
    so the returned node is differentiable with respect to parameters.
    """
    xt = ad.tensor(x_hat)
    scores = eval_f(params, spec, xt, train, dropout_rng)
    g = ad.grad(ad.reduce_sum(scores), xt, create_graph=True)
    axes = tuple(range(1, len(x_hat.shape)))
    norms = ad.l2_norm(g, axis=axes)
    return ad.reduce_mean(ad.square(norms - ad.constant(1.0)))


def gradient_penalty(params, spec, x_pos, x_neg, alphas, weight,
                     train=False, dropout_rng=None) -> ad.Tensor:
    """weight * mean_i (||grad_{x_hat_i} f|| - 1)^2 as a graph node."""
    x_hat = interpolates(x_pos, x_neg, alphas)
    return ad.scale(gradient_norm_gap_penalty(params, spec, x_hat, train, dropout_rng),
                    float(weight))


def critic_loss(params, spec, x_pos, x_neg, alphas, penalty_weight,
                mode="wasserstein", train=False, dropout_rng=None):
    """Full classification loss graph plus its report.

    Returns (scalar loss node, LossReport).  In wasserstein mode the loss
    is the score gap plus the weighted penalty; in cross_entropy mode it
    is the sigmoid loss alone.
    """
    f_pos = eval_f(params, spec, ad.constant(x_pos), train, dropout_rng)
    f_neg = eval_f(params, spec, ad.constant(x_neg), train, dropout_rng)
    clamped = False
    if mode == "wasserstein":
        data = wasserstein_loss(f_pos, f_neg)
        pen = gradient_norm_gap_penalty(params, spec, interpolates(x_pos, x_neg, alphas),
                                        train, dropout_rng)
        total = data + ad.scale(pen, float(penalty_weight))
        pen_val = pen.item()
    elif mode == "cross_entropy":
        data, clamped = binary_cross_entropy_loss(f_pos, f_neg)
        total = data
        pen_val = 0.0
    else:
        raise UsageError(f"unknown loss mode {mode!r}")
    report = LossReport(
        mode=mode,
        data_term=data.item(),
        penalty_term=pen_val,
        penalty_weight=float(penalty_weight) if mode == "wasserstein" else 0.0,
        total=total.item(),
        mean_f_pos=float(f_pos.data.mean()),
        mean_f_neg=float(f_neg.data.mean()),
        n_pos=int(x_pos.shape[0]),
        n_neg=int(x_neg.shape[0]),
        clamped=clamped,
    )
    return total, report


def softmax_cross_entropy(logits: ad.Tensor, labels: np.ndarray) -> ad.Tensor:
    """Mean K-class cross-entropy.  Labels are integers in [0, K).

    The log-sum-exp shift uses the detached row maxima; any constant
    shift leaves both the value and the gradients unchanged.
    """
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= k:
        raise UsageError(f"labels must be {n} integers in [0, {k})")
    shift = ad.constant(logits.data.max(axis=1, keepdims=True))
    z = logits - shift
    lse = ad.log(ad.reduce_sum(ad.exp(z), axis=1))
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    z_true = ad.reduce_sum(ad.mul(z, ad.constant(onehot)), axis=1)
    return ad.reduce_mean(lse - z_true)


def supervised_loss(params, spec, x_pos, labels, x_neg, alphas,
                    mix_weight, penalty_weight, train=False, dropout_rng=None):
    """Softmax cross-entropy plus mix_weight * (score gap + weighted penalty).

    The score terms run on the scalar head of the same trunk that feeds
    the class logits.  Returns (loss node, LossReport with the softmax
    term as data_term).
    """
    logits = eval_logits(params, spec, ad.constant(x_pos), train, dropout_rng)
    ce = softmax_cross_entropy(logits, labels)
    f_pos = eval_f(params, spec, ad.constant(x_pos), train, dropout_rng)
    f_neg = eval_f(params, spec, ad.constant(x_neg), train, dropout_rng)
    gap = ad.reduce_mean(f_neg) - ad.reduce_mean(f_pos)
    pen = gradient_norm_gap_penalty(params, spec, interpolates(x_pos, x_neg, alphas),
                                    train, dropout_rng)
    side = gap + ad.scale(pen, float(penalty_weight))
    total = ce + ad.scale(side, float(mix_weight))
    report = LossReport(
        mode="supervised",
        data_term=ce.item(),
        penalty_term=pen.item(),
        penalty_weight=float(penalty_weight),
        total=total.item(),
        mean_f_pos=float(f_pos.data.mean()),
        mean_f_neg=float(f_neg.data.mean()),
        n_pos=int(x_pos.shape[0]),
        n_neg=int(x_neg.shape[0]),
    )
    return total, report
