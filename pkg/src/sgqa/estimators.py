"""Gradient estimators for sampling through a hard top-k selection.

Each estimator maps the downstream loss gradient w.r.t. the discrete
mask z back to a gradient w.r.t. the scores theta:

* STE            -- identity pass-through baseline.
* IMLE           -- difference of MAP states under the score vector and a
                    loss-shifted target, sharing one Gumbel perturbation.
* AIMLE          -- IMLE with the shift magnitude lambda adapted online to
                    keep the gradient's L0 norm near a target.
* SIMPLE         -- exact Jacobian of the k-subset marginals times grad_z.
* Gumbel SoftSub -- straight-through pair of a hard mask and a relaxed
                    soft mask built from successive tempered softmaxes.

All functions are pure; AIMLE threads its state explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .subsets import (
    KSubsetDistribution,
    RandomSource,
    enumerate_ksubsets,
    exact_marginals,
    gumbel_noise,
    marginals_jacobian,
    subset_logprob,
    topk_map,
)

_LAMBDA_MIN = 1e-4
_LAMBDA_MAX = 1e4
_MASK_NEG = -1e9


class Method(str, Enum):
    STE = "ste"
    IMLE = "imle"
    AIMLE = "aimle"
    SIMPLE = "simple"
    GUMBEL_SOFTSUB_ST = "softsub"
    NONE = "none"


@dataclass(frozen=True)
class EstimatorConfig:
    method: Method = Method.AIMLE
    lam: float = 10.0
    tau: float = 1.0
    ema_decay: float = 0.9
    target_nonzeros: float = 1.0
    lambda_adapt_rate: float = 0.1
    noise_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.lam <= 0 or self.tau <= 0:
            raise ValueError("lam and tau must be strictly positive")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in (0, 1)")
        if self.target_nonzeros <= 0 or self.lambda_adapt_rate <= 0:
            raise ValueError("target_nonzeros and lambda_adapt_rate must be positive")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be nonnegative")


@dataclass(frozen=True)
class AimleState:
    """Adaptive-lambda state: starts at lam=1 and drifts during training."""

    lam: float = 1.0
    ema_l0: float = 0.0

    def __post_init__(self):
        if self.lam <= 0 or self.ema_l0 < 0:
            raise ValueError("lam must be positive and ema_l0 nonnegative")


@dataclass(frozen=True)
class RelaxedMask:
    """Straight-through pair: forward consumers read ``hard``, backward
    consumers differentiate through ``soft``."""

    soft: np.ndarray
    hard: np.ndarray
    k: int


def ste_grad(grad_z: np.ndarray) -> np.ndarray:
    """Identity pass-through of the mask gradient.

    Coincides with the IMLE direction in the lambda -> 0 limit on regions
    where the MAP state responds smoothly; kept as the trivial baseline.
    """
    return np.asarray(grad_z, dtype=np.float64).copy()


def imle_grad(
    theta: np.ndarray,
    grad_z: np.ndarray,
    k: int,
    lam: float,
    rng: RandomSource | None = None,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """(1/lam) [MAP(theta + eps) - MAP(theta' + eps)], theta' = theta - lam grad_z.

    One Gumbel draw eps is shared by both MAP calls, so a zero loss
    gradient yields an exactly-zero output. Pass ``noise`` to reuse the
    perturbation from the forward pass instead of drawing from ``rng``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    grad_z = np.asarray(grad_z, dtype=np.float64)
    if grad_z.shape != theta.shape:
        raise ValueError("grad_z must match theta in length")
    if lam <= 0:
        raise ValueError("lam must be positive")
    if noise is None:
        if rng is None:
            raise ValueError("either rng or noise is required")
        noise = gumbel_noise(rng, theta.shape[0])
    target = theta - lam * grad_z
    return (topk_map(theta + noise, k) - topk_map(target + noise, k)) / lam


def aimle_update(
    state: AimleState, grad_theta: np.ndarray, cfg: EstimatorConfig
) -> AimleState:
    """One adaptation step from the L0 norm of a score gradient."""
    l0 = float(np.count_nonzero(np.asarray(grad_theta)))
    return aimle_update_from_count(state, l0, cfg)


def aimle_update_from_count(
    state: AimleState, nonzeros: float, cfg: EstimatorConfig
) -> AimleState:
    """Adaptation step from a precomputed (possibly batch-averaged) L0 count.

    Too few nonzero gradient entries means the target MAP rarely differs
    from the prior MAP, so lambda grows to perturb harder; too many means
    lambda shrinks.
    """
    ema = cfg.ema_decay * state.ema_l0 + (1.0 - cfg.ema_decay) * nonzeros
    if ema < cfg.target_nonzeros:
        lam = state.lam * (1.0 + cfg.lambda_adapt_rate)
    else:
        lam = state.lam / (1.0 + cfg.lambda_adapt_rate)
    lam = float(np.clip(lam, _LAMBDA_MIN, _LAMBDA_MAX))
    return AimleState(lam=lam, ema_l0=ema)


def simple_grad(theta: np.ndarray, grad_z: np.ndarray, k: int) -> np.ndarray:
    """Exact marginal Jacobian times grad_z (backward map only).

    The forward pass still consumes a discrete sample; this is the exact
    gradient of E[loss] whenever the loss is linear in z.
    """
    theta = np.asarray(theta, dtype=np.float64)
    grad_z = np.asarray(grad_z, dtype=np.float64)
    if grad_z.shape != theta.shape:
        raise ValueError("grad_z must match theta in length")
    return marginals_jacobian(KSubsetDistribution(theta, k)) @ grad_z


def _softsub_rounds(
    theta_perturbed: np.ndarray, k: int, tau: float
) -> tuple[np.ndarray, list[np.ndarray], np.ndarray]:
    """Soft mask as k tempered softmax rounds with hard masking in between.

    Round r's softmax runs over the scores with the r-1 already-selected
    coordinates pushed to -1e9; selection order follows the hard top-k.
    Returns (soft, per-round probabilities, additive masks per round).
    """
    n = theta_perturbed.shape[0]
    order = np.argsort(-theta_perturbed, kind="stable")
    soft = np.zeros(n)
    probs = []
    masks = np.zeros((k, n))
    mask = np.zeros(n)
    for r in range(k):
        masks[r] = mask
        s = (theta_perturbed + mask) / tau
        s = s - s.max()
        p = np.exp(s)
        p /= p.sum()
        probs.append(p)
        soft += p
        mask = mask.copy()
        mask[order[r]] = _MASK_NEG
    return soft, probs, masks


def gumbel_softsub_st(
    theta: np.ndarray, k: int, tau: float, rng: RandomSource
) -> RelaxedMask:
    """Relaxed top-k sample: hard mask plus its soft surrogate.

    The hard mask is MAP(theta + g) for one Gumbel draw g; the soft mask
    sums k successive temperature-tau softmax rounds over the same
    perturbed scores. Forward consumers should use ``hard`` and backward
    consumers the derivative of ``soft`` (straight-through contract,
    wired by the autodiff layer).
    """
    theta = np.asarray(theta, dtype=np.float64)
    if tau <= 0:
        raise ValueError("tau must be positive")
    if not 1 <= k <= theta.shape[0]:
        raise ValueError(f"k={k} out of range for n={theta.shape[0]}")
    g = gumbel_noise(rng, theta.shape[0])
    perturbed = theta + g
    hard = topk_map(perturbed, k)
    soft, _, _ = _softsub_rounds(perturbed, k, tau)
    return RelaxedMask(soft=soft, hard=hard, k=k)


def softsub_vjp(
    theta_perturbed: np.ndarray, k: int, tau: float, grad_z: np.ndarray
) -> np.ndarray:
    """Vector-Jacobian product of the soft mask w.r.t. the raw scores.

    grad_theta = sum_r J_softmax_r^T grad_z with the per-round masks held
    fixed; each round contributes (p * v - p (p . v)) / tau.
    """
    _, probs, _ = _softsub_rounds(theta_perturbed, k, tau)
    grad = np.zeros_like(theta_perturbed)
    for p in probs:
        grad += (p * grad_z - p * (p @ grad_z)) / tau
    return grad


def estimate_true_grad_oracle(theta, k, loss_per_subset, cap: int = 10**6) -> np.ndarray:
    """Exact grad of E_{z~p_theta}[loss(z)] by full enumeration.

    Uses the score-function identity: sum_z p(z) loss(z) (z - mu).
    """
    theta = np.asarray(theta, dtype=np.float64)
    dist = KSubsetDistribution(theta, k)
    mu = exact_marginals(dist)
    grad = np.zeros_like(theta)
    for z in enumerate_ksubsets(theta.shape[0], k, cap=cap):
        p = np.exp(subset_logprob(dist, z))
        grad += p * float(loss_per_subset(z)) * (z - mu)
    return grad
