"""Exact math for the exponential-family distribution over k-subsets.

A score vector ``theta`` of length n induces a distribution over binary
masks z with exactly k ones, weighting each mask by exp(theta . z).
This module provides the MAP solver, Gumbel perturb-and-MAP sampling,
exact inclusion marginals and their Jacobian (both via elementary
symmetric polynomial dynamic programs), log-probabilities, and a
brute-force enumeration oracle used by the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Iterator

import numpy as np

RandomSource = np.random.Generator

# Uniform draws are clamped away from {0, 1} before the double log.
_GUMBEL_EPS = 1e-12

# Spread of theta beyond which the linear-space pair-marginal DP would
# underflow; switch to the log-space recursion instead.
_LOG_SPACE_SPREAD = 450.0

DEFAULT_ENUMERATION_CAP = 10**6


class EnumerationCapError(RuntimeError):
    """Raised when C(n, k) exceeds the configured enumeration cap."""


def make_rng(seed: int | None = None) -> RandomSource:
    """Deterministic random source; identical seeds yield identical draws."""
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class KSubsetDistribution:
    """p_theta(z | sum z_i = k) with weight exp(theta . z)."""

    theta: np.ndarray
    k: int

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64)
        object.__setattr__(self, "theta", theta)
        _check_scores(theta)
        if not 1 <= self.k <= theta.shape[0]:
            raise ValueError(f"k={self.k} out of range for n={theta.shape[0]}")

    @property
    def n(self) -> int:
        return self.theta.shape[0]


def _check_scores(theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 1 or theta.shape[0] < 1:
        raise ValueError("scores must be a non-empty 1-D sequence")
    if not np.all(np.isfinite(theta)):
        raise ValueError("scores must be finite")
    return theta


def topk_map(theta: np.ndarray, k: int) -> np.ndarray:
    """Most probable mask: selects the k largest scores.

    Ties are broken toward the lowest index so the result is deterministic.
    """
    theta = _check_scores(theta)
    n = theta.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for n={n}")
    # Stable sort on -theta keeps the lowest index first among ties.
    order = np.argsort(-theta, kind="stable")[:k]
    z = np.zeros(n, dtype=np.float64)
    z[order] = 1.0
    return z


def gumbel_noise(rng: RandomSource, n: int) -> np.ndarray:
    """n independent Gumbel(0,1) draws, g = -log(-log u)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    u = rng.random(n)
    u = np.clip(u, _GUMBEL_EPS, 1.0 - _GUMBEL_EPS)
    return -np.log(-np.log(u))


def perturb_and_map(theta: np.ndarray, k: int, rng: RandomSource) -> np.ndarray:
    """Sample a mask as MAP(theta + eps) with eps ~ Gumbel(0,1)^n.

    For k=1 this is exact Gumbel-max sampling of the softmax; for k>1 it
    is the standard (slightly biased) Gumbel top-k sampler of the
    k-subset distribution.
    """
    theta = _check_scores(theta)
    return topk_map(theta + gumbel_noise(rng, theta.shape[0]), k)


def enumerate_ksubsets(
    n: int, k: int, cap: int = DEFAULT_ENUMERATION_CAP
) -> Iterator[np.ndarray]:
    """All C(n,k) masks in lexicographic order of selected indices."""
    if n < 0 or k < 0 or k > n:
        raise ValueError(f"invalid subset shape n={n}, k={k}")
    if math.comb(n, k) > cap:
        raise EnumerationCapError(
            f"C({n},{k})={math.comb(n, k)} exceeds enumeration cap {cap}"
        )
    for idx in combinations(range(n), k):
        z = np.zeros(n, dtype=np.float64)
        z[list(idx)] = 1.0
        yield z


def _log_prefix_esp(theta: np.ndarray, k: int) -> np.ndarray:
    """F[i, r] = log e_r(w_0..w_{i-1}) for weights w = exp(theta)."""
    n = theta.shape[0]
    neg = -np.inf
    F = np.full((n + 1, k + 1), neg)
    F[:, 0] = 0.0
    for i in range(1, n + 1):
        prev = F[i - 1]
        F[i, 1:] = np.logaddexp(prev[1:], prev[:-1] + theta[i - 1])
    return F


def _log_suffix_esp(theta: np.ndarray, k: int) -> np.ndarray:
    """B[i, r] = log e_r(w_i..w_{n-1})."""
    n = theta.shape[0]
    B = np.full((n + 2, k + 1), -np.inf)
    B[:, 0] = 0.0
    for i in range(n - 1, -1, -1):
        nxt = B[i + 1]
        B[i, 1:] = np.logaddexp(nxt[1:], nxt[:-1] + theta[i])
    return B


def log_partition(theta: np.ndarray, k: int) -> float:
    """log sum over |z|=k of exp(theta . z), via the log-space ESP DP."""
    theta = _check_scores(theta)
    if not 0 <= k <= theta.shape[0]:
        raise ValueError(f"k={k} out of range for n={theta.shape[0]}")
    return float(_log_prefix_esp(theta, k)[-1, k])


def subset_logprob(dist: KSubsetDistribution, z: np.ndarray) -> float:
    """log p(z) = theta . z - log Z_k for a mask satisfying the constraint."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != dist.theta.shape:
        raise ValueError("mask length does not match score length")
    if not np.all((z == 0.0) | (z == 1.0)) or int(round(z.sum())) != dist.k:
        raise ValueError(f"mask must be binary with exactly k={dist.k} ones")
    return float(dist.theta @ z) - log_partition(dist.theta, dist.k)


def exact_marginals(dist: KSubsetDistribution) -> np.ndarray:
    """Inclusion probabilities mu_i = P(z_i = 1), exact in O(n k).

    Runs entirely in log space so scores with |theta| up to ~700 are safe.
    """
    theta, k, n = dist.theta, dist.k, dist.n
    if k == n:
        return np.ones(n)
    F = _log_prefix_esp(theta, k)
    B = _log_suffix_esp(theta, k)
    # mu_i = w_i * sum_r e_r(prefix<i) e_{k-1-r}(suffix>i) / Z
    terms = F[:n, :k] + B[1 : n + 1, k - 1 :: -1]
    log_num = theta + _logsumexp_rows(terms)
    return np.exp(log_num - F[n, k])


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    m = np.max(a, axis=1)
    safe = np.where(np.isfinite(m), m, 0.0)
    return safe + np.log(np.sum(np.exp(a - safe[:, None]), axis=1))


def _pair_marginals_linear(theta: np.ndarray, k: int) -> np.ndarray:
    """P2[i,j] = E[z_i z_j] for i != j via max-shifted linear-space ESP DPs."""
    n = theta.shape[0]
    w = np.exp(theta - theta.max())

    f = np.zeros((n + 1, k + 1))
    f[:, 0] = 1.0
    for i in range(1, n + 1):
        f[i, 1:] = f[i - 1, 1:] + w[i - 1] * f[i - 1, :-1]
    b = np.zeros((n + 2, k + 1))
    b[:, 0] = 1.0
    for i in range(n - 1, -1, -1):
        b[i, 1:] = b[i + 1, 1:] + w[i] * b[i + 1, :-1]
    Z = f[n, k]

    # P[a, j, s] = e_s(w_a..w_{j-1}); rows with a >= j stay at e_0 only.
    P = np.zeros((n + 1, n + 1, k + 1))
    P[:, :, 0] = 1.0
    rows = np.arange(n + 1)
    for j in range(1, n + 1):
        updated = P[:, j - 1, 1:] + w[j - 1] * P[:, j - 1, :-1]
        live = (rows < j)[:, None]
        P[:, j, 1:] = np.where(live, updated, P[:, j - 1, 1:])

    # num[i,j] = sum_{r+s+t=k-2} f[i,r] * e_s(between) * b[j+1,t], i < j
    num = np.zeros((n, n))
    for r in range(k - 1):
        for s in range(k - 1 - r):
            t = k - 2 - r - s
            num += f[:n, r][:, None] * P[1 : n + 1, :n, s] * b[1 : n + 1, t][None, :]
    pair = np.outer(w, w) * num / Z
    upper = np.triu(pair, 1)
    return upper + upper.T


def _pair_marginals_log(theta: np.ndarray, k: int) -> np.ndarray:
    """Log-space variant of the pair-marginal DP for extreme score spreads."""
    n = theta.shape[0]
    F = _log_prefix_esp(theta, k)
    B = _log_suffix_esp(theta, k)
    logZ = F[n, k]

    neg = -np.inf
    P = np.full((n + 1, n + 1, k + 1), neg)
    P[:, :, 0] = 0.0
    rows = np.arange(n + 1)
    for j in range(1, n + 1):
        updated = np.logaddexp(P[:, j - 1, 1:], theta[j - 1] + P[:, j - 1, :-1])
        live = (rows < j)[:, None]
        P[:, j, 1:] = np.where(live, updated, P[:, j - 1, 1:])

    log_num = np.full((n, n), neg)
    for r in range(k - 1):
        for s in range(k - 1 - r):
            t = k - 2 - r - s
            term = F[:n, r][:, None] + P[1 : n + 1, :n, s] + B[1 : n + 1, t][None, :]
            log_num = np.logaddexp(log_num, term)
    log_pair = theta[:, None] + theta[None, :] + log_num - logZ
    pair = np.exp(np.triu(log_pair, 1))
    pair = np.triu(pair, 1)
    return pair + pair.T


def marginals_jacobian(dist: KSubsetDistribution) -> np.ndarray:
    """J[i,j] = d mu_i / d theta_j = E[z_i z_j] - mu_i mu_j.

    Symmetric with zero row sums (the marginals always sum to k) and
    diagonal mu_i (1 - mu_i).
    """
    theta, k, n = dist.theta, dist.k, dist.n
    if k == n:
        return np.zeros((n, n))
    mu = exact_marginals(dist)
    if k == 1:
        pair = np.zeros((n, n))
    elif theta.max() - theta.min() > _LOG_SPACE_SPREAD:
        pair = _pair_marginals_log(theta, k)
    else:
        pair = _pair_marginals_linear(theta, k)
    J = pair - np.outer(mu, mu)
    np.fill_diagonal(J, mu * (1.0 - mu))
    return J
