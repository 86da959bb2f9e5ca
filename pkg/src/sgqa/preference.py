"""Tie-aware Bradley-Terry preference model and rank correlations.

Pairwise judgments (A wins / B wins / tie) are fitted with the Davidson
extension of the Bradley-Terry model: with strengths pi_m = exp(theta_m)
and tie parameter delta,

    P(A beats B) = pi_A / (pi_A + pi_B + delta sqrt(pi_A pi_B))
    P(tie)       = delta sqrt(pi_A pi_B) / (pi_A + pi_B + delta sqrt(pi_A pi_B))

Each tie record's log-likelihood contribution is multiplied by a
configurable tie weight (default 1/6). The fit is deterministic gradient
ascent with backtracking; a tiny ridge penalty keeps the optimum finite
on separable (dominance) data without measurably moving it otherwise.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

OUTCOMES = ("A", "B", "TIE")

DEFAULT_TIE_WEIGHT = 1.0 / 6.0

UNDEFINED = math.nan


class ConvergenceError(RuntimeError):
    """Raised when the likelihood ascent fails to reach the gradient tolerance."""


@dataclass(frozen=True)
class ComparisonRecord:
    session: str
    pair: tuple[str, str]
    outcome: str
    example_id: str = ""
    timestamp: str = ""

    def __post_init__(self):
        object.__setattr__(self, "pair", tuple(self.pair))
        if len(self.pair) != 2 or self.pair[0] == self.pair[1]:
            raise ValueError("pair must name two distinct methods")
        if self.outcome not in OUTCOMES:
            raise ValueError(f"outcome must be one of {OUTCOMES}")


@dataclass(frozen=True)
class BTParams:
    theta: dict[str, float]
    delta: float
    tie_weight: float

    def ranking(self) -> list[str]:
        return sorted(self.theta, key=self.theta.get, reverse=True)


def tally(records) -> dict[str, dict[str, int]]:
    """Per-method favored / ties / unfavored counts."""
    out: dict[str, dict[str, int]] = {}

    def bucket(m):
        return out.setdefault(m, {"favored": 0, "ties": 0, "unfavored": 0})

    for r in records:
        a, b = r.pair
        if r.outcome == "TIE":
            bucket(a)["ties"] += 1
            bucket(b)["ties"] += 1
        else:
            win, lose = (a, b) if r.outcome == "A" else (b, a)
            bucket(win)["favored"] += 1
            bucket(lose)["unfavored"] += 1
    return out


def _aggregate(records, methods):
    """Counts per unordered pair: wins[i][j] = i beat j, ties symmetric."""
    index = {m: i for i, m in enumerate(methods)}
    wins = np.zeros((len(methods), len(methods)))
    ties = np.zeros((len(methods), len(methods)))
    for r in records:
        if r.pair[0] not in index or r.pair[1] not in index:
            continue
        i, j = index[r.pair[0]], index[r.pair[1]]
        if r.outcome == "A":
            wins[i, j] += 1
        elif r.outcome == "B":
            wins[j, i] += 1
        else:
            ties[i, j] += 1
            ties[j, i] += 1
    return wins, ties


def _loglik_grad_hess(x, wins, ties, tie_weight, ridge):
    """Penalized log-likelihood with gradient and Hessian.

    x stacks (theta_1..theta_m, nu) with nu = log delta. The likelihood
    per pair is a log-sum-exp of three linear functions of x, so the
    Hessian assembles from softmax covariance terms and is negative
    definite once the ridge is included.
    """
    m = wins.shape[0]
    dim = m + 1
    ll = -ridge * float(x @ x)
    grad = -2.0 * ridge * x.copy()
    hess = -2.0 * ridge * np.eye(dim)
    for i in range(m):
        for j in range(i + 1, m):
            w_ij, w_ji = wins[i, j], wins[j, i]
            t = ties[i, j] * tie_weight
            total = w_ij + w_ji + t
            if total == 0:
                continue
            ti, tj = x[i], x[j]
            u = np.array([ti, tj, x[m] + 0.5 * (ti + tj)])
            mx = u.max()
            e = np.exp(u - mx)
            logd = mx + math.log(e.sum())
            p = e / e.sum()
            # coefficient vectors of the three exponents w.r.t. x
            a = np.zeros((3, dim))
            a[0, i] = 1.0
            a[1, j] = 1.0
            a[2, i] = a[2, j] = 0.5
            a[2, m] = 1.0
            ll += w_ij * (u[0] - logd) + w_ji * (u[1] - logd) + t * (u[2] - logd)
            counts = np.array([w_ij, w_ji, t])
            grad += counts @ a - total * (p @ a)
            pa = p @ a
            hess -= total * ((a.T * p) @ a - np.outer(pa, pa))
    return ll, grad, hess


def fit_extended_bt(
    records,
    tie_weight: float = DEFAULT_TIE_WEIGHT,
    methods: list[str] | None = None,
    tol: float = 1e-8,
    max_iter: int = 500,
    ridge: float = 1e-6,
) -> BTParams:
    """Maximize the tie-weighted Davidson log-likelihood.

    Deterministic damped-Newton ascent to gradient norm < tol; theta is
    recentered to sum to zero. Methods passed explicitly but absent from
    the records are dropped with a warning.
    """
    records = list(records)
    if not 0.0 < tie_weight <= 1.0:
        raise ValueError("tie_weight must lie in (0, 1]")
    seen: list[str] = []
    for r in records:
        for m in r.pair:
            if m not in seen:
                seen.append(m)
    if methods is None:
        methods = sorted(seen)
    else:
        unused = [m for m in methods if m not in seen]
        if unused:
            warnings.warn(f"excluding methods with no comparisons: {unused}", stacklevel=2)
        methods = [m for m in methods if m in seen]
    if len(methods) < 2:
        raise ValueError("need at least two compared methods")

    wins, ties = _aggregate(records, methods)
    x = np.zeros(len(methods) + 1)
    ll, grad, hess = _loglik_grad_hess(x, wins, ties, tie_weight, ridge)
    for _ in range(max_iter):
        gnorm = float(np.linalg.norm(grad))
        if gnorm < tol:
            theta = x[:-1] - x[:-1].mean()
            return BTParams(
                theta={m: float(t) for m, t in zip(methods, theta)},
                delta=float(math.exp(x[-1])),
                tie_weight=tie_weight,
            )
        direction = np.linalg.solve(-hess, grad)
        if float(direction @ grad) <= 0.0:
            direction = grad
        step = 1.0
        slack = 1e-9 * max(1.0, abs(ll))
        while True:
            nx = x + step * direction
            nll, ngrad, nhess = _loglik_grad_hess(nx, wins, ties, tie_weight, ridge)
            if nll >= ll - slack or step < 1e-18:
                break
            step *= 0.5
        x, ll, grad, hess = nx, nll, ngrad, nhess
    raise ConvergenceError(
        f"no convergence after {max_iter} iterations; "
        f"gradient norm {float(np.linalg.norm(grad)):.3e}"
    )


def pearson(x, y) -> float:
    """Sample Pearson correlation; NaN when either argument is constant."""
    x, y = _check_xy(x, y)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return UNDEFINED
    return float(stats.pearsonr(x, y).statistic)


def spearman(x, y) -> float:
    """Pearson on average ranks (ties share ranks)."""
    x, y = _check_xy(x, y)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return UNDEFINED
    return float(stats.spearmanr(x, y).statistic)


def kendall(x, y) -> float:
    """Kendall tau-b."""
    x, y = _check_xy(x, y)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return UNDEFINED
    return float(stats.kendalltau(x, y).statistic)


def _check_xy(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.shape[0] < 2:
        raise ValueError("x and y must be equal-length 1-D sequences of length >= 2")
    return x, y


def correlation_table(metric_values: dict[str, list[float]], theta_values: list[float]) -> dict:
    """Pearson/Spearman/Kendall of each metric row against BT strengths."""
    return {
        name: {
            "pearson": pearson(vals, theta_values),
            "spearman": spearman(vals, theta_values),
            "kendall": kendall(vals, theta_values),
        }
        for name, vals in metric_values.items()
    }


# ----------------------------------------------------------------------
# Comparison log persistence (line-delimited JSON)

def record_to_dict(r: ComparisonRecord) -> dict:
    return {
        "session": r.session,
        "pair": list(r.pair),
        "outcome": r.outcome,
        "example_id": r.example_id,
        "timestamp": r.timestamp,
    }


def record_from_dict(d: dict) -> ComparisonRecord:
    return ComparisonRecord(
        session=d["session"],
        pair=tuple(d["pair"]),
        outcome=d["outcome"],
        example_id=d.get("example_id", ""),
        timestamp=d.get("timestamp", ""),
    )


def write_comparison_log(records, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(record_to_dict(r), sort_keys=True) + "\n")


def read_comparison_log(path) -> list[ComparisonRecord]:
    out = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(record_from_dict(json.loads(line)))
    return out
