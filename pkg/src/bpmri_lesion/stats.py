"""One-tailed comparisons between models.

``alternative="greater"`` tests whether ``x`` tends to be larger than ``y``
(use ``"less"`` for metrics where lower is better, such as 95 HD).
"""
from __future__ import annotations

import itertools
import math
from typing import Literal, Sequence

import numpy as np
from scipy import stats as sps

from .errors import InvalidArgumentError

Alternative = Literal["greater", "less"]
MW_EXACT_MAX_N = 12


def _samples(x, y) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(x, dtype=float).ravel()
    b = np.asarray(y, dtype=float).ravel()
    if a.size < 2 or b.size < 2:
        raise InvalidArgumentError("both samples need at least two values")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise InvalidArgumentError("samples contain non-finite values")
    return a, b


def _check_alt(alternative: str) -> None:
    if alternative not in ("greater", "less"):
        raise InvalidArgumentError(f"alternative must be 'greater' or 'less', got {alternative!r}")


def welch_t(x, y) -> tuple[float, float]:
    """Welch t statistic and Welch-Satterthwaite degrees of freedom."""
    a, b = _samples(x, y)
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    se2 = va + vb
    diff = a.mean() - b.mean()
    if se2 == 0.0:
        t = 0.0 if diff == 0 else math.copysign(math.inf, diff)
        return t, float(a.size + b.size - 2)
    df = se2 ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    return float(diff / math.sqrt(se2)), float(df)


def t_test_one_tailed(x, y, alternative: Alternative = "greater") -> float:
    """Unpaired Welch t-test, one-tailed p-value.

    Two zero-variance samples with equal means give p = 0.5.
    """
    _check_alt(alternative)
    t, df = welch_t(x, y)
    if alternative == "less":
        t = -t
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    return float(sps.t.sf(t, df))


def u_statistic(x, y) -> float:
    """Mann-Whitney U of ``x``: pairs with x > y plus half the ties, via mid-ranks."""
    a, b = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    ranks = sps.rankdata(np.concatenate([a, b]))
    return float(ranks[: a.size].sum() - a.size * (a.size + 1) / 2.0)


def _mw_exact(a: np.ndarray, b: np.ndarray, u_obs: float) -> float:
    pooled = np.concatenate([a, b])
    ranks = sps.rankdata(pooled)
    n1, n = a.size, pooled.size
    offset = n1 * (n1 + 1) / 2.0
    hits = total = 0
    for idx in itertools.combinations(range(n), n1):
        u = ranks[list(idx)].sum() - offset
        total += 1
        if u >= u_obs - 1e-9:
            hits += 1
    return hits / total


def mann_whitney_one_tailed(x, y, alternative: Alternative = "greater") -> float:
    """One-tailed Mann-Whitney U test.

    Exact enumeration over all rank assignments when ``n1 + n2 <= 12``;
    otherwise the normal approximation with tie correction and a 0.5
    continuity correction.
    """
    _check_alt(alternative)
    a, b = _samples(x, y)
    if alternative == "less":
        a, b = -a, -b
    u = u_statistic(a, b)
    n1, n2 = a.size, b.size
    if n1 + n2 <= MW_EXACT_MAX_N:
        return _mw_exact(a, b, u)
    n = n1 + n2
    _, counts = np.unique(np.concatenate([a, b]), return_counts=True)
    tie_term = float(np.sum(counts ** 3 - counts)) / (n * (n - 1))
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        return 1.0
    z = (u - n1 * n2 / 2.0 - 0.5) / math.sqrt(var)
    return float(sps.norm.sf(z))


def mcnemar(b: int, c: int) -> float:
    """Exact one-tailed McNemar test on discordant pairs.

    ``b`` counts cases only the first model got right, ``c`` cases only the
    second did; the p-value is P(X >= b) for X ~ Binomial(b + c, 1/2).
    """
    if b < 0 or c < 0:
        raise InvalidArgumentError("discordant counts must be non-negative")
    n = b + c
    if n == 0:
        return 1.0
    return float(sps.binom.sf(b - 1, n, 0.5))


def discordant_counts(first: Sequence[bool], second: Sequence[bool]) -> tuple[int, int]:
    """Paired detection outcomes -> (first only, second only)."""
    if len(first) != len(second):
        raise InvalidArgumentError("paired outcome lists differ in length")
    b = sum(1 for p, q in zip(first, second) if p and not q)
    c = sum(1 for p, q in zip(first, second) if q and not p)
    return b, c
