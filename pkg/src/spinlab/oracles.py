"""Independent brute-force oracles used by the test suite.

These deliberately share no code with the implementations they check and
never run on the hot path.
"""

from __future__ import annotations

import math
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError


def oracle_lcs(a: Sequence, b: Sequence) -> int:
    """Longest-common-subsequence length via memoized recursion."""
    a = tuple(a)
    b = tuple(b)

    @lru_cache(maxsize=None)
    def rec(i: int, j: int) -> int:
        if i == 0 or j == 0:
            return 0
        if a[i - 1] == b[j - 1]:
            return rec(i - 1, j - 1) + 1
        return max(rec(i - 1, j), rec(i, j - 1))

    return rec(len(a), len(b))


def oracle_min_norm(g1: Sequence[float], g2: Sequence[float], step: float = 1e-5) -> tuple[float, bool]:
    """Grid-search the min-norm convex combination of two gradients.

    Returns (alpha, flat) where flat is True when the objective is constant
    over the grid (g1 == g2 up to rounding), in which case alpha is 0.5.
    """
    if step > 1e-4:
        raise ValueError("grid step must be <= 1e-4")
    v1 = np.asarray(g1, dtype=np.float64)
    v2 = np.asarray(g2, dtype=np.float64)
    a11 = float(v1 @ v1)
    a12 = float(v1 @ v2)
    a22 = float(v2 @ v2)
    alphas = np.arange(0.0, 1.0 + step / 2, step)
    # ||a*g1 + (1-a)*g2||^2 expands to a quadratic in a.
    objective = alphas**2 * a11 + 2 * alphas * (1 - alphas) * a12 + (1 - alphas) ** 2 * a22
    spread = objective.max() - objective.min()
    if spread <= 1e-12 * max(objective.max(), 1.0):
        return 0.5, True
    return float(alphas[int(np.argmin(objective))]), False


def oracle_fd_gradient(loss: Callable[[np.ndarray], float], params: Sequence[float], h: float) -> np.ndarray:
    """Central finite differences, one coordinate at a time."""
    if not (1e-7 <= h <= 1e-4):
        raise ValueError("step h must lie in [1e-7, 1e-4]")
    base = np.asarray(params, dtype=np.float64).copy()
    grad = np.empty_like(base)
    for i in range(base.size):
        bumped = base.copy()
        bumped[i] = base[i] + h
        up = loss(bumped)
        bumped[i] = base[i] - h
        down = loss(bumped)
        grad[i] = (up - down) / (2.0 * h)
        if not math.isfinite(grad[i]):
            raise NumericError(f"non-finite finite-difference gradient at coordinate {i}")
    return grad


def oracle_bleu(candidates: Sequence[Sequence], references: Sequence[Sequence]) -> float:
    """Independent corpus BLEU used to cross-check the production metric.

    Same contract (clipped 1-4 gram precisions, add-one smoothing on empty
    higher orders, brevity penalty) written from scratch against the
    definition rather than shared helpers.
    """
    if len(candidates) == 0 or len(candidates) != len(references):
        raise ValueError("need equal-length non-empty candidate/reference lists")
    log_prec_sum = 0.0
    for order in range(1, 5):
        matched = 0
        produced = 0
        for cand, ref in zip(candidates, references):
            cand_grams: dict[tuple, int] = {}
            for i in range(len(cand) - order + 1):
                g = tuple(cand[i : i + order])
                cand_grams[g] = cand_grams.get(g, 0) + 1
            ref_grams: dict[tuple, int] = {}
            for i in range(len(ref) - order + 1):
                g = tuple(ref[i : i + order])
                ref_grams[g] = ref_grams.get(g, 0) + 1
            for g, cnt in cand_grams.items():
                matched += min(cnt, ref_grams.get(g, 0))
                produced += cnt
        if order > 1 and matched == 0:
            matched, produced = matched + 1, produced + 1
        if produced == 0 or matched == 0:
            return 0.0
        log_prec_sum += math.log(matched / produced)
    cand_len = sum(len(c) for c in candidates)
    ref_len = sum(len(r) for r in references)
    if cand_len == 0:
        return 0.0
    brevity = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    return 100.0 * brevity * math.exp(log_prec_sum / 4.0)
