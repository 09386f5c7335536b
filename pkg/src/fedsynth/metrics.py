"""SSIM, summary statistics and the Wilcoxon signed-rank test."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class SsimParams:
    window_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("k1 and k2 must be positive")
        if self.window_size < 1 or self.sigma <= 0:
            raise ValueError("window_size must be >= 1 and sigma > 0")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


def gaussian_kernel_1d(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def gaussian_window(params: SsimParams) -> np.ndarray:
    g = gaussian_kernel_1d(params.window_size, params.sigma)
    return np.outer(g, g)


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable Gaussian, 'valid' region only (no padding)
    rows = np.lib.stride_tricks.sliding_window_view(img, g.size, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, g.size, axis=1) @ g


def ssim_map(a: np.ndarray, b: np.ndarray, params: SsimParams = SsimParams()) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ValueError(f"expected 2-D images, got ndim={a.ndim}")
    w = params.window_size
    if min(a.shape) < w:
        raise ValueError(f"image {a.shape} smaller than the {w}x{w} window")
    g = gaussian_kernel_1d(w, params.sigma)
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    c1, c2 = params.c1, params.c2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray, params: SsimParams = SsimParams()) -> float:
    return float(ssim_map(a, b, params).mean())


def mean_sd(values: Sequence[float]) -> tuple[float, float]:
    """Arithmetic mean and sample (n-1) standard deviation."""
    x = np.asarray(values, dtype=np.float64)
    if x.size < 2:
        raise ValueError(f"standard deviation needs at least 2 values, got {x.size}")
    return float(x.mean()), float(x.std(ddof=1))


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank
# ---------------------------------------------------------------------------

EXACT_MAX_N = 25


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    n_effective: int
    p_value: float
    method: str  # "exact", "normal-approximation" or "degenerate"

    def significant(self, alpha: float = 0.05) -> bool:
        return self.p_value < alpha


def midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    n = len(values)
    while i < n:
        j = i
        while j + 1 < n and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def signed_rank_null_counts(doubled_ranks: Sequence[int]) -> np.ndarray:
    """Number of sign assignments giving each value of 2*W+.

    Ranks are passed doubled so mid-ranks stay integral.  The result has
    length sum(doubled_ranks)+1 and sums to 2**n.
    """
    total = int(sum(doubled_ranks))
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    top = 0
    for r in doubled_ranks:
        r = int(r)
        # adding r to W+ for the assignments where this difference is positive
        counts[r : top + r + 1] = counts[r : top + r + 1] + counts[: top + 1].copy()
        top += r
    return counts


def wilcoxon_signed_rank(
    a: Sequence[float], b: Sequence[float], method: str = "auto"
) -> WilcoxonResult:
    """Two-sided paired test; zero differences are dropped, ties get mid-ranks.

    ``method='auto'`` enumerates the exact null distribution up to
    ``EXACT_MAX_N`` non-zero differences and uses the tie- and
    continuity-corrected normal approximation beyond that.
    """
    if method not in ("auto", "exact", "normal"):
        raise ValueError(f"unknown method {method!r}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be equal-length 1-D, got {a.shape} and {b.shape}")
    if a.size < 1:
        raise ValueError("need at least one pair")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        return WilcoxonResult(statistic=0.0, n_effective=0, p_value=1.0, method="degenerate")

    ranks = midranks(np.abs(d))
    doubled = np.rint(ranks * 2).astype(np.int64)
    w_plus2 = int(doubled[d > 0].sum())
    w_minus2 = int(doubled[d < 0].sum())
    w2 = min(w_plus2, w_minus2)
    statistic = w2 / 2.0

    if method == "exact" or (method == "auto" and n <= EXACT_MAX_N):
        counts = signed_rank_null_counts(doubled)
        # two-sided: P(min(W+, W-) <= w) = 2 P(W+ <= w) whenever w is below the mean
        tail = int(sum(counts[: w2 + 1]))
        p = min(1.0, 2 * tail / 2**n)
        return WilcoxonResult(statistic, n, float(p), "exact")

    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    tie_term = float(np.sum(tie_counts**3 - tie_counts)) / 48.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
    z = max(abs(statistic - mean) - 0.5, 0.0) / math.sqrt(var)
    p = math.erfc(z / math.sqrt(2.0))
    return WilcoxonResult(statistic, n, min(1.0, p), "normal-approximation")


# ---------------------------------------------------------------------------
# model evaluation
# ---------------------------------------------------------------------------


def evaluate_model(generator, test, params: SsimParams = SsimParams()) -> list[float]:
    """Per-pair SSIM of ``generator(source)`` against the target, in input order."""
    import torch

    from .data import from_model_range, to_model_range

    if len(test) == 0:
        raise ValueError("empty test set")
    was_training = getattr(generator, "training", False)
    if hasattr(generator, "eval"):
        generator.eval()
    scores = []
    try:
        with torch.no_grad():
            for pair in test:
                x = torch.from_numpy(to_model_range(pair.source.astype(np.float32)))[None, None]
                y = generator(x)[0, 0].double().numpy()
                synth = np.clip(from_model_range(y), 0.0, 1.0)
                scores.append(ssim(synth, pair.target.astype(np.float64), params))
    finally:
        if was_training:
            generator.train()
    return scores
