import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsynth.metrics import (
    SsimParams,
    gaussian_window,
    mean_sd,
    midranks,
    signed_rank_null_counts,
    ssim,
    wilcoxon_signed_rank,
)
from oracles import brute_force_wilcoxon_p, naive_ssim

C1 = 1e-4


# -- SSIM --------------------------------------------------------------------


def test_window_normalised():
    w = gaussian_window(SsimParams())
    assert w.shape == (11, 11)
    assert abs(w.sum() - 1.0) < 1e-12


def test_ssim_identity(rng):
    for _ in range(5):
        x = rng.random((40, 33))
        assert abs(ssim(x, x) - 1.0) < 1e-9


def test_ssim_constant_closed_form():
    a = np.zeros((32, 32))
    b = np.ones((32, 32))
    expected = C1 / (1.0 + C1)  # (2*0*1 + C1) / (0 + 1 + C1); structure term is 1
    assert ssim(a, b) == pytest.approx(expected, abs=1e-15)
    assert ssim(a, b) == pytest.approx(9.999e-5, abs=1e-8)


@pytest.mark.parametrize("seed", range(5))
def test_ssim_matches_naive_oracle(seed):
    r = np.random.default_rng(seed)
    a = r.random((24, 29))
    b = np.clip(a + r.normal(0, 0.2, a.shape), 0, 1)
    assert abs(ssim(a, b) - naive_ssim(a, b)) < 1e-6


def test_ssim_symmetric_and_bounded(rng):
    for _ in range(10):
        a, b = rng.random((20, 20)), rng.random((20, 20))
        s = ssim(a, b)
        assert abs(s - ssim(b, a)) < 1e-9
        assert -1 <= s <= 1
        assert s < 1


def test_ssim_errors():
    with pytest.raises(ValueError):
        ssim(np.zeros((20, 20)), np.zeros((20, 21)))
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 10)), np.zeros((10, 10)))


# -- mean / sd ------------------------------------------------------------------


def test_mean_sd_examples():
    assert mean_sd([1, 1, 1]) == (1.0, 0.0)
    m, s = mean_sd([0, 2])
    assert m == 1.0 and s == pytest.approx(math.sqrt(2), abs=1e-15)
    m, s = mean_sd([1, 2, 3, 4])
    assert m == 2.5 and s == pytest.approx(math.sqrt(5 / 3), abs=1e-15)
    assert s == pytest.approx(1.2909944, abs=1e-7)


def test_mean_sd_needs_two():
    with pytest.raises(ValueError):
        mean_sd([0.5])


# -- Wilcoxon -------------------------------------------------------------------


def test_midranks():
    assert midranks(np.array([3.0, 1.0, 3.0, 2.0])).tolist() == [3.5, 1.0, 3.5, 2.0]


def test_null_counts_sum_and_symmetry():
    counts = signed_rank_null_counts([2, 4, 6, 8])
    assert sum(counts) == 16
    assert list(counts) == list(counts[::-1])


def test_wilcoxon_degenerate():
    r = wilcoxon_signed_rank([1, 2, 3], [1, 2, 3])
    assert r.p_value == 1.0 and r.n_effective == 0 and r.method == "degenerate"


def test_wilcoxon_three_positive():
    r = wilcoxon_signed_rank([1, 2, 3], [0, 0, 0])
    assert r.statistic == 0
    assert r.n_effective == 3
    assert r.method == "exact"
    assert r.p_value == 0.25  # 2 extreme sign patterns out of 2**3


def test_wilcoxon_drops_zero_differences():
    r = wilcoxon_signed_rank([1, 2, 3, 5], [0, 0, 0, 5])
    assert r.n_effective == 3 and r.p_value == 0.25


def test_wilcoxon_length_mismatch():
    with pytest.raises(ValueError):
        wilcoxon_signed_rank([1, 2], [1])


@pytest.mark.parametrize("case", range(40))
def test_wilcoxon_exact_matches_enumeration(case):
    r = np.random.default_rng(1000 + case)
    n = int(r.integers(1, 11))
    # coarse rounding forces ties and zero differences
    a = np.round(r.normal(0.2, 1, n), 1)
    b = np.round(r.normal(0, 1, n), 1)
    res = wilcoxon_signed_rank(a, b)
    assert res.p_value == brute_force_wilcoxon_p(a, b)


def test_wilcoxon_normal_close_to_exact():
    r = np.random.default_rng(7)
    for n in (15, 20, 25):
        a, b = r.normal(0.3, 1, n), r.normal(0, 1, n)
        ex = wilcoxon_signed_rank(a, b, method="exact")
        ap = wilcoxon_signed_rank(a, b, method="normal")
        assert abs(ex.p_value - ap.p_value) < 0.01


@pytest.mark.parametrize("n,bound", [(15, 0.012), (16, 0.011), (17, 0.01), (25, 0.007)])
def test_wilcoxon_normal_worst_case(n, bound):
    # worst gap over every W+; near p ~ 0.45 it slightly exceeds 0.01 for n <= 16
    diffs = np.arange(1, n + 1, dtype=float)
    worst = 0.0
    for w in range(n * (n + 1) // 4 + 1):
        signs = np.ones(n)
        left = w
        for rank in range(n, 0, -1):
            if rank <= left:
                left -= rank
            else:
                signs[rank - 1] = -1
        d = signs * diffs
        ex = wilcoxon_signed_rank(d, np.zeros(n), method="exact").p_value
        ap = wilcoxon_signed_rank(d, np.zeros(n), method="normal").p_value
        worst = max(worst, abs(ex - ap))
    assert worst < bound


def test_wilcoxon_large_n_uses_normal():
    r = np.random.default_rng(3)
    res = wilcoxon_signed_rank(r.normal(size=40), r.normal(size=40))
    assert res.method == "normal-approximation"
    assert 0 < res.p_value <= 1


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(-5, 5), st.integers(-5, 5)), min_size=1, max_size=14))
def test_wilcoxon_swap_symmetry_and_bounds(pairs):
    a = [p[0] for p in pairs]
    b = [p[1] for p in pairs]
    r1 = wilcoxon_signed_rank(a, b)
    r2 = wilcoxon_signed_rank(b, a)
    assert r1.p_value == r2.p_value
    assert 0 < r1.p_value <= 1
    n = r1.n_effective
    assert 0 <= r1.statistic <= n * (n + 1) / 2
