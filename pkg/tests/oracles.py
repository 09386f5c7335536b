"""Independent reference computations used to check the implementation.

Nothing here imports fedsynth: each oracle is the slow, direct version of
the quantity it checks.
"""

import itertools
import math

import numpy as np


def unet_param_count(resolution, in_ch=1, out_ch=1, base=64, cap=512, k=4):
    """Closed-form parameter count: k*k*c_in*c_out + c_out per (transposed) conv."""
    depth = int(round(math.log2(resolution)))
    enc = [min(base * 2**i, cap) for i in range(depth)]
    total = 0
    c_in = in_ch
    for c in enc:
        total += k * k * c_in * c + c
        c_in = c
    # decoder: innermost up-conv reads the bottleneck, the others read
    # [previous decoder output, mirrored skip] concatenated
    ups = [(enc[-1], enc[-2])]
    for j in range(1, depth - 1):
        ups.append((2 * enc[-1 - j], enc[-2 - j]))
    ups.append((2 * enc[0], out_ch))
    for ci, co in ups:
        total += k * k * ci * co + co
    return total


def patchgan_param_count(in_ch=2, base=64, k=4):
    chans = [in_ch, base, base * 2, base * 4, base * 8, 1]
    return sum(k * k * a * b + b for a, b in zip(chans[:-1], chans[1:]))


def naive_ssim(a, b, win=11, sigma=1.5, k1=0.01, k2=0.03, L=1.0):
    """Direct sliding-window SSIM: explicit weighted sums in every window."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ax = np.arange(win) - (win - 1) / 2
    g1 = np.exp(-ax**2 / (2 * sigma**2))
    w = np.outer(g1, g1)
    w /= w.sum()
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    H, W = a.shape
    vals = []
    for i in range(H - win + 1):
        for j in range(W - win + 1):
            pa = a[i : i + win, j : j + win]
            pb = b[i : i + win, j : j + win]
            ma = (w * pa).sum()
            mb = (w * pb).sum()
            va = (w * (pa - ma) ** 2).sum()
            vb = (w * (pb - mb) ** 2).sum()
            cov = (w * (pa - ma) * (pb - mb)).sum()
            vals.append(
                ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2))
            )
    return float(np.mean(vals))


def brute_force_wilcoxon_p(a, b):
    """Two-sided exact p by listing every sign assignment of the non-zero differences.

    Ranks are computed by direct counting (mid-ranks for ties) and the
    statistic is min(W+, W-); p = #{assignments with min <= observed} / 2**n.
    """
    d = [x - y for x, y in zip(a, b) if x - y != 0]
    n = len(d)
    if n == 0:
        return 1.0
    absd = [abs(x) for x in d]
    ranks = []
    for v in absd:
        below = sum(1 for u in absd if u < v)
        equal = sum(1 for u in absd if u == v)
        ranks.append(below + (equal + 1) / 2)
    total = sum(ranks)
    wp = sum(r for r, x in zip(ranks, d) if x > 0)
    w_obs = min(wp, total - wp)
    hits = 0
    for signs in itertools.product((0, 1), repeat=n):
        s = sum(r for r, pos in zip(ranks, signs) if pos)
        if min(s, total - s) <= w_obs:
            hits += 1
    return hits / 2**n
