"""Independent oracles used by the test suite.

These deliberately avoid the library's own differentiation and averaging
code paths: gradients come from central finite differences of plain
forward evaluations, divergences from direct summation, and patch
averaging from explicit stacking.
"""

import numpy as np


def central_diff_grad(f, x, h=1e-5, coords=None):
    """Central finite-difference gradient of scalar f at flat positions.

    f maps a numpy array (same shape as x) to a float.  Returns a dict
    {flat_index: derivative} for the requested coordinates (all of them
    when coords is None).
    """
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    if coords is None:
        coords = range(flat.size)
    out = {}
    for i in coords:
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        out[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * h)
    return out


def fd_relative_error(analytic, fd_dict):
    """Worst-case relative error of analytic gradient vs FD values.

    Scale is the larger of the two gradients' max magnitudes, floored to
    avoid dividing by zero on flat functions.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    idx = np.array(sorted(fd_dict.keys()), dtype=int)
    fd = np.array([fd_dict[int(i)] for i in idx])
    scale = max(np.max(np.abs(a[idx]), initial=0.0), np.max(np.abs(fd), initial=0.0), 1e-10)
    return float(np.max(np.abs(a[idx] - fd)) / scale)


def kl_direct(p, q):
    """KL divergence by direct summation, 0*log0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    total = 0.0
    for pi, qi in zip(p, q):
        if pi > 0:
            total += pi * np.log(pi / qi)
    return total


def energy_distance(x, y):
    """Squared energy distance between two sample sets (rows = samples)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)

    def mean_pdist(a, b):
        d = np.sqrt(np.maximum(
            np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :]
            - 2.0 * (a @ b.T), 0.0))
        return float(d.mean())

    return 2.0 * mean_pdist(x, y) - mean_pdist(x, x) - mean_pdist(y, y)


def stacked_patch_average(patch_grads, locations, canvas_shape, wrap=True):
    """Average per-patch gradients onto a canvas by explicit stacking.

    For every canvas pixel, collect the gradient values assigned by each
    covering patch into a list and take the plain mean.  Pixels covered by
    no patch get zero.
    """
    c, hh, ww = canvas_shape
    piles = [[[[] for _ in range(ww)] for _ in range(hh)] for _ in range(c)]
    k = patch_grads.shape[-1]
    for g, (ti, tj) in zip(patch_grads, locations):
        for ch in range(c):
            for a in range(k):
                for b in range(k):
                    i, j = ti + a, tj + b
                    if wrap:
                        i, j = i % hh, j % ww
                    elif i >= hh or j >= ww:
                        continue
                    piles[ch][i][j].append(g[ch, a, b])
    avg = np.zeros(canvas_shape)
    counts = np.zeros(canvas_shape)
    for ch in range(c):
        for i in range(hh):
            for j in range(ww):
                pile = piles[ch][i][j]
                counts[ch, i, j] = len(pile)
                if pile:
                    avg[ch, i, j] = sum(pile) / len(pile)
    return avg, counts
