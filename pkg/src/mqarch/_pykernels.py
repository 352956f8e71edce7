"""Pure Python / numpy reference implementations of the hot loops.

The compiled module ``_ckernels`` mirrors these functions one to one.  The
thinning loop and the exponential recursions follow the same floating point
operation order in both backends so results agree bit for bit.
"""

from __future__ import annotations

import math

import numpy as np

CHUNK = 65536


def mqarch_path(phi, lev, kvec, ktab, phix, kxtab, sinf, eqcov, xi, floor):
    """Iterate the MQARCH recursion over the noise array ``xi``.

    ``ktab`` (n, n, q, q) holds the symmetric zero-diagonal off-diagonal
    kernel or is None to use the rank-one vectors ``kvec``.  ``kxtab``
    (n, q, q) is the optional cross table.  Returns (returns, sigma2,
    n_floored) with the same shape as ``xi``.
    """
    n, n_bins = xi.shape
    q = phi.shape[2]
    rpad = np.zeros((n, n_bins + q))
    s2 = np.empty((n, n_bins))
    n_floor = 0
    use_cross = n == 2
    for t in range(n_bins):
        # lag 1 first
        window = rpad[:, t : t + q][:, ::-1]
        sq = window * window
        for i in range(n):
            s = sinf[i]
            for j in range(n):
                h = window[j]
                s += lev[i, j] @ h
                s += phi[i, j] @ sq[j]
                if ktab is None:
                    kh = kvec[i, j] * h
                    acc = kh.sum()
                    s += acc * acc - kh @ kh
                else:
                    s += h @ ktab[i, j] @ h
            if use_cross:
                hi = window[i]
                hb = window[1 - i]
                s += phix[i] @ (hi * hb - eqcov)
                if kxtab is not None:
                    s += hi @ kxtab[i] @ hb
            if s < floor:
                s = floor
                n_floor += 1
            s2[i, t] = s
        for i in range(n):
            rpad[i, t + q] = math.sqrt(s2[i, t]) * xi[i, t]
    return rpad[:, q:].copy(), s2, n_floor


def exp_states(times, marks, rate):
    """Post-event exponential sums and their derivative in ``rate``.

    S[k] = sum_{l <= k} marks[l] exp(-rate (t_k - t_l)), dS[k] = dS/drate.
    """
    n = len(times)
    out = np.empty(n)
    dout = np.empty(n)
    s = 0.0
    ds = 0.0
    prev = 0.0
    for k in range(n):
        t = float(times[k])
        if k > 0:
            dt = t - prev
            e = math.exp(-rate * dt)
            ds = (ds - dt * s) * e
            s = s * e
        s += float(marks[k])
        out[k] = s
        dout[k] = ds
        prev = t
    return out, dout


def thinning(lam_inf, wH, bH, wZ, bZ, wL, bL, horizon, draw_exp, draw_unif):
    """Ogata thinning for an exponential quadratic Hawkes process.

    The intensity of asset i is
        lam_inf[i] + sum_j wH[i,j] H[i,j] + wL[i,j] L[i,j] + wZ[i,j] Z[i,j]^2
    where H, L and Z are exponentially decaying sums over events of asset j
    (unsigned for H, signed for L and Z).  Random numbers come from the
    callables ``draw_exp(size)`` and ``draw_unif(size)``.

    Returns (times, assets, marks, n_candidates, n_clamped).
    """
    n = len(lam_inf)
    lam_inf = [float(x) for x in lam_inf]
    wH = [[float(wH[i][j]) for j in range(n)] for i in range(n)]
    bH = [[float(bH[i][j]) for j in range(n)] for i in range(n)]
    wZ = [[float(wZ[i][j]) for j in range(n)] for i in range(n)]
    bZ = [[float(bZ[i][j]) for j in range(n)] for i in range(n)]
    wL = [[float(wL[i][j]) for j in range(n)] for i in range(n)]
    bL = [[float(bL[i][j]) for j in range(n)] for i in range(n)]
    H = [[0.0] * n for _ in range(n)]
    Z = [[0.0] * n for _ in range(n)]
    L = [[0.0] * n for _ in range(n)]
    lam = [0.0] * n

    times, assets, marks = [], [], []
    ebuf = list(draw_exp(CHUNK))
    ubuf = list(draw_unif(2 * CHUNK))
    ei = 0
    ui = 0
    n_cand = 0
    n_clamp = 0
    t = 0.0

    while True:
        bound = 0.0
        for i in range(n):
            b = lam_inf[i]
            for j in range(n):
                b += wH[i][j] * H[i][j]
                lj = wL[i][j] * L[i][j]
                if lj > 0.0:
                    b += lj
                b += wZ[i][j] * Z[i][j] * Z[i][j]
            bound += b
        if ei >= CHUNK:
            ebuf = list(draw_exp(CHUNK))
            ei = 0
        dt = ebuf[ei] / bound
        ei += 1
        t += dt
        if t > horizon:
            break
        n_cand += 1
        total = 0.0
        for i in range(n):
            s = lam_inf[i]
            for j in range(n):
                H[i][j] *= math.exp(-bH[i][j] * dt)
                Z[i][j] *= math.exp(-bZ[i][j] * dt)
                L[i][j] *= math.exp(-bL[i][j] * dt)
                s += wH[i][j] * H[i][j]
                s += wL[i][j] * L[i][j]
                s += wZ[i][j] * Z[i][j] * Z[i][j]
            if s < 0.0:
                s = 0.0
                n_clamp += 1
            lam[i] = s
            total += s
        if ui + 2 > 2 * CHUNK:
            ubuf = list(draw_unif(2 * CHUNK))
            ui = 0
        u = ubuf[ui] * bound
        v = ubuf[ui + 1]
        ui += 2
        if u >= total:
            continue
        target = n - 1
        cum = 0.0
        for i in range(n):
            cum += lam[i]
            if u < cum:
                target = i
                break
        m = 1.0 if v < 0.5 else -1.0
        for i in range(n):
            H[i][target] += 1.0
            Z[i][target] += m
            L[i][target] += m
        times.append(t)
        assets.append(target)
        marks.append(m)
    return (
        np.asarray(times, dtype=float),
        np.asarray(assets, dtype=np.int64),
        np.asarray(marks, dtype=float),
        n_cand,
        n_clamp,
    )
