# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot loops in ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()

CHUNK = 65536


def mqarch_path(phi, lev, kvec, ktab, phix, kxtab, sinf, double eqcov, xi, double floor):
    cdef double[:, :, ::1] phi_v = np.ascontiguousarray(phi, dtype=np.float64)
    cdef double[:, :, ::1] lev_v = np.ascontiguousarray(lev, dtype=np.float64)
    cdef double[:, :, ::1] k_v = np.ascontiguousarray(kvec, dtype=np.float64)
    cdef double[:, ::1] px_v = np.ascontiguousarray(phix, dtype=np.float64)
    cdef double[::1] sinf_v = np.ascontiguousarray(sinf, dtype=np.float64)
    cdef double[:, ::1] xi_v = np.ascontiguousarray(xi, dtype=np.float64)
    cdef Py_ssize_t n = xi_v.shape[0]
    cdef Py_ssize_t n_bins = xi_v.shape[1]
    cdef Py_ssize_t q = phi_v.shape[2]
    cdef bint use_tab = ktab is not None
    cdef bint use_kx = kxtab is not None
    cdef double[:, :, :, ::1] kt_v = np.ascontiguousarray(
        ktab if use_tab else np.zeros((1, 1, 1, 1)), dtype=np.float64)
    cdef double[:, :, ::1] kx_v = np.ascontiguousarray(
        kxtab if use_kx else np.zeros((1, 1, 1)), dtype=np.float64)

    rpad_arr = np.zeros((n, n_bins + q))
    s2_arr = np.empty((n, n_bins))
    cdef double[:, ::1] rpad = rpad_arr
    cdef double[:, ::1] s2 = s2_arr
    cdef Py_ssize_t t, i, j, a, b, ib, base
    cdef double s, h, hb, acc, acc2, kh, inner
    cdef long n_floor = 0

    for t in range(n_bins):
        # rpad[j, t + q - tau] is the return of asset j at lag tau
        base = t + q
        for i in range(n):
            s = sinf_v[i]
            for j in range(n):
                for a in range(q):
                    h = rpad[j, base - 1 - a]
                    s += lev_v[i, j, a] * h
                for a in range(q):
                    h = rpad[j, base - 1 - a]
                    s += phi_v[i, j, a] * (h * h)
                if not use_tab:
                    acc = 0.0
                    acc2 = 0.0
                    for a in range(q):
                        kh = k_v[i, j, a] * rpad[j, base - 1 - a]
                        acc += kh
                        acc2 += kh * kh
                    s += acc * acc - acc2
                else:
                    for a in range(q):
                        inner = 0.0
                        for b in range(q):
                            inner += kt_v[i, j, a, b] * rpad[j, base - 1 - b]
                        s += rpad[j, base - 1 - a] * inner
            if n == 2:
                ib = 1 - i
                for a in range(q):
                    s += px_v[i, a] * (rpad[i, base - 1 - a] * rpad[ib, base - 1 - a] - eqcov)
                if use_kx:
                    for a in range(q):
                        inner = 0.0
                        for b in range(q):
                            inner += kx_v[i, a, b] * rpad[ib, base - 1 - b]
                        s += rpad[i, base - 1 - a] * inner
            if s < floor:
                s = floor
                n_floor += 1
            s2[i, t] = s
        for i in range(n):
            rpad[i, base] = sqrt(s2[i, t]) * xi_v[i, t]
    return rpad_arr[:, q:].copy(), s2_arr, int(n_floor)


def exp_states(times, marks, double rate):
    cdef double[::1] t_v = np.ascontiguousarray(times, dtype=np.float64)
    cdef double[::1] m_v = np.ascontiguousarray(marks, dtype=np.float64)
    cdef Py_ssize_t n = t_v.shape[0]
    out_arr = np.empty(n)
    dout_arr = np.empty(n)
    cdef double[::1] out = out_arr
    cdef double[::1] dout = dout_arr
    cdef double s = 0.0, ds = 0.0, prev = 0.0, t, dt, e
    cdef Py_ssize_t k
    for k in range(n):
        t = t_v[k]
        if k > 0:
            dt = t - prev
            e = exp(-rate * dt)
            ds = (ds - dt * s) * e
            s = s * e
        s += m_v[k]
        out[k] = s
        dout[k] = ds
        prev = t
    return out_arr, dout_arr


def thinning(lam_inf, wH, bH, wZ, bZ, wL, bL, double horizon, draw_exp, draw_unif):
    cdef double[::1] lam0 = np.ascontiguousarray(lam_inf, dtype=np.float64)
    cdef Py_ssize_t n = lam0.shape[0]
    cdef double[:, ::1] wH_v = np.ascontiguousarray(wH, dtype=np.float64)
    cdef double[:, ::1] bH_v = np.ascontiguousarray(bH, dtype=np.float64)
    cdef double[:, ::1] wZ_v = np.ascontiguousarray(wZ, dtype=np.float64)
    cdef double[:, ::1] bZ_v = np.ascontiguousarray(bZ, dtype=np.float64)
    cdef double[:, ::1] wL_v = np.ascontiguousarray(wL, dtype=np.float64)
    cdef double[:, ::1] bL_v = np.ascontiguousarray(bL, dtype=np.float64)
    cdef double[:, ::1] H = np.zeros((n, n))
    cdef double[:, ::1] Z = np.zeros((n, n))
    cdef double[:, ::1] L = np.zeros((n, n))
    cdef double[::1] lam = np.zeros(n)

    cdef double[::1] ebuf = np.ascontiguousarray(draw_exp(CHUNK), dtype=np.float64)
    cdef double[::1] ubuf = np.ascontiguousarray(draw_unif(2 * CHUNK), dtype=np.float64)
    cdef Py_ssize_t ei = 0, ui = 0, i, j, target
    cdef Py_ssize_t chunk = CHUNK
    cdef long n_cand = 0, n_clamp = 0, n_ev = 0, cap = 1024
    cdef double t = 0.0, dt, bound, b, lj, s, total, u, v, cum, m

    times_arr = np.empty(cap)
    assets_arr = np.empty(cap, dtype=np.int64)
    marks_arr = np.empty(cap)
    cdef double[::1] tv = times_arr
    cdef long long[::1] av = assets_arr
    cdef double[::1] mv = marks_arr

    while True:
        bound = 0.0
        for i in range(n):
            b = lam0[i]
            for j in range(n):
                b += wH_v[i, j] * H[i, j]
                lj = wL_v[i, j] * L[i, j]
                if lj > 0.0:
                    b += lj
                b += wZ_v[i, j] * Z[i, j] * Z[i, j]
            bound += b
        if ei >= chunk:
            ebuf = np.ascontiguousarray(draw_exp(CHUNK), dtype=np.float64)
            ei = 0
        dt = ebuf[ei] / bound
        ei += 1
        t += dt
        if t > horizon:
            break
        n_cand += 1
        total = 0.0
        for i in range(n):
            s = lam0[i]
            for j in range(n):
                H[i, j] *= exp(-bH_v[i, j] * dt)
                Z[i, j] *= exp(-bZ_v[i, j] * dt)
                L[i, j] *= exp(-bL_v[i, j] * dt)
                s += wH_v[i, j] * H[i, j]
                s += wL_v[i, j] * L[i, j]
                s += wZ_v[i, j] * Z[i, j] * Z[i, j]
            if s < 0.0:
                s = 0.0
                n_clamp += 1
            lam[i] = s
            total += s
        if ui + 2 > 2 * chunk:
            ubuf = np.ascontiguousarray(draw_unif(2 * CHUNK), dtype=np.float64)
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
            H[i, target] += 1.0
            Z[i, target] += m
            L[i, target] += m
        if n_ev == cap:
            cap *= 2
            times_arr = np.resize(times_arr, cap)
            assets_arr = np.resize(assets_arr, cap)
            marks_arr = np.resize(marks_arr, cap)
            tv = times_arr
            av = assets_arr
            mv = marks_arr
        tv[n_ev] = t
        av[n_ev] = target
        mv[n_ev] = m
        n_ev += 1
    return (
        times_arr[:n_ev].copy(),
        assets_arr[:n_ev].copy(),
        marks_arr[:n_ev].copy(),
        int(n_cand),
        int(n_clamp),
    )
