"""Compiled EM iteration loop for one gene.

Mirrors ``estimation._solve`` plus ``m_step`` on flattened per-pattern
arrays. Only the variance-component trajectory is produced here; the
final BLUE/BLUP, log-likelihood and degrees of freedom are recomputed by
the numpy reference path so both routes stay comparable.
"""

import numpy as np
from numba import njit

from .model import LOG_2PI

OK = 0
NOT_CONVERGED = 1
V_NOT_PD = 2
H_SINGULAR = 3


@njit(cache=True)
def _chol_into(A, L, k):
    # lower Cholesky factor of A[:k, :k] written to L[:k, :k]; False if not PD
    for j in range(k):
        s = A[j, j]
        for q in range(j):
            s -= L[j, q] * L[j, q]
        if not s > 0.0:
            return False
        d = np.sqrt(s)
        L[j, j] = d
        for i in range(j + 1, k):
            t = A[i, j]
            for q in range(j):
                t -= L[i, q] * L[j, q]
            L[i, j] = t / d
    return True


@njit(cache=True)
def _chol_solve_into(L, k, b, x, z):
    for i in range(k):
        t = b[i]
        for q in range(i):
            t -= L[i, q] * z[q]
        z[i] = t / L[i, i]
    for i in range(k - 1, -1, -1):
        t = z[i]
        for q in range(i + 1, k):
            t -= L[q, i] * x[q]
        x[i] = t / L[i, i]


@njit(cache=True)
def _chol_inv_into(L, k, out, e, x, z):
    for j in range(k):
        for i in range(k):
            e[i] = 0.0
        e[j] = 1.0
        _chol_solve_into(L, k, e, x, z)
        for i in range(k):
            out[i, j] = x[i]


@njit(cache=True)
def _psd_factor_into(D, F, L):
    # F with F F^T = D: Cholesky, else clipped eigenvectors (D is then replaced by F F^T)
    M = D.shape[0]
    if _chol_into(D, L, M):
        for j in range(M):
            for l in range(M):
                F[j, l] = L[j, l] if l <= j else 0.0
        return
    w, U = np.linalg.eigh(D)
    for l in range(M):
        r = np.sqrt(w[l]) if w[l] > 0.0 else 0.0
        for j in range(M):
            F[j, l] = U[j, l] * r
    for j in range(M):
        for l in range(j + 1):
            t = 0.0
            for q in range(M):
                t += F[j, q] * F[l, q]
            D[j, l] = t
            D[l, j] = t


@njit(cache=True)
def em_loop(pidx, poff, Y, yoff, C, coff, Q, G_rot, root, lam, lam_gamma, D0, s20, tol, max_iter, n, N, s2_floor, pivot_rtol):
    """Run EM from ``(D0, s20)``.

    The penalized normal equations are solved in the rotated basis ``Q``
    with rotated penalty ``G_rot`` (see ``estimation._PenalizedSystem``).

    Returns ``(D, sigma2, iterations, status, floored, trace)``. On
    convergence ``(D, sigma2)`` is the last M-step output; otherwise it is the
    iterate with the highest marginal log-likelihood.
    """
    M = Q.shape[0]
    P3 = 3 * M
    n_pat = poff.size - 1
    D = D0.copy()
    s2 = s20
    trace = np.empty(max_iter)
    best_ll = -np.inf
    best_D = D.copy()
    best_s2 = s2
    floored = False
    kmax = 0
    for p in range(n_pat):
        kmax = max(kmax, poff[p + 1] - poff[p])
    Vinvs = np.zeros((n_pat, kmax, kmax))
    Ps = np.zeros((n_pat, M, M))
    logdets = np.zeros(n_pat)
    # per-pattern sum of c_i c_i^T
    CC = np.zeros((n_pat, 3, 3))
    for p in range(n_pat):
        for r in range(coff[p], coff[p + 1]):
            for u in range(3):
                for v in range(3):
                    CC[p, u, v] += C[r, u] * C[r, v]
    # scratch buffers, reused every iteration
    kbuf = max(kmax, P3)
    V = np.empty((kmax, kmax))
    L = np.zeros((kbuf, kbuf))
    ev = np.empty(kbuf)
    xv = np.empty(kbuf)
    zv = np.empty(kbuf)
    qy = np.empty(M)
    R = np.empty(kmax)
    rv = np.empty(M)
    gam = np.empty(M)
    S = np.empty((P3, P3))
    H = np.empty((P3, P3))
    b = np.empty(P3)
    bt = np.empty(P3)
    eta = np.empty(P3)
    eta_t = np.empty(P3)
    SQ = np.empty((M, M))
    Dg = np.empty((M, M))
    X = np.empty((M, M))
    T = np.empty((M, M))
    Egg = np.empty((M, M))
    Dn = np.empty((M, M))
    F = np.empty((M, M))
    r_rows = root.shape[0]
    K = np.empty((r_rows, M))
    _psd_factor_into(D, F, L)
    it = 0
    for it in range(1, max_iter + 1):
        # regularized covariance W W^T, W = F V diag(1 / sqrt(1 + lam_gamma s^2)) from the SVD of root F
        if lam_gamma == 0.0:
            Dg[:, :] = D
        else:
            for j in range(r_rows):
                for l in range(M):
                    t = 0.0
                    for q in range(M):
                        t += root[j, q] * F[q, l]
                    K[j, l] = t
            _, sv, Vt = np.linalg.svd(K)
            for l in range(M):
                sl = sv[l] if l < sv.size else 0.0
                sc = 1.0 / np.sqrt(1.0 + lam_gamma * sl * sl)
                for j in range(M):
                    t = 0.0
                    for q in range(M):
                        t += F[j, q] * Vt[l, q]
                    X[j, l] = t * sc
            for j in range(M):
                for l in range(j + 1):
                    t = 0.0
                    for q in range(M):
                        t += X[j, q] * X[l, q]
                    Dg[j, l] = t
                    Dg[l, j] = t
        S[:, :] = 0.0
        b[:] = 0.0
        for p in range(n_pat):
            i0, i1 = poff[p], poff[p + 1]
            k = i1 - i0
            for a in range(k):
                for c in range(k):
                    V[a, c] = Dg[pidx[i0 + a], pidx[i0 + c]]
                V[a, a] += s2
            if not _chol_into(V, L, k):
                return D, s2, it, V_NOT_PD, floored, trace[: it - 1]
            ld = 0.0
            for a in range(k):
                ld += np.log(L[a, a])
            logdets[p] = 2.0 * ld
            Vinv = Vinvs[p]
            _chol_inv_into(L, k, Vinv, ev, xv, zv)
            P = Ps[p]
            P[:, :] = 0.0
            for a in range(k):
                for c in range(k):
                    P[pidx[i0 + a], pidx[i0 + c]] += Vinv[a, c]
            for u in range(3):
                for v in range(3):
                    w = CC[p, u, v]
                    if w != 0.0:
                        for j in range(M):
                            for l in range(M):
                                S[u * M + j, v * M + l] += w * P[j, l]
            m0 = coff[p]
            y0 = yoff[p]
            for r in range(m0, coff[p + 1]):
                base = y0 + (r - m0) * k
                qy[:] = 0.0
                for a in range(k):
                    t = 0.0
                    for c in range(k):
                        t += Vinv[a, c] * Y[base + c]
                    qy[pidx[i0 + a]] += t
                for u in range(3):
                    cu = C[r, u]
                    for j in range(M):
                        b[u * M + j] += cu * qy[j]
        # H in the rotated basis: Q' S_uv Q plus the penalty on the diagonal blocks
        for u in range(3):
            for v in range(3):
                for j in range(M):
                    for l in range(M):
                        t = 0.0
                        for q in range(M):
                            t += S[u * M + j, v * M + q] * Q[q, l]
                        SQ[j, l] = t
                for j in range(M):
                    for l in range(M):
                        t = 0.0
                        for q in range(M):
                            t += Q[q, j] * SQ[q, l]
                        if u == v:
                            t += lam * G_rot[j, l]
                        H[u * M + j, v * M + l] = t
            for j in range(M):
                t = 0.0
                for q in range(M):
                    t += Q[q, j] * b[u * M + q]
                bt[u * M + j] = t
        if not _chol_into(H, L, P3):
            return D, s2, it, H_SINGULAR, floored, trace[: it - 1]
        for j in range(P3):
            if L[j, j] * L[j, j] <= pivot_rtol * H[j, j]:
                return D, s2, it, H_SINGULAR, floored, trace[: it - 1]
        _chol_solve_into(L, P3, bt, eta_t, zv)
        for u in range(3):
            for j in range(M):
                t = 0.0
                for q in range(M):
                    t += Q[j, q] * eta_t[u * M + q]
                eta[u * M + j] = t
        Egg[:, :] = 0.0
        Eee = 0.0
        ll = 0.0
        for p in range(n_pat):
            i0, i1 = poff[p], poff[p + 1]
            k = i1 - i0
            Vinv = Vinvs[p]
            m0, m1 = coff[p], coff[p + 1]
            m = m1 - m0
            y0 = yoff[p]
            trV = 0.0
            for a in range(k):
                trV += Vinv[a, a]
            for r in range(m0, m1):
                c0, c1, c2 = C[r, 0], C[r, 1], C[r, 2]
                base = y0 + (r - m0) * k
                for a in range(k):
                    j = pidx[i0 + a]
                    R[a] = Y[base + a] - (c0 * eta[j] + c1 * eta[M + j] + c2 * eta[2 * M + j])
                rv[:] = 0.0
                quad = 0.0
                for a in range(k):
                    t = 0.0
                    for c in range(k):
                        t += R[c] * Vinv[c, a]
                    rv[pidx[i0 + a]] += t
                    quad += t * R[a]
                for j in range(M):
                    t = 0.0
                    for l in range(M):
                        t += rv[l] * Dg[l, j]
                    gam[j] = t
                for a in range(k):
                    e = R[a] - gam[pidx[i0 + a]]
                    Eee += e * e
                for j in range(M):
                    for l in range(M):
                        Egg[j, l] += gam[j] * gam[l]
                ll -= 0.5 * quad
            # conditional covariance term m (Dg - Dg P Dg)
            P = Ps[p]
            for j in range(M):
                for l in range(M):
                    t = 0.0
                    for q in range(M):
                        t += P[j, q] * Dg[q, l]
                    T[j, l] = t
            for j in range(M):
                for l in range(M):
                    t = 0.0
                    for q in range(M):
                        t += Dg[j, q] * T[q, l]
                    Egg[j, l] += m * (Dg[j, l] - t)
            Eee += m * s2 * (k - s2 * trV)
            ll -= 0.5 * m * (k * LOG_2PI + logdets[p])
        trace[it - 1] = ll
        if ll >= best_ll:
            best_ll = ll
            best_D[:, :] = D
            best_s2 = s2
        for j in range(M):
            for l in range(M):
                Dn[j, l] = 0.5 * (Egg[j, l] + Egg[l, j]) / n
        _psd_factor_into(Dn, F, L)
        s2n = Eee / N
        floored = not s2n > s2_floor
        if floored:
            s2n = s2_floor
        scale = abs(s2)
        delta = abs(s2n - s2)
        for j in range(M):
            for l in range(M):
                scale = max(scale, abs(D[j, l]))
                delta = max(delta, abs(Dn[j, l] - D[j, l]))
        scale = max(scale, 1e-300)
        D[:, :] = Dn
        s2 = s2n
        if delta / scale < tol:
            return D, s2, it, OK, floored, trace[:it]
    return best_D, best_s2, it, NOT_CONVERGED, floored, trace[:it]


def flatten_design(design):
    """Pack the per-pattern arrays of a ``_Design`` for :func:`em_loop`."""
    pats = design.patterns
    pidx = np.concatenate([p.idx for p in pats]).astype(np.int64)
    poff = np.concatenate([[0], np.cumsum([p.idx.size for p in pats])]).astype(np.int64)
    Y = np.concatenate([p.Y.ravel() for p in pats])
    yoff = np.concatenate([[0], np.cumsum([p.Y.size for p in pats])[:-1]]).astype(np.int64)
    C = np.ascontiguousarray(np.vstack([p.C for p in pats]))
    coff = np.concatenate([[0], np.cumsum([p.members.size for p in pats])]).astype(np.int64)
    return pidx, poff, Y, yoff, C, coff
