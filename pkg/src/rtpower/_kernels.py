"""Compiled profiled deviance and Nelder-Mead search for balanced crossed designs.

In a fully crossed balanced design all per-level blocks of ``Z'Z`` coincide,
so the deviance depends on the response only through a handful of
``q x (1+p)`` sufficient statistics (see ``balanced_statistics``).  One
evaluation then costs ``O(q^2 (1+p)^2)`` regardless of the number of
participants and items.

``nelder_mead`` follows the classic adaptive simplex scheme with every trial
point projected onto the box (the same steps as
``scipy.optimize.minimize(method="Nelder-Mead", bounds=...)``), and is
compiled together with the objective to avoid per-evaluation overhead.
"""
import numpy as np
from numba import njit

_LOG2PI = np.log(2.0 * np.pi)


def balanced_statistics(G_a, G_b, C, ZtR_a, ZtR_b):
    """Response-level sufficient statistics for :func:`balanced_deviance`.

    ``ZtR_*`` are ``levels x q x (1+p)`` arrays of ``[Z'y, Z'X]`` per level.
    """
    dev_a = ZtR_a - ZtR_a.mean(axis=0)
    return (
        np.ascontiguousarray(G_a[0]),
        np.ascontiguousarray(G_b[0]),
        np.ascontiguousarray(C[0, :, 0, :]),
        np.ascontiguousarray(np.einsum("jir,jkc->irkc", dev_a, dev_a)),
        np.ascontiguousarray(ZtR_a.mean(axis=0)),
        np.ascontiguousarray(np.einsum("jir,jkc->irkc", ZtR_b, ZtR_b)),
        np.ascontiguousarray(ZtR_b.sum(axis=0)),
    )


@njit(cache=True)
def _tril(vec, q):
    T = np.zeros((q, q))
    k = 0
    for j in range(q):
        for i in range(j, q):
            T[i, j] = vec[k]
            k += 1
    return T


@njit(cache=True)
def _chol(A):
    n = A.shape[0]
    L = np.zeros((n, n))
    for j in range(n):
        s = A[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            return L, False
        L[j, j] = np.sqrt(s)
        for i in range(j + 1, n):
            t = A[i, j]
            for k in range(j):
                t -= L[i, k] * L[j, k]
            L[i, j] = t / L[j, j]
    return L, True


@njit(cache=True)
def _inv_lower(L):
    n = L.shape[0]
    M = np.zeros((n, n))
    for c in range(n):
        for i in range(c, n):
            s = 1.0 if i == c else 0.0
            for k in range(c, i):
                s -= L[i, k] * M[k, c]
            M[i, c] = s / L[i, i]
    return M


@njit(cache=True)
def _mm(A, B):
    n, k = A.shape
    m = B.shape[1]
    C = np.zeros((n, m))
    for i in range(n):
        for l in range(k):
            a = A[i, l]
            if a != 0.0:
                for j in range(m):
                    C[i, j] += a * B[l, j]
    return C


@njit(cache=True)
def _contract(Q, S4, out, scale):
    # out[r, c] += scale * sum_ij Q[i, j] * S4[i, r, j, c]
    q = Q.shape[0]
    m = S4.shape[1]
    for i in range(q):
        for j in range(q):
            w = Q[i, j] * scale
            if w != 0.0:
                for r in range(m):
                    for c in range(m):
                        out[r, c] += w * S4[i, r, j, c]


@njit(cache=True)
def balanced_deviance(theta, a0, qa, b0, qb, La, Lb, Ga, Gb, K, Sa4, MeanA, Sb4, SumB,
                      XtX, Xty, yty, n, reml):
    """Profiled deviance (``inf`` when a factorization fails)."""
    m = MeanA.shape[1]
    p = m - 1
    Ta = _tril(theta[a0 : a0 + qa * (qa + 1) // 2], qa)
    Tb = _tril(theta[b0 : b0 + qb * (qb + 1) // 2], qb)
    TaT = Ta.T.copy()
    TbT = Tb.T.copy()

    Ab = _mm(_mm(TbT, Gb), Tb)
    for i in range(qb):
        Ab[i, i] += 1.0
    Lbc, ok = _chol(Ab)
    if not ok:
        return np.inf
    Mb = _inv_lower(Lbc)
    P = _mm(Mb, TbT)
    quad = np.zeros((m, m))
    _contract(_mm(P.T.copy(), P), Sb4, quad, 1.0)
    Sb = _mm(P, SumB)

    E = _mm(_mm(_mm(TaT, K), Tb), Mb.T.copy())
    Aa = _mm(_mm(TaT, Ga), Ta)
    for i in range(qa):
        Aa[i, i] += 1.0
    W = Aa - (La * Lb) * _mm(E, E.T.copy())
    Lac, ok = _chol(Aa)
    if not ok:
        return np.inf
    Wc, ok = _chol(W)
    if not ok:
        return np.inf
    H = _mm(_inv_lower(Lac), TaT)
    _contract(_mm(H.T.copy(), H), Sa4, quad, 1.0)
    Rbar = _mm(TaT, MeanA) - _mm(E, Sb)
    Z = _mm(_inv_lower(Wc), Rbar)
    for r in range(m):
        for c in range(m):
            s = 0.0
            for i in range(qa):
                s += Z[i, r] * Z[i, c]
            quad[r, c] += La * s

    logdet = 0.0
    for i in range(qb):
        logdet += 2.0 * Lb * np.log(Lbc[i, i])
    for i in range(qa):
        logdet += 2.0 * (La - 1) * np.log(Lac[i, i]) + 2.0 * np.log(Wc[i, i])

    M = np.empty((p, p))
    rhs = np.empty(p)
    for i in range(p):
        rhs[i] = Xty[i] - quad[i + 1, 0]
        for j in range(p):
            M[i, j] = XtX[i, j] - quad[i + 1, j + 1]
    RX, ok = _chol(M)
    if not ok:
        return np.inf
    w = np.empty(p)
    for i in range(p):
        s = rhs[i]
        for k in range(i):
            s -= RX[i, k] * w[k]
        w[i] = s / RX[i, i]
    r2 = yty - quad[0, 0]
    for i in range(p):
        r2 -= w[i] * w[i]
    if not r2 > 0.0:
        return np.inf
    logdet_x = 0.0
    for i in range(p):
        logdet_x += 2.0 * np.log(RX[i, i])
    if reml:
        dof = n - p
        return logdet + logdet_x + dof * (1.0 + _LOG2PI + np.log(r2 / dof))
    return logdet + n * (1.0 + _LOG2PI + np.log(r2 / n))


@njit(cache=True)
def _clip(x, lb):
    for i in range(x.size):
        if x[i] < lb[i]:
            x[i] = lb[i]
    return x


@njit(cache=True)
def _sort(sim, fsim):
    order = np.argsort(fsim, kind="mergesort")
    return sim[order].copy(), fsim[order].copy()


@njit(cache=True)
def nelder_mead(x0, lb, xatol, fatol, maxiter, maxfev, adaptive,
                a0, qa, b0, qb, La, Lb, Ga, Gb, K, Sa4, MeanA, Sb4, SumB, XtX, Xty, yty, n, reml):
    """Minimize :func:`balanced_deviance` over theta >= lb.

    Returns ``(x, fun, n_evals, n_iter, status)``; status 0 means both the
    simplex diameter and the spread of function values fell below tolerance,
    1 the evaluation budget and 2 the iteration budget ran out.
    """
    N = x0.size
    if adaptive:
        rho, chi, psi, sigma = 1.0, 1.0 + 2.0 / N, 0.75 - 1.0 / (2.0 * N), 1.0 - 1.0 / N
    else:
        rho, chi, psi, sigma = 1.0, 2.0, 0.5, 0.5
    sim = np.empty((N + 1, N))
    sim[0] = _clip(x0.copy(), lb)
    for k in range(N):
        y = sim[0].copy()
        if y[k] != 0.0:
            y[k] = 1.05 * y[k]
        else:
            y[k] = 0.00025
        sim[k + 1] = _clip(y, lb)
    fsim = np.empty(N + 1)
    for k in range(N + 1):
        fsim[k] = balanced_deviance(sim[k], a0, qa, b0, qb, La, Lb, Ga, Gb, K, Sa4, MeanA, Sb4,
                                    SumB, XtX, Xty, yty, n, reml)
    fcalls = N + 1
    sim, fsim = _sort(sim, fsim)
    iterations = 1
    status = 0
    while True:
        if fcalls >= maxfev:
            status = 1
            break
        if iterations >= maxiter:
            status = 2
            break
        xdiff = 0.0
        fdiff = 0.0
        for k in range(1, N + 1):
            fdiff = max(fdiff, abs(fsim[0] - fsim[k]))
            for i in range(N):
                xdiff = max(xdiff, abs(sim[k, i] - sim[0, i]))
        if xdiff <= xatol and fdiff <= fatol:
            break
        xbar = np.zeros(N)
        for k in range(N):
            xbar += sim[k]
        xbar /= N
        xr = _clip((1.0 + rho) * xbar - rho * sim[N], lb)
        fxr = balanced_deviance(xr, a0, qa, b0, qb, La, Lb, Ga, Gb, K, Sa4, MeanA, Sb4, SumB,
                                XtX, Xty, yty, n, reml)
        fcalls += 1
        shrink = False
        if fxr < fsim[0]:
            xe = _clip((1.0 + rho * chi) * xbar - rho * chi * sim[N], lb)
            fxe = balanced_deviance(xe, a0, qa, b0, qb, La, Lb, Ga, Gb, K, Sa4, MeanA, Sb4, SumB,
                                    XtX, Xty, yty, n, reml)
            fcalls += 1
            if fxe < fxr:
                sim[N] = xe
                fsim[N] = fxe
            else:
                sim[N] = xr
                fsim[N] = fxr
        elif fxr < fsim[N - 1]:
            sim[N] = xr
            fsim[N] = fxr
        elif fxr < fsim[N]:
            xc = _clip((1.0 + psi * rho) * xbar - psi * rho * sim[N], lb)
            fxc = balanced_deviance(xc, a0, qa, b0, qb, La, Lb, Ga, Gb, K, Sa4, MeanA, Sb4, SumB,
                                    XtX, Xty, yty, n, reml)
            fcalls += 1
            if fxc <= fxr:
                sim[N] = xc
                fsim[N] = fxc
            else:
                shrink = True
        else:
            xcc = _clip((1.0 - psi) * xbar + psi * sim[N], lb)
            fxcc = balanced_deviance(xcc, a0, qa, b0, qb, La, Lb, Ga, Gb, K, Sa4, MeanA, Sb4, SumB,
                                     XtX, Xty, yty, n, reml)
            fcalls += 1
            if fxcc < fsim[N]:
                sim[N] = xcc
                fsim[N] = fxcc
            else:
                shrink = True
        if shrink:
            for k in range(1, N + 1):
                sim[k] = _clip(sim[0] + sigma * (sim[k] - sim[0]), lb)
                fsim[k] = balanced_deviance(sim[k], a0, qa, b0, qb, La, Lb, Ga, Gb, K, Sa4, MeanA,
                                            Sb4, SumB, XtX, Xty, yty, n, reml)
            fcalls += N
        iterations += 1
        sim, fsim = _sort(sim, fsim)
    return sim[0].copy(), fsim[0], fcalls, iterations, status
