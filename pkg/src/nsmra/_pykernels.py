"""Pure numpy versions of the compiled kernels in ``_ckernels.pyx``.

Used when the extension is not built or when ``NSMRA_PURE_PYTHON=1``.
"""

import numpy as np


def chordal_matrix(X, Y):
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    diff = X[:, None, :] - Y[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def nsexp_matrix(X, Y, sx, bx, sy, by):
    d = chordal_matrix(X, Y)
    bx = np.asarray(bx)[:, None]
    by = np.asarray(by)[None, :]
    b2 = bx * bx + by * by
    q = 2.0 * bx * by / b2
    pre = q * np.sqrt(q)
    return np.asarray(sx)[:, None] * np.asarray(sy)[None, :] * pre * np.exp(-d / np.sqrt(0.5 * b2))


def wendland_matrix(X, centers, ell):
    u = chordal_matrix(X, centers) / ell
    v = np.clip(1.0 - u, 0.0, None)
    v2 = v * v
    return v2 * v2 * v2 * (35.0 * u * u + 18.0 * u + 3.0) / 3.0


def lasso_cd(X, y, lam, w, tol, max_iter):
    n, p = X.shape
    sq = np.einsum("ij,ij->j", X, X) / n
    r = y - X @ w
    it = 0
    for it in range(max_iter):
        maxdelta = 0.0
        for j in range(p):
            if sq[j] == 0.0:
                continue
            old = w[j]
            col = X[:, j]
            rho = col @ r / n + sq[j] * old
            if rho > lam:
                new = (rho - lam) / sq[j]
            elif rho < -lam:
                new = (rho + lam) / sq[j]
            else:
                new = 0.0
            delta = new - old
            if delta != 0.0:
                r -= col * delta
                w[j] = new
                maxdelta = max(maxdelta, abs(delta))
        if maxdelta < tol:
            break
    return it + 1
