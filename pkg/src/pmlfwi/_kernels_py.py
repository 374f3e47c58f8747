"""Pure-NumPy element kernels (fallback when the compiled extension is missing).

All kernels accumulate into their output arrays. Field arrays are laid out
component-major: displacement-like fields are ``(3, N)`` over lattice nodes,
stress-like fields are ``(6, Ns)`` over stress slots with component order
``xx, yy, zz, xy, yz, xz``. ``conn`` maps ``(element, local node)`` to lattice
nodes and ``sconn`` to stress slots; ``D`` is the physical 1D derivative
matrix and ``wq`` the 27 quadrature weights (times Jacobian).
"""

from __future__ import annotations

import numpy as np

_PAIRS = ((0, 0), (1, 1), (2, 2), (0, 1), (1, 2), (0, 2))


def _grad(U: np.ndarray, D: np.ndarray) -> np.ndarray:
    """Element-local gradient: ``U (3, ne, 27) -> G (3, 3, ne, 27)``, ``G[i, j] = d_j u_i``."""
    ne = U.shape[1]
    V = U.reshape(3, ne, 3, 3, 3)
    G = np.empty((3, 3, ne, 3, 3, 3))
    G[:, 0] = np.einsum("pm,cemyz->cepyz", D, V)
    G[:, 1] = np.einsum("pm,cexmz->cexpz", D, V)
    G[:, 2] = np.einsum("pm,cexym->cexyp", D, V)
    return G.reshape(3, 3, ne, 27)


def _div(T: np.ndarray, D: np.ndarray) -> np.ndarray:
    """Transpose of :func:`_grad` contracted over j: ``T (3, 3, ne, 27) -> (3, ne, 27)``."""
    ne = T.shape[2]
    V = T.reshape(3, 3, ne, 3, 3, 3)
    r = np.einsum("pm,cepyz->cemyz", D, V[:, 0])
    r += np.einsum("pm,cexpz->cexmz", D, V[:, 1])
    r += np.einsum("pm,cexyp->cexym", D, V[:, 2])
    return r.reshape(3, ne, 27)


def _scatter(out: np.ndarray, index: np.ndarray, values: np.ndarray) -> None:
    flat = index.ravel()
    n = out.shape[1]
    for c in range(out.shape[0]):
        out[c] += np.bincount(flat, weights=values[c].ravel(), minlength=n)


def _sym_to_full(S: np.ndarray) -> np.ndarray:
    """``(6, ...) -> (3, 3, ...)`` symmetric tensor."""
    full = np.empty((3, 3) + S.shape[1:])
    for k, (i, j) in enumerate(_PAIRS):
        full[i, j] = S[k]
        full[j, i] = S[k]
    return full


def elastic_apply(u, lam, mu, conn, D, wq, out):
    """``out += K_RD u`` over the elements in ``conn``."""
    if len(conn) == 0:
        return
    H = _grad(u[:, conn], D)
    lq = lam[conn]
    mq = mu[conn]
    tr = H[0, 0] + H[1, 1] + H[2, 2]
    sig = mq * (H + H.transpose(1, 0, 2, 3))
    for i in range(3):
        sig[i, i] += lq * tr
    _scatter(out, conn, _div(sig * wq, D))


def pml_apply(u0, u1, u2, S0, S1, S2, lam, mu, Le, Lp, Lw, conn, sconn, D, wq, out_u, out_S):
    """PML coupling blocks of ``C x2 + K x1 + G x0``.

    Displacement rows receive the weak divergence of
    ``S2 Le + S1 Lp + S0 Lw``; stress rows receive minus the projected
    constitutive term built from ``grad(u2) Le + grad(u1) Lp + grad(u0) Lw``.
    """
    if len(conn) == 0:
        return
    lam_q = [L[:, conn] for L in (Le, Lp, Lw)]
    H = np.zeros((3, 3) + conn.shape)
    T = np.zeros((3, 3) + conn.shape)
    for uk, Sk, Lk in zip((u2, u1, u0), (S2, S1, S0), lam_q):
        G = _grad(uk[:, conn], D)
        Sf = _sym_to_full(Sk[:, sconn])
        for j in range(3):
            H[:, j] += G[:, j] * Lk[j]
            T[:, j] += Sf[:, j] * Lk[j]
    _scatter(out_u, conn, _div(T * wq, D))

    lq = lam[conn]
    mq = mu[conn]
    tr = H[0, 0] + H[1, 1] + H[2, 2]
    E = np.empty((6,) + conn.shape)
    for k, (i, j) in enumerate(_PAIRS):
        E[k] = mq * (H[i, j] + H[j, i])
        if i == j:
            E[k] += lq * tr
    _scatter(out_S, sconn, -E * wq)


def pml_apply_transpose(y0, y1, y2, z0, z1, z2, lam, mu, Le, Lp, Lw, conn, sconn, D, wq, out_u, out_S):
    """Transpose of :func:`pml_apply`.

    ``y*`` are displacement parts and ``z*`` stress parts of the input; the
    pairing with ``Le, Lp, Lw`` is (2, 1, 0) as in the forward kernel.
    """
    if len(conn) == 0:
        return
    lam_q = [L[:, conn] for L in (Le, Lp, Lw)]
    lq = lam[conn]
    mq = mu[conn]
    P = np.zeros((3, 3) + conn.shape)
    T = np.zeros((3, 3) + conn.shape)
    for yk, zk, Lk in zip((y2, y1, y0), (z2, z1, z0), lam_q):
        G = _grad(yk[:, conn], D)
        Z = zk[:, sconn]
        tr = Z[0] + Z[1] + Z[2]
        Q = _sym_to_full(Z) * mq
        for i in range(3):
            Q[i, i] = 2.0 * mq * Z[i] + lq * tr
        for j in range(3):
            P[:, j] += G[:, j] * Lk[j]
            T[:, j] += Q[:, j] * Lk[j]
    Pout = np.empty((6,) + conn.shape)
    for k, (i, j) in enumerate(_PAIRS):
        Pout[k] = P[i, i] if i == j else P[i, j] + P[j, i]
    _scatter(out_S, sconn, Pout * wq)
    _scatter(out_u, conn, -_div(T * wq, D))


def material_gradient(u, w, conn, D, wq, scale, out_lam, out_mu):
    """Accumulate ``scale * (div w)(div u)`` and ``scale * grad w : (grad u + grad u^T)``."""
    if len(conn) == 0:
        return
    Gu = _grad(u[:, conn], D)
    Gw = _grad(w[:, conn], D)
    divu = Gu[0, 0] + Gu[1, 1] + Gu[2, 2]
    divw = Gw[0, 0] + Gw[1, 1] + Gw[2, 2]
    glam = scale * wq * divu * divw
    gmu = scale * wq * np.einsum("ijeq,ijeq->eq", Gw, Gu + Gu.transpose(1, 0, 2, 3))
    n = out_lam.shape[0]
    out_lam += np.bincount(conn.ravel(), weights=glam.ravel(), minlength=n)
    out_mu += np.bincount(conn.ravel(), weights=gmu.ravel(), minlength=n)
