# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled element kernels; same signatures and semantics as ``_kernels_py``."""

from libc.stdint cimport int64_t

cdef int SYM[3][3]
SYM[0][:] = [0, 3, 5]
SYM[1][:] = [3, 1, 4]
SYM[2][:] = [5, 4, 2]
cdef int PI[6]
cdef int PJ[6]
PI[:] = [0, 1, 2, 0, 1, 0]
PJ[:] = [0, 1, 2, 1, 2, 2]


cdef inline void _grad(const double* U, const double* D, double* G) noexcept nogil:
    """G[j*27 + q] = d_j U at local node q."""
    cdef int a, b, c, m, q
    cdef double sx, sy, sz
    for a in range(3):
        for b in range(3):
            for c in range(3):
                sx = 0.0
                sy = 0.0
                sz = 0.0
                for m in range(3):
                    sx = sx + D[a * 3 + m] * U[m * 9 + b * 3 + c]
                    sy = sy + D[b * 3 + m] * U[a * 9 + m * 3 + c]
                    sz = sz + D[c * 3 + m] * U[a * 9 + b * 3 + m]
                q = a * 9 + b * 3 + c
                G[q] = sx
                G[27 + q] = sy
                G[54 + q] = sz


cdef inline void _div(const double* T, const double* D, double* r) noexcept nogil:
    """r[q] = sum_j (D_j^T T_j)[q]; transpose of _grad."""
    cdef int a, b, c, m
    cdef double s
    for a in range(3):
        for b in range(3):
            for c in range(3):
                s = 0.0
                for m in range(3):
                    s = s + D[m * 3 + a] * T[m * 9 + b * 3 + c]
                    s = s + D[m * 3 + b] * T[27 + a * 9 + m * 3 + c]
                    s = s + D[m * 3 + c] * T[54 + a * 9 + b * 3 + m]
                r[a * 9 + b * 3 + c] = s


def elastic_apply(double[:, ::1] u, double[::1] lam, double[::1] mu, int64_t[:, ::1] conn,
                  double[:, ::1] D, double[::1] wq, double[:, ::1] out):
    cdef Py_ssize_t ne = conn.shape[0]
    cdef Py_ssize_t e, n
    cdef int i, j, q
    cdef double Ul[27]
    cdef double G[3][81]
    cdef double T[3][81]
    cdef double r[27]
    cdef double tr, w, lq, mq
    if ne == 0:
        return
    cdef const double* Dp = &D[0, 0]
    with nogil:
        for e in range(ne):
            for i in range(3):
                for q in range(27):
                    Ul[q] = u[i, conn[e, q]]
                _grad(Ul, Dp, G[i])
            for q in range(27):
                n = conn[e, q]
                w = wq[q]
                lq = lam[n]
                mq = mu[n]
                tr = G[0][q] + G[1][27 + q] + G[2][54 + q]
                for i in range(3):
                    for j in range(3):
                        T[i][j * 27 + q] = w * mq * (G[i][j * 27 + q] + G[j][i * 27 + q])
                    T[i][i * 27 + q] += w * lq * tr
            for i in range(3):
                _div(T[i], Dp, r)
                for q in range(27):
                    out[i, conn[e, q]] += r[q]


def pml_apply(double[:, ::1] u0, double[:, ::1] u1, double[:, ::1] u2,
              double[:, ::1] S0, double[:, ::1] S1, double[:, ::1] S2,
              double[::1] lam, double[::1] mu,
              double[:, ::1] Le, double[:, ::1] Lp, double[:, ::1] Lw,
              int64_t[:, ::1] conn, int64_t[:, ::1] sconn, double[:, ::1] D, double[::1] wq,
              double[:, ::1] out_u, double[:, ::1] out_S):
    cdef Py_ssize_t ne = conn.shape[0]
    cdef Py_ssize_t N = u0.shape[1]
    cdef Py_ssize_t Ns = S0.shape[1]
    cdef Py_ssize_t e, n, s
    cdef int i, j, k, q
    cdef double Ul[27]
    cdef double G[81]
    cdef double H[3][81]
    cdef double T[3][81]
    cdef double r[27]
    cdef double tr, w, lk, val
    cdef const double* up[3]
    cdef const double* sp[3]
    cdef const double* lp[3]
    if ne == 0:
        return
    up[0] = &u2[0, 0]
    up[1] = &u1[0, 0]
    up[2] = &u0[0, 0]
    sp[0] = &S2[0, 0]
    sp[1] = &S1[0, 0]
    sp[2] = &S0[0, 0]
    lp[0] = &Le[0, 0]
    lp[1] = &Lp[0, 0]
    lp[2] = &Lw[0, 0]
    cdef const double* Dp = &D[0, 0]
    with nogil:
        for e in range(ne):
            for i in range(3):
                for q in range(81):
                    H[i][q] = 0.0
                    T[i][q] = 0.0
            for k in range(3):
                for i in range(3):
                    for q in range(27):
                        Ul[q] = up[k][i * N + conn[e, q]]
                    _grad(Ul, Dp, G)
                    for j in range(3):
                        for q in range(27):
                            H[i][j * 27 + q] += G[j * 27 + q] * lp[k][j * N + conn[e, q]]
                for q in range(27):
                    n = conn[e, q]
                    s = sconn[e, q]
                    for j in range(3):
                        lk = lp[k][j * N + n]
                        for i in range(3):
                            T[i][j * 27 + q] += sp[k][SYM[i][j] * Ns + s] * lk
            for i in range(3):
                for q in range(81):
                    T[i][q] *= wq[q % 27]
                _div(T[i], Dp, r)
                for q in range(27):
                    out_u[i, conn[e, q]] += r[q]
            for q in range(27):
                n = conn[e, q]
                s = sconn[e, q]
                w = wq[q]
                tr = H[0][q] + H[1][27 + q] + H[2][54 + q]
                for k in range(6):
                    i = PI[k]
                    j = PJ[k]
                    val = mu[n] * (H[i][j * 27 + q] + H[j][i * 27 + q])
                    if i == j:
                        val = val + lam[n] * tr
                    out_S[k, s] -= w * val


def pml_apply_transpose(double[:, ::1] y0, double[:, ::1] y1, double[:, ::1] y2,
                        double[:, ::1] z0, double[:, ::1] z1, double[:, ::1] z2,
                        double[::1] lam, double[::1] mu,
                        double[:, ::1] Le, double[:, ::1] Lp, double[:, ::1] Lw,
                        int64_t[:, ::1] conn, int64_t[:, ::1] sconn, double[:, ::1] D, double[::1] wq,
                        double[:, ::1] out_u, double[:, ::1] out_S):
    cdef Py_ssize_t ne = conn.shape[0]
    cdef Py_ssize_t N = y0.shape[1]
    cdef Py_ssize_t Ns = z0.shape[1]
    cdef Py_ssize_t e, n, s
    cdef int i, j, k, q, c
    cdef double Ul[27]
    cdef double G[81]
    cdef double P[3][81]
    cdef double T[3][81]
    cdef double r[27]
    cdef double Z[6]
    cdef double tr, w, lk, lq, mq, qij
    cdef const double* yp[3]
    cdef const double* zp[3]
    cdef const double* lp[3]
    if ne == 0:
        return
    yp[0] = &y2[0, 0]
    yp[1] = &y1[0, 0]
    yp[2] = &y0[0, 0]
    zp[0] = &z2[0, 0]
    zp[1] = &z1[0, 0]
    zp[2] = &z0[0, 0]
    lp[0] = &Le[0, 0]
    lp[1] = &Lp[0, 0]
    lp[2] = &Lw[0, 0]
    cdef const double* Dp = &D[0, 0]
    with nogil:
        for e in range(ne):
            for i in range(3):
                for q in range(81):
                    P[i][q] = 0.0
                    T[i][q] = 0.0
            for k in range(3):
                for i in range(3):
                    for q in range(27):
                        Ul[q] = yp[k][i * N + conn[e, q]]
                    _grad(Ul, Dp, G)
                    for j in range(3):
                        for q in range(27):
                            P[i][j * 27 + q] += G[j * 27 + q] * lp[k][j * N + conn[e, q]]
                for q in range(27):
                    n = conn[e, q]
                    s = sconn[e, q]
                    lq = lam[n]
                    mq = mu[n]
                    for c in range(6):
                        Z[c] = zp[k][c * Ns + s]
                    tr = Z[0] + Z[1] + Z[2]
                    for j in range(3):
                        lk = lp[k][j * N + n]
                        for i in range(3):
                            if i == j:
                                qij = 2.0 * mq * Z[i] + lq * tr
                            else:
                                qij = mq * Z[SYM[i][j]]
                            T[i][j * 27 + q] += qij * lk
            for q in range(27):
                s = sconn[e, q]
                w = wq[q]
                for k in range(6):
                    i = PI[k]
                    j = PJ[k]
                    if i == j:
                        out_S[k, s] += w * P[i][i * 27 + q]
                    else:
                        out_S[k, s] += w * (P[i][j * 27 + q] + P[j][i * 27 + q])
            for i in range(3):
                for q in range(81):
                    T[i][q] *= wq[q % 27]
                _div(T[i], Dp, r)
                for q in range(27):
                    out_u[i, conn[e, q]] -= r[q]


def material_gradient(double[:, ::1] u, double[:, ::1] w, int64_t[:, ::1] conn, double[:, ::1] D,
                      double[::1] wq, double scale, double[::1] out_lam, double[::1] out_mu):
    cdef Py_ssize_t ne = conn.shape[0]
    cdef Py_ssize_t e, n
    cdef int i, j, q
    cdef double Ul[27]
    cdef double Gu[3][81]
    cdef double Gw[3][81]
    cdef double divu, divw, acc, f
    if ne == 0:
        return
    cdef const double* Dp = &D[0, 0]
    with nogil:
        for e in range(ne):
            for i in range(3):
                for q in range(27):
                    Ul[q] = u[i, conn[e, q]]
                _grad(Ul, Dp, Gu[i])
                for q in range(27):
                    Ul[q] = w[i, conn[e, q]]
                _grad(Ul, Dp, Gw[i])
            for q in range(27):
                n = conn[e, q]
                f = scale * wq[q]
                divu = Gu[0][q] + Gu[1][27 + q] + Gu[2][54 + q]
                divw = Gw[0][q] + Gw[1][27 + q] + Gw[2][54 + q]
                out_lam[n] += f * divu * divw
                acc = 0.0
                for i in range(3):
                    for j in range(3):
                        acc = acc + Gw[i][j * 27 + q] * (Gu[i][j * 27 + q] + Gu[j][i * 27 + q])
                out_mu[n] += f * acc
