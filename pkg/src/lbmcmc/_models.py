"""Jitted move callbacks for the built-in targets (see lbmcmc._engine)."""
import numpy as np
from numba import njit


# spin-flip models: binary targets are encoded as independent spins -----------
# data = (field h, indptr, neighbours, lam[1]); state entries are +-1


@njit(cache=True)
def flip_lr(data, s, m):
    h, indptr, nbr, lam = data
    acc = 0
    for e in range(indptr[m], indptr[m + 1]):
        acc += s[nbr[e]]
    return -2.0 * s[m] * (h[m] + lam[0] * acc)


@njit(cache=True)
def flip_apply(data, s, m, pos, old):
    pos[0] = m
    old[0] = s[m]
    s[m] = -s[m]
    return 1


@njit(cache=True)
def flip_affected(data, s, pos, n, out):
    h, indptr, nbr, lam = data
    c = 0
    for q in range(n):
        p = pos[q]
        out[c] = p
        c += 1
        for e in range(indptr[p], indptr[p + 1]):
            out[c] = nbr[e]
            c += 1
    return c


@njit(cache=True)
def _partial_shuffle(scratch, row, nsel):
    N = scratch.shape[0]
    for t in range(nsel):
        j = t + int(row[t] * (N - t))
        if j >= N:
            j = N - 1
        tmp = scratch[t]
        scratch[t] = scratch[j]
        scratch[j] = tmp
    return np.sort(scratch[:nsel])


@njit(cache=True)
def flip_select(data, scratch, row, nsel, out):
    if nsel == 0:
        N = scratch.shape[0]
        for k in range(N):
            out[k] = k
        return N
    chosen = _partial_shuffle(scratch, row, nsel)
    for k in range(nsel):
        out[k] = chosen[k]
    return nsel


# permutations under index switches -------------------------------------------
# data = (log w, pair_i, pair_j, pair_index); state is rho


@njit(cache=True)
def perm_lr(data, r, m):
    logw, pi, pj, pidx = data
    i = pi[m]
    j = pj[m]
    ri = r[i]
    rj = r[j]
    return (logw[i, rj] + logw[j, ri]) - (logw[i, ri] + logw[j, rj])


@njit(cache=True)
def perm_apply(data, r, m, pos, old):
    logw, pi, pj, pidx = data
    i = pi[m]
    j = pj[m]
    pos[0] = i
    old[0] = r[i]
    pos[1] = j
    old[1] = r[j]
    r[i] = old[1]
    r[j] = old[0]
    return 2


@njit(cache=True)
def perm_affected(data, r, pos, n, out):
    logw, pi, pj, pidx = data
    N = r.shape[0]
    c = 0
    for q in range(n):
        p = pos[q]
        for k in range(N):
            if k != p:
                out[c] = pidx[p, k]
                c += 1
    return c


@njit(cache=True)
def perm_select(data, scratch, row, nsel, out):
    logw, pi, pj, pidx = data
    if nsel == 0:
        M = pi.shape[0]
        for k in range(M):
            out[k] = k
        return M
    chosen = _partial_shuffle(scratch, row, nsel)
    c = 0
    for a in range(nsel):
        for b in range(a + 1, nsel):
            out[c] = pidx[chosen[a], chosen[b]]
            c += 1
    return c


# partial matchings under the couple-based base kernel ------------------------
# data = (F, c[1], n_x, n_y); state = [M (n_x), M^-1 (n_y)], -1 = unmatched


@njit(cache=True)
def match_lr(data, s, m):
    F, c, nx, ny = data
    i = m // ny
    j = m - i * ny
    Mi = s[i]
    Mj = s[nx + j]
    if Mi < 0 and Mj < 0:
        return c[0] + F[i, j]
    if Mi == j:
        return -(c[0] + F[i, j])
    if Mi < 0:
        return F[i, j] - F[Mj, j]
    if Mj < 0:
        return F[i, j] - F[i, Mi]
    return (F[i, j] + F[Mj, Mi]) - (F[i, Mi] + F[Mj, j])


@njit(cache=True)
def match_apply(data, s, m, pos, old):
    F, c, nx, ny = data
    i = m // ny
    j = m - i * ny
    Mi = s[i]
    Mj = s[nx + j]
    if Mi < 0 and Mj < 0:
        # add
        pos[0] = i
        old[0] = Mi
        pos[1] = nx + j
        old[1] = Mj
        s[i] = j
        s[nx + j] = i
        return 2
    if Mi == j:
        # delete
        pos[0] = i
        old[0] = Mi
        pos[1] = nx + j
        old[1] = Mj
        s[i] = -1
        s[nx + j] = -1
        return 2
    if Mi < 0:
        # single switch I: i takes j away from i'
        pos[0] = i
        old[0] = Mi
        pos[1] = Mj
        old[1] = s[Mj]
        pos[2] = nx + j
        old[2] = Mj
        s[Mj] = -1
        s[i] = j
        s[nx + j] = i
        return 3
    if Mj < 0:
        # single switch II: i moves from j' to j
        pos[0] = i
        old[0] = Mi
        pos[1] = nx + Mi
        old[1] = s[nx + Mi]
        pos[2] = nx + j
        old[2] = Mj
        s[nx + Mi] = -1
        s[i] = j
        s[nx + j] = i
        return 3
    # double switch: (i, j'), (i', j) -> (i, j), (i', j')
    pos[0] = i
    old[0] = Mi
    pos[1] = Mj
    old[1] = s[Mj]
    pos[2] = nx + j
    old[2] = Mj
    pos[3] = nx + Mi
    old[3] = s[nx + Mi]
    s[i] = j
    s[Mj] = Mi
    s[nx + j] = i
    s[nx + Mi] = Mj
    return 4


@njit(cache=True)
def match_affected(data, s, pos, n, out):
    F, c, nx, ny = data
    k = 0
    for q in range(n):
        p = pos[q]
        if p < nx:
            for j in range(ny):
                out[k] = p * ny + j
                k += 1
        else:
            col = p - nx
            for i in range(nx):
                out[k] = i * ny + col
                k += 1
    return k
