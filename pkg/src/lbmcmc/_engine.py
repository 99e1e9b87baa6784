"""Compiled inner loops shared by every discrete model.

A model is described by three jitted callbacks:

``lr_fn(data, state, m)``
    log pi(y)/pi(x) for the neighbour reached by move ``m``.
``apply_fn(data, state, m, pos, old)``
    apply move ``m`` in place, write the changed state positions and their
    previous values, return how many changed.
``aff_fn(data, state, pos, n, out)``
    after a move changed ``pos[:n]``, write the ids of every move whose
    log-ratio may have changed, return the count (duplicates allowed).

Weight tables keep linear weights exp(log g - shift) in a binary sum tree,
so totals never accumulate drift and sampling is O(log |N|).

Every iteration consumes one fixed-width row of pre-drawn uniforms, so a
chain is reproducible from its numpy Generator regardless of chunking.
"""
import math

import numpy as np
from numba import njit

# Rebuild the table when a weight rises this many nats above the shift, or the
# total falls this far below it.  Sums are recomputed from the leaves, so the
# guard only has to keep exp() clear of overflow (709 nats); underflowed leaves
# are at least exp(-445) below the total and cannot matter.
DRIFT_NATS = 300.0


@njit(cache=True)
def log_g(code, lr):
    if code == 0:
        return 0.0
    if code == 1:
        return lr
    if code == 2:
        return 0.5 * lr
    if code == 3:
        if lr > 0:
            return -math.log1p(math.exp(-lr))
        return lr - math.log1p(math.exp(lr))
    if code == 4:
        return min(0.0, lr)
    return max(0.0, lr)


@njit(cache=True)
def tree_build(tree, P, lw, L, shift):
    for k in range(P):
        if k < L:
            tree[P + k] = math.exp(lw[k] - shift)
        else:
            tree[P + k] = 0.0
    for i in range(P - 1, 0, -1):
        tree[i] = tree[2 * i] + tree[2 * i + 1]


@njit(cache=True)
def tree_set(tree, P, k, value):
    i = P + k
    tree[i] = value
    i //= 2
    while i >= 1:
        tree[i] = tree[2 * i] + tree[2 * i + 1]
        i //= 2


@njit(cache=True)
def tree_sample(tree, P, u):
    """Smallest leaf k whose prefix sum exceeds u * total."""
    target = u * tree[1]
    i = 1
    while i < P:
        left = tree[2 * i]
        if target < left:
            i = 2 * i
        else:
            target -= left
            i = 2 * i + 1
    k = i - P
    if tree[i] <= 0.0:
        # rounding overshoot past the last positive leaf
        while k > 0 and tree[P + k] <= 0.0:
            k -= 1
    return k


@njit(cache=True)
def table_build(lr_fn, data, state, gcode, moves, L, lw, tree, P):
    """Fill log-weights for ``moves[:L]`` and the sum tree; return the shift (nan if all zero)."""
    mx = -np.inf
    for k in range(L):
        v = log_g(gcode, lr_fn(data, state, moves[k]))
        lw[k] = v
        if v > mx:
            mx = v
    if mx == -np.inf:
        return np.nan
    tree_build(tree, P, lw, L, mx)
    return mx


@njit(cache=True)
def summary_update(state, pos, old, n, n_coord, refs, dist, level_code, level):
    for q in range(n):
        p = pos[q]
        if p >= n_coord:
            continue
        o = old[q]
        v = state[p]
        for r in range(refs.shape[0]):
            rv = refs[r, p]
            dist[r] += (1 if v != rv else 0) - (1 if o != rv else 0)
        if level_code == 1:
            level[0] += v - o
        elif level_code == 2:
            level[0] += (1 if v >= 0 else 0) - (1 if o >= 0 else 0)


@njit(cache=True)
def _record(t, thin, dist, level_code, level, acc, flips, out_summ, out_acc, out_flips):
    if t % thin == 0:
        r = t // thin
        K = dist.shape[0]
        for q in range(K):
            out_summ[r, q] = dist[q]
        if level_code != 0:
            out_summ[r, K] = level[0]
        out_acc[r] = acc
        out_flips[r] = flips


@njit(cache=True)
def _update_entries(lr_fn, data, state, gcode, local, lw, tree, P, shift, aff, na,
                    undo_k, undo_v):
    """Recompute the table entries listed in ``aff``; return (#undo records, drift flag)."""
    nu = 0
    drift = False
    for a in range(na):
        mm = aff[a]
        kk = local[mm]
        if kk < 0:
            continue
        undo_k[nu] = kk
        undo_v[nu] = lw[kk]
        nu += 1
        v = log_g(gcode, lr_fn(data, state, mm))
        lw[kk] = v
        if v - shift > DRIFT_NATS:
            drift = True
        tree_set(tree, P, kk, math.exp(v - shift))
    return nu, drift


@njit(cache=True)
def _rebuild(lr_fn, data, state, gcode, moves, lw, tree, P, meta):
    L = moves.shape[0]
    shift = table_build(lr_fn, data, state, gcode, moves, L, lw, tree, P)
    meta[0] = shift
    return shift


@njit(cache=True)
def run_rw(lr_fn, apply_fn, data, state, moves, unif, t0, thin, n_coord, refs, dist,
           level_code, level, out_summ, out_acc, out_flips, counters, pos, old):
    L = moves.shape[0]
    for it in range(unif.shape[0]):
        k = int(unif[it, 0] * L)
        if k >= L:
            k = L - 1
        m = moves[k]
        lr = lr_fn(data, state, m)
        acc = False
        if unif[it, 1] < math.exp(min(0.0, lr)):
            n = apply_fn(data, state, m, pos, old)
            summary_update(state, pos, old, n, n_coord, refs, dist, level_code, level)
            counters[0] += 1
            acc = True
        _record(t0 + it, thin, dist, level_code, level, acc, counters[0],
                out_summ, out_acc, out_flips)


@njit(cache=True)
def run_informed(lr_fn, apply_fn, aff_fn, data, state, gcode, moves, local, lw, tree, P,
                 meta, unif, t0, thin, n_coord, refs, dist, level_code, level, out_summ,
                 out_acc, out_flips, counters, pos, old, aff, undo_k, undo_v):
    """Pointwise informed MH with an incrementally maintained weight table.

    Returns 0 on success, 1 if a state with no positive weight was reached.
    """
    tiny = math.exp(-DRIFT_NATS)
    for it in range(unif.shape[0]):
        shift_x = meta[0]
        Wx = tree[1]
        k = tree_sample(tree, P, unif[it, 0])
        m = moves[k]
        lr = lr_fn(data, state, m)
        lg_fwd = lw[k]
        n = apply_fn(data, state, m, pos, old)
        na = aff_fn(data, state, pos, n, aff)
        nu, drift = _update_entries(lr_fn, data, state, gcode, local, lw, tree, P,
                                    shift_x, aff, na, undo_k, undo_v)
        shift_y = shift_x
        rebuilt = False
        if drift or tree[1] < tiny:
            shift_y = _rebuild(lr_fn, data, state, gcode, moves, lw, tree, P, meta)
            if shift_y != shift_y:
                return 1
            rebuilt = True
        Wy = tree[1]
        loga = (lr + log_g(gcode, -lr) - lg_fwd
                + (math.log(Wx) + shift_x) - (math.log(Wy) + shift_y))
        acc = False
        if unif[it, 1] < math.exp(min(0.0, loga)):
            summary_update(state, pos, old, n, n_coord, refs, dist, level_code, level)
            counters[0] += 1
            acc = True
        else:
            for q in range(n - 1, -1, -1):
                state[pos[q]] = old[q]
            if rebuilt:
                _rebuild(lr_fn, data, state, gcode, moves, lw, tree, P, meta)
            else:
                for q in range(nu - 1, -1, -1):
                    kk = undo_k[q]
                    lw[kk] = undo_v[q]
                    tree_set(tree, P, kk, math.exp(undo_v[q] - shift_x))
        _record(t0 + it, thin, dist, level_code, level, acc, counters[0],
                out_summ, out_acc, out_flips)
    return 0


@njit(cache=True)
def run_hamming_ball(lr_fn, apply_fn, aff_fn, data, state, moves, local, lw, tree, P,
                     meta, unif, t0, thin, n_coord, refs, dist, level_code, level,
                     out_summ, out_acc, out_flips, counters, pos, old, pos2, old2, aff,
                     undo_k, undo_v):
    """Two-stage auxiliary-variable sampler; ``lw``/``tree`` hold pi(y)/pi(x) weights."""
    L = moves.shape[0]
    tiny = math.exp(-DRIFT_NATS)
    for it in range(unif.shape[0]):
        k0 = int(unif[it, 0] * L)
        if k0 >= L:
            k0 = L - 1
        n1 = apply_fn(data, state, moves[k0], pos, old)
        summary_update(state, pos, old, n1, n_coord, refs, dist, level_code, level)
        na = aff_fn(data, state, pos, n1, aff)
        nu, drift = _update_entries(lr_fn, data, state, 1, local, lw, tree, P, meta[0],
                                    aff, na, undo_k, undo_v)
        if drift or tree[1] < tiny:
            shift = _rebuild(lr_fn, data, state, 1, moves, lw, tree, P, meta)
            if shift != shift:
                return 1
        k = tree_sample(tree, P, unif[it, 1])
        n2 = apply_fn(data, state, moves[k], pos2, old2)
        summary_update(state, pos2, old2, n2, n_coord, refs, dist, level_code, level)
        na = aff_fn(data, state, pos2, n2, aff)
        nu, drift = _update_entries(lr_fn, data, state, 1, local, lw, tree, P, meta[0],
                                    aff, na, undo_k, undo_v)
        if drift or tree[1] < tiny:
            shift = _rebuild(lr_fn, data, state, 1, moves, lw, tree, P, meta)
            if shift != shift:
                return 1
        moved = False
        for q in range(n1):
            if state[pos[q]] != old[q]:
                moved = True
        for q in range(n2):
            seen = False
            for r in range(n1):
                if pos[r] == pos2[q]:
                    seen = True
            if not seen:
                moved = True
        if moved:
            counters[0] += 1
        _record(t0 + it, thin, dist, level_code, level, moved, counters[0],
                out_summ, out_acc, out_flips)
    return 0


@njit(cache=True)
def run_blockwise(lr_fn, apply_fn, sel_fn, data, state, gcode, nsel, scratch, bmoves,
                  blw, bw, unif, t0, thin, n_coord, refs, dist, level_code, level,
                  out_summ, out_acc, out_flips, counters, pos, old):
    """Informed MH restricted to a random sub-neighbourhood drawn each iteration.

    Within-block normalisers are computed from scratch, so no table persists.
    """
    for it in range(unif.shape[0]):
        row = unif[it]
        L = sel_fn(data, scratch, row, nsel, bmoves)
        u0 = row[nsel]
        u1 = row[nsel + 1]
        mx = -np.inf
        for k in range(L):
            v = log_g(gcode, lr_fn(data, state, bmoves[k]))
            blw[k] = v
            if v > mx:
                mx = v
        Wx = 0.0
        for k in range(L):
            bw[k] = math.exp(blw[k] - mx)
            Wx += bw[k]
        target = u0 * Wx
        csum = 0.0
        pick = -1
        for k in range(L):
            csum += bw[k]
            if target < csum:
                pick = k
                break
        if pick < 0:
            pick = L - 1
            while pick > 0 and bw[pick] <= 0.0:
                pick -= 1
        m = bmoves[pick]
        lr = lr_fn(data, state, m)
        lg_fwd = blw[pick]
        n = apply_fn(data, state, m, pos, old)
        my = -np.inf
        for k in range(L):
            v = log_g(gcode, lr_fn(data, state, bmoves[k]))
            bw[k] = v
            if v > my:
                my = v
        Wy = 0.0
        for k in range(L):
            Wy += math.exp(bw[k] - my)
        loga = (lr + log_g(gcode, -lr) - lg_fwd
                + (math.log(Wx) + mx) - (math.log(Wy) + my))
        acc = False
        if u1 < math.exp(min(0.0, loga)):
            summary_update(state, pos, old, n, n_coord, refs, dist, level_code, level)
            counters[0] += 1
            acc = True
        else:
            for q in range(n - 1, -1, -1):
                state[pos[q]] = old[q]
        _record(t0 + it, thin, dist, level_code, level, acc, counters[0],
                out_summ, out_acc, out_flips)


@njit(cache=True)
def simulate_finite_chain(cum_P, x0, unif, h, out_h):
    """Run a chain on {0..S-1} from row-cumulative transition matrix ``cum_P``.

    Writes ``h[x_t]`` into ``out_h``; returns the final state.
    """
    S = cum_P.shape[0]
    x = x0
    for t in range(unif.shape[0]):
        u = unif[t]
        row = cum_P[x]
        y = 0
        while y < S - 1 and u >= row[y]:
            y += 1
        x = y
        out_h[t] = h[x]
    return x
