"""Hot numeric kernels.

Each kernel has a loop implementation compiled with numba ``@njit`` and a
pure-numpy implementation. The numba path is used when numba imports and
``LATENTCERT_DISABLE_NUMBA`` is unset (or ``0``); both paths are always
importable so they can be compared directly (see ``benchmarks/``).
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("LATENTCERT_DISABLE_NUMBA", "0").lower() in (
    "",
    "0",
    "false",
    "no",
)

# Masses below this are treated as exhausted by the transport solver.
TRANSPORT_EPS = 1e-15


def _njit(fn):
    if HAVE_NUMBA:
        return numba.njit(cache=True, nogil=True)(fn)
    return fn


# ---------------------------------------------------------------------------
# sum tree (0-indexed heap, 2 * capacity - 1 nodes, leaves at capacity - 1 ...)
# ---------------------------------------------------------------------------


def _sumtree_set_loop(tree, capacity, leaves, values):
    base = capacity - 1
    for k in range(leaves.shape[0]):
        node = base + leaves[k]
        tree[node] = values[k]
        while node > 0:
            node = (node - 1) // 2
            tree[node] = tree[2 * node + 1] + tree[2 * node + 2]


def _sumtree_find_loop(tree, capacity, targets):
    base = capacity - 1
    out = np.empty(targets.shape[0], dtype=np.int64)
    for k in range(targets.shape[0]):
        v = targets[k]
        node = 0
        while node < base:
            left = 2 * node + 1
            if v < tree[left] or tree[left + 1] <= 0.0:
                node = left
            else:
                v -= tree[left]
                node = left + 1
        out[k] = node - base
    return out


_sumtree_set_nb = _njit(_sumtree_set_loop)
_sumtree_find_nb = _njit(_sumtree_find_loop)


def _node_depth(nodes):
    return np.floor(np.log2(nodes + 1.0)).astype(np.int64)


def sumtree_set_numpy(tree, capacity, leaves, values):
    base = capacity - 1
    nodes = base + np.asarray(leaves, dtype=np.int64)
    tree[nodes] = values
    # ancestors grouped by depth; children always sit one level deeper
    ancestors = []
    cur = np.unique(nodes)
    while True:
        cur = np.unique((cur[cur > 0] - 1) // 2)
        if cur.size == 0:
            break
        ancestors.append(cur)
    if not ancestors:
        return
    allnodes = np.unique(np.concatenate(ancestors))
    depth = _node_depth(allnodes)
    for d in range(int(depth.max()), -1, -1):
        level = allnodes[depth == d]
        tree[level] = tree[2 * level + 1] + tree[2 * level + 2]


def sumtree_find_numpy(tree, capacity, targets):
    base = capacity - 1
    v = np.array(targets, dtype=np.float64, copy=True)
    node = np.zeros(v.shape[0], dtype=np.int64)
    active = node < base
    while active.any():
        idx = np.nonzero(active)[0]
        left = 2 * node[idx] + 1
        lmass = tree[left]
        go_left = (v[idx] < lmass) | (tree[left + 1] <= 0.0)
        v[idx] = np.where(go_left, v[idx], v[idx] - lmass)
        node[idx] = np.where(go_left, left, left + 1)
        active = node < base
    return node - base


def sumtree_set(tree, capacity, leaves, values):
    leaves = np.ascontiguousarray(leaves, dtype=np.int64)
    values = np.ascontiguousarray(values, dtype=np.float64)
    if USE_NUMBA:
        _sumtree_set_nb(tree, capacity, leaves, values)
    else:
        sumtree_set_numpy(tree, capacity, leaves, values)


def sumtree_find(tree, capacity, targets):
    targets = np.ascontiguousarray(targets, dtype=np.float64)
    if USE_NUMBA:
        return _sumtree_find_nb(tree, capacity, targets)
    return sumtree_find_numpy(tree, capacity, targets)


# ---------------------------------------------------------------------------
# exact transport: successive shortest paths with Dijkstra and potentials
# ---------------------------------------------------------------------------


def _transport_loop(p, q, cost):
    n = p.shape[0]
    m = q.shape[0]
    big = np.inf
    supply = p.copy()
    demand = q.copy()
    flow = np.zeros((n, m))
    pot = np.zeros(n + m)
    for j in range(m):
        best = big
        for i in range(n):
            if cost[i, j] < best:
                best = cost[i, j]
        pot[n + j] = best
    dist = np.empty(n + m)
    pred = np.empty(n + m, dtype=np.int64)
    done = np.empty(n + m, dtype=np.bool_)
    for _ in range(4 * (n + m) * (n + m) + 16):
        remaining = 0.0
        for i in range(n):
            remaining += supply[i]
        if remaining <= TRANSPORT_EPS:
            break
        for k in range(n + m):
            dist[k] = big
            pred[k] = -1
            done[k] = False
        for i in range(n):
            if supply[i] > TRANSPORT_EPS:
                dist[i] = 0.0
        target = -1
        while True:
            u = -1
            du = big
            for k in range(n + m):
                if not done[k] and dist[k] < du:
                    du = dist[k]
                    u = k
            if u < 0:
                break
            done[u] = True
            if u >= n and demand[u - n] > TRANSPORT_EPS:
                target = u
                break
            if u < n:
                for j in range(m):
                    rc = cost[u, j] + pot[u] - pot[n + j]
                    if rc < 0.0:
                        rc = 0.0
                    if du + rc < dist[n + j]:
                        dist[n + j] = du + rc
                        pred[n + j] = u
            else:
                j = u - n
                for i in range(n):
                    if flow[i, j] > TRANSPORT_EPS:
                        rc = -cost[i, j] + pot[u] - pot[i]
                        if rc < 0.0:
                            rc = 0.0
                        if du + rc < dist[i]:
                            dist[i] = du + rc
                            pred[i] = u
        if target < 0:
            break
        dt = dist[target]
        for k in range(n + m):
            if dist[k] < dt:
                pot[k] += dist[k]
            else:
                pot[k] += dt
        # bottleneck along the path
        amount = demand[target - n]
        node = target
        while pred[node] >= 0:
            prev = pred[node]
            if prev >= n:  # backward arc sink(prev) -> source(node)
                if flow[node, prev - n] < amount:
                    amount = flow[node, prev - n]
            node = prev
        if supply[node] < amount:
            amount = supply[node]
        node = target
        while pred[node] >= 0:
            prev = pred[node]
            if prev < n:
                flow[prev, node - n] += amount
            else:
                flow[node, prev - n] -= amount
            node = prev
        supply[node] -= amount
        demand[target - n] -= amount
    total = 0.0
    for i in range(n):
        for j in range(m):
            if flow[i, j] > 0.0:
                total += flow[i, j] * cost[i, j]
    return total


_transport_nb = _njit(_transport_loop)


def transport_numpy(p, q, cost):
    """Same algorithm as the loop kernel with vectorized relaxations."""
    n, m = p.shape[0], q.shape[0]
    supply = p.copy()
    demand = q.copy()
    flow = np.zeros((n, m))
    pot = np.concatenate([np.zeros(n), cost.min(axis=0)])
    for _ in range(4 * (n + m) ** 2 + 16):
        if supply.sum() <= TRANSPORT_EPS:
            break
        dist = np.full(n + m, np.inf)
        pred = np.full(n + m, -1, dtype=np.int64)
        done = np.zeros(n + m, dtype=bool)
        dist[:n][supply > TRANSPORT_EPS] = 0.0
        target = -1
        while True:
            masked = np.where(done, np.inf, dist)
            u = int(np.argmin(masked))
            du = masked[u]
            if not np.isfinite(du):
                break
            done[u] = True
            if u >= n and demand[u - n] > TRANSPORT_EPS:
                target = u
                break
            if u < n:
                rc = np.maximum(cost[u] + pot[u] - pot[n:], 0.0)
                cand = du + rc
                better = cand < dist[n:]
                dist[n:] = np.where(better, cand, dist[n:])
                pred[n:] = np.where(better, u, pred[n:])
            else:
                j = u - n
                rc = np.maximum(-cost[:, j] + pot[u] - pot[:n], 0.0)
                cand = du + rc
                better = (flow[:, j] > TRANSPORT_EPS) & (cand < dist[:n])
                dist[:n] = np.where(better, cand, dist[:n])
                pred[:n] = np.where(better, u, pred[:n])
        if target < 0:
            break
        dt = dist[target]
        pot += np.minimum(dist, dt)
        amount = demand[target - n]
        node = target
        while pred[node] >= 0:
            prev = pred[node]
            if prev >= n:
                amount = min(amount, flow[node, prev - n])
            node = prev
        amount = min(amount, supply[node])
        node = target
        while pred[node] >= 0:
            prev = pred[node]
            if prev < n:
                flow[prev, node - n] += amount
            else:
                flow[node, prev - n] -= amount
            node = prev
        supply[node] -= amount
        demand[target - n] -= amount
    pos = flow > 0.0
    return float(np.sum(flow[pos] * cost[pos]))


def transport_cost(p, q, cost):
    p = np.ascontiguousarray(p, dtype=np.float64)
    q = np.ascontiguousarray(q, dtype=np.float64)
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if USE_NUMBA:
        return float(_transport_nb(p, q, cost))
    return transport_numpy(p, q, cost)


# ---------------------------------------------------------------------------
# one application of the bisimulation operator over all state pairs
# ---------------------------------------------------------------------------


def _pseudometric_sweep_loop(d, P, R, label_differs, gamma, use_reward, use_label):
    n = d.shape[0]
    out = np.zeros((n, n))
    for i in range(n):
        si = np.nonzero(P[i] > 0.0)[0]
        for j in range(i + 1, n):
            sj = np.nonzero(P[j] > 0.0)[0]
            sub = np.empty((si.shape[0], sj.shape[0]))
            for a in range(si.shape[0]):
                for b in range(sj.shape[0]):
                    sub[a, b] = d[si[a], sj[b]]
            w = _transport_nb(P[i][si], P[j][sj], sub)
            val = gamma * w
            if use_label and label_differs[i, j] and val < 1.0:
                val = 1.0
            if use_reward:
                val += (1.0 - gamma) * abs(R[i] - R[j])
            out[i, j] = val
            out[j, i] = val
    return out


_pseudometric_sweep_nb = _njit(_pseudometric_sweep_loop)


def pseudometric_sweep_numpy(d, P, R, label_differs, gamma, use_reward, use_label):
    n = d.shape[0]
    out = np.zeros((n, n))
    supports = [np.nonzero(P[i] > 0.0)[0] for i in range(n)]
    for i in range(n):
        si = supports[i]
        for j in range(i + 1, n):
            sj = supports[j]
            w = transport_numpy(P[i, si], P[j, sj], d[np.ix_(si, sj)])
            val = gamma * w
            if use_label and label_differs[i, j]:
                val = max(val, 1.0)
            if use_reward:
                val += (1.0 - gamma) * abs(R[i] - R[j])
            out[i, j] = out[j, i] = val
    return out


def pseudometric_sweep(d, P, R, label_differs, gamma, use_reward, use_label):
    args = (
        np.ascontiguousarray(d, dtype=np.float64),
        np.ascontiguousarray(P, dtype=np.float64),
        np.ascontiguousarray(R, dtype=np.float64),
        np.ascontiguousarray(label_differs, dtype=np.bool_),
        float(gamma),
        bool(use_reward),
        bool(use_label),
    )
    if USE_NUMBA:
        return _pseudometric_sweep_nb(*args)
    return pseudometric_sweep_numpy(*args)
