"""Linear assignment solvers for the earth mover's distance.

`hungarian` is the exact O(n^3) shortest-augmenting-path method with dual
potentials. `auction` is Bertsekas' auction with epsilon scaling; it stops
once the assignment cost is provably within a factor (1 + delta) of optimal,
using the dual bound implied by the final prices.
"""

import numba
import numpy as np


def hungarian(cost):
    """Minimum-cost assignment of rows to columns (rows <= columns).

    Returns an int array `col` with `col[i]` the column given to row i.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n > m:
        raise ValueError("hungarian needs rows <= columns; transpose the problem")
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # owner[j]: 1-based row holding column j, 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    # 1-based padding keeps the textbook indexing; column 0 is the virtual root
    a = np.zeros((n + 1, m + 1))
    a[1:, 1:] = cost
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used
            free[0] = False
            cur = a[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, np.inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    col = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if owner[j]:
            col[owner[j] - 1] = j - 1
    return col


@numba.njit(cache=True)
def _reduced_row_min(cost, prices):
    """min_j (cost[i, j] + prices[j]) for every row i."""
    n, m = cost.shape
    out = np.empty(n)
    for i in range(n):
        best = np.inf
        for j in range(m):
            v = cost[i, j] + prices[j]
            if v < best:
                best = v
        out[i] = best
    return out


@numba.njit(cache=True)
def _auction_phase(benefit, prices, person_obj, obj_person, eps):
    """Gauss-Seidel bidding until every person holds an object; mutates in place."""
    n = benefit.shape[0]
    queue = np.empty(n, dtype=np.int64)
    size = 0
    for i in range(n):
        if person_obj[i] < 0:
            queue[size] = i
            size += 1
    head = 0
    while size > 0:
        i = queue[head]
        head = (head + 1) % n
        size -= 1
        best, v1, v2 = -1, -np.inf, -np.inf
        for j in range(n):
            val = benefit[i, j] - prices[j]
            if val > v1:
                v2 = v1
                v1 = val
                best = j
            elif val > v2:
                v2 = val
        if v2 == -np.inf:
            v2 = v1
        prices[best] += v1 - v2 + eps
        prev = obj_person[best]
        obj_person[best] = i
        person_obj[i] = best
        if prev >= 0:
            person_obj[prev] = -1
            queue[(head + size) % n] = prev
            size += 1


def auction(cost, delta=0.01, scale_factor=5.0, min_eps_ratio=1e-12):
    """Approximate minimum-cost square assignment by epsilon-scaling auction.

    Returns (col, achieved_delta): the assignment and a certified ratio bound,
    i.e. cost(col) <= (1 + achieved_delta) * optimum. achieved_delta is 0
    when the assignment is certified optimal.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n != m:
        raise ValueError("auction needs a square cost matrix")
    if n == 0:
        return np.empty(0, dtype=np.int64), 0.0
    span = float(cost.max() - cost.min())
    if span == 0.0:
        return np.arange(n), 0.0
    benefit = np.ascontiguousarray(-cost)
    prices = np.zeros(n)
    trivial_lb = max(cost.min(axis=1).sum(), cost.min(axis=0).sum(), 0.0)
    eps = span / 4
    min_eps = span * min_eps_ratio
    rows = np.arange(n)
    person_obj = np.full(n, -1, dtype=np.int64)
    obj_person = np.full(n, -1, dtype=np.int64)
    cost = np.ascontiguousarray(cost)
    while True:
        # keep every pair that still satisfies eps-complementary slackness
        assigned = person_obj >= 0
        if assigned.any():
            row_min = _reduced_row_min(cost, prices)
            held = cost[rows, person_obj] + prices[person_obj]
            drop = assigned & (held > row_min + eps)
            obj_person[person_obj[drop]] = -1
            person_obj[drop] = -1
        _auction_phase(benefit, prices, person_obj, obj_person, eps)
        total = float(cost[rows, person_obj].sum())
        # prices give a feasible dual: sum_i min_j(c_ij + p_j) - sum_j p_j <= optimum
        dual = float(_reduced_row_min(cost, prices).sum() - prices.sum())
        lb = max(dual, trivial_lb)
        if total <= (1 + delta) * lb or total == 0.0:
            achieved = 0.0 if total <= lb else total / lb - 1
            return person_obj.copy(), achieved
        if eps <= min_eps:
            achieved = total / lb - 1 if lb > 0 else np.inf
            return person_obj.copy(), achieved
        eps = max(eps / scale_factor, min_eps)


def assignment_cost(cost, col):
    cost = np.asarray(cost)
    return float(cost[np.arange(len(col)), col].sum())
