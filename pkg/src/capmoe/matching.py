"""Balanced n x k Gumbel-Matching via auction warm start and cycle cancelling.

The problem is

    max_z  sum_ij z_ij * s_ij,   s_ij = a_ij / tau + g_ij
    s.t.   every datapoint on exactly one expert, every expert holds c = n / k.

It is a min-cost flow on a complete graph over the k experts. Starting from
a feasible assignment, the cheapest single-datapoint move ``d[j, j']`` is
computed for every expert pair, Floyd-Warshall looks for a negative cycle,
and moving one datapoint along each edge of such a cycle strictly improves
the objective. No negative cycle means the assignment is optimal, and the
all-pairs distances then give the optimum under every constraint
``z_ij = 1`` in O(1) each.

The loops are compiled with numba; the public functions validate inputs and
wrap the kernel outputs in small dataclasses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from capmoe.core import check_finite

AUCTION_EPSILON = 1.0
AUCTION_ROUNDS_PER_POINT = 50
NEG_CYCLE_TOL = 1e-9

_EMPTY = np.empty(0, dtype=np.int64)


@dataclass(frozen=True)
class MoveCosts:
    """Cheapest move ``d[j, j']`` from expert j to j' and the datapoint attaining it."""

    d: np.ndarray
    arg: np.ndarray


@dataclass(frozen=True)
class ShortestPaths:
    dstar: np.ndarray
    next: np.ndarray
    negative_cycle: tuple[int, ...] | None = None


@dataclass(frozen=True)
class MatchingSolution:
    assignment: np.ndarray
    value: float
    paths: ShortestPaths
    iterations: int = 0
    auction_converged: bool = True


# ---------------------------------------------------------------------------
# compiled kernels


@njit(cache=True)
def _auction(scores, capacity, eps, max_rounds):
    # Experts bid for datapoints. Each round every expert bids on its top
    # `capacity` datapoints by value (score minus price), offering the margin
    # over its next-best datapoint plus eps; a datapoint it already holds gets
    # a minimal eps bid. Each datapoint goes to its highest bidder. Unbid
    # datapoints raise nothing, contested ones get pricier.
    n, k = scores.shape
    z = np.full(n, -1, dtype=np.int64)
    if k == 1:
        z[:] = 0
        return z, True
    cost = np.zeros(n)
    value = np.empty((k, n))
    for j in range(k):
        for i in range(n):
            value[j, i] = scores[i, j]
    top_value = scores.max()
    high = np.empty(n)
    bidder = np.empty(n, dtype=np.int64)
    unassigned = n
    rounds = 0
    while rounds < max_rounds:
        high[:] = 0.0
        bidder[:] = -1
        for j in range(k):
            order = np.argsort(-value[j], kind="mergesort")
            floor = value[j, order[capacity]]
            for r in range(capacity):
                i = order[r]
                b = eps if z[i] == j else value[j, i] - floor + eps
                if b > high[i]:
                    high[i] = b
                    bidder[i] = j
        unassigned = 0
        for i in range(n):
            if bidder[i] == -1:
                unassigned += 1
        if unassigned == 0:
            for i in range(n):
                z[i] = bidder[i]
            break
        for i in range(n):
            cost[i] += high[i]
            z[i] = bidder[i]
        for j in range(k):
            for i in range(n):
                value[j, i] = top_value if z[i] == j else scores[i, j] - cost[i]
        rounds += 1
    converged = unassigned == 0
    if not converged:
        # Greedy completion: strongest preferences first, each to its best open expert.
        free = np.full(k, capacity, dtype=np.int64)
        for i in range(n):
            if z[i] != -1:
                free[z[i]] -= 1
        pending = np.empty(unassigned, dtype=np.int64)
        keys = np.empty(unassigned)
        t = 0
        for i in range(n):
            if z[i] == -1:
                pending[t] = i
                keys[t] = -scores[i].max()
                t += 1
        order = np.argsort(keys, kind="mergesort")
        for t in range(unassigned):
            i = pending[order[t]]
            bj = -1
            for j in range(k):
                if free[j] > 0 and (bj == -1 or scores[i, j] > scores[i, bj]):
                    bj = j
            z[i] = bj
            free[bj] -= 1
    return z, converged


@njit(cache=True)
def _move_costs(scores, z):
    n, k = scores.shape
    d = np.full((k, k), np.inf)
    arg = np.full((k, k), -1, dtype=np.int64)
    for i in range(n):
        j = z[i]
        for l in range(k):
            if l == j:
                continue
            c = scores[i, j] - scores[i, l]
            if c < d[j, l]:
                d[j, l] = c
                arg[j, l] = i
    for j in range(k):
        d[j, j] = 0.0
    return d, arg


@njit(cache=True)
def _cycle_cost(d, cycle):
    total = 0.0
    m = cycle.shape[0]
    for t in range(m):
        total += d[cycle[t], cycle[(t + 1) % m]]
    return total


@njit(cache=True)
def _bellman_ford_cycle(d, tol):
    k = d.shape[0]
    dist = np.zeros(k)
    pred = np.full(k, -1, dtype=np.int64)
    last = -1
    for _ in range(k):
        last = -1
        for u in range(k):
            for v in range(k):
                if u != v and dist[u] + d[u, v] < dist[v]:
                    dist[v] = dist[u] + d[u, v]
                    pred[v] = u
                    last = v
        if last == -1:
            return _EMPTY
    v = last
    for _ in range(k):
        v = pred[v]
    cyc = [v]
    u = pred[v]
    while u != v and len(cyc) <= k:
        cyc.append(u)
        u = pred[u]
    out = np.empty(len(cyc), dtype=np.int64)
    # pred walks backwards along edges
    for t in range(len(cyc)):
        out[t] = cyc[len(cyc) - 1 - t]
    if _cycle_cost(d, out) < -tol:
        return out
    return _EMPTY


@njit(cache=True)
def _extract_cycle(d, nxt, j, m, tol):
    k = d.shape[0]
    walk = [j]
    v = j
    steps = 0
    while v != m and steps <= k:
        v = nxt[v, m]
        walk.append(v)
        steps += 1
    while v != j and steps <= 2 * k:
        v = nxt[v, j]
        walk.append(v)
        steps += 1
    if v == j and steps <= 2 * k:
        # Split the closed walk into simple cycles; return the first negative one.
        stack = [walk[0]]
        for t in range(1, len(walk)):
            w = walk[t]
            pos = -1
            for s in range(len(stack)):
                if stack[s] == w:
                    pos = s
                    break
            if pos == -1:
                stack.append(w)
                continue
            cyc = np.empty(len(stack) - pos, dtype=np.int64)
            for s in range(pos, len(stack)):
                cyc[s - pos] = stack[s]
            if cyc.shape[0] > 1 and _cycle_cost(d, cyc) < -tol:
                return cyc
            while len(stack) > pos + 1:
                stack.pop()
    return _bellman_ford_cycle(d, tol)


@njit(cache=True)
def _floyd_warshall(d, tol):
    k = d.shape[0]
    dist = d.copy()
    nxt = np.empty((k, k), dtype=np.int64)
    for j in range(k):
        for l in range(k):
            nxt[j, l] = l
    for m in range(k):
        for j in range(k):
            djm = dist[j, m]
            if djm == np.inf:
                continue
            for l in range(k):
                cand = djm + dist[m, l]
                if cand < dist[j, l]:
                    dist[j, l] = cand
                    nxt[j, l] = nxt[j, m]
                    if j == l and cand < -tol:
                        return dist, nxt, _extract_cycle(d, nxt, j, m, tol)
    for j in range(k):
        # only sub-tolerance rounding can leave a diagonal below zero here
        if dist[j, j] < 0.0:
            dist[j, j] = 0.0
    return dist, nxt, _EMPTY


@njit(cache=True)
def _cancel(z, cycle, arg):
    out = z.copy()
    m = cycle.shape[0]
    for t in range(m):
        u = cycle[t]
        v = cycle[(t + 1) % m]
        out[arg[u, v]] = v
    return out


@njit(cache=True)
def _solve(scores, capacity, eps, max_rounds, tol, max_iter):
    n, k = scores.shape
    z, converged = _auction(scores, capacity, eps, max_rounds)
    iterations = 0
    while True:
        d, arg = _move_costs(scores, z)
        dist, nxt, cycle = _floyd_warshall(d, tol)
        if cycle.shape[0] == 0:
            break
        if iterations >= max_iter:
            break
        z = _cancel(z, cycle, arg)
        iterations += 1
    value = 0.0
    for i in range(n):
        value += scores[i, z[i]]
    return z, value, dist, nxt, iterations, converged, cycle.shape[0] == 0


@njit(cache=True)
def _conditional_rows(scaled_logits, scores, z, value, dist):
    """``softmax_j(v*_{|z_ij=1} - g_ij)``; ``scores - scaled_logits`` is the noise."""
    n, k = scores.shape
    q = np.empty((n, k))
    for i in range(n):
        js = z[i]
        base = value - scores[i, js]
        mx = -np.inf
        for j in range(k):
            q[i, j] = base + scaled_logits[i, j] - dist[j, js]
            if q[i, j] > mx:
                mx = q[i, j]
        tot = 0.0
        for j in range(k):
            q[i, j] = np.exp(q[i, j] - mx)
            tot += q[i, j]
        for j in range(k):
            q[i, j] /= tot
    return q


@njit(cache=True)
def _balanced_batch(scaled_logits, noise, capacity, eps, max_rounds, tol_rel, max_iter):
    batch, n, k = noise.shape
    zs = np.empty((batch, n), dtype=np.int64)
    qs = np.empty((batch, n, k))
    iters = np.empty(batch, dtype=np.int64)
    ok = True
    for b in range(batch):
        scores = scaled_logits[b] + noise[b]
        tol = tol_rel * max(1.0, np.abs(scores).max())
        z, value, dist, nxt, it, conv, optimal = _solve(scores, capacity, eps, max_rounds, tol, max_iter)
        ok = ok and optimal
        zs[b] = z
        qs[b] = _conditional_rows(scaled_logits[b], scores, z, value, dist)
        iters[b] = it
    return zs, qs, iters, ok


# ---------------------------------------------------------------------------
# public API


def _check_capacity(n: int, k: int, capacity: int) -> None:
    if capacity < 1 or n != k * capacity:
        raise ValueError(f"need n = k * capacity, got n={n}, k={k}, capacity={capacity}")


def cycle_tolerance(scores: np.ndarray) -> float:
    """Negative-cycle threshold, relative to the score magnitude."""
    return NEG_CYCLE_TOL * max(1.0, float(np.abs(scores).max()))


def _max_iter(n: int, k: int) -> int:
    return 100 * n * k + 1000


def auction_init(scores: np.ndarray, capacity: int, epsilon: float = AUCTION_EPSILON,
                 max_rounds: int | None = None) -> np.ndarray:
    """Feasible balanced warm start from a capacitated forward auction.

    Experts are the bidders: each round every expert bids on its ``capacity``
    best-valued datapoints and each datapoint's price rises by its highest
    bid. The auction ends once every datapoint receives a bid. After
    ``max_rounds`` rounds (default 50 per datapoint) the datapoints still
    without a bid are filled in greedily.
    """
    scores = check_finite(scores, "scores")
    n, k = scores.shape
    _check_capacity(n, k, capacity)
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if max_rounds is None:
        max_rounds = AUCTION_ROUNDS_PER_POINT * n
    z, _ = _auction(scores, int(capacity), float(epsilon), int(max_rounds))
    return z


def move_costs(scores: np.ndarray, z: np.ndarray) -> MoveCosts:
    scores = check_finite(scores, "scores")
    z = np.asarray(z, dtype=np.int64)
    k = scores.shape[1]
    if np.any(np.bincount(z, minlength=k) == 0):
        raise ValueError("every expert needs at least one assigned datapoint")
    d, arg = _move_costs(scores, z)
    return MoveCosts(d, arg)


def floyd_warshall(costs: MoveCosts | np.ndarray, tol: float = NEG_CYCLE_TOL) -> ShortestPaths:
    """All-pairs shortest move costs, stopping at the first negative cycle."""
    d = costs.d if isinstance(costs, MoveCosts) else np.asarray(costs, dtype=np.float64)
    dist, nxt, cycle = _floyd_warshall(d, float(tol))
    return ShortestPaths(dist, nxt, tuple(int(j) for j in cycle) if cycle.size else None)


def cancel_cycle(z: np.ndarray, cycle, costs: MoveCosts) -> np.ndarray:
    """Move the cheapest datapoint along every edge of ``cycle`` at once."""
    z = np.asarray(z, dtype=np.int64)
    if cycle is None or len(cycle) == 0:
        return z.copy()
    return _cancel(z, np.asarray(cycle, dtype=np.int64), costs.arg)


def solve_scores(scores: np.ndarray, capacity: int) -> MatchingSolution:
    """Maximize the total score over balanced assignments."""
    scores = check_finite(scores, "scores")
    n, k = scores.shape
    _check_capacity(n, k, capacity)
    z, value, dist, nxt, it, conv, optimal = _solve(
        scores, int(capacity), AUCTION_EPSILON, AUCTION_ROUNDS_PER_POINT * n,
        cycle_tolerance(scores), _max_iter(n, k))
    if not optimal:
        raise RuntimeError(f"cycle cancelling did not terminate after {it} iterations")
    return MatchingSolution(z, float(value), ShortestPaths(dist, nxt), int(it), bool(conv))


def solve_gumbel_matching(logits: np.ndarray, noise: np.ndarray, tau: float,
                          capacity: int) -> MatchingSolution:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    logits = check_finite(logits, "logits")
    noise = check_finite(noise, "noise")
    if logits.shape != noise.shape:
        raise ValueError("logits and noise must have the same shape")
    return solve_scores(logits / tau + noise, capacity)


def conditional_values(solution: MatchingSolution, scores: np.ndarray) -> np.ndarray:
    """Optimal value under each constraint ``z_ij = 1``, shape (n, k)."""
    if solution.paths.negative_cycle is not None:
        raise ValueError("solution is not optimal: a negative cycle remains")
    scores = np.asarray(scores, dtype=np.float64)
    z = solution.assignment
    own = scores[np.arange(len(z)), z]
    return solution.value - own[:, None] + scores - solution.paths.dstar[:, z].T


def conditionals(logits: np.ndarray, noise: np.ndarray, tau: float, capacity: int) -> np.ndarray:
    """Per-datapoint assignment distribution given every other row's noise."""
    scaled = check_finite(logits, "logits") / tau
    solution = solve_gumbel_matching(logits, noise, tau, capacity)
    scores = scaled + noise
    return _conditional_rows(scaled, scores, solution.assignment, solution.value,
                             solution.paths.dstar)


def balanced_batch(scaled_logits: np.ndarray, noise: np.ndarray, capacity: int):
    """Solve many instances; returns assignments, conditionals and iteration counts.

    ``scaled_logits`` (already divided by the temperature) broadcasts against
    ``noise`` of shape ``batch + (n, k)``.
    """
    noise = np.asarray(noise, dtype=np.float64)
    lead = noise.shape[:-2]
    n, k = noise.shape[-2:]
    _check_capacity(n, k, capacity)
    flat_noise = noise.reshape((-1, n, k))
    flat_logits = np.ascontiguousarray(
        np.broadcast_to(scaled_logits, noise.shape).reshape((-1, n, k)), dtype=np.float64)
    zs, qs, iters, ok = _balanced_batch(
        flat_logits, np.ascontiguousarray(flat_noise), int(capacity), AUCTION_EPSILON,
        AUCTION_ROUNDS_PER_POINT * n, NEG_CYCLE_TOL, _max_iter(n, k))
    if not ok:
        raise RuntimeError("cycle cancelling did not terminate")
    return zs.reshape(lead + (n,)), qs.reshape(lead + (n, k)), iters.reshape(lead)
