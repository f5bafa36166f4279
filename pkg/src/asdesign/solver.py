"""Stage-2 search: pick one candidate partition and split its supergeos into arms.

Both solvers score assignments from arm-level sufficient statistics (counts,
sums, sums of squares) of column-standardised supergeo covariates. The SMD is
invariant to that standardisation, so the search sees the same objective as
:func:`balance.design_cost`, which is used for the final reported cost.
"""
from __future__ import annotations

import dataclasses
import logging
import time

import numpy as np

from .balance import ArmAssignment, CovariateSet, design_cost, supergeo_matrix, term_weights
from .candidates import CandidatePartition

log = logging.getLogger(__name__)

AUTO_EXACT_MAX_SUPERGEOS = 24
LEAF_BITS = 14
ZERO = 1e-12


class InfeasibleDesignError(ValueError):
    pass


@dataclasses.dataclass
class DesignProblem:
    candidates: list
    cov: CovariateSet
    time_limit: float = 30.0
    mode: str = "auto"
    seed: int = 0
    # None: any split with both arms non-empty; k: |n_T - n_C| <= k supergeos
    max_count_gap: int | None = None
    restarts: int = 48

    def __post_init__(self):
        if not self.candidates:
            raise ValueError("need at least one candidate partition")
        if self.time_limit <= 0:
            raise ValueError("time_limit must be > 0")
        if self.mode not in ("exact", "heuristic", "auto"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclasses.dataclass
class DesignAssignment:
    candidate_index: int
    partition: CandidatePartition
    arms: ArmAssignment
    cost: float
    breakdown: list
    status: str
    wall_time: float
    solver: str = ""

    def geo_arms(self) -> np.ndarray:
        """Per-geo treatment flags."""
        out = np.zeros(self.partition.n_geos, dtype=bool)
        for s, m in enumerate(self.partition.supergeos):
            out[m] = self.arms.treated[s]
        return out

    def diagnostics(self) -> dict:
        return {"status": self.status, "cost": self.cost, "breakdown": self.breakdown,
                "wall_time_s": self.wall_time, "candidate": self.candidate_index,
                "solver": self.solver, "n_supergeos": self.partition.n_supergeos}


class _Scorer:
    """Vectorised cost from arm sufficient statistics."""

    def __init__(self, vals: np.ndarray, lam: np.ndarray):
        sd = vals.std(axis=0)
        sd[sd == 0] = 1.0
        self.x = (vals - vals.mean(axis=0)) / sd
        self.x2 = self.x ** 2
        self.s = len(vals)
        self.tot = self.x.sum(axis=0)
        self.tot2 = self.x2.sum(axis=0)
        self.lam = lam

    def cost(self, n_t, sum_t, sq_t):
        """Costs for a batch: ``n_t`` (b,), ``sum_t``/``sq_t`` (b, k)."""
        n_t = np.asarray(n_t, dtype=float)[:, None]
        n_c = self.s - n_t
        with np.errstate(divide="ignore", invalid="ignore"):
            sum_c = self.tot - sum_t
            m_t = sum_t / n_t
            m_c = sum_c / n_c
            v_t = np.where(n_t > 1, (sq_t - sum_t * m_t) / (n_t - 1), 0.0)
            v_c = np.where(n_c > 1, ((self.tot2 - sq_t) - sum_c * m_c) / (n_c - 1), 0.0)
            pooled = np.sqrt(np.maximum((v_t + v_c) / 2.0, 0.0))
            diff = np.abs(m_t - m_c)
            d = np.where(pooled > ZERO, diff / pooled, np.where(diff > 1e-9, np.inf, 0.0))
            terms = np.where(self.lam > 0, self.lam * d, 0.0)
        out = terms.sum(axis=1)
        bad = (n_t[:, 0] < 1) | (n_c[:, 0] < 1)
        out[bad] = np.inf
        return out

    def cost_mask(self, treated: np.ndarray) -> float:
        t = treated.astype(float)
        return float(self.cost([t.sum()], [t @ self.x], [t @ self.x2])[0])


def _count_ok(n_t, s, gap):
    n_t = np.asarray(n_t)
    ok = (n_t >= 1) & (n_t <= s - 1)
    if gap is not None:
        ok &= np.abs(2 * n_t - s) <= gap
    return ok


def _feasible(part: CandidatePartition, gap) -> bool:
    s = part.n_supergeos
    return s >= 2 and bool(_count_ok(np.arange(1, s), s, gap).any())


def _baseline_lower_bound(x: np.ndarray, gap, grid: int = 4096) -> float:
    """Lower bound on |SMD| of one column over every admissible split.

    Rounds values onto an integer grid and runs a by-size subset-sum reachability
    pass (bitsets in Python ints); rounding slack and a worst-case pooled
    spread (Popoviciu bound on each arm) keep the bound valid.
    """
    s = len(x)
    lo, hi = float(x.min()), float(x.max())
    span = hi - lo
    if span == 0:
        return 0.0
    q = span / grid
    units = np.rint((x - lo) / q).astype(int)
    reach = [0] * (s + 1)
    reach[0] = 1
    for u in units:
        for c in range(s, 0, -1):
            reach[c] |= reach[c - 1] << int(u)
    total = x.sum()
    best = np.inf
    for n_t in range(1, s):
        if not _count_ok([n_t], s, gap)[0]:
            continue
        n_c = s - n_t
        target = (total * n_t / s - n_t * lo) / q
        bits = reach[n_t]
        # nearest reachable subset sum to the balancing target
        t_lo = max(int(np.floor(target)), 0)
        dist = np.inf
        below = bits & ((1 << (t_lo + 1)) - 1)
        if below:
            dist = min(dist, target - (below.bit_length() - 1))
        above = bits >> (t_lo + 1)
        if above:
            low_bit = (above & -above).bit_length() - 1
            dist = min(dist, t_lo + 1 + low_bit - target)
        gap_sum = max(0.0, (dist - n_t / 2.0) * q)
        diff = gap_sum * (1.0 / n_t + 1.0 / n_c)
        v_t = span ** 2 * n_t / (4.0 * (n_t - 1)) if n_t > 1 else 0.0
        v_c = span ** 2 * n_c / (4.0 * (n_c - 1)) if n_c > 1 else 0.0
        pooled = np.sqrt((v_t + v_c) / 2.0)
        if pooled == 0:
            bound = np.inf if diff > 0 else 0.0
        else:
            bound = diff / pooled
        best = min(best, bound)
    return float(best)


def _subset_table(x, x2, bits):
    """Counts/sums over all 2**len(bits) subsets of the given rows."""
    k = len(bits)
    size = 1 << k
    n = np.zeros(size)
    sm = np.zeros((size, x.shape[1]))
    sq = np.zeros((size, x.shape[1]))
    for j, row in enumerate(bits):
        half = 1 << j
        n[half:2 * half] = n[:half] + 1
        sm[half:2 * half] = sm[:half] + x[row]
        sq[half:2 * half] = sq[:half] + x2[row]
    return n, sm, sq


def _exhaustive(scorer: _Scorer, gap, incumbent: float, deadline: float):
    """Search canonical splits (supergeo 0 treated) of one candidate.

    The low ``LEAF_BITS`` supergeos form a precomputed leaf block; every prefix
    assignment of the remaining supergeos is a branch whose leaves are scored
    in one vectorised pass. Returns ``(best_cost, best_mask, completed)``.
    """
    s = scorer.s
    free = np.arange(1, s)
    leaf = free[:LEAF_BITS]
    branch = free[LEAF_BITS:]
    ln, lsum, lsq = _subset_table(scorer.x, scorer.x2, leaf)
    best_cost, best_mask = np.inf, None
    x0, x20 = scorer.x[0], scorer.x2[0]
    for prefix in range(1 << len(branch)):
        if time.perf_counter() > deadline:
            return best_cost, best_mask, False
        pmask = np.array([(prefix >> j) & 1 for j in range(len(branch))], dtype=bool)
        chosen = branch[pmask]
        n_t = ln + 1 + len(chosen)
        sum_t = lsum + x0 + scorer.x[chosen].sum(axis=0)
        sq_t = lsq + x20 + scorer.x2[chosen].sum(axis=0)
        ok = _count_ok(n_t, s, gap)
        if not ok.any():
            continue
        costs = scorer.cost(n_t, sum_t, sq_t)
        costs[~ok] = np.inf
        j = int(np.argmin(costs))
        if costs[j] < best_cost:
            best_cost = float(costs[j])
            mask = np.zeros(s, dtype=bool)
            mask[0] = True
            mask[chosen] = True
            mask[leaf[[(j >> b) & 1 == 1 for b in range(len(leaf))]]] = True
            best_mask = mask
    return best_cost, best_mask, True


def _prepare(p: DesignProblem):
    lam = term_weights(p.cov)
    out = []
    for idx, part in enumerate(p.candidates):
        if part.n_supergeos < 2:
            log.warning("candidate %d has %d supergeo; skipped", idx, part.n_supergeos)
            continue
        if not _feasible(part, p.max_count_gap):
            # routine under an equal-count rule: odd supergeo counts cannot split evenly
            log.debug("candidate %d (%d supergeos) has no admissible split; skipped",
                      idx, part.n_supergeos)
            continue
        out.append((idx, part, _Scorer(supergeo_matrix(part, p.cov), lam)))
    if not out:
        raise InfeasibleDesignError("no candidate partition admits a two-arm split")
    return out


def _finish(p, idx, mask, status, t0, solver):
    part = p.candidates[idx]
    arms = ArmAssignment(mask).canonical()
    cost, breakdown = design_cost(part, arms, p.cov)
    return DesignAssignment(idx, part, arms, cost, breakdown, status,
                            time.perf_counter() - t0, solver)


def solve_exact(p: DesignProblem) -> DesignAssignment:
    """Branch-and-bound over candidates and canonical arm splits.

    Candidates are visited smallest first; a candidate is pruned when its
    subset-sum lower bound on the baseline term cannot beat the incumbent.
    """
    t0 = time.perf_counter()
    deadline = t0 + p.time_limit
    prepared = sorted(_prepare(p), key=lambda r: (r[1].n_supergeos, r[0]))
    best = (np.inf, None, None)
    completed = True
    for idx, part, scorer in prepared:
        if time.perf_counter() > deadline:
            completed = False
            break
        if best[0] < np.inf and _baseline_lower_bound(scorer.x[:, 0], p.max_count_gap) >= best[0]:
            continue
        cost, mask, done = _exhaustive(scorer, p.max_count_gap, best[0], deadline)
        if mask is not None and (cost < best[0] or best[1] is None):
            best = (cost, idx, mask)
        if not done:
            completed = False
            break
    if best[1] is None:
        idx, part, scorer = prepared[0]
        best = (np.inf, idx, _greedy_seed(scorer, p.max_count_gap))
    status = "optimal" if completed else "feasible-timeout"
    return _finish(p, best[1], best[2], status, t0, "exact")


def _greedy_seed(scorer: _Scorer, gap) -> np.ndarray:
    s = scorer.s
    order = np.argsort(-scorer.x[:, 0], kind="stable")
    mask = np.zeros(s, dtype=bool)
    assigned = np.zeros(s, dtype=bool)
    n = [0, 0]
    tot = [0.0, 0.0]
    for rank, i in enumerate(order):
        remaining = s - rank - 1
        options = []
        for arm in (True, False):
            nt = n[0] + arm
            nc = n[1] + (not arm)
            if gap is not None and abs(nt - nc) - remaining > gap:
                continue
            trial = mask.copy()
            trial[i] = arm
            sel = assigned.copy()
            sel[i] = True
            c = _partial_cost(scorer, trial, sel)
            options.append((c, tot[0 if arm else 1], 0 if arm else 1, arm))
        c, _, _, arm = min(options)
        mask[i] = arm
        assigned[i] = True
        n[0 if arm else 1] += 1
        tot[0 if arm else 1] += scorer.x[i, 0]
    if mask.all():
        mask[order[-1]] = False
    if not mask.any():
        mask[order[0]] = True
    return mask


def _partial_cost(scorer: _Scorer, mask, sel) -> float:
    xt = scorer.x[sel & mask]
    xc = scorer.x[sel & ~mask]
    if not len(xt) or not len(xc):
        return np.inf
    sub = _Scorer.__new__(_Scorer)
    sub.x = scorer.x[sel]
    sub.s = int(sel.sum())
    sub.tot = sub.x.sum(axis=0)
    sub.tot2 = (sub.x ** 2).sum(axis=0)
    sub.lam = scorer.lam
    return float(sub.cost([len(xt)], [xt.sum(axis=0)], [(xt ** 2).sum(axis=0)])[0])


def _local_search(scorer: _Scorer, mask, gap, deadline, max_iter=10_000):
    """Best-improvement over single flips and T/C swaps. Returns (mask, cost, converged)."""
    x, x2 = scorer.x, scorer.x2
    s = scorer.s
    cur = scorer.cost_mask(mask)
    for _ in range(max_iter):
        if time.perf_counter() > deadline:
            return mask, cur, False
        t = mask.astype(float)
        n_t = t.sum()
        sum_t = t @ x
        sq_t = t @ x2
        sign = np.where(mask, -1.0, 1.0)
        flip_n = n_t + sign
        flip_cost = scorer.cost(flip_n, sum_t + sign[:, None] * x, sq_t + sign[:, None] * x2)
        flip_cost[~_count_ok(flip_n, s, gap)] = np.inf
        ti = np.flatnonzero(mask)
        ci = np.flatnonzero(~mask)
        sw_sum = sum_t[None, None, :] - x[ti][:, None, :] + x[ci][None, :, :]
        sw_sq = sq_t[None, None, :] - x2[ti][:, None, :] + x2[ci][None, :, :]
        k = x.shape[1]
        sw_cost = scorer.cost(np.full(len(ti) * len(ci), n_t),
                              sw_sum.reshape(-1, k), sw_sq.reshape(-1, k))
        fi = int(np.argmin(flip_cost))
        si = int(np.argmin(sw_cost)) if len(sw_cost) else -1
        best_flip = flip_cost[fi]
        best_swap = sw_cost[si] if si >= 0 else np.inf
        best_move = min(best_flip, best_swap)
        # with cur == inf the relative tolerance would be nan, so compare directly
        if best_move >= cur or (np.isfinite(cur) and best_move >= cur - 1e-15 * max(1.0, cur)):
            return mask, cur, True
        mask = mask.copy()
        if best_flip <= best_swap:
            mask[fi] = ~mask[fi]
            cur = float(best_flip)
        else:
            a, b = divmod(si, len(ci))
            mask[ti[a]] = False
            mask[ci[b]] = True
            cur = float(best_swap)
    return mask, cur, True


def restart_count(s: int, cap: int) -> int:
    """Local-search starts for a candidate with ``s`` supergeos (fewer when large)."""
    return max(1, min(cap, max(4, -(-640 // s))))


def _random_mask(rng, s, gap):
    for _ in range(100):
        if gap is None:
            mask = rng.random(s) < 0.5
        else:
            lo = max(1, -(-(s - gap) // 2))
            hi = min(s - 1, (s + gap) // 2)
            mask = np.zeros(s, dtype=bool)
            mask[rng.choice(s, size=int(rng.integers(lo, hi + 1)), replace=False)] = True
        if mask.any() and not mask.all():
            return mask
    return None


def solve_heuristic(p: DesignProblem) -> DesignAssignment:
    """Greedy seeding plus flip/swap local search on every candidate.

    Each candidate also gets seeded random restarts (see :func:`restart_count`).
    """
    t0 = time.perf_counter()
    deadline = t0 + p.time_limit
    prepared = _prepare(p)
    best = (np.inf, None, None)
    completed = True
    for idx, part, scorer in prepared:
        rng = np.random.default_rng([p.seed, idx])
        for r in range(restart_count(scorer.s, p.restarts)):
            start = _greedy_seed(scorer, p.max_count_gap) if r == 0 else _random_mask(
                rng, scorer.s, p.max_count_gap)
            if start is None:
                continue
            mask, cost, converged = _local_search(scorer, start, p.max_count_gap, deadline)
            if cost < best[0] or best[1] is None:
                best = (cost, idx, mask)
            if not converged or time.perf_counter() > deadline:
                completed = False
                break
        if not completed:
            break
    status = "optimal-local" if completed else "feasible-timeout"
    return _finish(p, best[1], best[2], status, t0, "heuristic")


def solve(p: DesignProblem) -> DesignAssignment:
    if p.mode == "exact":
        return solve_exact(p)
    if p.mode == "heuristic":
        return solve_heuristic(p)
    if max(c.n_supergeos for c in p.candidates) <= AUTO_EXACT_MAX_SUPERGEOS:
        return solve_exact(p)
    return solve_heuristic(p)
