"""Experiment simulation, iROAS estimators and the three design pipelines."""
from __future__ import annotations

import dataclasses
import math
import time
from typing import Sequence

import numpy as np

from .balance import EXTENSIVE, INTENSIVE, CovariateSet
from .candidates import CandidatePartition, cut_dendrogram, ward_hac
from .core_data import DgpConfig, SyntheticGeo, engineer_features, geo_arrays, synthetic_panel
from .design import DesignConfig, asd_design
from .solver import DesignProblem, solve_exact


class EstimationError(ValueError):
    pass


@dataclasses.dataclass
class ExperimentOutcome:
    response: np.ndarray
    spend_uplift: np.ndarray
    treated: np.ndarray


@dataclasses.dataclass
class TrimmedMatchConfig:
    trim_fraction: float = 0.10
    pairing: str = "sorted-baseline"
    root_tolerance: float = 1e-9

    def __post_init__(self):
        if not 0 <= self.trim_fraction < 0.5:
            raise ValueError("trim_fraction must lie in [0, 0.5)")


def run_experiment(geos: Sequence[SyntheticGeo], arms) -> ExperimentOutcome:
    """Reveal one potential outcome per geo.

    ``arms`` is a per-geo sequence of booleans or ``"T"``/``"C"`` labels, or a
    mapping from geo index to label.
    """
    n = len(geos)
    if isinstance(arms, dict):
        missing = [i for i in range(n) if i not in arms]
        if missing:
            raise EstimationError(f"geo {missing[0]} has no arm")
        arms = [arms[i] for i in range(n)]
    arms = list(arms)
    if len(arms) != n or any(a is None for a in arms):
        raise EstimationError("every geo needs an arm")
    treated = np.array([a == "T" if isinstance(a, str) else bool(a) for a in arms])
    r, s, tau = geo_arrays(geos)
    response = np.where(treated, r + tau, r)
    uplift = np.where(treated, s, 0.0)
    return ExperimentOutcome(response, uplift, treated)


def estimate_iroas_aggregate(outcome: ExperimentOutcome, baselines) -> float:
    """``dR / dS`` with the control arm scaling the treated baseline."""
    b = np.asarray(baselines, dtype=float)
    t = outcome.treated
    if t.all() or not t.any():
        raise EstimationError("both arms must be non-empty")
    scale = outcome.response[~t].sum() / b[~t].sum()
    d_r = outcome.response[t].sum() - b[t].sum() * scale
    d_s = outcome.spend_uplift[t].sum()
    if d_s == 0:
        raise EstimationError("zero spend uplift; iROAS undefined")
    return float(d_r / d_s)


def _as_index(x):
    return np.atleast_1d(np.asarray(x, dtype=int))


def pair_deltas(outcome: ExperimentOutcome, pairs):
    """Per-pair response and spend differences (treated minus control)."""
    d_r, d_s = [], []
    seen = set()
    for t, c in pairs:
        t, c = _as_index(t), _as_index(c)
        members = set(t.tolist()) | set(c.tolist())
        if members & seen or set(t.tolist()) & set(c.tolist()):
            raise EstimationError("pairs must be disjoint")
        seen |= members
        d_r.append(outcome.response[t].sum() - outcome.response[c].sum())
        d_s.append(outcome.spend_uplift[t].sum() - outcome.spend_uplift[c].sum())
    return np.array(d_r), np.array(d_s)


def trimmed_match_root(d_r, d_s, cfg: TrimmedMatchConfig | None = None) -> float:
    """Root in theta of the trimmed mean of ``d_r - theta * d_s``.

    At each theta the ``ceil(q K)`` pairs with the largest absolute residual
    are dropped; the root is found by bisection between the smallest and
    largest per-pair ratio.
    """
    cfg = cfg or TrimmedMatchConfig()
    d_r = np.asarray(d_r, dtype=float)
    d_s = np.asarray(d_s, dtype=float)
    k = len(d_r)
    n_trim = math.ceil(cfg.trim_fraction * k - 1e-12)
    if k - n_trim < 2:
        raise EstimationError(f"only {k - n_trim} pairs survive trimming; need 2")
    live = d_s != 0
    if not live.any():
        raise EstimationError("all spend differences are zero; iROAS undefined")
    ratios = d_r[live] / d_s[live]
    lo, hi = float(ratios.min()), float(ratios.max())

    def trimmed(theta):
        e = d_r - theta * d_s
        keep = np.argsort(np.abs(e), kind="stable")[:k - n_trim]
        return e[keep].mean()

    f_lo, f_hi = trimmed(lo), trimmed(hi)
    if f_lo == 0:
        return lo
    if f_hi == 0:
        return hi
    if np.sign(f_lo) == np.sign(f_hi):
        raise EstimationError(
            f"trimmed residual mean does not change sign on [{lo:.6g}, {hi:.6g}] "
            f"(values {f_lo:.6g}, {f_hi:.6g})")
    tol = cfg.root_tolerance
    while hi - lo > tol * max(1.0, abs(lo), abs(hi)):
        mid = 0.5 * (lo + hi)
        f_mid = trimmed(mid)
        if f_mid == 0:
            return mid
        if np.sign(f_mid) == np.sign(f_lo):
            lo, f_lo = mid, f_mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def trimmed_match_estimate(outcome: ExperimentOutcome, pairs, cfg: TrimmedMatchConfig | None = None) -> float:
    d_r, d_s = pair_deltas(outcome, pairs)
    return trimmed_match_root(d_r, d_s, cfg)


# --- pipelines ------------------------------------------------------------

@dataclasses.dataclass
class PipelineResult:
    method: str
    estimate: float
    abs_bias: float
    balance: float
    design_time_s: float
    treated: np.ndarray
    supergeo: np.ndarray  # per-geo supergeo (or pair) id
    status: str = ""


def arm_balance(baseline, treated) -> float:
    """Absolute gap between arm-total baselines."""
    baseline = np.asarray(baseline, float)
    return float(abs(baseline[treated].sum() - baseline[~treated].sum()))


def match_supergeo_pairs(groups_t, groups_c, baseline):
    """Pair treated with control supergeos by baseline rank.

    If one arm is larger, the supergeo whose removal leaves the closest rank
    matching is left unpaired.
    """
    b = np.asarray(baseline, float)
    tot_t = [b[g].sum() for g in groups_t]
    tot_c = [b[g].sum() for g in groups_c]
    ot = list(np.argsort(tot_t, kind="stable"))
    oc = list(np.argsort(tot_c, kind="stable"))

    def cost(a, c):
        return sum(abs(tot_t[i] - tot_c[j]) for i, j in zip(a, c))

    while len(ot) != len(oc):
        longer = ot if len(ot) > len(oc) else oc
        other = oc if longer is ot else ot
        best = None
        for drop in range(len(longer)):
            cand = longer[:drop] + longer[drop + 1:]
            val = cost(cand, other) if longer is ot else cost(other, cand)
            if best is None or val < best[0]:
                best = (val, drop)
        longer.pop(best[1])
    return [(groups_t[i], groups_c[j]) for i, j in zip(ot, oc)]


def _pairs_from_design(partition: CandidatePartition, treated_sg, baseline):
    groups_t = [m for m, t in zip(partition.supergeos, treated_sg) if t]
    groups_c = [m for m, t in zip(partition.supergeos, treated_sg) if not t]
    return match_supergeo_pairs(groups_t, groups_c, baseline)


def pipeline_tm_baseline(geos, seed: int, tm: TrimmedMatchConfig | None = None, true_iroas=2.0) -> PipelineResult:
    """Adjacent pairs by sorted baseline, one coin flip per pair."""
    n = len(geos)
    if n < 8:
        raise ValueError("pipelines need at least 8 geos")
    r, _, _ = geo_arrays(geos)
    t0 = time.perf_counter()
    rng = np.random.default_rng([seed, 11])
    order = np.argsort(r, kind="stable")
    k = n // 2
    first, second = order[0:2 * k:2], order[1:2 * k:2]
    coin = rng.random(k) < 0.5
    t_idx = np.where(coin, first, second)
    c_idx = np.where(coin, second, first)
    treated = np.zeros(n, dtype=bool)
    treated[t_idx] = True
    supergeo = np.full(n, -1)
    supergeo[first] = np.arange(k)
    supergeo[second] = np.arange(k)
    design_time = time.perf_counter() - t0
    in_pairs = supergeo >= 0
    outcome = run_experiment(geos, treated)
    est = trimmed_match_estimate(outcome, list(zip(t_idx, c_idx)), tm)
    return PipelineResult("TM", est, abs(est - true_iroas),
                          arm_balance(r[in_pairs], treated[in_pairs]), design_time, treated, supergeo)


SG_LEVELS = tuple(range(8, 17))


def pipeline_sg_tm(geos, seed: int, dgp: DgpConfig | None = None, tm: TrimmedMatchConfig | None = None,
                   time_limit: float = 30.0, levels=SG_LEVELS, true_iroas=2.0) -> PipelineResult:
    """Exact supergeo design over coarse Ward cuts of the raw features (no embedding)."""
    n = len(geos)
    if n < 8:
        raise ValueError("pipelines need at least 8 geos")
    dgp = dgp or DgpConfig(n_geos=n)
    r, s, _ = geo_arrays(geos)
    t0 = time.perf_counter()
    panel = synthetic_panel(geos, dataclasses.replace(dgp, n_geos=n))
    feats = engineer_features(panel)
    levels = [k for k in levels if k <= n // 2] or [max(2, n // 4)]
    cands = cut_dendrogram(ward_hac(feats), levels)
    cov = synthetic_covariates(geos, panel)
    res = solve_exact(DesignProblem(cands, cov, time_limit=time_limit, mode="exact",
                                    seed=seed, max_count_gap=0))
    treated_sg = randomise_arms(res.arms.treated, seed)
    design_time = time.perf_counter() - t0
    return finish_supergeo_design("SG", geos, res.partition, treated_sg, design_time, res.status, tm, true_iroas)


def pipeline_asd_tm(geos, seed: int, dgp: DgpConfig | None = None, cfg: DesignConfig | None = None,
                    tm: TrimmedMatchConfig | None = None, true_iroas=2.0) -> PipelineResult:
    n = len(geos)
    if n < 8:
        raise ValueError("pipelines need at least 8 geos")
    dgp = dgp or DgpConfig(n_geos=n)
    cfg = dataclasses.replace(cfg or DesignConfig(), seed=seed)
    t0 = time.perf_counter()
    panel = synthetic_panel(geos, dataclasses.replace(dgp, n_geos=n))
    cov = synthetic_covariates(geos, panel, cfg.lambdas, cfg.default_lambda)
    run = asd_design(panel, cfg, cov)
    treated_sg = randomise_arms(run.assignment.arms.treated, seed)
    design_time = time.perf_counter() - t0
    return finish_supergeo_design("ASD", geos, run.assignment.partition, treated_sg, design_time,
                            run.assignment.status, tm, true_iroas)


def synthetic_covariates(geos, panel, lambdas=None, default_lambda=0.1) -> CovariateSet:
    r, s, _ = geo_arrays(geos)
    mods = {"spend": s}
    agg = {"baseline": EXTENSIVE, "spend": EXTENSIVE}
    for j, name in enumerate(panel.covariate_names):
        mods[name] = panel.static_covariates[:, j]
        agg[name] = INTENSIVE
    lams = {m: default_lambda for m in mods}
    lams.update(lambdas or {})
    return CovariateSet(r, mods, {m: lams[m] for m in mods}, agg)


def randomise_arms(treated_sg, seed):
    """Randomise which mirror image of the optimal split gets treated."""
    coin = np.random.default_rng([seed, 13]).random() < 0.5
    return ~treated_sg if coin else treated_sg.copy()


def finish_supergeo_design(method, geos, partition, treated_sg, design_time, status, tm, true_iroas):
    r, _, _ = geo_arrays(geos)
    treated = np.zeros(len(geos), dtype=bool)
    for m, t in zip(partition.supergeos, treated_sg):
        treated[m] = t
    pairs = _pairs_from_design(partition, treated_sg, r)
    outcome = run_experiment(geos, treated)
    est = trimmed_match_estimate(outcome, pairs, tm)
    return PipelineResult(method, est, abs(est - true_iroas), arm_balance(r, treated),
                          design_time, treated, partition.labels(), status)
