"""Study configuration and the Monte-Carlo drivers: study, tuning, power grid, scalability."""
from __future__ import annotations

import dataclasses
import json
import logging
import time
import tracemalloc

import numpy as np

from .balance import masmd
from .core_data import DgpConfig, generate_synthetic, synthetic_panel
from .design import DesignConfig, asd_design, generate_candidates
from .estimators import (
    TrimmedMatchConfig, finish_supergeo_design, pipeline_asd_tm, pipeline_sg_tm,
    pipeline_tm_baseline, randomise_arms, run_experiment, synthetic_covariates,
)
from .graph_embed import GnnConfig
from .solver import DesignProblem, solve, solve_exact
from .stats import (
    bootstrap_ci, compare_paired, empirical_power, holm_bonferroni, power_category,
    two_sample_t_test,
)

log = logging.getLogger(__name__)

METHODS = ("TM", "SG", "ASD")

# seed streams, so that study, power, scalability and tuning draws never collide
STUDY, POWER, SCALE, TUNE = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


class StudyError(RuntimeError):
    pass


def seed(master: int, r: int, *stream: int) -> int:
    """Seed of replication ``r`` in ``stream`` under ``master``.

    Defined as the first 32-bit word of
    ``numpy.random.SeedSequence(master, spawn_key=(*stream, r))``. It depends on
    nothing else, so any single replication can be re-run in isolation.
    """
    ss = np.random.SeedSequence(int(master), spawn_key=tuple(int(s) for s in stream) + (int(r),))
    return int(ss.generate_state(1)[0])


@dataclasses.dataclass
class StudyConfig:
    dgp: DgpConfig = dataclasses.field(default_factory=DgpConfig)
    gnn: GnnConfig = dataclasses.field(default_factory=GnnConfig)
    candidate_count: int = 100
    lambdas: dict = dataclasses.field(default_factory=dict)
    default_lambda: float = 0.1
    lambda_grid: list = dataclasses.field(default_factory=lambda: [0.0, 0.01, 0.1, 1.0])
    replications: int = 100
    methods: list = dataclasses.field(default_factory=lambda: list(METHODS))
    power_sizes: list = dataclasses.field(default_factory=lambda: [50, 100, 150, 200, 250, 300])
    power_effects: list = dataclasses.field(default_factory=lambda: [0.1, 0.25, 0.5, 0.75, 1.0])
    power_reps: int = 100
    scale_sizes: list = dataclasses.field(default_factory=lambda: [50, 100, 200, 400, 800, 1000])
    scale_runs: int = 5
    track_memory: bool = True
    exact_time_limit: float = 30.0
    time_limit: float = 30.0
    trim_fraction: float = 0.10
    folds: int = 5
    tune_reps_per_fold: int = 20
    alpha: float = 0.05
    output_dir: str = "results"
    master_seed: int = 0

    def __post_init__(self):
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; choose from {list(METHODS)}")
        for name in ("power_sizes", "power_effects", "scale_sizes", "lambda_grid"):
            if not getattr(self, name):
                raise ConfigError(f"{name} must be non-empty")
        if self.power_reps < 1 or self.scale_runs < 1:
            raise ConfigError("power_reps and scale_runs must be >= 1")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if any(l < 0 for l in self.lambda_grid):
            raise ConfigError("lambda_grid values must be non-negative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "StudyConfig":
        data = dict(data)
        nested = {"dgp": DgpConfig, "gnn": GnnConfig}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        for key, typ in nested.items():
            if key in data:
                sub = data[key]
                sub_known = {f.name for f in dataclasses.fields(typ)}
                extra = sorted(set(sub) - sub_known)
                if extra:
                    raise ConfigError(f"unknown {key} keys {extra}")
                data[key] = typ(**sub)
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, text: str) -> "StudyConfig":
        return cls.from_dict(json.loads(text))

    def design_config(self, design_seed: int = 0) -> DesignConfig:
        return DesignConfig(gnn=self.gnn, candidate_count=self.candidate_count, lambdas=dict(self.lambdas),
                            default_lambda=self.default_lambda, time_limit=self.time_limit, seed=design_seed)

    def tm_config(self) -> TrimmedMatchConfig:
        return TrimmedMatchConfig(trim_fraction=self.trim_fraction)


@dataclasses.dataclass
class SimReport:
    replications: list = dataclasses.field(default_factory=list)
    summary: list = dataclasses.field(default_factory=list)
    tests: list = dataclasses.field(default_factory=list)
    power: list = dataclasses.field(default_factory=list)
    runtime: list = dataclasses.field(default_factory=list)
    slope: float | None = None
    design: list = dataclasses.field(default_factory=list)
    tuning: list = dataclasses.field(default_factory=list)
    failures: list = dataclasses.field(default_factory=list)
    # wall-clock measurements; machine dependent, so kept apart from seeded results
    timings: dict = dataclasses.field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(_plain(dataclasses.asdict(self)), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SimReport":
        return cls(**json.loads(text))

    def merge(self, other: "SimReport") -> "SimReport":
        out = dataclasses.replace(self)
        for f in dataclasses.fields(self):
            val = getattr(other, f.name)
            if f.name == "timings":
                out.timings = {**self.timings, **other.timings}
            elif val:
                setattr(out, f.name, val)
        return out


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_plain(v) for v in x.tolist()]
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    return x


# --- datasets and methods -------------------------------------------------

def make_dataset(cfg: StudyConfig, n_geos: int, data_seed: int):
    dgp = dataclasses.replace(cfg.dgp, n_geos=n_geos, seed=data_seed)
    return dgp, generate_synthetic(dgp)


def run_method(method: str, geos, dgp: DgpConfig, cfg: StudyConfig, rep_seed: int):
    tm = cfg.tm_config()
    rho = dgp.true_iroas
    if method == "TM":
        return pipeline_tm_baseline(geos, rep_seed, tm=tm, true_iroas=rho)
    if method == "SG":
        return pipeline_sg_tm(geos, rep_seed, dgp=dgp, tm=tm, time_limit=cfg.time_limit, true_iroas=rho)
    if method == "ASD":
        return pipeline_asd_tm(geos, rep_seed, dgp=dgp, cfg=cfg.design_config(rep_seed), tm=tm, true_iroas=rho)
    raise ConfigError(f"unknown method {method}")


def _summarise(method: str, rows: list, rho: float, rep_seed: int) -> dict:
    est = np.array([r["estimate"] for r in rows])
    bias = np.abs(est - rho)
    bal = np.array([r["balance"] for r in rows])
    if len(est) >= 2:
        e_lo, e_hi = bootstrap_ci(est, seed=rep_seed)
        b_lo, b_hi = bootstrap_ci(bias, seed=rep_seed + 1)
    else:
        e_lo = e_hi = float(est[0])
        b_lo = b_hi = float(bias[0])
    return {"method": method, "n_reps": len(est), "mean_estimate": float(est.mean()),
            "estimate_ci_lo": min(e_lo, float(est.mean())), "estimate_ci_hi": max(e_hi, float(est.mean())),
            "rmse": float(np.sqrt(np.mean((est - rho) ** 2))), "mean_abs_bias": float(bias.mean()),
            "abs_bias_ci_lo": min(b_lo, float(bias.mean())), "abs_bias_ci_hi": max(b_hi, float(bias.mean())),
            "mean_balance": float(bal.mean())}


def run_study(cfg: StudyConfig, progress=None) -> SimReport:
    """Fresh dataset per replication, every enabled pipeline, summaries and gated tests."""
    n = cfg.dgp.n_geos
    rows, failures, times = [], [], []
    design_rows = []
    for r in range(cfg.replications):
        s = seed(cfg.master_seed, r, STUDY)
        dgp, geos = make_dataset(cfg, n, s)
        for method in cfg.methods:
            try:
                res = run_method(method, geos, dgp, cfg, s)
            except Exception as exc:  # recorded; the study carries on
                log.warning("rep %d %s failed: %s", r, method, exc)
                failures.append({"rep": r, "method": method, "error": type(exc).__name__, "message": str(exc)})
                continue
            rows.append({"rep": r, "method": method, "estimate": res.estimate, "abs_bias": res.abs_bias,
                         "balance": res.balance, "status": res.status})
            times.append({"rep": r, "method": method, "design_time_s": res.design_time_s})
            if r == 0 and method == cfg.methods[-1]:
                design_rows = _design_rows(list(range(n)), res.supergeo, res.treated)
        if progress:
            progress(r)
    total = cfg.replications * len(cfg.methods)
    if total and len(failures) > 0.1 * total:
        raise StudyError(f"{len(failures)} of {total} replication runs failed")
    rho = cfg.dgp.true_iroas
    summary = []
    for i, method in enumerate(cfg.methods):
        mrows = [x for x in rows if x["method"] == method]
        if mrows:
            summary.append(_summarise(method, mrows, rho, seed(cfg.master_seed, i, STUDY, 99)))
    tests = pairwise_tests(rows, cfg.methods, rho, cfg.alpha, seed(cfg.master_seed, 0, STUDY, 98))
    mean_time = {m: float(np.mean([t["design_time_s"] for t in times if t["method"] == m]))
                 for m in cfg.methods if any(t["method"] == m for t in times)}
    return SimReport(replications=rows, summary=summary, tests=tests, design=design_rows,
                     failures=failures, timings={"replications": times, "mean_design_time_s": mean_time})


def _design_rows(geo_ids, supergeo, treated):
    return [{"geo_id": g, "supergeo_id": int(sg), "arm": "T" if t else "C"}
            for g, sg, t in zip(geo_ids, supergeo, treated)]


def pairwise_tests(rows, methods, rho, alpha=0.05, boot_seed=0) -> list[dict]:
    """Gated paired comparisons of |bias| for every method pair, Holm-corrected."""
    by = {}
    for x in rows:
        by.setdefault(x["method"], {})[x["rep"]] = abs(x["estimate"] - rho)
    out = []
    for i, a in enumerate(methods):
        for b in methods[i + 1:]:
            common = sorted(set(by.get(a, {})) & set(by.get(b, {})))
            if len(common) < 3:
                continue
            va = [by[a][k] for k in common]
            vb = [by[b][k] for k in common]
            try:
                out.append(compare_paired(va, vb, f"{a} vs {b}", alpha=alpha, seed=boot_seed))
            except ValueError as exc:
                log.warning("comparison %s vs %s skipped: %s", a, b, exc)
    for res, pc in zip(out, holm_bonferroni([t["p"] for t in out])):
        res["p_corrected"] = pc
    return out


# --- lambda tuning --------------------------------------------------------

def pareto_frontier(points) -> list[int]:
    """Indices of points not dominated in both coordinates (lower is better)."""
    pts = [tuple(p) for p in points]
    keep = []
    for i, p in enumerate(pts):
        dominated = any(q[0] <= p[0] and q[1] <= p[1] and (q[0] < p[0] or q[1] < p[1])
                        for j, q in enumerate(pts) if j != i)
        if not dominated:
            keep.append(i)
    return keep


def tune_lambda(cfg: StudyConfig, progress=None) -> dict:
    """Cross-validated choice of a common modifier weight.

    Replication seeds are split into ``folds`` folds. A lambda value fully
    determines the design rule, so nothing is fitted on the training folds;
    each fold's held-out replications give one RMSE and the CV RMSE is their
    mean. Candidates do not depend on lambda and are built once per replication.
    """
    grid = [float(l) for l in cfg.lambda_grid]
    if len(grid) < 2 or len(set(grid)) < len(grid):
        log.warning("degenerate lambda grid %s", grid)
    n = cfg.dgp.n_geos
    n_reps = cfg.folds * cfg.tune_reps_per_fold
    fold_of = np.arange(n_reps) % cfg.folds
    tm = cfg.tm_config()
    est = np.full((len(grid), n_reps), np.nan)
    imbalance = np.full((len(grid), n_reps), np.nan)
    for r in range(n_reps):
        s = seed(cfg.master_seed, r, TUNE)
        dgp, geos = make_dataset(cfg, n, s)
        panel = synthetic_panel(geos, dgp)
        cands, _, _ = generate_candidates(panel, cfg.design_config(s))
        for i, lam in enumerate(grid):
            cov = synthetic_covariates(geos, panel, default_lambda=lam)
            a = solve(DesignProblem(cands, cov, time_limit=cfg.time_limit, seed=s, max_count_gap=0))
            res = finish_supergeo_design("ASD", geos, a.partition, randomise_arms(a.arms.treated, s),
                                         0.0, a.status, tm, dgp.true_iroas)
            est[i, r] = res.estimate
            imbalance[i, r] = masmd(a.partition, a.arms, cov)
        if progress:
            progress(r)
    rho = cfg.dgp.true_iroas
    rows = []
    for i, lam in enumerate(grid):
        fold_rmse = [float(np.sqrt(np.mean((est[i, fold_of == k] - rho) ** 2))) for k in range(cfg.folds)]
        rows.append({"lambda": lam, "cv_rmse": float(np.mean(fold_rmse)),
                     "masmd": float(np.mean(imbalance[i]))})
    front = pareto_frontier([(x["cv_rmse"], x["masmd"]) for x in rows])
    best = min(front, key=lambda i: (rows[i]["cv_rmse"], rows[i]["masmd"]))
    for i, x in enumerate(rows):
        x["on_frontier"] = i in front
        x["chosen"] = i == best
    return {"lambda": grid[best], "frontier": [rows[i] for i in front], "rows": rows}


# --- power grid -----------------------------------------------------------

def run_power_grid(cfg: StudyConfig, progress=None) -> list[dict]:
    """Empirical power of a Welch test for an injected standardised effect.

    Each replication draws one dataset per sample size and designs it once per
    method; every effect size is then injected into that same realised design.
    """
    out = []
    for n in cfg.power_sizes:
        detect = {(m, d): [] for m in cfg.methods for d in cfg.power_effects}
        missing = {m: 0 for m in cfg.methods}
        for r in range(cfg.power_reps):
            s = seed(cfg.master_seed, r, POWER, n)
            dgp, geos = make_dataset(cfg, n, s)
            for m in cfg.methods:
                try:
                    res = run_method(m, geos, dgp, cfg, s)
                except Exception as exc:
                    log.warning("power cell n=%d rep %d %s failed: %s", n, r, m, exc)
                    missing[m] += 1
                    continue
                outcome = run_experiment(geos, res.treated)
                control = outcome.response[~outcome.treated]
                treated = outcome.response[outcome.treated]
                sd = control.std(ddof=1)
                for d in cfg.power_effects:
                    t = two_sample_t_test(treated + d * sd, control, cfg.alpha)
                    detect[(m, d)].append(t["significant"])
            if progress:
                progress((n, r))
        for m in cfg.methods:
            for d in cfg.power_effects:
                hits = detect[(m, d)]
                if hits:
                    p, lo, hi = empirical_power(hits)
                    cat = power_category(p)
                else:
                    p = lo = hi = float("nan")
                    cat = "missing"
                out.append({"n_geos": n, "effect_size": float(d), "method": m, "reps": len(hits),
                            "missing": missing[m], "power": p, "wilson_lo": lo, "wilson_hi": hi,
                            "category": cat})
    return out


# --- scalability ----------------------------------------------------------

def loglog_slope(sizes, times) -> float:
    x = np.log(np.asarray(sizes, dtype=float))
    y = np.log(np.asarray(times, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


def run_scalability(cfg: StudyConfig, progress=None) -> tuple[list[dict], list[dict], float | None]:
    """Time the ASD design stage per size and probe the exact solver under its cutoff.

    Returns ``(rows, timing_rows, slope)``; ``rows`` hold seeded outcomes and
    ``timing_rows`` the wall-clock measurements. Once the exact solver times
    out, larger sizes are marked skipped.
    """
    if len(cfg.scale_sizes) < 3:
        raise ConfigError("scalability needs at least three sizes")
    rows, timing_rows = [], []
    exact_dead = False
    for n in cfg.scale_sizes:
        secs, statuses = [], []
        first = None
        for i in range(cfg.scale_runs):
            s = seed(cfg.master_seed, i, SCALE, n)
            dgp, geos = make_dataset(cfg, n, s)
            panel = synthetic_panel(geos, dgp)
            cov = synthetic_covariates(geos, panel, cfg.lambdas, cfg.default_lambda)
            t0 = time.perf_counter()
            run = asd_design(panel, cfg.design_config(s), cov)
            secs.append(time.perf_counter() - t0)
            statuses.append(run.assignment.status)
            if first is None:
                first = (run, cov, s, panel)
        peak = None
        if cfg.track_memory:
            run0, cov0, s0, panel0 = first
            tracemalloc.start()
            asd_design(panel0, cfg.design_config(s0), cov0)
            peak = tracemalloc.get_traced_memory()[1] / 2 ** 20
            tracemalloc.stop()
        run0, cov0, s0, _ = first
        if exact_dead:
            ex_status, ex_time, ex_cost = "skipped", None, None
        else:
            t0 = time.perf_counter()
            ex = solve_exact(DesignProblem(run0.candidates, cov0, time_limit=cfg.exact_time_limit,
                                           mode="exact", seed=s0, max_count_gap=0))
            ex_time = time.perf_counter() - t0
            ex_status = "optimal" if ex.status == "optimal" else "timeout"
            ex_cost = ex.cost
            exact_dead = ex_status == "timeout"
        asd_complete = all(st != "feasible-timeout" for st in statuses)
        rows.append({"n_geos": n, "runs": cfg.scale_runs, "asd_status": "complete" if asd_complete else "timeout",
                     "asd_cost": float(run0.assignment.cost), "asd_supergeos": run0.assignment.partition.n_supergeos,
                     "exact_status": ex_status, "exact_cost": ex_cost})
        timing_rows.append({"n_geos": n, "asd_time_s": float(np.mean(secs)), "asd_run_times_s": secs,
                            "peak_memory_mb": peak, "exact_time_s": ex_time})
        if progress:
            progress(n)
    done = [(r["n_geos"], t["asd_time_s"]) for r, t in zip(rows, timing_rows) if r["asd_status"] == "complete"]
    slope = loglog_slope(*zip(*done)) if len(done) >= 2 else None
    return rows, timing_rows, slope
