"""End-to-end design: features -> graph -> embeddings -> candidates -> arms."""
from __future__ import annotations

import dataclasses
import time

import numpy as np

from .balance import EXTENSIVE, INTENSIVE, CovariateSet
from .candidates import cut_dendrogram, default_candidate_levels, ward_hac
from .core_data import FeatureSpec, GeoPanel, build_geo_graph, engineer_features, split_for_embedding
from .graph_embed import GnnConfig, train_embedder
from .solver import DesignAssignment, DesignProblem, solve


@dataclasses.dataclass
class DesignConfig:
    gnn: GnnConfig = dataclasses.field(default_factory=GnnConfig)
    features: FeatureSpec = dataclasses.field(default_factory=FeatureSpec)
    k_neighbors: int = 10
    candidate_count: int = 100
    lambdas: dict = dataclasses.field(default_factory=dict)
    default_lambda: float = 0.1
    time_limit: float = 30.0
    mode: str = "auto"
    # arms hold equally many supergeos so they pair one to one and equal means imply equal totals
    max_count_gap: int | None = 0
    holdout_frac: float = 0.2
    seed: int = 0


@dataclasses.dataclass
class DesignRun:
    assignment: DesignAssignment
    candidates: list
    embeddings: np.ndarray
    trace: list
    timings: dict


def panel_covariates(panel: GeoPanel, baseline=None, lambdas=None, default_lambda=0.1) -> CovariateSet:
    """Baseline revenue plus spend and every static covariate as effect modifiers.

    Spend aggregates by sum; static covariates by baseline-weighted mean.
    """
    base = panel.revenue.mean(axis=1) if baseline is None else np.asarray(baseline, float)
    mods = {"spend": panel.spend.mean(axis=1)}
    agg = {"baseline": EXTENSIVE, "spend": EXTENSIVE}
    for j, name in enumerate(panel.covariate_names):
        mods[name] = panel.static_covariates[:, j]
        agg[name] = INTENSIVE
    lams = {m: default_lambda for m in mods}
    lams.update(lambdas or {})
    lams = {m: lams[m] for m in mods}
    return CovariateSet(base, mods, lams, agg)


def generate_candidates(panel: GeoPanel, cfg: DesignConfig):
    """Stage 1: embed the geos and cut the Ward dendrogram at many levels."""
    t0 = time.perf_counter()
    head, target = split_for_embedding(panel, cfg.holdout_frac)
    feats = engineer_features(head, cfg.features)
    k = min(cfg.k_neighbors, panel.n_geos - 1)
    graph = build_geo_graph(feats, k, list(panel.geo_ids))
    gnn = dataclasses.replace(cfg.gnn, seed=cfg.seed)
    trained = train_embedder(graph, target, gnn)
    t1 = time.perf_counter()
    levels = default_candidate_levels(panel.n_geos, cfg.candidate_count)
    cands = cut_dendrogram(ward_hac(trained.embeddings), levels)
    t2 = time.perf_counter()
    return cands, trained, {"embed_s": t1 - t0, "cluster_s": t2 - t1}


def asd_design(panel: GeoPanel, cfg: DesignConfig | None = None, cov: CovariateSet | None = None) -> DesignRun:
    cfg = cfg or DesignConfig()
    cov = cov or panel_covariates(panel, lambdas=cfg.lambdas, default_lambda=cfg.default_lambda)
    cands, trained, timings = generate_candidates(panel, cfg)
    t0 = time.perf_counter()
    problem = DesignProblem(cands, cov, time_limit=cfg.time_limit, mode=cfg.mode,
                            seed=cfg.seed, max_count_gap=cfg.max_count_gap)
    assignment = solve(problem)
    timings["solve_s"] = time.perf_counter() - t0
    return DesignRun(assignment, cands, trained.embeddings, trained.trace, timings)
