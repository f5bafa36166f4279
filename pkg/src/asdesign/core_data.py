"""Geo panels, synthetic data generation and node-feature engineering."""
from __future__ import annotations

import dataclasses
import re
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist


class PanelError(ValueError):
    """Base class for panel ingestion problems."""


class SchemaError(PanelError):
    pass


class DataError(PanelError):
    pass


class UniquenessError(PanelError):
    pass


class InsufficientDataError(ValueError):
    pass


@dataclasses.dataclass
class GeoPanel:
    geo_ids: list
    revenue: np.ndarray
    spend: np.ndarray
    static_covariates: np.ndarray
    covariate_names: list = dataclasses.field(default_factory=list)

    def __post_init__(self):
        self.revenue = np.asarray(self.revenue, dtype=float)
        self.spend = np.asarray(self.spend, dtype=float)
        n = len(self.geo_ids)
        cov = np.asarray(self.static_covariates, dtype=float)
        if cov.ndim == 1:
            cov = cov.reshape(n, -1) if cov.size else np.zeros((n, 0))
        self.static_covariates = cov
        if not self.covariate_names:
            self.covariate_names = [f"x{k + 1}" for k in range(cov.shape[1])]
        if self.revenue.ndim != 2 or self.revenue.shape != self.spend.shape:
            raise DataError("revenue and spend must be geo x week matrices of equal shape")
        if self.revenue.shape[0] != n or cov.shape[0] != n:
            raise DataError("row counts of series/covariates must equal the number of geos")
        if len(set(self.geo_ids)) != n:
            dup = pd.Series(self.geo_ids)[pd.Series(self.geo_ids).duplicated()].iloc[0]
            raise UniquenessError(f"duplicate geo id {dup!r}")
        if self.revenue.shape[1] < 2:
            raise DataError("need at least 2 weeks of history")
        for name, m in (("revenue", self.revenue), ("spend", self.spend)):
            if not np.all(np.isfinite(m)) or np.any(m < 0):
                raise DataError(f"{name} entries must be finite and >= 0")
        if len(self.covariate_names) != cov.shape[1]:
            raise SchemaError("covariate_names length does not match covariate columns")

    @property
    def weeks(self) -> int:
        return self.revenue.shape[1]

    @property
    def n_geos(self) -> int:
        return len(self.geo_ids)

    def slice_weeks(self, start: int, stop: int) -> "GeoPanel":
        return GeoPanel(list(self.geo_ids), self.revenue[:, start:stop],
                        self.spend[:, start:stop], self.static_covariates,
                        list(self.covariate_names))


DEFAULT_SCHEMA = {
    "geo_id": "geo_id",
    "revenue_prefix": "rev_w",
    "spend_prefix": "spend_w",
    "covariates": None,  # None: every remaining column
}


def _week_columns(columns: Sequence[str], prefix: str) -> list[str]:
    pat = re.compile(re.escape(prefix) + r"(\d+)$")
    found = [(int(m.group(1)), c) for c in columns if (m := pat.match(c))]
    return [c for _, c in sorted(found)]


def load_geo_panel(path: str | Path, schema: dict | None = None) -> GeoPanel:
    """Read a one-row-per-geo CSV into a validated :class:`GeoPanel`.

    Week columns are ordered by their numeric suffix, so ``rev_w10`` follows
    ``rev_w9`` regardless of the column order in the file.
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    id_col = schema["geo_id"]
    if id_col not in df.columns:
        raise SchemaError(f"missing geo id column {id_col!r}")
    rev_cols = _week_columns(df.columns, schema["revenue_prefix"])
    spend_cols = _week_columns(df.columns, schema["spend_prefix"])
    if not rev_cols:
        raise SchemaError(f"no revenue columns with prefix {schema['revenue_prefix']!r}")
    if not spend_cols:
        raise SchemaError(f"no spend columns with prefix {schema['spend_prefix']!r}")
    if len(rev_cols) != len(spend_cols):
        raise SchemaError("revenue and spend week counts differ")
    if schema["covariates"] is None:
        used = {id_col, *rev_cols, *spend_cols}
        cov_cols = [c for c in df.columns if c not in used]
    else:
        cov_cols = list(schema["covariates"])
        missing = [c for c in cov_cols if c not in df.columns]
        if missing:
            raise SchemaError(f"missing covariate column {missing[0]!r}")

    geo_ids = df[id_col].tolist()
    seen = set()
    for g in geo_ids:
        if g in seen:
            raise UniquenessError(f"duplicate geo id {g!r}")
        seen.add(g)

    def numeric(cols, nonneg):
        out = np.empty((len(df), len(cols)))
        for j, c in enumerate(cols):
            for i, raw in enumerate(df[c]):
                try:
                    v = float(raw)
                except ValueError:
                    raise DataError(f"non-numeric value {raw!r} at ({geo_ids[i]}, {c})") from None
                if not np.isfinite(v) or (nonneg and v < 0):
                    raise DataError(f"invalid value {raw!r} at ({geo_ids[i]}, {c})")
                out[i, j] = v
        return out

    return GeoPanel(
        geo_ids=geo_ids,
        revenue=numeric(rev_cols, True),
        spend=numeric(spend_cols, True),
        static_covariates=numeric(cov_cols, False),
        covariate_names=cov_cols,
    )


def write_geo_panel(panel: GeoPanel, path: str | Path) -> None:
    cols = {"geo_id": panel.geo_ids}
    for w in range(panel.weeks):
        cols[f"rev_w{w + 1}"] = panel.revenue[:, w]
    for w in range(panel.weeks):
        cols[f"spend_w{w + 1}"] = panel.spend[:, w]
    for j, name in enumerate(panel.covariate_names):
        cols[name] = panel.static_covariates[:, j]
    pd.DataFrame(cols).to_csv(path, index=False, float_format="%.6f")


# --- synthetic data -------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class SyntheticGeo:
    baseline_revenue: float
    spend: float
    true_effect: float

    @property
    def potential_outcomes(self) -> tuple[float, float]:
        return self.baseline_revenue, self.baseline_revenue + self.true_effect


@dataclasses.dataclass
class DgpConfig:
    n_geos: int = 200
    mu: float = 10.0
    sigma: float = 0.5
    spend_ratio: float = 0.12
    spend_noise_sd: float = 0.10
    true_iroas: float = 2.0
    het_scale: float = 0.5
    seed: int = 0
    # weekly history synthesised around each baseline for the design stage
    weeks: int = 26
    regions: int = 4
    weekly_noise_sd: float = 0.05

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.spend_ratio <= 0:
            raise ValueError("spend_ratio must be > 0")
        if self.n_geos < 4:
            raise ValueError("n_geos must be >= 4")


MAX_SPEND_REDRAWS = 100


def generate_synthetic(cfg: DgpConfig) -> list[SyntheticGeo]:
    """Draw baseline revenue, spend and heterogeneous effects for ``cfg.n_geos`` geos.

    Draw order is fixed: all log-revenues first, then all spend-noise terms.
    A geo whose noisy spend is not positive gets its noise term redrawn.
    """
    rng = np.random.default_rng(cfg.seed)
    revenue = np.exp(rng.normal(cfg.mu, cfg.sigma, size=cfg.n_geos))
    eps = rng.normal(0.0, cfg.spend_noise_sd, size=cfg.n_geos)
    for _ in range(MAX_SPEND_REDRAWS):
        bad = 1.0 + eps <= 0
        if not bad.any():
            break
        eps[bad] = rng.normal(0.0, cfg.spend_noise_sd, size=int(bad.sum()))
    else:
        raise ValueError("spend stayed non-positive after bounded redraws")
    spend = cfg.spend_ratio * revenue * (1.0 + eps)
    rbar = revenue.mean()
    tau = cfg.true_iroas * spend * (1.0 + cfg.het_scale * (revenue / rbar - 1.0))
    return [SyntheticGeo(float(r), float(s), float(t)) for r, s, t in zip(revenue, spend, tau)]


def geo_arrays(geos: Sequence[SyntheticGeo]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    r = np.array([g.baseline_revenue for g in geos])
    s = np.array([g.spend for g in geos])
    t = np.array([g.true_effect for g in geos])
    return r, s, t


def synthetic_panel(geos: Sequence[SyntheticGeo], cfg: DgpConfig) -> GeoPanel:
    """Weekly pre-period history whose per-geo mean tracks the drawn baseline.

    Geos belong to latent regions sharing an annual seasonal profile; this gives
    the feature space the regional community structure the embedder looks for.
    Uses its own seed stream so the effect draws stay untouched.
    """
    rng = np.random.default_rng([cfg.seed, 1])
    r, s, _ = geo_arrays(geos)
    n, weeks = len(geos), cfg.weeks
    region = rng.integers(0, cfg.regions, size=n)
    amp = rng.uniform(0.05, 0.30, size=cfg.regions)
    phase = rng.uniform(0, 2 * np.pi, size=cfg.regions)
    t = np.arange(weeks)
    season = amp[region, None] * np.sin(2 * np.pi * t[None, :] / 52.0 + phase[region, None])
    season -= season.mean(axis=1, keepdims=True)
    noise = rng.normal(0.0, cfg.weekly_noise_sd, size=(n, weeks))
    noise -= noise.mean(axis=1, keepdims=True)
    revenue = r[:, None] * np.clip(1.0 + season + noise, 0.05, None)
    spend_noise = rng.normal(0.0, cfg.weekly_noise_sd, size=(n, weeks))
    spend = s[:, None] * np.clip(1.0 + season + spend_noise, 0.05, None)
    cov = np.column_stack([np.log(r), s / r])
    return GeoPanel([f"G{i + 1}" for i in range(n)], revenue, spend, cov,
                    ["log_baseline", "spend_share"])


# --- features and graph ---------------------------------------------------

@dataclasses.dataclass
class FeatureSpec:
    fourier_order: int = 3
    mean: bool = True
    variance: bool = True
    trend: bool = True
    fourier: bool = True
    static: bool = True

    def __post_init__(self):
        if self.fourier_order < 0:
            raise ValueError("fourier_order must be >= 0")


def _zscore_columns(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    mu = m.mean(axis=0)
    sd = m.std(axis=0)
    out = np.zeros_like(m)
    ok = sd > 1e-12 * np.maximum(1.0, np.abs(mu))
    out[:, ok] = (m[:, ok] - mu[ok]) / sd[ok]
    return out


def raw_series_features(panel: GeoPanel, spec: FeatureSpec) -> np.ndarray:
    """Unstandardised per-geo features (mean, variance, slope, Fourier magnitudes)."""
    y = panel.revenue
    n, weeks = y.shape
    if spec.fourier and weeks < 2 * spec.fourier_order + 1:
        raise InsufficientDataError(
            f"{weeks} weeks cannot support {spec.fourier_order} Fourier pairs")
    cols = []
    if spec.mean:
        cols.append(y.mean(axis=1, keepdims=True))
    if spec.variance:
        cols.append(y.var(axis=1, keepdims=True))
    if spec.trend:
        t = np.arange(weeks) - (weeks - 1) / 2.0
        cols.append(((y - y.mean(axis=1, keepdims=True)) @ t / (t @ t))[:, None])
    if spec.fourier and spec.fourier_order:
        centred = y - y.mean(axis=1, keepdims=True)
        t = np.arange(weeks)
        k = np.arange(1, spec.fourier_order + 1)
        ang = 2 * np.pi * np.outer(t, k) / weeks
        a = centred @ np.cos(ang) * (2.0 / weeks)
        b = centred @ np.sin(ang) * (2.0 / weeks)
        cols.append(np.hypot(a, b))
    return np.hstack(cols) if cols else np.zeros((n, 0))


def engineer_features(panel: GeoPanel, spec: FeatureSpec | None = None) -> np.ndarray:
    """Node-feature matrix, every column z-scored across geos.

    Constant columns become all zeros rather than NaN.
    """
    spec = spec or FeatureSpec()
    parts = [raw_series_features(panel, spec)]
    if spec.static and panel.static_covariates.shape[1]:
        parts.append(_zscore_columns(panel.static_covariates))
    return _zscore_columns(np.hstack(parts))


def split_for_embedding(panel: GeoPanel, holdout_frac: float = 0.2) -> tuple[GeoPanel, np.ndarray]:
    """Feature window plus standardised mean revenue of the held-out tail weeks."""
    hold = max(1, int(round(holdout_frac * panel.weeks)))
    if panel.weeks - hold < 2:
        raise InsufficientDataError("too few weeks to hold out a regression target")
    head = panel.slice_weeks(0, panel.weeks - hold)
    target = panel.revenue[:, panel.weeks - hold:].mean(axis=1)
    sd = target.std()
    target = (target - target.mean()) / sd if sd > 0 else np.zeros_like(target)
    return head, target


@dataclasses.dataclass
class GeoGraph:
    adjacency: np.ndarray
    features: np.ndarray
    geo_ids: list | None = None

    def __post_init__(self):
        self.adjacency = np.asarray(self.adjacency, dtype=float)
        self.features = np.asarray(self.features, dtype=float)
        n = self.adjacency.shape[0]
        if self.adjacency.shape != (n, n) or self.features.shape[0] != n:
            raise ValueError("adjacency must be n x n with one feature row per node")
        if self.geo_ids is None:
            self.geo_ids = [f"G{i + 1}" for i in range(n)]

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]


def build_geo_graph(features: np.ndarray, k_neighbors: int, geo_ids: list | None = None) -> GeoGraph:
    """Symmetric kNN graph with Gaussian-kernel weights ``exp(-d^2 / median(d^2))``."""
    x = np.asarray(features, dtype=float)
    n = x.shape[0]
    if x.ndim != 2 or x.shape[1] < 1:
        raise ValueError("features must be an n x f matrix with f >= 1")
    if not 1 <= k_neighbors < n:
        raise ValueError(f"k_neighbors must lie in [1, {n - 1}], got {k_neighbors}")
    d2 = cdist(x, x, "sqeuclidean")
    off = d2[~np.eye(n, dtype=bool)]
    scale = np.median(off)
    if scale <= 0:
        scale = off.max() if off.max() > 0 else 1.0
    w = np.exp(-d2 / scale)
    w = np.maximum(w, np.finfo(float).tiny)
    masked = d2 + np.diag(np.full(n, np.inf))
    nn = np.argsort(masked, axis=1, kind="stable")[:, :k_neighbors]
    directed = np.zeros((n, n))
    rows = np.repeat(np.arange(n), k_neighbors)
    directed[rows, nn.ravel()] = w[rows, nn.ravel()]
    adj = np.maximum(directed, directed.T)
    np.fill_diagonal(adj, 0.0)
    return GeoGraph(adj, x, geo_ids)
