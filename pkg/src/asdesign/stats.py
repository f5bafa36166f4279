"""Inference utilities: normality gate, paired tests, Holm, effect sizes, bootstrap, power."""
from __future__ import annotations

import dataclasses
import math

import numpy as np
from scipy import stats as sps


class DegenerateSampleError(ValueError):
    pass


@dataclasses.dataclass
class PairedSample:
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        if self.a.shape != self.b.shape or self.a.ndim != 1:
            raise ValueError("paired samples must be 1-d and of equal length")
        if len(self.a) < 3:
            raise ValueError("paired samples need at least 3 observations")
        if not (np.all(np.isfinite(self.a)) and np.all(np.isfinite(self.b))):
            raise ValueError("paired samples must be finite")

    @property
    def diff(self) -> np.ndarray:
        return self.a - self.b


@dataclasses.dataclass
class TestResult:
    test: str
    statistic: float
    p: float
    p_corrected: float | None = None
    effect_size: float | None = None
    ci: tuple | None = None

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p-value {self.p} outside [0, 1]")


def shapiro_wilk(x) -> float:
    x = np.asarray(x, dtype=float)
    if not 3 <= len(x) <= 5000:
        raise ValueError("Shapiro-Wilk needs 3 <= n <= 5000")
    if np.ptp(x) == 0:
        raise DegenerateSampleError("constant sample")
    return float(sps.shapiro(x).pvalue)


def paired_t_test(s: PairedSample) -> TestResult:
    d = s.diff
    sd = d.std(ddof=1)
    if sd == 0:
        raise DegenerateSampleError("differences have zero variance")
    n = len(d)
    t = d.mean() / (sd / math.sqrt(n))
    p = 2.0 * sps.t.sf(abs(t), df=n - 1)
    return TestResult("paired-t", float(t), float(min(1.0, p)))


def _signed_rank_null(ranks2: np.ndarray) -> np.ndarray:
    """Exact null distribution of the doubled positive-rank sum.

    Ranks are doubled so averaged ties stay integral; ``out[w]`` is the
    probability that the doubled statistic equals ``w``.
    """
    total = int(ranks2.sum())
    dist = np.zeros(total + 1)
    dist[0] = 1.0
    for r in ranks2.astype(int):
        shifted = np.zeros_like(dist)
        shifted[r:] = dist[:total + 1 - r]
        dist = 0.5 * (dist + shifted)
    return dist


def wilcoxon_signed_rank(s: PairedSample, exact_max: int = 25) -> TestResult:
    """Two-sided signed-rank test; exact for up to ``exact_max`` nonzero differences."""
    d = s.diff
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise DegenerateSampleError("all differences are zero")
    ranks = sps.rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= exact_max:
        ranks2 = np.round(2 * ranks).astype(int)
        dist = _signed_rank_null(ranks2)
        w2 = int(round(2 * w_plus))
        centre2 = ranks2.sum() / 2.0
        dev = abs(w2 - centre2)
        support = np.arange(len(dist))
        p = dist[np.abs(support - centre2) >= dev - 1e-9].sum()
        return TestResult("wilcoxon-exact", w_plus, float(min(1.0, p)))
    mean = n * (n + 1) / 4.0
    _, counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (counts ** 3 - counts).sum() / 48.0
    if var <= 0:
        raise DegenerateSampleError("signed-rank variance is zero")
    z = (abs(w_plus - mean) - 0.5) / math.sqrt(var)
    p = 2.0 * sps.norm.sf(max(z, 0.0))
    return TestResult("wilcoxon-normal", w_plus, float(min(1.0, p)))


def holm_bonferroni(pvals) -> list[float]:
    p = np.asarray(pvals, dtype=float)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    m = len(p)
    order = np.argsort(p, kind="stable")
    adj = np.empty(m)
    running = 0.0
    for rank, i in enumerate(order):
        running = max(running, (m - rank) * p[i])
        adj[i] = min(1.0, running)
    return adj.tolist()


EFFECT_LABELS = ((0.8, "large"), (0.5, "medium"), (0.2, "small"))


def effect_label(d: float) -> str:
    for cut, name in EFFECT_LABELS:
        if abs(d) >= cut:
            return name
    return "negligible"


def cohens_d_paired(s) -> tuple[float, str]:
    d = s.diff if isinstance(s, PairedSample) else np.asarray(s, dtype=float)
    if len(d) < 2:
        raise ValueError("need at least two differences")
    sd = d.std(ddof=1)
    if sd == 0:
        raise DegenerateSampleError("differences have zero variance")
    val = float(d.mean() / sd)
    return val, effect_label(val)


def bootstrap_ci(x, stat=np.mean, n_boot: int = 2000, level: float = 0.95, seed: int = 0):
    """Percentile bootstrap interval for ``stat`` (vectorised over ``axis=1``)."""
    x = np.asarray(x, dtype=float)
    if len(x) < 2:
        raise ValueError("bootstrap needs at least two observations")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(x), size=(n_boot, len(x)))
    vals = stat(x[idx], axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(vals, [alpha, 1.0 - alpha])
    # a constant sample must give a degenerate interval at exactly that constant
    if np.ptp(x) == 0:
        lo = hi = float(x[0])
    return float(lo), float(hi)


def wilson_interval(successes: int, n: int, z: float = 1.96):
    if n < 1:
        raise ValueError("need at least one trial")
    p = successes / n
    den = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    lo = 0.0 if successes == 0 else max(0.0, centre - half)
    hi = 1.0 if successes == n else min(1.0, centre + half)
    return lo, hi


def empirical_power(detect) -> tuple[float, float, float]:
    detect = np.asarray(detect, dtype=bool)
    n = len(detect)
    k = int(detect.sum())
    lo, hi = wilson_interval(k, n)
    p = k / n
    return p, min(lo, p), max(hi, p)


def two_sample_t_test(a, b, alpha: float = 0.05) -> dict:
    """Welch two-sided test."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each sample needs at least two observations")
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    if va == 0 and vb == 0:
        raise DegenerateSampleError("both samples have zero variance")
    se = math.sqrt(va + vb)
    t = (a.mean() - b.mean()) / se
    df = (va + vb) ** 2 / (va ** 2 / (len(a) - 1) + vb ** 2 / (len(b) - 1))
    p = float(min(1.0, 2.0 * sps.t.sf(abs(t), df)))
    return {"statistic": float(t), "df": float(df), "p": p, "significant": p < alpha}


POWER_CATEGORIES = ((0.9, "Excellent"), (0.8, "Good"), (0.6, "Moderate"))


def power_category(power: float) -> str:
    for cut, name in POWER_CATEGORIES:
        if power >= cut:
            return name
    return "Low"


def compare_paired(a, b, name: str, alpha: float = 0.05, seed: int = 0) -> dict:
    """Gated comparison: t-test if the differences look Normal, else Wilcoxon.

    Both tests are computed; ``p`` is the gated choice.
    """
    s = PairedSample(a, b)
    d = s.diff
    try:
        normal_p = shapiro_wilk(d)
    except DegenerateSampleError:
        normal_p = 0.0
    t = paired_t_test(s)
    w = wilcoxon_signed_rank(s)
    chosen = t if normal_p >= alpha else w
    eff, label = cohens_d_paired(s)
    lo, hi = bootstrap_ci(d, seed=seed)
    return {"comparison": name, "test": chosen.test, "statistic": chosen.statistic,
            "p": chosen.p, "p_t": t.p, "p_wilcoxon": w.p, "shapiro_p": normal_p,
            "cohens_d": eff, "label": label, "diff_ci_lo": lo, "diff_ci_hi": hi}
