"""Standardised mean differences and the heterogeneity-aware design cost."""
from __future__ import annotations

import dataclasses
import math
from typing import Mapping, Sequence

import numpy as np

from .candidates import CandidatePartition

EXTENSIVE = "sum"
INTENSIVE = "mean"


class AggregationError(ValueError):
    pass


@dataclasses.dataclass
class CovariateSet:
    """Per-geo covariates balanced by the design.

    ``aggregation`` maps a covariate name (``"baseline"`` or a modifier name)
    to ``"sum"`` or ``"mean"``; intensive means are weighted by the baseline.
    """

    baseline: np.ndarray
    modifiers: dict = dataclasses.field(default_factory=dict)
    lambdas: dict = dataclasses.field(default_factory=dict)
    aggregation: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        self.baseline = np.asarray(self.baseline, dtype=float)
        n = len(self.baseline)
        self.modifiers = {k: np.asarray(v, dtype=float) for k, v in self.modifiers.items()}
        for name, v in self.modifiers.items():
            if len(v) != n:
                raise ValueError(f"modifier {name!r} has {len(v)} values for {n} geos")
        for name in self.modifiers:
            self.lambdas.setdefault(name, 1.0)
        unknown = set(self.lambdas) - set(self.modifiers)
        if unknown:
            raise ValueError(f"lambda given for unknown modifier(s) {sorted(unknown)}")
        if any(lam < 0 for lam in self.lambdas.values()):
            raise ValueError("lambdas must be non-negative")
        for name, rule in self.aggregation.items():
            if rule not in (EXTENSIVE, INTENSIVE):
                raise ValueError(f"unknown aggregation {rule!r} for {name!r}")

    @property
    def n_geos(self) -> int:
        return len(self.baseline)

    @property
    def modifier_names(self) -> list[str]:
        return list(self.modifiers)

    def rule(self, name: str) -> str:
        return self.aggregation.get(name, EXTENSIVE)

    def with_lambdas(self, lambdas: Mapping[str, float]) -> "CovariateSet":
        return CovariateSet(self.baseline, dict(self.modifiers), dict(lambdas), dict(self.aggregation))


@dataclasses.dataclass
class ArmAssignment:
    treated: np.ndarray  # bool per supergeo

    def __post_init__(self):
        self.treated = np.asarray(self.treated, dtype=bool)
        if self.treated.ndim != 1:
            raise ValueError("arm assignment must be one flag per supergeo")
        if self.treated.all() or not self.treated.any():
            raise ValueError("both arms need at least one supergeo")

    @classmethod
    def from_labels(cls, labels: Sequence[str]) -> "ArmAssignment":
        bad = [a for a in labels if a not in ("T", "C")]
        if bad:
            raise ValueError(f"arm labels must be 'T' or 'C', got {bad[0]!r}")
        return cls(np.array([a == "T" for a in labels]))

    @property
    def labels(self) -> list[str]:
        return ["T" if t else "C" for t in self.treated]

    def swapped(self) -> "ArmAssignment":
        return ArmAssignment(~self.treated)

    def canonical(self) -> "ArmAssignment":
        """Mirror so that the first supergeo sits in the treatment arm."""
        return self if self.treated[0] else self.swapped()


def supergeo_covariate(partition: CandidatePartition, values, aggregation: str = EXTENSIVE,
                       weights=None) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if len(values) != partition.n_geos:
        raise ValueError("values must have one entry per geo")
    if aggregation == EXTENSIVE:
        return np.array([values[m].sum() for m in partition.supergeos])
    if aggregation != INTENSIVE:
        raise ValueError(f"unknown aggregation {aggregation!r}")
    weights = np.asarray(weights, dtype=float)
    if len(weights) != partition.n_geos:
        raise ValueError("weights must have one entry per geo")
    out = np.empty(len(partition.supergeos))
    for s, m in enumerate(partition.supergeos):
        w = weights[m].sum()
        if w == 0:
            raise AggregationError(f"supergeo {s} has zero total weight")
        out[s] = weights[m] @ values[m] / w
    return out


def smd(group_a, group_b) -> float:
    """Standardised mean difference with sample (n-1) standard deviations.

    Returns ``inf`` (signed) when both groups have zero spread but different
    means, so degenerate splits are never mistaken for balanced ones.
    """
    a = np.asarray(group_a, dtype=float)
    b = np.asarray(group_b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ValueError("smd needs two non-empty groups")
    diff = a.mean() - b.mean()
    va = a.var(ddof=1) if a.size > 1 else 0.0
    vb = b.var(ddof=1) if b.size > 1 else 0.0
    pooled = math.sqrt((va + vb) / 2.0)
    if pooled == 0.0:
        return 0.0 if diff == 0.0 else math.copysign(math.inf, diff)
    return diff / pooled


def supergeo_matrix(partition: CandidatePartition, cov: CovariateSet) -> np.ndarray:
    """Supergeo-level values, baseline first then modifiers in declared order."""
    cols = [supergeo_covariate(partition, cov.baseline, cov.rule("baseline"), cov.baseline)]
    for name in cov.modifier_names:
        cols.append(supergeo_covariate(partition, cov.modifiers[name], cov.rule(name), cov.baseline))
    return np.column_stack(cols)


def term_weights(cov: CovariateSet) -> np.ndarray:
    return np.array([1.0] + [cov.lambdas[m] for m in cov.modifier_names])


def _check_arms(partition: CandidatePartition, arms: ArmAssignment):
    if len(arms.treated) != len(partition.supergeos):
        raise ValueError("arm assignment length does not match the partition")


def design_cost(partition: CandidatePartition, arms: ArmAssignment, cov: CovariateSet):
    """Return ``(cost, breakdown)``; breakdown rows are ``term, smd, lambda, contribution``."""
    _check_arms(partition, arms)
    vals = supergeo_matrix(partition, cov)
    t = arms.treated
    names = ["baseline"] + cov.modifier_names
    lams = term_weights(cov)
    breakdown = []
    total = 0.0
    for j, (name, lam) in enumerate(zip(names, lams)):
        d = smd(vals[t, j], vals[~t, j])
        contrib = 0.0 if lam == 0 else lam * abs(d)
        total += contrib
        breakdown.append({"term": name, "smd": d, "lambda": float(lam), "contribution": contrib})
    return total, breakdown


def masmd(partition: CandidatePartition, arms: ArmAssignment, cov: CovariateSet) -> float:
    if not cov.modifiers:
        raise ValueError("masmd needs at least one modifier")
    _check_arms(partition, arms)
    vals = supergeo_matrix(partition, cov)
    t = arms.treated
    return float(np.mean([abs(smd(vals[t, j], vals[~t, j])) for j in range(1, vals.shape[1])]))


def arm_total_gap(partition: CandidatePartition, arms: ArmAssignment, baseline) -> float:
    """Absolute difference of arm-total baseline revenue (the reported balance)."""
    tot = supergeo_covariate(partition, baseline, EXTENSIVE)
    return float(abs(tot[arms.treated].sum() - tot[~arms.treated].sum()))
