"""Ward clustering of embeddings, dendrogram cuts and SBM fixtures."""
from __future__ import annotations

import dataclasses
import math

import numpy as np
from scipy.cluster import hierarchy
from scipy.spatial.distance import pdist
from sklearn.metrics import adjusted_rand_score

from .core_data import GeoGraph


@dataclasses.dataclass
class Dendrogram:
    # (cluster_a, cluster_b, height, size); clusters >= n_leaves are earlier merges
    merges: np.ndarray
    n_leaves: int

    def __post_init__(self):
        self.merges = np.asarray(self.merges, dtype=float).reshape(-1, 4)
        if len(self.merges) != self.n_leaves - 1:
            raise ValueError("a dendrogram over n leaves has n-1 merges")

    @property
    def heights(self) -> np.ndarray:
        return self.merges[:, 2]


@dataclasses.dataclass
class CandidatePartition:
    supergeos: list  # list of int arrays of geo indices
    n_geos: int
    source: str = ""

    def __post_init__(self):
        self.supergeos = [np.sort(np.asarray(m, dtype=int)) for m in self.supergeos]
        self.validate()

    def validate(self):
        if any(len(m) == 0 for m in self.supergeos):
            raise ValueError("empty supergeo")
        allm = np.concatenate(self.supergeos) if self.supergeos else np.array([], int)
        if len(allm) != self.n_geos or not np.array_equal(np.sort(allm), np.arange(self.n_geos)):
            raise ValueError("supergeos must be disjoint and cover every geo exactly once")

    @property
    def n_supergeos(self) -> int:
        return len(self.supergeos)

    def labels(self) -> np.ndarray:
        out = np.empty(self.n_geos, dtype=int)
        for s, m in enumerate(self.supergeos):
            out[m] = s
        return out

    @classmethod
    def from_labels(cls, labels, source: str = "") -> "CandidatePartition":
        labels = np.asarray(labels)
        # supergeos ordered by their smallest member so equal partitions compare equal
        groups = {}
        for i, lab in enumerate(labels):
            groups.setdefault(lab, []).append(i)
        members = sorted(groups.values(), key=lambda m: m[0])
        return cls(members, len(labels), source)

    def key(self) -> tuple:
        return tuple(tuple(m.tolist()) for m in self.supergeos)


def ward_hac(embeddings) -> Dendrogram:
    """Ward-linkage agglomerative clustering.

    The recorded height of a merge is its increase in within-cluster sum of
    squares, ``|A||B| / (|A|+|B|) * ||c_A - c_B||^2``.
    """
    x = np.asarray(embeddings, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("ward_hac needs at least two points")
    if not np.all(np.isfinite(x)):
        raise ValueError("embeddings contain non-finite values")
    z = hierarchy.linkage(pdist(x), method="ward")
    z[:, 2] = z[:, 2] ** 2 / 2.0
    return Dendrogram(z, x.shape[0])


def cut_dendrogram(d: Dendrogram, levels) -> list[CandidatePartition]:
    n = d.n_leaves
    for k in levels:
        if not 1 <= k <= n:
            raise ValueError(f"cut level {k} outside [1, {n}]")
    if not len(levels):
        return []
    z = d.merges.copy()
    z[:, 2] = np.sqrt(2.0 * z[:, 2])
    # scipy's cut_tree mislabels the k = n level when it follows another level,
    # so singletons are built directly and the rest cut in ascending order
    inner = sorted({int(k) for k in levels if k < n})
    labels = {n: np.arange(n)}
    if inner:
        cuts = hierarchy.cut_tree(z, n_clusters=inner)
        labels.update({k: cuts[:, j] for j, k in enumerate(inner)})
    out = []
    for k in levels:
        part = CandidatePartition.from_labels(labels[int(k)], source=f"k={k}")
        if part.n_supergeos != k:
            raise RuntimeError(f"cut produced {part.n_supergeos} clusters, wanted {k}")
        out.append(part)
    return out


def default_candidate_levels(n_geos: int, m: int) -> list[int]:
    """Up to ``m`` geometrically spaced cluster counts in ``[max(2, n/20), n/2]``."""
    lo = max(2.0, n_geos / 20.0)
    hi = max(lo, n_geos / 2.0)
    if m == 1:
        return [int(round(math.sqrt(lo * hi)))]
    raw = np.geomspace(lo, hi, num=m)
    levels = sorted({int(round(v)) for v in raw})
    lo_i, hi_i = math.ceil(lo - 1e-9), math.floor(hi + 1e-9)
    return [k for k in levels if lo_i <= k <= hi_i] or [lo_i]


@dataclasses.dataclass
class SbmConfig:
    communities: int = 4
    nodes_per_community: int = 25
    rho_in: float = 0.5
    rho_out: float = 0.02
    seed: int = 0
    feature_dim: int = 16

    def __post_init__(self):
        if not 0 <= self.rho_out < self.rho_in <= 1:
            raise ValueError("need 0 <= rho_out < rho_in <= 1")


def generate_sbm_graph(cfg: SbmConfig) -> tuple[GeoGraph, np.ndarray]:
    """Planted-partition graph with unit weights and uninformative Gaussian features."""
    rng = np.random.default_rng(cfg.seed)
    n = cfg.communities * cfg.nodes_per_community
    labels = np.repeat(np.arange(cfg.communities), cfg.nodes_per_community)
    same = labels[:, None] == labels[None, :]
    p = np.where(same, cfg.rho_in, cfg.rho_out)
    upper = np.triu(rng.random((n, n)) < p, k=1)
    adj = (upper | upper.T).astype(float)
    feats = rng.normal(size=(n, cfg.feature_dim))
    return GeoGraph(adj, feats), labels


def adjusted_rand_index(a, b) -> float:
    return float(adjusted_rand_score(a, b))
