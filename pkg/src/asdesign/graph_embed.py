"""Hybrid GAT + GraphSAGE node embedder trained with a triplet + regression loss.

Everything is dense numpy with hand-written backward passes; message passing
runs on edge lists sorted by destination node so the cost is linear in edges.
"""
from __future__ import annotations

import dataclasses
import logging

import numpy as np
import scipy.sparse as sp

from .core_data import GeoGraph

log = logging.getLogger(__name__)

ATTN_SLOPE = 0.2
ACT_SLOPE = 0.01
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
DIST_EPS = 1e-12


class TrainingError(RuntimeError):
    pass


@dataclasses.dataclass
class GnnConfig:
    gat_layers: int = 2
    heads: int = 8
    hidden: int = 64
    out_dim: int = 32
    epochs: int = 200
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 128
    gamma: float = 0.5
    neighbor_sample_size: int = 10
    contrastive_margin: float = 1.0
    negatives_per_anchor: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.heads < 1:
            raise ValueError("heads must be >= 1")
        if self.hidden % self.heads:
            raise ValueError("hidden must be divisible by heads")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.gat_layers < 1:
            raise ValueError("need at least one GAT layer")


# --- edge lists -----------------------------------------------------------

class Edges:
    """Directed edges ``src -> dst`` sorted by ``dst`` with segment helpers."""

    def __init__(self, dst, src, weight, n):
        order = np.lexsort((src, dst))
        self.dst = np.asarray(dst, dtype=np.int64)[order]
        self.src = np.asarray(src, dtype=np.int64)[order]
        self.weight = np.asarray(weight, dtype=float)[order]
        self.n = n
        e = len(self.dst)
        self.deg = np.bincount(self.dst, minlength=n)
        self.start = np.concatenate([[0], np.cumsum(self.deg)[:-1]])
        self.has = self.deg > 0
        cols = np.arange(e)
        self._gather_dst = sp.csr_matrix((np.ones(e), (self.dst, cols)), shape=(n, e))
        self._gather_src = sp.csr_matrix((np.ones(e), (self.src, cols)), shape=(n, e))

    @classmethod
    def from_adjacency(cls, adj: np.ndarray) -> "Edges":
        dst, src = np.nonzero(adj)
        return cls(dst, src, adj[dst, src], adj.shape[0])

    def __len__(self):
        return len(self.dst)

    def seg_sum(self, x):
        """Sum edge rows into their destination node."""
        return self._gather_dst @ x

    def scatter_src(self, x):
        return self._gather_src @ x

    def seg_max(self, x):
        out = np.zeros((self.n,) + x.shape[1:])
        if len(self.dst):
            out[self.has] = np.maximum.reduceat(x, self.start[self.has], axis=0)
        return out

    def sample(self, fanout: int, rng: np.random.Generator) -> "Edges":
        """Keep at most ``fanout`` uniformly chosen in-edges per node."""
        if not len(self.dst) or self.deg.max() <= fanout:
            return self
        u = rng.random(len(self.dst))
        order = np.lexsort((u, self.dst))
        rank = np.arange(len(order)) - self.start[self.dst[order]]
        keep = order[rank < fanout]
        return Edges(self.dst[keep], self.src[keep], self.weight[keep], self.n)

    def mean_operator(self):
        inv = np.zeros(self.n)
        inv[self.has] = 1.0 / self.deg[self.has]
        return sp.csr_matrix((inv[self.dst], (self.dst, self.src)), shape=(self.n, self.n))


# --- building blocks ------------------------------------------------------

def _lrelu(x, slope):
    return np.where(x > 0, x, slope * x)


def _lrelu_grad(x, slope):
    return np.where(x > 0, 1.0, slope)


def _bn_forward(p, gamma, beta, state, training):
    if training:
        mu = p.mean(axis=0)
        var = p.var(axis=0)
        if state is not None:
            n = p.shape[0]
            unbiased = var * n / (n - 1) if n > 1 else var
            state["mean"] = (1 - BN_MOMENTUM) * state["mean"] + BN_MOMENTUM * mu
            state["var"] = (1 - BN_MOMENTUM) * state["var"] + BN_MOMENTUM * unbiased
    else:
        mu, var = state["mean"], state["var"]
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (p - mu) * inv
    return gamma * xhat + beta, (xhat, inv, training)


def _bn_backward(dq, gamma, cache):
    xhat, inv, training = cache
    dgamma = (dq * xhat).sum(axis=0)
    dbeta = dq.sum(axis=0)
    dxhat = dq * gamma
    if not training:
        return dxhat * inv, dgamma, dbeta
    n = dq.shape[0]
    dp = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dp, dgamma, dbeta


def gat_layer_forward(h, edges: Edges, params: dict, heads: int, state=None, training=False):
    """One attention layer: ``LeakyReLU(BN([h_i || sum_j alpha_ij W h_j] U))``.

    ``params`` holds ``W`` (d_in x hidden), ``a_src``/``a_dst`` (heads x
    hidden/heads), ``U`` ((d_in + hidden) x hidden), ``gamma`` and ``beta``.
    Nodes without in-edges aggregate nothing (a zero neighbour term).
    Returns ``(out, cache)``; ``cache["alpha"]`` holds the edge attentions.
    """
    n = h.shape[0]
    W = params["W"]
    hidden = W.shape[1]
    hd = hidden // heads
    z = (h @ W).reshape(n, heads, hd)
    s_dst = np.einsum("nhd,hd->nh", z, params["a_dst"])
    s_src = np.einsum("nhd,hd->nh", z, params["a_src"])
    pre = s_dst[edges.dst] + s_src[edges.src]
    e = _lrelu(pre, ATTN_SLOPE)
    ex = np.exp(e - edges.seg_max(e)[edges.dst])
    den = edges.seg_sum(ex)
    alpha = ex / den[edges.dst]
    msg = (alpha[:, :, None] * z[edges.src]).reshape(len(edges), hidden)
    agg = edges.seg_sum(msg)
    c = np.hstack([h, agg])
    p = c @ params["U"]
    q, bn_cache = _bn_forward(p, params["gamma"], params["beta"], state, training)
    out = _lrelu(q, ACT_SLOPE)
    cache = dict(h=h, z=z, pre=pre, alpha=alpha, c=c, q=q, bn=bn_cache, edges=edges,
                 isolated=np.flatnonzero(~edges.has))
    return out, cache


def _gat_layer_backward(dout, params, cache, heads):
    edges, z, alpha, h = cache["edges"], cache["z"], cache["alpha"], cache["h"]
    n, d_in = h.shape
    hidden = params["W"].shape[1]
    hd = hidden // heads
    dq = dout * _lrelu_grad(cache["q"], ACT_SLOPE)
    dp, dgamma, dbeta = _bn_backward(dq, params["gamma"], cache["bn"])
    dU = cache["c"].T @ dp
    dc = dp @ params["U"].T
    dh = dc[:, :d_in].copy()
    dagg = dc[:, d_in:].reshape(n, heads, hd)
    dmsg = dagg[edges.dst]
    zsrc = z[edges.src]
    dalpha = (dmsg * zsrc).sum(axis=-1)
    dz = edges.scatter_src((alpha[:, :, None] * dmsg).reshape(len(edges), hidden)).reshape(n, heads, hd)
    de = alpha * (dalpha - edges.seg_sum(alpha * dalpha)[edges.dst])
    dpre = de * _lrelu_grad(cache["pre"], ATTN_SLOPE)
    ds_dst = edges.seg_sum(dpre)
    ds_src = edges.scatter_src(dpre)
    dz += ds_dst[:, :, None] * params["a_dst"][None] + ds_src[:, :, None] * params["a_src"][None]
    da_dst = np.einsum("nh,nhd->hd", ds_dst, z)
    da_src = np.einsum("nh,nhd->hd", ds_src, z)
    dzf = dz.reshape(n, hidden)
    dW = h.T @ dzf
    dh += dzf @ params["W"].T
    grads = dict(W=dW, a_src=da_src, a_dst=da_dst, U=dU, gamma=dgamma, beta=dbeta)
    return dh, grads


def _sage_forward(h, edges: Edges, params, state=None, training=False):
    mean_op = edges.mean_operator()
    m = mean_op @ h
    c = np.hstack([h, m])
    p = c @ params["U"]
    q, bn_cache = _bn_forward(p, params["gamma"], params["beta"], state, training)
    return _lrelu(q, ACT_SLOPE), dict(c=c, q=q, bn=bn_cache, mean_op=mean_op, d_in=h.shape[1])


def _sage_backward(dout, params, cache):
    dq = dout * _lrelu_grad(cache["q"], ACT_SLOPE)
    dp, dgamma, dbeta = _bn_backward(dq, params["gamma"], cache["bn"])
    dU = cache["c"].T @ dp
    dc = dp @ params["U"].T
    d_in = cache["d_in"]
    dh = dc[:, :d_in] + cache["mean_op"].T @ dc[:, d_in:]
    return dh, dict(U=dU, gamma=dgamma, beta=dbeta)


# --- model ----------------------------------------------------------------

def _glorot(rng, shape):
    fan_in, fan_out = shape[0], shape[-1]
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


@dataclasses.dataclass
class GnnModel:
    cfg: GnnConfig
    in_dim: int
    layers: list  # one dict of arrays per message-passing layer (GAT..., SAGE)
    head: dict  # regression head: w (out_dim,), b (1,)
    bn_state: list

    @classmethod
    def init(cls, in_dim: int, cfg: GnnConfig, rng: np.random.Generator) -> "GnnModel":
        hd = cfg.hidden // cfg.heads
        layers, states = [], []
        d = in_dim
        for _ in range(cfg.gat_layers):
            layers.append(dict(
                W=_glorot(rng, (d, cfg.hidden)),
                a_src=_glorot(rng, (cfg.heads, hd)),
                a_dst=_glorot(rng, (cfg.heads, hd)),
                U=_glorot(rng, (d + cfg.hidden, cfg.hidden)),
                gamma=np.ones(cfg.hidden), beta=np.zeros(cfg.hidden)))
            states.append(dict(mean=np.zeros(cfg.hidden), var=np.ones(cfg.hidden)))
            d = cfg.hidden
        layers.append(dict(U=_glorot(rng, (2 * d, cfg.out_dim)),
                           gamma=np.ones(cfg.out_dim), beta=np.zeros(cfg.out_dim)))
        states.append(dict(mean=np.zeros(cfg.out_dim), var=np.ones(cfg.out_dim)))
        head = dict(w=_glorot(rng, (cfg.out_dim, 1))[:, 0], b=np.zeros(1))
        return cls(cfg, in_dim, layers, head, states)

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for k, v in layer.items():
                yield f"layer{i}.{k}", v
        for k, v in self.head.items():
            yield f"head.{k}", v

    def forward(self, x, edge_sets, training=False, update_stats=True):
        """Run all layers; ``edge_sets`` gives one :class:`Edges` per layer."""
        caches = []
        h = x
        n_gat = len(self.layers) - 1
        for i in range(n_gat):
            state = self.bn_state[i] if (update_stats or not training) else None
            h, cache = gat_layer_forward(h, edge_sets[i], self.layers[i], self.cfg.heads, state, training)
            caches.append(cache)
        state = self.bn_state[-1] if (update_stats or not training) else None
        h, cache = _sage_forward(h, edge_sets[-1], self.layers[-1], state, training)
        caches.append(cache)
        return h, caches

    def backward(self, dh, caches):
        grads = [None] * len(self.layers)
        dh, grads[-1] = _sage_backward(dh, self.layers[-1], caches[-1])
        for i in range(len(self.layers) - 2, -1, -1):
            dh, grads[i] = _gat_layer_backward(dh, self.layers[i], caches[i], self.cfg.heads)
        return grads

    def embed(self, graph: GeoGraph) -> np.ndarray:
        """Inference-mode embeddings over the full neighbourhood."""
        edges = Edges.from_adjacency(graph.adjacency)
        h, _ = self.forward(graph.features, [edges] * len(self.layers), training=False)
        return h

    def attention(self, graph: GeoGraph) -> list[np.ndarray]:
        """Dense per-head attention matrices ``(heads, n, n)`` for every GAT layer."""
        edges = Edges.from_adjacency(graph.adjacency)
        _, caches = self.forward(graph.features, [edges] * len(self.layers), training=False)
        out = []
        for cache in caches[:-1]:
            a = np.zeros((self.cfg.heads, graph.n_nodes, graph.n_nodes))
            a[:, edges.dst, edges.src] = cache["alpha"].T
            out.append(a)
        return out


# --- loss -----------------------------------------------------------------

@dataclasses.dataclass
class Triplets:
    anchors: np.ndarray  # (B,)
    positives: np.ndarray  # (B,), -1 when the anchor has no neighbour
    negatives: np.ndarray  # (B, K)
    fallback: np.ndarray  # anchors whose negatives came from weak neighbours


@dataclasses.dataclass
class LossBreakdown:
    total: float
    contrastive: float
    regression: float


def sample_triplets(graph: GeoGraph, anchors, k_neg: int, rng: np.random.Generator,
                    edges: Edges | None = None) -> Triplets:
    """Weight-proportional neighbour positives and uniform non-neighbour negatives."""
    adj = graph.adjacency
    n = graph.n_nodes
    edges = edges or Edges.from_adjacency(adj)
    anchors = np.asarray(anchors, dtype=np.int64)
    pos = np.full(len(anchors), -1, dtype=np.int64)
    if len(edges):
        g = np.log(edges.weight) - np.log(-np.log(rng.random(len(edges))))
        order = np.lexsort((-g, edges.dst))
        best = np.full(n, -1, dtype=np.int64)
        best[edges.has] = edges.src[order[edges.start[edges.has]]]
        pos = best[anchors]
    linked = adj > 0
    neg = rng.integers(0, n, size=(len(anchors), k_neg))
    for _ in range(20):
        bad = linked[anchors[:, None], neg] | (neg == anchors[:, None])
        if not bad.any():
            break
        neg[bad] = rng.integers(0, n, size=int(bad.sum()))
    bad = linked[anchors[:, None], neg] | (neg == anchors[:, None])
    fallback = []
    for r in np.flatnonzero(bad.any(axis=1)):
        a = anchors[r]
        pool = np.flatnonzero(~linked[a])
        pool = pool[pool != a]
        if len(pool):
            neg[r] = rng.choice(pool, size=k_neg)
        else:
            nbrs = np.flatnonzero(linked[a])
            nbrs = nbrs[np.argsort(adj[a, nbrs], kind="stable")]
            weakest = nbrs[:max(1, min(k_neg, len(nbrs)))] if len(nbrs) else np.array([a])
            neg[r] = rng.choice(weakest, size=k_neg)
            fallback.append(a)
    if fallback:
        log.debug("negatives for %d anchors drawn from weakest neighbours", len(fallback))
    return Triplets(anchors, pos, neg, np.array(fallback, dtype=np.int64))


def triplet_regression_loss(h, head, trip: Triplets, targets, margin: float, gamma: float):
    """Loss terms plus gradients w.r.t. embeddings ``h`` and the head."""
    a, p, ng = trip.anchors, trip.positives, trip.negatives
    dh = np.zeros_like(h)
    ok = p >= 0
    contrastive = 0.0
    if ok.any():
        aa, pp, nn = a[ok], p[ok], ng[ok]
        b, k = nn.shape
        diff_p = h[aa] - h[pp]
        diff_n = h[aa][:, None, :] - h[nn]
        d_p = np.sqrt((diff_p ** 2).sum(-1) + DIST_EPS)
        d_n = np.sqrt((diff_n ** 2).sum(-1) + DIST_EPS)
        viol = d_p[:, None] - d_n + margin
        contrastive = float(np.maximum(viol, 0.0).mean())
        c = (viol > 0) / (b * k)
        gp = (c.sum(axis=1) / d_p)[:, None] * diff_p
        gn = (c / d_n)[:, :, None] * diff_n
        np.add.at(dh, aa, gp - gn.sum(axis=1))
        np.add.at(dh, pp, -gp)
        np.add.at(dh, nn.ravel(), gn.reshape(-1, h.shape[1]))
    y = np.asarray(targets, dtype=float)[a]
    pred = h[a] @ head["w"] + head["b"][0]
    resid = pred - y
    regression = float(np.mean(resid ** 2))
    dpred = 2.0 * resid / len(a) * gamma
    dhead = dict(w=h[a].T @ dpred, b=np.array([dpred.sum()]))
    np.add.at(dh, a, dpred[:, None] * head["w"][None, :])
    total = contrastive + gamma * regression
    return LossBreakdown(total, contrastive, regression), dh, dhead


def compute_loss(model: GnnModel, graph: GeoGraph, trip: Triplets, targets,
                 edge_sets=None, training=True, with_grad=False):
    """Total loss ``contrastive + gamma * regression`` for a fixed set of triplets."""
    if edge_sets is None:
        edge_sets = [Edges.from_adjacency(graph.adjacency)] * len(model.layers)
    h, caches = model.forward(graph.features, edge_sets, training=training, update_stats=False)
    loss, dh, dhead = triplet_regression_loss(h, model.head, trip, targets,
                                              model.cfg.contrastive_margin, model.cfg.gamma)
    if not with_grad:
        return loss
    grads = model.backward(dh, caches)
    return loss, grads, dhead


# --- training -------------------------------------------------------------

@dataclasses.dataclass
class TrainResult:
    model: GnnModel
    embeddings: np.ndarray
    trace: list  # (epoch, contrastive, regression, total)


def _adam_state(model):
    return dict(t=0, m=[np.zeros_like(v) for _, v in model.named_params()],
                v=[np.zeros_like(v) for _, v in model.named_params()])


def train_embedder(graph: GeoGraph, targets, cfg: GnnConfig | None = None) -> TrainResult:
    """Adam training on neighbour-sampled mini-batches; deterministic per seed."""
    cfg = cfg or GnnConfig()
    targets = np.asarray(targets, dtype=float)
    if len(targets) != graph.n_nodes:
        raise ValueError("need one regression target per node")
    rng = np.random.default_rng(cfg.seed)
    model = GnnModel.init(graph.features.shape[1], cfg, rng)
    full = Edges.from_adjacency(graph.adjacency)
    opt = _adam_state(model)
    b1, b2, eps = 0.9, 0.999, 1e-8
    trace = []
    n = graph.n_nodes
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        sums = np.zeros(3)
        batches = 0
        for start in range(0, n, cfg.batch_size):
            anchors = perm[start:start + cfg.batch_size]
            edge_sets = [full.sample(cfg.neighbor_sample_size, rng) for _ in model.layers]
            trip = sample_triplets(graph, anchors, cfg.negatives_per_anchor, rng, full)
            h, caches = model.forward(graph.features, edge_sets, training=True)
            loss, dh, dhead = triplet_regression_loss(h, model.head, trip, targets,
                                                      cfg.contrastive_margin, cfg.gamma)
            if not np.isfinite(loss.total):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}: contrastive={loss.contrastive}, "
                    f"regression={loss.regression}")
            grads = model.backward(dh, caches)
            flat_grads = [g[k] for g, layer in zip(grads, model.layers) for k in layer]
            flat_grads += [dhead[k] for k in model.head]
            opt["t"] += 1
            t = opt["t"]
            for j, ((_, p), g) in enumerate(zip(model.named_params(), flat_grads)):
                g = g + cfg.weight_decay * p
                opt["m"][j] = b1 * opt["m"][j] + (1 - b1) * g
                opt["v"][j] = b2 * opt["v"][j] + (1 - b2) * g * g
                mhat = opt["m"][j] / (1 - b1 ** t)
                vhat = opt["v"][j] / (1 - b2 ** t)
                p -= cfg.learning_rate * mhat / (np.sqrt(vhat) + eps)
            sums += (loss.contrastive, loss.regression, loss.total)
            batches += 1
        c, r, tot = sums / batches
        trace.append((epoch, c, r, tot))
    emb = model.embed(graph)
    if not np.all(np.isfinite(emb)):
        raise TrainingError("non-finite embeddings after training")
    return TrainResult(model, emb, trace)
