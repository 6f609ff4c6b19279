"""Degree-parameterized message-passing encoder for job DAGs.

Each layer updates node ``i`` as

    x_i <- ELU(W_self[d] x_i + W_neigh[d] * sum_{j in N(i)} x_j + b[d])

where ``N(i)`` holds both parents and children and ``d`` is ``|N(i)|``
clamped to ``max_degree``. The graph vector is the mean of the last layer's
node states. Training minimizes a sum of triplet losses, one per target
feature, with hard pairs picked by a multi-similarity style miner. Forward
and backward passes are plain numpy so gradients can be checked exactly.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import dataclass, asdict, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DataError, TrainingDiverged
from .graph import JobGraph

log = logging.getLogger(__name__)

MODEL_FORMAT = "tracemine-encoder/1"


@dataclass
class TrainConfig:
    batch_size: int = 128
    weight_decay: float = 1e-4
    dropout_p: float = 0.5
    learning_rate: float = 1e-3
    margin: float = 0.1
    miner_epsilon: float = 0.1
    max_epochs: int = 200
    patience: int = 10
    n_label_bins: int = 10
    seed: int = 0
    hidden_dim: int = 64
    n_layers: int = 4
    max_degree: int = 10

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError("dropout_p must lie in [0, 1)")
        if self.margin <= 0:
            raise ConfigError("margin must be > 0")
        if self.n_label_bins < 2:
            raise ConfigError("n_label_bins must be >= 2")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Embedding:
    job_name: str
    vector: np.ndarray


class EncoderModel:
    """Weights per (layer, clamped degree) plus the node-feature scaler."""

    def __init__(self, in_dim: int, hidden_dim: int, n_layers: int, max_degree: int):
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        self.n_layers = n_layers
        self.max_degree = max_degree
        dims = self.layer_dims()
        nd = max_degree + 1
        self.self_w = [np.zeros((nd, i, o)) for i, o in dims]
        self.neigh_w = [np.zeros((nd, i, o)) for i, o in dims]
        self.bias = [np.zeros((nd, o)) for _, o in dims]
        self.scaler_mean = np.zeros(in_dim)
        self.scaler_std = np.ones(in_dim)

    def layer_dims(self) -> list[tuple[int, int]]:
        return [(self.in_dim if k == 0 else self.hidden_dim, self.hidden_dim) for k in range(self.n_layers)]

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in fixed order: per layer self, neighbor, bias."""
        out = []
        for k in range(self.n_layers):
            out += [self.self_w[k], self.neigh_w[k], self.bias[k]]
        return out

    def decayed(self) -> list[bool]:
        return [True, True, False] * self.n_layers

    def copy(self) -> "EncoderModel":
        return copy.deepcopy(self)

    def fit_scaler(self, graphs: Sequence[JobGraph]) -> None:
        feats = np.vstack([g.feature_matrix() for g in graphs])
        self.scaler_mean = feats.mean(axis=0)
        std = feats.std(axis=0)
        self.scaler_std = np.where(std > 0, std, 1.0)

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "in_dim": self.in_dim,
            "hidden_dim": self.hidden_dim,
            "n_layers": self.n_layers,
            "max_degree": self.max_degree,
            "scaler": {"mean": self.scaler_mean.tolist(), "std": self.scaler_std.tolist()},
            # arrays indexed [degree][in][out] and [degree][out]
            "layers": [
                {"self_weight": self.self_w[k].tolist(), "neighbor_weight": self.neigh_w[k].tolist(),
                 "bias": self.bias[k].tolist()}
                for k in range(self.n_layers)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderModel":
        if d.get("format") != MODEL_FORMAT:
            raise DataError(f"unknown model format {d.get('format')!r}")
        m = cls(d["in_dim"], d["hidden_dim"], d["n_layers"], d["max_degree"])
        m.scaler_mean = np.array(d["scaler"]["mean"], dtype=float)
        m.scaler_std = np.array(d["scaler"]["std"], dtype=float)
        for k, layer in enumerate(d["layers"]):
            m.self_w[k] = np.array(layer["self_weight"], dtype=float).reshape(m.self_w[k].shape)
            m.neigh_w[k] = np.array(layer["neighbor_weight"], dtype=float).reshape(m.neigh_w[k].shape)
            m.bias[k] = np.array(layer["bias"], dtype=float).reshape(m.bias[k].shape)
        return m

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "EncoderModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def init_model(seed: int, in_dim: int = 3, hidden_dim: int = 64, n_layers: int = 4,
               max_degree: int = 10) -> EncoderModel:
    """Glorot-uniform weights, zero biases."""
    if min(in_dim, hidden_dim, n_layers) < 1 or max_degree < 0:
        raise ConfigError("model dimensions must be positive")
    m = EncoderModel(in_dim, hidden_dim, n_layers, max_degree)
    rng = np.random.default_rng(seed)
    for k, (fan_in, fan_out) in enumerate(m.layer_dims()):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        m.self_w[k] = rng.uniform(-limit, limit, m.self_w[k].shape)
        m.neigh_w[k] = rng.uniform(-limit, limit, m.neigh_w[k].shape)
    return m


# ---------------------------------------------------------------------------
# batching


def _scaled(graph: JobGraph, model: EncoderModel) -> np.ndarray:
    f = graph.feature_matrix()
    if f.shape[1] != model.in_dim:
        raise DataError(f"node features have {f.shape[1]} dims, model expects {model.in_dim}")
    return (f - model.scaler_mean) / model.scaler_std


class GraphBatch:
    """Several graphs stacked into one block-diagonal node set."""

    def __init__(self, feats: Sequence[np.ndarray], edges: Sequence[np.ndarray], max_degree: int):
        sizes = np.array([f.shape[0] for f in feats], dtype=int)
        if np.any(sizes == 0):
            raise DataError("cannot encode a graph without nodes")
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        self.n_graphs = len(feats)
        self.n_nodes = int(sizes.sum())
        self.x = np.vstack(feats)
        rows, cols = [], []
        for off, e in zip(offsets, edges):
            e = np.asarray(e, dtype=int).reshape(-1, 2)
            rows.append(e[:, 0] + off)
            cols.append(e[:, 1] + off)
        r = np.concatenate(rows) if rows else np.zeros(0, dtype=int)
        c = np.concatenate(cols) if cols else np.zeros(0, dtype=int)
        n = self.n_nodes
        # undirected aggregation over parents and children
        a = sp.coo_matrix((np.ones(2 * r.size), (np.concatenate([r, c]), np.concatenate([c, r]))), shape=(n, n))
        self.adj = a.tocsr()
        self.adj.sum_duplicates()
        self.adj.data[:] = 1.0
        degree = np.diff(self.adj.indptr)
        bucket = np.minimum(degree, max_degree)
        self.buckets = [(int(d), np.flatnonzero(bucket == d)) for d in np.unique(bucket)]
        graph_of = np.repeat(np.arange(self.n_graphs), sizes)
        self.pool = sp.csr_matrix((1.0 / sizes[graph_of], (graph_of, np.arange(n))), shape=(self.n_graphs, n))

    @classmethod
    def from_graphs(cls, graphs: Sequence[JobGraph], model: EncoderModel) -> "GraphBatch":
        feats = [_scaled(g, model) for g in graphs]
        edges = [np.array(g.edge_index(), dtype=int).reshape(-1, 2) for g in graphs]
        return cls(feats, edges, model.max_degree)


class _Prepared:
    """Per-graph scaled features and edge positions, cached across epochs."""

    def __init__(self, graphs: Sequence[JobGraph], model: EncoderModel):
        self.feats = [_scaled(g, model) for g in graphs]
        self.edges = [np.array(g.edge_index(), dtype=int).reshape(-1, 2) for g in graphs]
        self.max_degree = model.max_degree

    def batch(self, idx) -> GraphBatch:
        return GraphBatch([self.feats[i] for i in idx], [self.edges[i] for i in idx], self.max_degree)


# ---------------------------------------------------------------------------
# forward / backward


def elu(z):
    return np.where(z > 0, z, np.expm1(np.minimum(z, 0)))


def dropout_mask(rng: np.random.Generator, shape, p: float) -> np.ndarray:
    if p == 0:
        return np.ones(shape)
    return (rng.random(shape) >= p) / (1.0 - p)


def forward_batch(model: EncoderModel, batch: GraphBatch, mask: np.ndarray | None = None):
    """Graph vectors (n_graphs, hidden_dim) and the cache needed by backward."""
    if batch.x.shape[1] != model.in_dim:
        raise DataError(f"node features have {batch.x.shape[1]} dims, model expects {model.in_dim}")
    x = batch.x
    cache = []
    for k in range(model.n_layers):
        h = batch.adj @ x
        z = np.empty((batch.n_nodes, model.hidden_dim))
        for d, idx in batch.buckets:
            z[idx] = x[idx] @ model.self_w[k][d] + h[idx] @ model.neigh_w[k][d] + model.bias[k][d]
        cache.append((x, h, z))
        x = elu(z)
    g = batch.pool @ x
    if mask is not None:
        g = g * mask
    return g, (cache, mask)


def backward_batch(model: EncoderModel, batch: GraphBatch, state, d_g: np.ndarray) -> list[np.ndarray]:
    cache, mask = state
    if mask is not None:
        d_g = d_g * mask
    d_x = batch.pool.T @ d_g
    grads: list[np.ndarray] = []
    for k in reversed(range(model.n_layers)):
        x, h, z = cache[k]
        d_z = d_x * np.where(z > 0, 1.0, np.exp(np.minimum(z, 0)))
        gw1 = np.zeros_like(model.self_w[k])
        gw2 = np.zeros_like(model.neigh_w[k])
        gb = np.zeros_like(model.bias[k])
        d_in = np.zeros_like(x)
        d_h = np.zeros_like(h)
        for d, idx in batch.buckets:
            dz = d_z[idx]
            gw1[d] = x[idx].T @ dz
            gw2[d] = h[idx].T @ dz
            gb[d] = dz.sum(axis=0)
            d_in[idx] = dz @ model.self_w[k][d].T
            d_h[idx] = dz @ model.neigh_w[k][d].T
        d_x = d_in + batch.adj.T @ d_h
        grads = [gw1, gw2, gb] + grads
    return grads


def forward(model: EncoderModel, graph: JobGraph, train_mode: bool = False,
            rng: np.random.Generator | None = None, dropout_p: float = 0.5) -> Embedding:
    batch = GraphBatch.from_graphs([graph], model)
    mask = None
    if train_mode:
        rng = rng if rng is not None else np.random.default_rng()
        mask = dropout_mask(rng, (1, model.hidden_dim), dropout_p)
    g, _ = forward_batch(model, batch, mask)
    return Embedding(graph.job_name, g[0])


def encode_all(model: EncoderModel, graphs: Sequence[JobGraph], batch_size: int = 256) -> np.ndarray:
    """Eval-mode vectors, one row per graph in input order."""
    prep = _Prepared(graphs, model)
    out = np.zeros((len(graphs), model.hidden_dim))
    for start in range(0, len(graphs), batch_size):
        idx = range(start, min(start + batch_size, len(graphs)))
        out[start:start + len(idx)], _ = forward_batch(model, prep.batch(idx))
    return out


# ---------------------------------------------------------------------------
# labels, mining, loss


def quantile_labels(values, n_bins: int) -> np.ndarray:
    """Equal-frequency bin index per value; ties split by stable order."""
    if n_bins < 2:
        raise ConfigError("n_bins must be >= 2")
    v = np.asarray(values, dtype=float)
    if v.size == 0 or np.all(v == v[0]):
        return np.zeros(v.size, dtype=int)
    rank = np.empty(v.size, dtype=int)
    rank[np.argsort(v, kind="stable")] = np.arange(v.size)
    return (rank * n_bins) // v.size


def pairwise_distances(emb: np.ndarray) -> np.ndarray:
    diff = emb[:, None, :] - emb[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def euclidean(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DataError(f"dimension mismatch {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def mine_masks(dist: np.ndarray, labels, epsilon: float):
    """Kept (anchor, positive) and (anchor, negative) pairs as boolean masks."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    neg = ~same
    min_neg = np.where(neg, dist, np.inf).min(axis=1)
    max_pos = np.where(pos, dist, -np.inf).max(axis=1)
    keep_pos = pos & (dist > min_neg[:, None] - epsilon)
    keep_neg = neg & (dist < max_pos[:, None] + epsilon)
    return keep_pos, keep_neg


def mine_triplets(emb: np.ndarray, labels, epsilon: float) -> np.ndarray:
    """(anchor, positive, negative) index rows from the kept pairs per anchor."""
    keep_pos, keep_neg = mine_masks(pairwise_distances(np.asarray(emb, dtype=float)), labels, epsilon)
    a, p, n = np.nonzero(keep_pos[:, :, None] & keep_neg[:, None, :])
    return np.column_stack([a, p, n]).astype(int)


def triplet_loss(triplets, emb: np.ndarray, margin: float) -> float:
    """Mean hinge max(0, d(a,p) - d(a,n) + margin); 0 for no triplets."""
    t = np.asarray(triplets, dtype=int).reshape(-1, 3)
    if t.shape[0] == 0:
        return 0.0
    emb = np.asarray(emb, dtype=float)
    d_ap = np.linalg.norm(emb[t[:, 0]] - emb[t[:, 1]], axis=1)
    d_an = np.linalg.norm(emb[t[:, 0]] - emb[t[:, 2]], axis=1)
    return float(np.mean(np.maximum(0.0, d_ap - d_an + margin)))


def _pair_grad(emb, dist, coef):
    """Gradient of sum_ab coef[a,b] * dist[a,b] with respect to emb."""
    w = np.divide(coef, dist, out=np.zeros_like(coef), where=dist > 0)
    sym = w + w.T
    return sym.sum(axis=1)[:, None] * emb - sym @ emb


def masked_triplet_loss(emb, dist, keep_pos, keep_neg, margin):
    """Loss and embedding gradient for all triplets implied by the masks."""
    keep = keep_pos[:, :, None] & keep_neg[:, None, :]
    count = int(keep.sum())
    if count == 0:
        return 0.0, np.zeros_like(emb)
    hinge = dist[:, :, None] - dist[:, None, :] + margin
    active = keep & (hinge > 0)
    loss = float(np.sum(hinge, where=active)) / count
    coef = (active.sum(axis=2) - active.sum(axis=1)) / count
    return loss, _pair_grad(emb, dist, coef)


def _weight_penalty(model: EncoderModel) -> float:
    return sum(float(np.sum(p * p)) for p, dec in zip(model.params(), model.decayed()) if dec)


def batch_objective(model: EncoderModel, batch: GraphBatch, labels: np.ndarray, cfg: TrainConfig,
                    mask: np.ndarray | None = None, mined=None, with_grad: bool = True):
    """Summed triplet loss over target columns of ``labels`` plus weight decay.

    ``mined`` (the third return value) may be passed back in to freeze the
    pair selection, which finite-difference checks rely on.
    """
    emb, state = forward_batch(model, batch, mask)
    dist = pairwise_distances(emb)
    labels = np.asarray(labels).reshape(batch.n_graphs, -1)
    if mined is None:
        mined = [mine_masks(dist, labels[:, t], cfg.miner_epsilon) for t in range(labels.shape[1])]
    loss = cfg.weight_decay * _weight_penalty(model)
    d_emb = np.zeros_like(emb)
    for keep_pos, keep_neg in mined:
        term, grad = masked_triplet_loss(emb, dist, keep_pos, keep_neg, cfg.margin)
        loss += term
        d_emb += grad
    if not with_grad:
        return loss, None, mined
    grads = backward_batch(model, batch, state, d_emb)
    for g, p, dec in zip(grads, model.params(), model.decayed()):
        if dec:
            g += 2.0 * cfg.weight_decay * p
    return loss, grads, mined


# ---------------------------------------------------------------------------
# optimisation


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def target_labels(targets: np.ndarray, n_bins: int) -> np.ndarray:
    targets = np.asarray(targets, dtype=float)
    return np.column_stack([quantile_labels(targets[:, t], n_bins) for t in range(targets.shape[1])])


def _chunks(idx, size):
    return [idx[i:i + size] for i in range(0, len(idx), size)]


def train(model: EncoderModel, train_graphs: Sequence[JobGraph], train_targets: np.ndarray,
          val_graphs: Sequence[JobGraph], val_targets: np.ndarray, cfg: TrainConfig):
    """Adam on the additive triplet objective with early stopping.

    ``*_targets`` hold one column per target feature; each column is binned
    into ``cfg.n_label_bins`` quantile labels. Returns the model from the
    epoch with the lowest validation loss, and the history.
    """
    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    train_prep = _Prepared(train_graphs, model)
    train_labels = target_labels(train_targets, cfg.n_label_bins)
    val_prep = _Prepared(val_graphs, model)
    val_labels = target_labels(val_targets, cfg.n_label_bins)
    val_batches = [(val_prep.batch(b), val_labels[b]) for b in _chunks(np.arange(len(val_graphs)), cfg.batch_size)
                   if len(b) >= 2]

    opt = Adam(model.params(), lr=cfg.learning_rate)
    hist = TrainHistory()
    best_val = math.inf
    best_params = [p.copy() for p in model.params()]
    wait = 0
    for epoch in range(cfg.max_epochs):
        losses = []
        for b in _chunks(rng.permutation(len(train_graphs)), cfg.batch_size):
            if len(b) < 2:
                continue
            batch = train_prep.batch(b)
            mask = dropout_mask(rng, (len(b), model.hidden_dim), cfg.dropout_p)
            loss, grads, _ = batch_objective(model, batch, train_labels[b], cfg, mask)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}; lower learning_rate ({cfg.learning_rate})"
                )
            opt.step(grads)
            losses.append(loss)
        val = 0.0
        for batch, lab in val_batches:
            val += batch_objective(model, batch, lab, cfg, with_grad=False)[0]
        val /= max(1, len(val_batches))
        hist.train_loss.append(float(np.mean(losses)) if losses else 0.0)
        hist.val_loss.append(float(val))
        log.info("epoch %d train %.5f val %.5f", epoch, hist.train_loss[-1], val)
        if val < best_val:
            best_val = val
            best_params = [p.copy() for p in model.params()]
            hist.best_epoch = epoch
            wait = 0
        else:
            wait += 1
            if wait >= cfg.patience:
                hist.stopped_early = True
                break
    for p, best in zip(model.params(), best_params):
        p[...] = best
    return model, hist


# ---------------------------------------------------------------------------
# files


def write_embeddings(path, names: Sequence[str], emb: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["job_name"] + [f"e{i}" for i in range(emb.shape[1])])
        for name, row in zip(names, emb):
            w.writerow([name] + [repr(float(v)) for v in row])


def read_embeddings(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = [r[0] for r in rows[1:]]
    emb = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return names, emb.reshape(len(names), len(rows[0]) - 1)
