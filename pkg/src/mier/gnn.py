"""FlexER: a relation-aware GraphSAGE over the multiplex intent graph.

Each convolution averages incoming neighbour states separately per relation
(intra-layer kNN edges and inter-layer peer edges), maps each mean with its
own matrix and sums them into the neighbourhood vector. The node's own state
and that vector are concatenated and passed through a linear map, with ReLU
on every convolution except the last. A two-way softmax head reads the final
state of the target intent's nodes. One model is trained per target intent
over the same graph.
"""
from __future__ import annotations

import itertools
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import nn
from .core import DataError, IntentLabelMatrix, Resolution
from .graph import INTER, INTRA, RELATIONS, GraphConfig, MultiplexGraph, build_graph
from .metrics import f1_score

log = logging.getLogger(__name__)

# per-intent models of one run get seeds seed + stride * intent
INTENT_SEED_STRIDE = 7919
H1_GRID = (100, 150, 200, 250, 300, 350, 400, 450, 500)


@dataclass
class FlexerTrainConfig:
    target_intent: int = 0
    h1: int = 300
    layers: int = 2
    out_dim: int | None = 64
    hyper: nn.TrainHyper = field(default_factory=nn.TrainHyper)

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("need at least one convolution")
        if self.h1 < 1:
            raise ValueError("h1 must be positive")

    @property
    def seed(self):
        return self.hyper.seed

    def conv_dims(self):
        """Output width of each convolution.

        h1 for the first, h1/2 for the second of three; the last has
        ``out_dim`` (h1 for two layers, h1/2 for three, when that is None).
        """
        dims = [self.h1] + [max(1, self.h1 // 2)] * (self.layers - 1)
        if self.out_dim is not None:
            dims[-1] = self.out_dim
        return dims

    def to_json(self):
        d = asdict(self)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d["hyper"] = nn.TrainHyper(**d["hyper"])
        return cls(**d)


class ConvLayer:
    """One multiplex GraphSAGE convolution with its parameters."""

    def __init__(self, d_in, d_out, rng, name):
        self.d_in, self.d_out = d_in, d_out
        self.W_rel = {r: nn.Parameter(nn.glorot(rng, d_in, d_in), f"{name}.W_{r}")
                      for r in RELATIONS}
        # W^t acts on concat(h_v, h_N); kept as its two row blocks
        W = nn.glorot(rng, 2 * d_in, d_out)
        self.W_self = nn.Parameter(W[:d_in], f"{name}.W_self")
        self.W_neigh = nn.Parameter(W[d_in:], f"{name}.W_neigh")
        self.b = nn.Parameter(np.zeros((1, d_out)), f"{name}.b")

    def parameters(self):
        return [self.W_rel[INTRA], self.W_rel[INTER], self.W_self, self.W_neigh, self.b]

    @property
    def W(self):
        """The full update matrix applied to the concatenation."""
        return np.vstack([self.W_self.value, self.W_neigh.value])


class FlexerModel:
    def __init__(self, in_dims, cfg: FlexerTrainConfig, project_dim=None):
        if isinstance(in_dims, int):
            in_dims = [in_dims]
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.in_dims = list(in_dims)
        self.projections = None
        d = self.in_dims[0]
        if len(set(self.in_dims)) > 1 or project_dim is not None:
            if project_dim is None:
                raise DataError(f"layer dims differ {self.in_dims}; need project_dim")
            self.projections = [nn.Linear(di, project_dim, rng, name=f"proj{p}")
                                for p, di in enumerate(self.in_dims)]
            d = project_dim
        self.convs = []
        for t, d_out in enumerate(cfg.conv_dims()):
            self.convs.append(ConvLayer(d, d_out, rng, f"conv{t}"))
            d = d_out
        self.head = nn.Linear(d, 2, rng, name="head")
        self.best_epoch = None
        self.loss_trace = []
        self.valid_trace = []

    def parameters(self):
        ps = []
        if self.projections:
            for lin in self.projections:
                ps += lin.parameters()
        for c in self.convs:
            ps += c.parameters()
        return ps + self.head.parameters()


def input_states(model, graph: MultiplexGraph):
    if model.projections is None:
        return graph.stacked_features()
    return np.concatenate([lin.forward(f) for lin, f in zip(model.projections,
                                                            graph.features)])


def aggregate_neighborhood(graph: MultiplexGraph, states, node, conv: ConvLayer):
    """Neighbourhood vector of one node: sum over relations of W_r times the
    mean incoming-neighbour state (a relation without neighbours adds zero)."""
    out = np.zeros(conv.d_in)
    for r in RELATIONS:
        nbrs = graph.neighbor_sets(node, r)
        if nbrs:
            out = out + states[nbrs].mean(axis=0) @ conv.W_rel[r].value
    return out


def _stacked_update(conv: ConvLayer):
    """``[W_self; W_intra W_neigh; W_inter W_neigh]``: the whole convolution as
    one matrix acting on ``[h_v | m_intra | m_inter]``."""
    Wn = conv.W_neigh.value
    return np.vstack([conv.W_self.value] + [conv.W_rel[r].value @ Wn for r in RELATIONS])


def conv_layer(graph: MultiplexGraph, states, conv: ConvLayer, last: bool, rows=None,
               stacked=None):
    """Apply one convolution; returns the new states (and a cache for backward).

    With ``rows`` only those nodes are updated (used for the final layer,
    where only the target intent's nodes are read). ``stacked`` may carry a
    precomputed ``[h_v | m_intra | m_inter]`` for all nodes.
    """
    ops = {r: graph.mean_operator(r) for r in RELATIONS}
    if rows is not None:
        ops = {r: _row_operator(graph, r, rows) for r in RELATIONS}
    if stacked is None:
        own = states if rows is None else states[rows]
        stacked = np.hstack([own] + [ops[r] @ states for r in RELATIONS])
    z = stacked @ _stacked_update(conv)
    z += conv.b.value
    mask = None if last else z > 0
    out = z if last else np.maximum(z, 0.0, out=z)
    cache = dict(ops=ops, X=stacked, mask=mask, last=last, rows=rows,
                 n_states=len(states))
    return out, cache


def _row_operator(graph, relation, rows):
    key = (relation, rows.tobytes())
    cache = graph.cache.setdefault("row_ops", {})
    if key not in cache:
        cache[key] = graph.mean_operator(relation)[rows].tocsr()
    return cache[key]


def conv_backward(conv: ConvLayer, cache, g_out, need_input=True):
    """Accumulate parameter gradients; return the gradient w.r.t. input states
    (None when ``need_input`` is false)."""
    if cache["last"]:
        g_z = g_out
    else:
        g_z = np.multiply(g_out, cache["mask"], out=g_out if g_out.flags.writeable else None)
    d = conv.d_in
    G = cache["X"].T @ g_z
    Wn = conv.W_neigh.value
    conv.W_self.grad += G[:d]
    conv.b.grad += g_z.sum(axis=0, keepdims=True)
    for i, r in enumerate(RELATIONS, start=1):
        Gr = G[i * d:(i + 1) * d]
        conv.W_neigh.grad += conv.W_rel[r].value.T @ Gr
        conv.W_rel[r].grad += Gr @ Wn.T
    if not need_input:
        return None
    gX = g_z @ _stacked_update(conv).T
    if cache["rows"] is None:
        g_states = gX[:, :d].copy()
    else:
        g_states = np.zeros((cache["n_states"], d))
        g_states[cache["rows"]] = gX[:, :d]
    for i, r in enumerate(RELATIONS, start=1):
        g_states += cache["ops"][r].T @ gX[:, i * d:(i + 1) * d]
    return g_states


def _input_stack(graph: MultiplexGraph, states):
    # the raw features never change, so the first layer's input is built once
    cache = graph.cache.setdefault("input_stack", {})
    if "X" not in cache:
        cache["X"] = np.hstack([states] + [graph.mean_operator(r) @ states
                                           for r in RELATIONS])
        cache["X"].flags.writeable = False
    return cache["X"]


def forward(model: FlexerModel, graph: MultiplexGraph, target=None):
    """Logits (n, 2) for the nodes of the target intent layer, plus caches."""
    target = model.cfg.target_intent if target is None else target
    rows = np.arange(graph.n) + target * graph.n
    h = input_states(model, graph)
    caches = []
    L = len(model.convs)
    for t, conv in enumerate(model.convs):
        last = t == L - 1
        stacked = None
        if t == 0 and model.projections is None and not last:
            stacked = _input_stack(graph, h)
        h, cache = conv_layer(graph, h, conv, last, rows=rows if last else None,
                              stacked=stacked)
        caches.append(cache)
    logits = model.head.forward(h)
    return logits, caches


def backward(model: FlexerModel, graph: MultiplexGraph, caches, g_logits):
    """Backpropagate; returns the gradient w.r.t. the conv input states, or
    None when those are fixed features."""
    g = model.head.backward(g_logits)
    fixed_input = model.projections is None
    for t in reversed(range(len(model.convs))):
        g = conv_backward(model.convs[t], caches[t], g,
                          need_input=not (t == 0 and fixed_input))
    if model.projections is not None:
        off = 0
        for lin, f in zip(model.projections, graph.features):
            lin._x = f
            lin.backward(g[off:off + len(f)])
            off += len(f)
    return g


def loss_and_grad(model, graph, y, train_idx):
    """Summed CE over the training pairs of the target intent; fills grads."""
    for p in model.parameters():
        p.zero_grad()
    logits, caches = forward(model, graph)
    loss, g_sel = nn.softmax_ce(logits[train_idx], y[train_idx])
    g = np.zeros_like(logits)
    g[train_idx] = g_sel
    g_states = backward(model, graph, caches, g)
    return loss, logits, g_states


def predict_logits(model, graph, target=None):
    logits, _ = forward(model, graph, target)
    return logits


def predict_intent(model, graph, pair_idx=None):
    """Label and two-way likelihood for pairs of the target intent.

    Labels are the argmax of the softmax, ties to 0.
    """
    logits = predict_logits(model, graph)
    if pair_idx is not None:
        logits = logits[np.atleast_1d(pair_idx)]
    prob = nn.softmax(logits)
    labels = (logits[:, 1] > logits[:, 0]).astype(np.int8)
    return labels, prob


def train_flexer(graph: MultiplexGraph, labels: IntentLabelMatrix,
                 cfg: FlexerTrainConfig) -> FlexerModel:
    """Full-graph training for one target intent; keeps the best-validation-F1 epoch."""
    p = cfg.target_intent
    if labels.P != graph.P:
        raise DataError(f"labels have {labels.P} intents but the graph has {graph.P} layers")
    if not 0 <= p < graph.P:
        raise DataError(f"target intent {p} out of range for P={graph.P}")
    if labels.n_pairs != graph.n:
        raise DataError(f"{labels.n_pairs} labelled pairs for a graph of {graph.n}")
    y = labels.labels[:, p].astype(np.float64)
    tr, va = labels.indices("train"), labels.indices("valid")
    if y[tr].sum() == 0 or y[tr].sum() == len(tr):
        raise DataError(f"intent {p}: training labels are all one class")
    model = FlexerModel(graph.dims, cfg, graph.project_dim)
    params = model.parameters()
    best, best_snap = -1.0, None
    for epoch in range(cfg.hyper.epochs):
        loss, logits, _ = loss_and_grad(model, graph, y, tr)
        nn.check_finite(loss, *(q.grad for q in params), where=f"flexer epoch {epoch}")
        if len(va):
            score = f1_score((logits[va, 1] > logits[va, 0]).astype(np.int8), y[va])
        else:
            score = -loss
        model.loss_trace.append(loss)
        model.valid_trace.append(score)
        if score > best:
            best, best_snap, model.best_epoch = score, [q.value.copy() for q in params], epoch
        nn.adam_step(params, cfg.hyper)
    # the state after the last update has not been scored yet
    logits = predict_logits(model, graph)
    if len(va):
        score = f1_score((logits[va, 1] > logits[va, 0]).astype(np.int8), y[va])
        if score > best:
            best, best_snap, model.best_epoch = score, None, cfg.hyper.epochs
    if best_snap is not None:
        for q, v in zip(params, best_snap):
            q.value[...] = v
    return model


def save_model(model: FlexerModel, path):
    header = json.dumps({"config": json.loads(model.cfg.to_json()),
                         "in_dims": model.in_dims,
                         "project_dim": None if model.projections is None
                         else model.projections[0].W.shape[1],
                         "best_epoch": model.best_epoch}, sort_keys=True)
    nn.save_checkpoint(model.parameters(), path, header.encode())


def load_model(path) -> FlexerModel:
    config, _ = nn.read_checkpoint(path)
    meta = json.loads(config)
    cfg = meta["config"]
    cfg["hyper"] = nn.TrainHyper(**cfg["hyper"])
    model = FlexerModel(meta["in_dims"], FlexerTrainConfig(**cfg), meta["project_dim"])
    nn.load_checkpoint(model.parameters(), path)
    model.best_epoch = meta["best_epoch"]
    return model


def run_mier(embeddings, labels: IntentLabelMatrix, h1=300, k=4, layers=2, hyper=None,
             graph=None, split="test", out_dim=64):
    """Train one FlexER model per intent and resolve the pairs of ``split``.

    Returns ``(resolutions, predicted label matrix over all pairs, models)``.
    """
    hyper = hyper or nn.TrainHyper()
    if graph is None:
        graph = build_graph(embeddings, GraphConfig(k=k))
    preds = np.zeros((graph.n, graph.P), dtype=np.int8)
    models = []
    for p in range(graph.P):
        cfg = FlexerTrainConfig(target_intent=p, h1=h1, layers=layers, out_dim=out_dim,
                                hyper=replace(hyper, seed=hyper.seed + INTENT_SEED_STRIDE * p))
        m = train_flexer(graph, labels, cfg)
        preds[:, p] = predict_intent(m, graph)[0]
        models.append(m)
    ids = labels.indices(split)
    res = [Resolution.from_labels(p, preds[ids, p], ids) for p in range(graph.P)]
    return res, preds, models


def sweep(embeddings, labels: IntentLabelMatrix, h1_grid=H1_GRID, k_grid=(0, 2, 4, 6, 8, 10),
          layer_grid=(2, 3), hyper=None, out_dim=64):
    """Grid search over (h1, k, L); per intent the best config by validation F1.

    Graphs are built once per k and reused across h1 and L. The report lists
    every grid point and, per intent, the best k=0 result against the best
    k>0 result.
    """
    hyper = hyper or nn.TrainHyper()
    va, te = labels.indices("valid"), labels.indices("test")
    rows = []
    best = {}
    for k in k_grid:
        t0 = time.perf_counter()
        graph = build_graph(embeddings, GraphConfig(k=k))
        build_s = time.perf_counter() - t0
        for h1, L in itertools.product(h1_grid, layer_grid):
            for p in range(graph.P):
                seed = hyper.seed + INTENT_SEED_STRIDE * p
                cfg = FlexerTrainConfig(target_intent=p, h1=h1, layers=L, out_dim=out_dim,
                                        hyper=replace(hyper, seed=seed))
                t0 = time.perf_counter()
                m = train_flexer(graph, labels, cfg)
                pred = predict_intent(m, graph)[0]
                row = {"intent": p, "k": k, "h1": h1, "layers": L,
                       "valid_f1": f1_score(pred[va], labels.labels[va, p]),
                       "test_f1": f1_score(pred[te], labels.labels[te, p]),
                       "best_epoch": m.best_epoch,
                       "train_seconds": time.perf_counter() - t0,
                       "graph_seconds": build_s}
                rows.append(row)
                if p not in best or row["valid_f1"] > best[p]["valid_f1"]:
                    best[p] = dict(row, predictions=pred)
    knn_effect = {}
    for p in best:
        r0 = [r for r in rows if r["intent"] == p and r["k"] == 0]
        rk = [r for r in rows if r["intent"] == p and r["k"] > 0]
        pick = lambda rs: max(rs, key=lambda r: r["valid_f1"]) if rs else None
        b0, bk = pick(r0), pick(rk)
        knn_effect[p] = {"k0_test_f1": b0 and b0["test_f1"],
                         "best_k": bk and bk["k"], "best_k_test_f1": bk and bk["test_f1"]}
    return best, {"grid": rows, "knn_effect": knn_effect}
