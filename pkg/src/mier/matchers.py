"""Baseline matchers: one binary matcher per intent (in-parallel), a shared
multi-label matcher, and the naive one-size-fits-all copy of the equivalence
decision. Trained matchers also supply the intent-based pair representations
that seed the intent graph."""
from __future__ import annotations

import json
import logging
from dataclasses import replace

import numpy as np

from . import nn
from .core import DataError, IntentLabelMatrix, Resolution
from .embedding import PairEmbeddingSet
from .metrics import f1_score

log = logging.getLogger(__name__)


class BinaryMatcher:
    """``linear(d, r) -> ReLU -> linear(r, 2)``; softmax gives the match likelihood."""

    def __init__(self, d, hidden=128, seed=0, intent_id=None):
        rng = np.random.default_rng(seed)
        self.d, self.hidden, self.intent_id = d, hidden, intent_id
        self.l1 = nn.Linear(d, hidden, rng, name="hidden")
        self.act = nn.ReLU()
        self.out = nn.Linear(hidden, 2, rng, name="out")
        self.net = nn.Sequential(self.l1, self.act, self.out)
        self.loss_trace = []
        self.best_epoch = None

    def parameters(self):
        return self.net.parameters()

    def logits(self, x):
        return self.net.forward(np.asarray(x, dtype=np.float64))

    def hidden_activation(self, x, layer="hidden"):
        pre = self.l1.forward(np.asarray(x, dtype=np.float64))
        return pre if layer == "pre_activation" else nn.relu(pre)

    def predict_proba(self, x):
        return nn.softmax(self.logits(x))[:, 1]

    def predict(self, x):
        # argmax; ties go to class 0
        z = self.logits(x)
        return (z[:, 1] > z[:, 0]).astype(np.int8)


class MultiLabelMatcher:
    """Shared trunk with one ReLU branch and a single-logit head per intent."""

    def __init__(self, d, P, hidden=128, branch=128, seed=0):
        rng = np.random.default_rng(seed)
        self.d, self.P, self.hidden, self.branch_dim = d, P, hidden, branch
        self.trunk = nn.Sequential(nn.Linear(d, hidden, rng, name="trunk"), nn.ReLU())
        self.branches = [nn.Sequential(nn.Linear(hidden, branch, rng, name=f"branch{p}"),
                                       nn.ReLU()) for p in range(P)]
        self.heads = [nn.Linear(branch, 1, rng, name=f"head{p}") for p in range(P)]
        self.loss_trace = []
        self.best_epoch = None

    def parameters(self):
        ps = self.trunk.parameters()
        for b, h in zip(self.branches, self.heads):
            ps += b.parameters() + h.parameters()
        return ps

    def forward(self, x):
        t = self.trunk.forward(np.asarray(x, dtype=np.float64))
        self._branch_out = [b.forward(t) for b in self.branches]
        return np.concatenate([h.forward(o) for h, o in zip(self.heads, self._branch_out)],
                              axis=1)

    def backward(self, g):
        gt = 0.0
        for p, (b, h) in enumerate(zip(self.branches, self.heads)):
            gt = gt + b.backward(h.backward(g[:, p:p + 1]))
        self.trunk.backward(gt)

    def logits(self, x):
        return self.forward(x)

    def branch_activations(self, x):
        self.forward(x)
        return [o.copy() for o in self._branch_out]

    def predict_proba(self, x):
        return nn.sigmoid(self.forward(x))

    def predict(self, x):
        # sigma(z) >= 0.5 exactly when z >= 0
        return (self.forward(x) >= 0).astype(np.int8)


def _snapshot(params):
    return [p.value.copy() for p in params]


def _restore(params, snap):
    for p, v in zip(params, snap):
        p.value[...] = v


def _batches(n, batch_size, rng):
    if batch_size is None or batch_size >= n:
        yield np.arange(n)
        return
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def _check_intent_labels(y, p):
    if y.sum() == 0:
        raise DataError(f"intent {p} has no positive training labels")


def train_binary(x, labels: IntentLabelMatrix, p, hyper: nn.TrainHyper, hidden=128,
                 batch_size=None) -> BinaryMatcher:
    """Train one matcher with CE on intent ``p``; keep the epoch with best valid F1."""
    x = np.asarray(x, dtype=np.float64)
    tr, va = labels.indices("train"), labels.indices("valid")
    y_tr = labels.labels[tr, p].astype(np.float64)
    _check_intent_labels(y_tr, p)
    m = BinaryMatcher(x.shape[1], hidden, seed=hyper.seed, intent_id=p)
    params = m.parameters()
    opt = nn.Adam(params, hyper)
    rng = np.random.default_rng(hyper.seed + 1)
    best, best_snap = -1.0, _snapshot(params)
    for epoch in range(hyper.epochs):
        total = 0.0
        for idx in _batches(len(tr), batch_size, rng):
            opt.zero_grad()
            loss, g = nn.softmax_ce(m.net.forward(x[tr[idx]]), y_tr[idx])
            m.net.backward(g)
            nn.check_finite(*(q.grad for q in params), where=f"matcher {p} epoch {epoch}")
            opt.step()
            total += loss
        m.loss_trace.append(total)
        score = f1_score(m.predict(x[va]), labels.labels[va, p]) if len(va) else -total
        if score > best:
            best, best_snap, m.best_epoch = score, _snapshot(params), epoch
    _restore(params, best_snap)
    return m


def train_in_parallel(embeddings, labels: IntentLabelMatrix, hyper: nn.TrainHyper,
                      hidden=128, batch_size=None) -> list[BinaryMatcher]:
    """One independent binary matcher per intent.

    ``embeddings`` is either a single (intent-agnostic) set or one set per intent.
    """
    sets = embeddings if isinstance(embeddings, (list, tuple)) else [embeddings] * labels.P
    if len(sets) != labels.P:
        raise DataError(f"{len(sets)} embedding sets for {labels.P} intents")
    out = []
    for p, s in enumerate(sets):
        x = s.aligned() if isinstance(s, PairEmbeddingSet) else s
        h = replace(hyper, seed=hyper.seed + 1000 * p)
        out.append(train_binary(x, labels, p, h, hidden, batch_size))
        log.info("intent %d: best epoch %d", p, out[-1].best_epoch)
    return out


def train_multilabel(embeddings, labels: IntentLabelMatrix, hyper: nn.TrainHyper,
                     hidden=128, branch=128, weights=None, batch_size=None
                     ) -> MultiLabelMatcher:
    """Joint matcher trained with the weighted multi-label loss; selection by mean valid F1."""
    x = embeddings.aligned() if isinstance(embeddings, PairEmbeddingSet) else embeddings
    x = np.asarray(x, dtype=np.float64)
    tr, va = labels.indices("train"), labels.indices("valid")
    y_tr = labels.labels[tr].astype(np.float64)
    for p in range(labels.P):
        _check_intent_labels(y_tr[:, p], p)
    m = MultiLabelMatcher(x.shape[1], labels.P, hidden, branch, seed=hyper.seed)
    params = m.parameters()
    opt = nn.Adam(params, hyper)
    rng = np.random.default_rng(hyper.seed + 1)
    best, best_snap = -1.0, _snapshot(params)
    for epoch in range(hyper.epochs):
        total = 0.0
        for idx in _batches(len(tr), batch_size, rng):
            opt.zero_grad()
            z = m.forward(x[tr[idx]])
            total += float(nn.weighted_bce_loss(z, y_tr[idx], weights).sum())
            m.backward(nn.weighted_bce_grad(z, y_tr[idx], weights))
            nn.check_finite(*(q.grad for q in params), where=f"multi-label epoch {epoch}")
            opt.step()
        m.loss_trace.append(total)
        if len(va):
            pred = m.predict(x[va])
            score = np.mean([f1_score(pred[:, p], labels.labels[va, p])
                             for p in range(labels.P)])
        else:
            score = -total
        if score > best:
            best, best_snap, m.best_epoch = score, _snapshot(params), epoch
    _restore(params, best_snap)
    return m


def predict(matchers, x, pair_ids=None):
    """Resolutions and match likelihoods for the rows of ``x``.

    ``matchers`` is a list of binary matchers (one per intent) or a single
    multi-label matcher. Returns ``(resolutions, scores)`` with ``scores`` of
    shape ``(n, P)``.
    """
    x = np.asarray(x, dtype=np.float64)
    ids = np.arange(len(x)) if pair_ids is None else np.asarray(pair_ids)
    if isinstance(matchers, MultiLabelMatcher):
        scores = matchers.predict_proba(x)
        preds = (matchers.forward(x) >= 0).astype(np.int8)
    else:
        if isinstance(matchers, BinaryMatcher):
            matchers = [matchers]
        scores = np.stack([m.predict_proba(x) for m in matchers], axis=1)
        preds = np.stack([m.predict(x) for m in matchers], axis=1)
    res = [Resolution.from_labels(p, preds[:, p], ids) for p in range(preds.shape[1])]
    return res, scores


def naive_multi_intent(equivalence: Resolution, P) -> list[Resolution]:
    """The equivalence resolution reused verbatim for every intent."""
    return [Resolution(p, frozenset(equivalence.matched)) for p in range(P)]


def extract_representations(matchers, embeddings, layer="hidden") -> list[PairEmbeddingSet]:
    """Intent-based pair vectors: each binary matcher's hidden layer, or the
    per-intent branch activations of a multi-label matcher."""
    if isinstance(matchers, MultiLabelMatcher):
        x = embeddings.aligned() if isinstance(embeddings, PairEmbeddingSet) else embeddings
        acts = matchers.branch_activations(x)
        n = len(acts[0])
        return [PairEmbeddingSet(p, a, np.arange(n)) for p, a in enumerate(acts)]
    sets = embeddings if isinstance(embeddings, (list, tuple)) else [embeddings] * len(matchers)
    out = []
    for p, (m, s) in enumerate(zip(matchers, sets)):
        x = s.aligned() if isinstance(s, PairEmbeddingSet) else s
        out.append(PairEmbeddingSet(p, m.hidden_activation(x, layer), np.arange(len(x))))
    return out


def save_matchers(matchers, path):
    """One checkpoint for a list of binary matchers or a multi-label matcher."""
    if isinstance(matchers, MultiLabelMatcher):
        meta = {"kind": "multi-label", "d": matchers.d, "P": matchers.P,
                "hidden": matchers.hidden, "branch": matchers.branch_dim}
        params = matchers.parameters()
    else:
        if isinstance(matchers, BinaryMatcher):
            matchers = [matchers]
        meta = {"kind": "in-parallel", "d": matchers[0].d, "P": len(matchers),
                "hidden": matchers[0].hidden}
        params = [q for m in matchers for q in m.parameters()]
    nn.save_checkpoint(params, path, json.dumps(meta, sort_keys=True).encode())


def load_matchers(path):
    """Inverse of :func:`save_matchers`."""
    config, _ = nn.read_checkpoint(path)
    try:
        meta = json.loads(config)
        kind = meta["kind"]
    except (ValueError, KeyError) as e:
        raise DataError(f"{path}: not a matcher checkpoint") from e
    if kind == "multi-label":
        m = MultiLabelMatcher(meta["d"], meta["P"], meta["hidden"], meta["branch"])
        nn.load_checkpoint(m.parameters(), path)
        return m
    ms = [BinaryMatcher(meta["d"], meta["hidden"], intent_id=p) for p in range(meta["P"])]
    nn.load_checkpoint([q for m in ms for q in m.parameters()], path)
    return ms
