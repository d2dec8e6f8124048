"""Domain types for multi-intent entity resolution.

Records, candidate pairs, intents, per-intent labels and resolutions, plus the
formal checks over them: resolution satisfaction, clean views, overlap and
subsumption between intents.
"""
from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.cluster.hierarchy import DisjointSet

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class Record:
    id: str
    fields: dict
    source: str = ""

    def __post_init__(self):
        if all(v is None for v in self.fields.values()):
            raise DataError(f"record {self.id!r} has no non-null field")

    def get(self, name):
        return self.fields.get(name)


@dataclass(frozen=True)
class CandidatePair:
    left_id: str
    right_id: str
    pair_id: int


class CandidatePairSet:
    """Duplicate-free, canonically ordered record pairs indexed by ``pair_id``.

    ``pair_id`` is the row index of a pair everywhere downstream (labels,
    embeddings, graph nodes), so it is assigned once here.
    """

    def __init__(self, pairs: Iterable[tuple[str, str]]):
        seen = set()
        canon = []
        for a, b in pairs:
            if a == b:
                raise DataError(f"self pair on record {a!r}")
            key = (a, b) if a < b else (b, a)
            if key in seen:
                raise DataError(f"duplicate pair {key}")
            seen.add(key)
            canon.append(key)
        self._pairs = [CandidatePair(a, b, i) for i, (a, b) in enumerate(canon)]
        self._index = {(p.left_id, p.right_id): p.pair_id for p in self._pairs}

    @classmethod
    def from_unordered(cls, pairs: Iterable[tuple[str, str]]) -> "CandidatePairSet":
        """Canonicalize, deduplicate and sort pairs lexicographically."""
        keys = {(a, b) if a < b else (b, a) for a, b in pairs}
        return cls(sorted(keys))

    def __len__(self):
        return len(self._pairs)

    def __iter__(self):
        return iter(self._pairs)

    def __getitem__(self, i) -> CandidatePair:
        return self._pairs[i]

    def __eq__(self, other):
        return isinstance(other, CandidatePairSet) and self.keys() == other.keys()

    def keys(self) -> list[tuple[str, str]]:
        return [(p.left_id, p.right_id) for p in self._pairs]

    def pair_id(self, a: str, b: str) -> int:
        key = (a, b) if a < b else (b, a)
        return self._index[key]

    def record_ids(self) -> set[str]:
        out = set()
        for p in self._pairs:
            out.add(p.left_id)
            out.add(p.right_id)
        return out


@dataclass
class IntentSpec:
    intent_id: int
    name: str
    subsumed_by: list[int] = field(default_factory=list)


def validate_intents(intents: Sequence[IntentSpec]) -> None:
    """Check ids are 0..P-1 and the declared subsumption relation is acyclic."""
    ids = [it.intent_id for it in intents]
    if ids != list(range(len(intents))):
        raise DataError(f"intent ids must be 0..{len(intents) - 1}, got {ids}")
    graph = {it.intent_id: list(it.subsumed_by) for it in intents}
    for it in intents:
        if it.intent_id in it.subsumed_by:
            raise DataError(f"intent {it.name!r} subsumed by itself")
        for q in it.subsumed_by:
            if q not in graph:
                raise DataError(f"intent {it.name!r} references unknown intent {q}")
    state = {}

    def visit(u):
        state[u] = 1
        for w in graph[u]:
            if state.get(w) == 1:
                raise DataError(f"subsumption cycle through intent {w}")
            if w not in state:
                visit(w)
        state[u] = 2

    for u in graph:
        if u not in state:
            visit(u)


class IntentLabelMatrix:
    """Binary labels of shape ``(n_pairs, P)`` with one split tag per pair."""

    def __init__(self, labels, splits):
        labels = np.asarray(labels, dtype=np.int8)
        if labels.ndim == 1:
            labels = labels[:, None]
        splits = np.asarray(splits, dtype=object)
        if labels.shape[0] != splits.shape[0]:
            raise DataError(
                f"{labels.shape[0]} label rows but {splits.shape[0]} split tags")
        if not np.isin(labels, (0, 1)).all():
            raise DataError("labels must be 0/1")
        bad = set(splits.tolist()) - set(SPLITS)
        if bad:
            raise DataError(f"unknown split tags {sorted(bad)}")
        self.labels = labels
        self.splits = splits

    @property
    def n_pairs(self):
        return self.labels.shape[0]

    @property
    def P(self):
        return self.labels.shape[1]

    def mask(self, split: str) -> np.ndarray:
        return self.splits == split

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.splits == split)

    def column(self, p: int) -> np.ndarray:
        return self.labels[:, p]

    def take(self, rows) -> "IntentLabelMatrix":
        return IntentLabelMatrix(self.labels[rows], self.splits[rows])


@dataclass
class Resolution:
    intent_id: int
    matched: frozenset

    @classmethod
    def from_labels(cls, intent_id: int, labels, pair_ids=None) -> "Resolution":
        labels = np.asarray(labels)
        ids = np.arange(len(labels)) if pair_ids is None else np.asarray(pair_ids)
        return cls(intent_id, frozenset(int(i) for i in ids[labels == 1]))

    def to_labels(self, pair_ids) -> np.ndarray:
        return np.array([1 if int(i) in self.matched else 0 for i in pair_ids],
                        dtype=np.int8)


# intent_id -> {record_id: entity_id}
EntityMapping = dict


def resolution_satisfies(res: Resolution, mapping: Mapping[str, object],
                         pairs: CandidatePairSet) -> bool:
    """True iff ``res`` matches exactly the pairs whose records share an entity."""
    for p in pairs:
        for rid in (p.left_id, p.right_id):
            if rid not in mapping:
                raise DataError(f"record {rid!r} missing from entity mapping")
        same = mapping[p.left_id] == mapping[p.right_id]
        if (p.pair_id in res.matched) != same:
            return False
    return True


def derive_clean_view(res: Resolution, pairs: CandidatePairSet,
                      record_ids: Iterable[str]) -> list[str]:
    """One representative (the smallest id) per connected component of matches."""
    record_ids = list(record_ids)
    ds = DisjointSet(record_ids)
    for pid in res.matched:
        p = pairs[pid]
        for rid in (p.left_id, p.right_id):
            if rid not in ds:
                raise DataError(f"matched pair {pid} references unknown record {rid!r}")
        ds.merge(p.left_id, p.right_id)
    return sorted(min(s) for s in ds.subsets())


def detect_overlap(labels: IntentLabelMatrix, p: int, q: int) -> bool:
    if p == q:
        raise ValueError("overlap needs two distinct intents")
    return bool(np.any((labels.labels[:, p] == 1) & (labels.labels[:, q] == 1)))


def detect_subsumption(labels: IntentLabelMatrix, p: int, q: int) -> bool:
    """True iff ``q`` is a sub-intent of ``p``: no pair is positive for q but not p."""
    if p == q:
        raise ValueError("subsumption needs two distinct intents")
    return not bool(np.any((labels.labels[:, p] == 0) & (labels.labels[:, q] == 1)))


def subsumption_sets(labels: IntentLabelMatrix, intents: Sequence[IntentSpec] | None = None,
                     split: str | None = "train") -> dict[int, list[int]]:
    """Map each intent to the intents that subsume it, detected from labels.

    Declared relations in ``intents`` are cross-checked; on disagreement the
    detected relation is kept and a warning is emitted.
    """
    view = labels if split is None else labels.take(labels.mask(split))
    out = {}
    for q in range(view.P):
        out[q] = [p for p in range(view.P) if p != q and detect_subsumption(view, p, q)]
    if intents is not None:
        for it in intents:
            declared = sorted(it.subsumed_by)
            if declared != out[it.intent_id]:
                warnings.warn(
                    f"intent {it.name!r}: declared subsumed_by={declared} but labels "
                    f"give {out[it.intent_id]}; using detected relation",
                    stacklevel=2)
    return out


# -- file formats -----------------------------------------------------------

def read_records(path, id_column="id", source_column=None) -> dict[str, Record]:
    """Load records from CSV or JSON-lines (by extension)."""
    path = Path(path)
    if path.suffix in (".jsonl", ".json"):
        with open(path) as fh:
            rows = [json.loads(line) for line in fh if line.strip()]
    else:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    records = {}
    for row in rows:
        if id_column not in row:
            raise DataError(f"{path}: row without id column {id_column!r}")
        rid = str(row.pop(id_column))
        source = str(row.pop(source_column, "")) if source_column else ""
        flds = {k: None if v is None or v == "" else v for k, v in row.items()}
        if rid in records:
            raise DataError(f"{path}: duplicate record id {rid!r}")
        records[rid] = Record(rid, flds, source)
    return records


def write_records(records: Mapping[str, Record], path) -> None:
    with open(path, "w") as fh:
        for r in records.values():
            row = {"id": r.id, "source": r.source, **r.fields}
            fh.write(json.dumps(row, sort_keys=False) + "\n")


def write_pairs(pairs: CandidatePairSet, path) -> None:
    with open(path, "w") as fh:
        for p in pairs:
            fh.write(json.dumps({"pair_id": p.pair_id, "left_id": p.left_id,
                                 "right_id": p.right_id}) + "\n")


def read_pairs(path) -> CandidatePairSet:
    with open(path) as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    rows.sort(key=lambda r: r["pair_id"])
    if [r["pair_id"] for r in rows] != list(range(len(rows))):
        raise DataError(f"{path}: pair ids must be contiguous from 0")
    pairs = CandidatePairSet((r["left_id"], r["right_id"]) for r in rows)
    for r, p in zip(rows, pairs):
        if (r["left_id"], r["right_id"]) != (p.left_id, p.right_id):
            raise DataError(f"{path}: pair {r['pair_id']} is not in canonical order")
    return pairs


def write_labels(labels: IntentLabelMatrix, path) -> None:
    with open(path, "w") as fh:
        for i in range(labels.n_pairs):
            fh.write(json.dumps({"pair_id": i, "split": labels.splits[i],
                                 "labels": labels.labels[i].tolist()}) + "\n")


def read_labels(path) -> IntentLabelMatrix:
    with open(path) as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    rows.sort(key=lambda r: r["pair_id"])
    if [r["pair_id"] for r in rows] != list(range(len(rows))):
        raise DataError(f"{path}: pair ids must be contiguous from 0")
    widths = {len(r["labels"]) for r in rows}
    if len(widths) > 1:
        raise DataError(f"{path}: inconsistent label widths {sorted(widths)}")
    return IntentLabelMatrix([r["labels"] for r in rows], [r["split"] for r in rows])


def write_intents(intents: Sequence[IntentSpec], path) -> None:
    with open(path, "w") as fh:
        json.dump([{"intent_id": it.intent_id, "name": it.name,
                    "subsumed_by": list(it.subsumed_by)} for it in intents], fh, indent=1)


def read_intents(path) -> list[IntentSpec]:
    with open(path) as fh:
        intents = [IntentSpec(**d) for d in json.load(fh)]
    validate_intents(intents)
    return intents


def write_predictions(pred, path, pair_ids=None) -> None:
    """Predicted label matrix as JSON-lines ``{pair_id, labels}``."""
    pred = np.asarray(pred)
    ids = range(len(pred)) if pair_ids is None else pair_ids
    with open(path, "w") as fh:
        for i, row in zip(ids, pred):
            fh.write(json.dumps({"pair_id": int(i), "labels": [int(v) for v in row]}) + "\n")


def read_predictions(path, n_pairs=None) -> np.ndarray:
    """Inverse of :func:`write_predictions`; with ``n_pairs`` every pair id
    in ``range(n_pairs)`` must appear exactly once."""
    with open(path) as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    rows.sort(key=lambda r: r["pair_id"])
    ids = [r["pair_id"] for r in rows]
    expected = list(range(n_pairs if n_pairs is not None else len(rows)))
    if ids != expected:
        raise DataError(f"{path}: predictions must cover pair ids 0..{len(expected) - 1} once")
    widths = {len(r["labels"]) for r in rows}
    if len(widths) > 1:
        raise DataError(f"{path}: inconsistent label widths {sorted(widths)}")
    return np.array([r["labels"] for r in rows], dtype=np.int8).reshape(len(rows), -1)
