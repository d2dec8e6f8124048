"""Benchmark construction: q-gram blocking, rule-based intent labeling,
train/valid/test splitting, and a synthetic multi-intent generator."""
from __future__ import annotations

import itertools
import logging
import re
import string
import warnings
from collections import defaultdict
from dataclasses import dataclass, field as dc_field

import numpy as np

from .core import (CandidatePairSet, DataError, IntentLabelMatrix, IntentSpec, Record,
                   SPLITS, subsumption_sets)

log = logging.getLogger(__name__)

_WS = re.compile(r"\s+")


@dataclass
class BlockingConfig:
    field: str = "title"
    q: int = 4
    normalize: bool = True
    min_shared: int = 1
    clean_clean: bool = False

    def __post_init__(self):
        if self.q < 2:
            raise ValueError(f"q must be >= 2, got {self.q}")
        if self.min_shared < 1:
            raise ValueError(f"min_shared must be >= 1, got {self.min_shared}")


def normalize_text(text: str) -> str:
    return _WS.sub(" ", str(text).lower()).strip()


def qgrams(text: str, q: int) -> set[str]:
    return {text[i:i + q] for i in range(len(text) - q + 1)}


def _record_grams(records, cfg):
    grams = {}
    for rid, rec in records.items():
        value = rec.get(cfg.field)
        if value is None:
            warnings.warn(f"record {rid!r} has no {cfg.field!r}; skipped by blocking",
                          stacklevel=3)
            continue
        text = normalize_text(value) if cfg.normalize else str(value)
        grams[rid] = qgrams(text, cfg.q)
    return grams


def block_qgram(records, cfg: BlockingConfig | None = None) -> CandidatePairSet:
    """All record pairs sharing at least ``min_shared`` character q-grams."""
    cfg = cfg or BlockingConfig()
    if not records:
        raise DataError("blocking needs at least one record")
    grams = _record_grams(records, cfg)
    buckets = defaultdict(list)
    for rid in sorted(grams):
        for g in grams[rid]:
            buckets[g].append(rid)
    shared = defaultdict(int)
    for members in buckets.values():
        for a, b in itertools.combinations(members, 2):
            shared[(a, b)] += 1
    keep = []
    for (a, b), count in shared.items():
        if count < cfg.min_shared:
            continue
        if cfg.clean_clean and records[a].source == records[b].source:
            continue
        keep.append((a, b))
    return CandidatePairSet.from_unordered(keep)


def cross_group_negatives(groups, cfg: BlockingConfig | None = None, n=1500, seed=0):
    """Block across every pair of record groups and sample ``n`` pairs from the pool."""
    cfg = cfg or BlockingConfig()
    if len(groups) < 2:
        raise DataError("need at least two groups")
    pool = set()
    for ga, gb in itertools.combinations(groups, 2):
        gram_a = _record_grams(ga, cfg)
        gram_b = _record_grams(gb, cfg)
        index = defaultdict(list)
        for rid, gs in gram_b.items():
            for g in gs:
                index[g].append(rid)
        for rid, gs in gram_a.items():
            hits = defaultdict(int)
            for g in gs:
                for other in index.get(g, ()):
                    hits[other] += 1
            for other, c in hits.items():
                if c >= cfg.min_shared and other != rid:
                    pool.add((rid, other) if rid < other else (other, rid))
    pool = sorted(pool)
    if len(pool) < n:
        warnings.warn(f"only {len(pool)} cross-group pairs available, {n} requested",
                      stacklevel=2)
        return CandidatePairSet(pool)
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(len(pool), size=n, replace=False))
    return CandidatePairSet(pool[i] for i in chosen)


# -- intent rules ----------------------------------------------------------------

RULE_KINDS = ("equivalence_list", "field_equality", "jaccard_sets", "conjunction")


@dataclass
class IntentRule:
    kind: str
    field: str | None = None
    threshold: float = 0.4
    children: list = dc_field(default_factory=list)
    pairs: frozenset = frozenset()
    separator: str = "|"
    name: str = ""

    def __post_init__(self):
        if self.kind not in RULE_KINDS:
            raise ValueError(f"unknown rule kind {self.kind!r}")
        if self.kind == "jaccard_sets" and not 0 < self.threshold <= 1:
            raise ValueError(f"jaccard threshold must be in (0, 1], got {self.threshold}")
        if self.kind == "conjunction" and len(self.children) < 2:
            raise ValueError("a conjunction needs at least two child rules")
        if self.kind in ("field_equality", "jaccard_sets") and not self.field:
            raise ValueError(f"{self.kind} rule needs a field")

    @classmethod
    def from_dict(cls, d, duplicate_pairs=None):
        d = dict(d)
        children = [cls.from_dict(c, duplicate_pairs) for c in d.pop("children", [])]
        pairs = d.pop("pairs", None)
        if d.get("kind") == "equivalence_list" and pairs is None:
            pairs = duplicate_pairs or []
        canon = frozenset((a, b) if a < b else (b, a) for a, b in (pairs or []))
        return cls(children=children, pairs=canon, **d)


def _as_set(value, sep):
    if value is None:
        return None
    if isinstance(value, (list, tuple, set, frozenset)):
        items = value
    else:
        items = str(value).split(sep)
    return {normalize_text(x) for x in items if normalize_text(x)}


def jaccard(a: set, b: set) -> float:
    union = a | b
    return len(a & b) / len(union) if union else 0.0


class _NullCounter:
    def __init__(self):
        self.both_null = 0


def _label_one(rule, left, right, nulls):
    if rule.kind == "equivalence_list":
        key = (left.id, right.id) if left.id < right.id else (right.id, left.id)
        return int(key in rule.pairs)
    if rule.kind == "conjunction":
        return int(all(_label_one(c, left, right, nulls) for c in rule.children))
    a, b = left.get(rule.field), right.get(rule.field)
    if a is None and b is None:
        nulls.both_null += 1
    if a is None or b is None:
        return 0
    if rule.kind == "field_equality":
        return int(normalize_text(a) == normalize_text(b))
    sa, sb = _as_set(a, rule.separator), _as_set(b, rule.separator)
    return int(jaccard(sa, sb) >= rule.threshold)


def label_intent(pairs: CandidatePairSet, records, rule: IntentRule) -> np.ndarray:
    """0/1 label per pair under one rule. A null value never yields a positive."""
    nulls = _NullCounter()
    out = np.array([_label_one(rule, records[p.left_id], records[p.right_id], nulls)
                    for p in pairs], dtype=np.int8)
    if nulls.both_null:
        warnings.warn(f"{nulls.both_null} pairs had both values null under rule "
                      f"{rule.name or rule.kind!r}; labeled 0", stacklevel=2)
    return out


# -- splits and profiling ------------------------------------------------------------

def split(n, ratios=(3, 1, 1), seed=0) -> np.ndarray:
    """Random train/valid/test tags, sizes within one of the exact proportions."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or np.any(ratios <= 0):
        raise ValueError(f"need three positive ratios, got {ratios}")
    ratios = ratios / ratios.sum()
    exact = ratios * n
    sizes = np.floor(exact).astype(int)
    # largest remainders get the leftover slots
    for i in np.argsort(-(exact - sizes), kind="stable")[: n - sizes.sum()]:
        sizes[i] += 1
    tags = np.repeat(np.array(SPLITS, dtype=object), sizes)
    rng = np.random.default_rng(seed)
    return tags[rng.permutation(n)]


def positive_rate_report(labels: IntentLabelMatrix, intent_names=None) -> dict:
    """Fraction of positive pairs per intent and split."""
    names = intent_names or [str(p) for p in range(labels.P)]
    report = {}
    for p, name in enumerate(names):
        report[name] = {}
        for s in SPLITS:
            col = labels.labels[labels.mask(s), p]
            report[name][s] = float(col.mean()) if col.size else 0.0
    return report


# -- synthetic benchmark -----------------------------------------------------------------

_BRANDS = ["nike", "adidas", "puma", "reebok", "asics", "salomon", "mizuno", "brooks",
           "saucony", "hoka", "vans", "converse"]
_CATEGORIES = {
    "shoes": {"running": ["trail", "road"], "court": ["basketball", "tennis"]},
    "apparel": {"tops": ["jersey", "hoodie"], "bottoms": ["shorts", "tights"]},
    "gear": {"bags": ["backpack", "duffel"], "fitness": ["yoga mat", "kettlebell"]},
}
_WORDS = ["pro", "max", "lite", "ultra", "classic", "elite", "flex", "zoom", "boost",
          "prime", "air", "storm", "speed", "edge", "core", "wave"]

SYNTHETIC_INTENTS = ["equivalence", "brand_and_main_category", "brand", "main_category",
                     "similar_category_set"]


def _typo(token, rng):
    if len(token) < 3:
        return token
    i = int(rng.integers(0, len(token) - 1))
    kind = rng.integers(0, 3)
    if kind == 0:
        return token[:i] + token[i + 1] + token[i] + token[i + 2:]
    if kind == 1:
        return token[:i] + token[i + 1:]
    return token[:i] + rng.choice(list(string.ascii_lowercase)) + token[i + 1:]


def _category_paths():
    paths = []
    for main, subs in _CATEGORIES.items():
        for sub, leaves in subs.items():
            for leaf in leaves:
                paths.append((main, sub, leaf))
    return paths


def synthetic_intent_specs(P: int) -> list[IntentSpec]:
    """Intents of the synthetic benchmark with their declared subsumptions."""
    if not 2 <= P <= len(SYNTHETIC_INTENTS):
        raise ValueError(f"synthetic benchmark supports 2..{len(SYNTHETIC_INTENTS)} intents")
    names = ["equivalence", "brand"] if P == 2 else SYNTHETIC_INTENTS[:P]
    index = {n: i for i, n in enumerate(names)}
    supers = {"equivalence": ["brand_and_main_category", "brand", "main_category",
                              "similar_category_set"],
              "brand_and_main_category": ["brand", "main_category"],
              "similar_category_set": ["main_category"]}
    return [IntentSpec(i, n, sorted(index[s] for s in supers.get(n, []) if s in index))
            for i, n in enumerate(names)]


def generate_synthetic(n_records=800, P=3, seed=0, n_pairs=None, dup_rate=0.5,
                       typo_rate=0.05, sibling_rate=0.3, main_word_rate=0.5,
                       dup_fraction=0.15, split_ratios=(3, 1, 1)):
    """Build a labeled multi-intent benchmark from hidden entity attributes.

    Returns ``(records, pairs, labels, intents, mapping)``. Each entity has a
    brand, a category path and a model code; its records carry noisy titles
    (casing, typos, dropped or swapped words) while the hidden fields drive
    the labels. A ``sibling_rate`` share of entities reuse the model code of
    another entity under a different brand, so title overlap alone does not
    decide equivalence. Candidate pairs come from 4-gram blocking on titles;
    with ``n_pairs`` the blocked set is subsampled to that size, with up to
    ``dup_fraction`` of it drawn from duplicate pairs.

    Intents (first P of): equivalence, brand and main category, brand, main
    category, category-set Jaccard >= 0.4. For P=2: equivalence and brand.
    Equivalence is subsumed by every other intent; the conjunction by its
    conjuncts.
    """
    intents = synthetic_intent_specs(P)
    rng = np.random.default_rng(seed)
    paths = _category_paths()
    n_entities = max(2, int(round(n_records / (1 + dup_rate))))
    entities = []
    for e in range(n_entities):
        brand = _BRANDS[rng.integers(len(_BRANDS))]
        path = paths[rng.integers(len(paths))]
        word = _WORDS[rng.integers(len(_WORDS))]
        if entities and rng.random() < sibling_rate:
            twin = entities[rng.integers(len(entities))]
            model = twin["model"]
            brand = _BRANDS[(_BRANDS.index(twin["brand"]) + 1
                             + rng.integers(len(_BRANDS) - 1)) % len(_BRANDS)]
            path = twin["path"]
        else:
            model = "".join(rng.choice(list("abcdefghjkmnpqrstuvwxyz"), size=2)) + \
                str(rng.integers(100, 1000))
        entities.append(dict(brand=brand, path=path, word=word, model=model))

    records = {}
    ent_of = {}
    for r in range(n_records):
        e = r if r < n_entities else int(rng.integers(n_entities))
        ent = entities[e]
        tokens = [ent["brand"], ent["word"], ent["model"], ent["path"][2]]
        if rng.random() < main_word_rate:
            tokens.append(ent["path"][0])
        out = []
        for i, tok in enumerate(tokens):
            if i == 1 and rng.random() < 0.2:
                continue
            # brand and main-category words stay clean; the rest may carry typos
            if 0 < i < 4 and rng.random() < typo_rate:
                tok = _typo(tok, rng)
            if rng.random() < 0.2:
                tok = tok.upper() if rng.random() < 0.5 else tok.capitalize()
            out.append(tok)
        if len(out) > 3 and rng.random() < 0.2:
            j = int(rng.integers(1, len(out) - 1))
            out[j], out[j + 1] = out[j + 1], out[j]
        rid = f"r{r:05d}"
        records[rid] = Record(rid, {"title": " ".join(out), "brand": ent["brand"],
                                    "main_category": ent["path"][0],
                                    "category_set": "|".join(ent["path"])})
        ent_of[rid] = e

    pairs = block_qgram(records, BlockingConfig(field="title", q=4))
    keys = pairs.keys()
    if n_pairs is not None and n_pairs < len(keys):
        dup = [i for i, (a, b) in enumerate(keys) if ent_of[a] == ent_of[b]]
        rest = [i for i, (a, b) in enumerate(keys) if ent_of[a] != ent_of[b]]
        dup = list(rng.permutation(dup))[:int(n_pairs * dup_fraction)]
        rest = list(rng.permutation(rest))[:n_pairs - len(dup)]
        keys = sorted(keys[i] for i in dup + rest)
        pairs = CandidatePairSet(keys)

    rules = synthetic_rules({rid: ent_of[rid] for rid in records}, records)
    cols = [label_intent(pairs, records, rules[it.name]) for it in intents]
    tags = split(len(pairs), split_ratios, seed)
    labels = IntentLabelMatrix(np.stack(cols, axis=1), tags)

    mapping = {}
    for it in intents:
        mapping[it.intent_id] = {rid: _entity_key(it.name, entities[ent_of[rid]], ent_of[rid])
                                 for rid in records}
    return records, pairs, labels, intents, mapping


def _entity_key(name, ent, e):
    if name == "equivalence":
        return e
    if name == "brand":
        return ent["brand"]
    if name == "main_category":
        return ent["path"][0]
    if name == "brand_and_main_category":
        return (ent["brand"], ent["path"][0])
    # leaf-level paths share main and sub category exactly when Jaccard >= 0.4
    return ent["path"][:2]


def synthetic_rules(entity_of, records):
    dup_pairs = []
    by_entity = defaultdict(list)
    for rid, e in entity_of.items():
        by_entity[e].append(rid)
    for members in by_entity.values():
        dup_pairs.extend(itertools.combinations(sorted(members), 2))
    brand = IntentRule("field_equality", field="brand", name="brand")
    main = IntentRule("field_equality", field="main_category", name="main_category")
    cats = IntentRule("jaccard_sets", field="category_set", threshold=0.4,
                      name="similar_category_set")
    return {
        "equivalence": IntentRule.from_dict({"kind": "equivalence_list",
                                             "name": "equivalence", "pairs": dup_pairs}),
        "brand": brand,
        "main_category": main,
        "brand_and_main_category": IntentRule("conjunction", children=[brand, main],
                                              name="brand_and_main_category"),
        "similar_category_set": cats,
    }


# -- rule-config benchmarks --------------------------------------------------------------

def build_benchmark(records, config: dict, duplicate_pairs=None):
    """Candidate pairs, labels and intents from records and a rule config.

    ``config`` holds ``blocking`` (fields of :class:`BlockingConfig`), an
    optional ``split`` section (``ratios``, ``seed``) and an ``intents`` list of
    rule dicts, each with a ``name``. Equivalence-list rules without explicit
    ``pairs`` use ``duplicate_pairs``. Subsumption is read from the training
    labels; an optional ``subsumed_by`` list of intent names per rule is
    checked against it.
    """
    if not config.get("intents"):
        raise DataError("rule config defines no intents")
    cfg = BlockingConfig(**config.get("blocking", {}))
    pairs = block_qgram(records, cfg)
    if not len(pairs):
        raise DataError("blocking produced no candidate pairs")
    rules, declared = [], []
    for i, d in enumerate(config["intents"]):
        d = dict(d)
        if "name" not in d:
            raise DataError(f"intent rule {i} has no name")
        declared.append(d.pop("subsumed_by", None))
        rules.append(IntentRule.from_dict(d, duplicate_pairs))
    names = [r.name for r in rules]
    if len(set(names)) != len(names):
        raise DataError(f"duplicate intent names in {names}")
    cols = [label_intent(pairs, records, r) for r in rules]
    sp = config.get("split", {})
    tags = split(len(pairs), tuple(sp.get("ratios", (3, 1, 1))), sp.get("seed", 0))
    labels = IntentLabelMatrix(np.stack(cols, axis=1), tags)
    index = {n: i for i, n in enumerate(names)}
    specs = []
    for i, (name, sup) in enumerate(zip(names, declared)):
        unknown = [s for s in sup or [] if s not in index]
        if unknown:
            raise DataError(f"intent {name!r} declares unknown super-intents {unknown}")
        specs.append(IntentSpec(i, name, sorted(index[s] for s in sup or [])))
    detected = subsumption_sets(labels, [s for s, d in zip(specs, declared) if d is not None])
    specs = [IntentSpec(i, name, sorted(detected.get(i, [])))
             for i, name in enumerate(names)]
    return pairs, labels, specs
