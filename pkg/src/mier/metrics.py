"""Evaluation measures for single- and multi-intent resolutions, and the
report that compares methods against a baseline."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import Resolution

REPORT_SCHEMA_VERSION = 1


@dataclass
class PRF:
    precision: float
    recall: float
    f1: float
    accuracy: float
    conventions: list = field(default_factory=list)

    def as_tuple(self):
        return self.precision, self.recall, self.f1, self.accuracy


def _confusion(pred, gold):
    pred = np.asarray(pred).astype(bool)
    gold = np.asarray(gold).astype(bool)
    tp = int(np.sum(pred & gold))
    fp = int(np.sum(pred & ~gold))
    fn = int(np.sum(~pred & gold))
    tn = int(np.sum(~pred & ~gold))
    return tp, fp, fn, tn


def prf_labels(pred, gold) -> PRF:
    """Precision, recall, F1 and accuracy of 0/1 label vectors.

    With nothing predicted, precision is 1 when the gold set is empty too and
    0 otherwise; with an empty gold set recall is 1.
    """
    tp, fp, fn, tn = _confusion(pred, gold)
    notes = []
    if tp + fp == 0:
        p = 1.0 if tp + fn == 0 else 0.0
        notes.append("empty prediction")
    else:
        p = tp / (tp + fp)
    if tp + fn == 0:
        r = 1.0
        notes.append("empty gold")
    else:
        r = tp / (tp + fn)
    f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    n = tp + fp + fn + tn
    acc = (tp + tn) / n if n else 1.0
    return PRF(p, r, f, acc, notes)


def prf(predicted: Resolution, gold: Resolution, universe) -> PRF:
    """Measures of a resolution against the gold one over the pair ids in ``universe``."""
    ids = [int(i) for i in universe]
    known = set(ids)
    for res, what in ((predicted, "predicted"), (gold, "gold")):
        extra = res.matched - known
        if extra:
            raise ValueError(f"{what} resolution has pairs outside the universe: "
                             f"{sorted(extra)[:5]}")
    return prf_labels(predicted.to_labels(ids), gold.to_labels(ids))


def f1_score(pred, gold) -> float:
    return prf_labels(pred, gold).f1


def residual_error(v_new, v_base):
    """Percentage of the baseline's remaining error removed by the new method;
    None when the baseline is already perfect."""
    if v_base >= 1:
        return None
    return 100.0 * (v_new - v_base) / (1.0 - v_base)


def mi_average(values) -> float:
    values = list(values)
    return float(sum(values) / len(values))


def mi_accuracy(pred, gold) -> float:
    """Fraction of pairs whose whole intent label vector is predicted exactly."""
    pred = np.asarray(pred)
    gold = np.asarray(gold)
    if pred.shape != gold.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gold.shape}")
    return float(np.mean(np.all(pred == gold, axis=1)))


def preventable_error(pred, gold, p, supers, restricted=False):
    """False positives of intent ``p`` over true negatives of the OR of the
    intents that subsume it.

    ``pred`` and ``gold`` are ``(n, P)`` label matrices. With ``restricted``,
    only false positives whose super-intent OR is itself a true negative
    count. Returns None when the denominator is zero.
    """
    supers = list(supers)
    if not supers:
        raise ValueError(f"intent {p} has no subsuming intents")
    pred = np.asarray(pred).astype(bool)
    gold = np.asarray(gold).astype(bool)
    fp = pred[:, p] & ~gold[:, p]
    or_pred = pred[:, supers].any(axis=1)
    or_gold = gold[:, supers].any(axis=1)
    tn_super = ~or_pred & ~or_gold
    denom = int(tn_super.sum())
    if denom == 0:
        return None
    num = int((fp & tn_super).sum()) if restricted else int(fp.sum())
    return num / denom


def _clean(x):
    if x is None:
        return None
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return round(float(x), 10)


def build_report(predictions: dict, gold, baseline="in-parallel", intent_names=None,
                 subsumed_by=None, meta=None) -> dict:
    """Per-method, per-intent measures with MI aggregates and baseline comparisons.

    ``predictions`` maps a method name to an ``(n, P)`` label matrix over the
    evaluated pairs; ``gold`` is the matching gold matrix. ``subsumed_by`` maps
    an intent to the intents that subsume it (for preventable error).
    """
    gold = np.asarray(gold)
    P = gold.shape[1]
    names = intent_names or [str(p) for p in range(P)]
    conventions = set()
    methods = {}
    for method, pred in predictions.items():
        pred = np.asarray(pred)
        per_intent = {}
        for p, name in enumerate(names):
            m = prf_labels(pred[:, p], gold[:, p])
            conventions.update(f"{method}/{name}: {c}" for c in m.conventions)
            per_intent[name] = {"precision": _clean(m.precision), "recall": _clean(m.recall),
                                "f1": _clean(m.f1), "accuracy": _clean(m.accuracy)}
        agg = {f"MI-{k}": _clean(mi_average(v[key] for v in per_intent.values()))
               for k, key in (("P", "precision"), ("R", "recall"), ("F", "f1"))}
        agg["MI-Acc"] = _clean(mi_accuracy(pred, gold))
        pe = {}
        for p, name in enumerate(names):
            supers = (subsumed_by or {}).get(p) or []
            if supers:
                pe[name] = {"all_fp": _clean(preventable_error(pred, gold, p, supers)),
                            "restricted": _clean(preventable_error(pred, gold, p, supers,
                                                                   restricted=True))}
        methods[method] = {"intents": per_intent, "aggregate": agg,
                           "preventable_error": pe}
    if baseline in methods:
        base = methods[baseline]
        for method, entry in methods.items():
            if method == baseline:
                continue
            entry["residual_error"] = {
                name: {f"E_{k}": _clean(residual_error(entry["intents"][name][key],
                                                       base["intents"][name][key]))
                       for k, key in (("P", "precision"), ("R", "recall"), ("F", "f1"))}
                for name in names}
            entry["residual_error"]["MI"] = {
                "E_F": _clean(residual_error(entry["aggregate"]["MI-F"],
                                             base["aggregate"]["MI-F"])),
                "E_Acc": _clean(residual_error(entry["aggregate"]["MI-Acc"],
                                               base["aggregate"]["MI-Acc"]))}
    return {"schema_version": REPORT_SCHEMA_VERSION, "baseline": baseline,
            "intents": names, "n_pairs": int(gold.shape[0]), "methods": methods,
            "conventions": sorted(conventions), "meta": meta or {}}


def report_json(report) -> str:
    return json.dumps(report, indent=1, sort_keys=True)


def _fmt(x, pct=False):
    if x is None:
        return "-"
    return f"{x:.1f}%" if pct else f"{x:.3f}"


def render_report(report) -> str:
    """Aligned text tables: the multi-intent summary, then one table per intent."""
    methods = report["methods"]
    lines = []
    head = f"{'Model':<14}{'MI-P':>8}{'MI-R':>8}{'MI-F':>8}{'MI-Acc':>8}{'MI-E_F':>9}"
    lines += ["Multiple intents", head, "-" * len(head)]
    for name, m in methods.items():
        a = m["aggregate"]
        ef = m.get("residual_error", {}).get("MI", {}).get("E_F")
        lines.append(f"{name:<14}{_fmt(a['MI-P']):>8}{_fmt(a['MI-R']):>8}"
                     f"{_fmt(a['MI-F']):>8}{_fmt(a['MI-Acc']):>8}{_fmt(ef, True):>9}")
    for intent in report["intents"]:
        head = f"{'Model':<14}{'P':>8}{'R':>8}{'F':>8}{'Acc':>8}{'E_F':>9}{'PE':>10}"
        lines += ["", f"Intent: {intent}", head, "-" * len(head)]
        for name, m in methods.items():
            v = m["intents"][intent]
            ef = m.get("residual_error", {}).get(intent, {}).get("E_F")
            pe = m["preventable_error"].get(intent, {}).get("all_fp")
            pe_s = "-" if pe is None else f"{pe:.2e}"
            lines.append(f"{name:<14}{_fmt(v['precision']):>8}{_fmt(v['recall']):>8}"
                         f"{_fmt(v['f1']):>8}{_fmt(v['accuracy']):>8}{_fmt(ef, True):>9}"
                         f"{pe_s:>10}")
    if report.get("conventions"):
        lines += ["", "Zero-denominator conventions applied:"]
        lines += [f"  {c}" for c in report["conventions"]]
    return "\n".join(lines) + "\n"
