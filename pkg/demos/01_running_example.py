"""One set of product records, three ways to call two records "the same".

A shoe catalogue has seven records. A shopper wants one entry per product,
a brand manager wants one per brand, a merchandiser one per brand and
category. Each intent labels the candidate pairs differently, each resolution
yields a different clean view of the catalogue, and the intents nest: every
pair that is the same product is also the same brand.

Run: python demos/01_running_example.py
"""
import itertools

import numpy as np

from mier.benchmark import IntentRule, label_intent
from mier.core import (CandidatePairSet, IntentLabelMatrix, Record, Resolution,
                       derive_clean_view, subsumption_sets)

rows = {
    "r1": {"title": "nike air zoom running shoe", "brand": "nike", "category": "shoes"},
    "r2": {"title": "nike air zoom run shoe", "brand": "nike", "category": "shoes"},
    "r3": {"title": "nike airzoom running", "brand": "nike", "category": "shoes"},
    "r4": {"title": "nike dri fit hoodie", "brand": "nike", "category": "apparel"},
    "r5": {"title": "adidas ultra boost", "brand": "adidas", "category": "shoes"},
    "r6": {"title": "puma yoga mat", "brand": "puma", "category": "gear"},
    "r7": {"title": "nike pegasus trail shoe", "brand": "nike", "category": "shoes"},
}
records = {rid: Record(rid, f) for rid, f in rows.items()}
pairs = CandidatePairSet(itertools.combinations(sorted(records), 2))
print(f"{len(records)} records, {len(pairs)} candidate pairs\n")

brand = IntentRule("field_equality", field="brand", name="brand")
category = IntentRule("field_equality", field="category", name="category")
rules = [
    IntentRule.from_dict({"kind": "equivalence_list", "name": "same product",
                          "pairs": [("r1", "r2"), ("r1", "r3"), ("r2", "r3")]}),
    IntentRule("conjunction", children=[brand, category], name="brand and category"),
    brand,
]
labels = IntentLabelMatrix(np.stack([label_intent(pairs, records, r) for r in rules], axis=1),
                           ["train"] * len(pairs))

for p, rule in enumerate(rules):
    res = Resolution.from_labels(p, labels.column(p))
    view = derive_clean_view(res, pairs, records)
    print(f"{rule.name:>20}: {len(res.matched):2d} matching pairs, clean view {view}")

print("\nintents that subsume each intent (from the labels):")
for q, supers in subsumption_sets(labels).items():
    print(f"  {rules[q].name:>20} <= {[rules[p].name for p in supers]}")
