"""Multi-intent resolution on a synthetic catalogue, baseline versus FlexER.

The in-parallel baseline trains one matcher per intent and lets them decide
independently. FlexER reuses those matchers' hidden representations as node
features of a multiplex graph (one layer per intent, kNN edges inside a layer,
edges between the copies of a pair across layers) and a graph network then
decides each intent while looking at the others.

This walkthrough uses one seed and a reduced catalogue so it runs in about a
minute; configs/synthetic.yaml holds the full five-seed experiment
(``mier run configs/synthetic.yaml``).

Run: python demos/02_synthetic_mier.py
"""
import numpy as np

from mier import nn
from mier.benchmark import generate_synthetic, positive_rate_report
from mier.core import subsumption_sets
from mier.embedding import embed_lexical
from mier.gnn import run_mier
from mier.graph import GraphConfig, build_graph
from mier.matchers import extract_representations, train_in_parallel
from mier.metrics import build_report, render_report

records, pairs, labels, intents, _ = generate_synthetic(
    n_records=600, P=3, seed=0, n_pairs=1200, main_word_rate=1.0, typo_rate=0.02)
names = [it.name for it in intents]
print(f"{len(records)} records, {len(pairs)} candidate pairs")
for name, rates in zip(names, positive_rate_report(labels).values()):
    print(f"  {name:>24}: {100 * rates['train']:.1f}% positive in train")

# one intent-agnostic lexical vector per pair, idf from the training pairs only
x = embed_lexical(pairs, records, dim=512, fields=["title"], shared_grams=True,
                  train_mask=labels.mask("train"))

hyper = nn.TrainHyper(epochs=100, seed=0)
baseline = train_in_parallel(x, labels, hyper, hidden=128)
test = labels.indices("test")
base_pred = np.stack([m.predict(x.aligned()) for m in baseline], axis=1)

# the intent graph: each baseline's hidden layer is the node feature of its layer
reps = extract_representations(baseline, x)
graph = build_graph(reps, GraphConfig(k=4))
print(f"\ngraph: {graph.counts()}")
_, flexer_pred, _ = run_mier(reps, labels, h1=100, k=4, layers=2, graph=graph,
                             hyper=hyper)

report = build_report({"in-parallel": base_pred[test], "flexer": flexer_pred[test]},
                      labels.labels[test], intent_names=names,
                      subsumed_by=subsumption_sets(labels))
print()
print(render_report(report))
