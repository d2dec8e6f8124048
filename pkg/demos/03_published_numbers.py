"""The two summary measures, applied to figures quoted for a published benchmark.

Residual error answers "how much of the remaining error did the new method
remove": going from F1 0.901 to 0.958 removes 57.6% of the baseline's error.
The MI average is the plain mean of a measure over intents.

Run: python demos/03_published_numbers.py
"""
from mier.metrics import mi_average, residual_error

base, new = 0.901, 0.958
print(f"F1 {base} -> {new}: residual error reduction {residual_error(new, base):.1f}%")

per_intent = [0.958, 0.956, 0.972, 0.988, 0.944]
print(f"per-intent F1 {per_intent}: MI-F {mi_average(per_intent):.3f}")
