import numpy as np
import pytest

from mier.core import CandidatePairSet, IntentLabelMatrix, Record


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def running_example():
    """Six product records in the style of the classic shoe-catalogue example."""
    rows = {
        "r1": {"title": "nike air zoom running shoe", "brand": "nike", "category": "shoes"},
        "r2": {"title": "nike air zoom run shoe", "brand": "nike", "category": "shoes"},
        "r3": {"title": "nike airzoom running", "brand": "nike", "category": "shoes"},
        "r4": {"title": "nike dri fit hoodie", "brand": "nike", "category": "apparel"},
        "r5": {"title": "adidas ultra boost", "brand": "adidas", "category": "shoes"},
        "r6": {"title": "puma yoga mat", "brand": "puma", "category": "gear"},
    }
    return {rid: Record(rid, f) for rid, f in rows.items()}


def make_labels(P=3, n=60, seed=0, rate=0.3):
    rng = np.random.default_rng(seed)
    y = (rng.random((n, P)) < rate).astype(np.int8)
    y[:3] = 1
    y[3:6] = 0
    tags = np.array(["train", "valid", "test"] * (n // 3 + 1), dtype=object)[:n]
    return IntentLabelMatrix(y, tags)


def all_pairs(ids):
    ids = sorted(ids)
    return CandidatePairSet([(a, b) for i, a in enumerate(ids) for b in ids[i + 1:]])


# -- acceptance reporting --------------------------------------------------------

ACCEPTANCE = {}


class criterion:
    """Record one acceptance criterion's outcome for the terminal summary."""

    def __init__(self, number, title):
        self.number, self.title = number, title
        self.details = []

    def note(self, text):
        self.details.append(text)

    def __enter__(self):
        return self

    def __exit__(self, kind, exc, tb):
        if kind is None:
            status = "PASS"
        elif issubclass(kind, pytest.skip.Exception):
            status = "SKIP"
        else:
            status = "FAIL"
        detail = "; ".join(self.details)
        ACCEPTANCE[self.number] = f"criterion {self.number:>2} {status}  {self.title}" + \
            (f"  [{detail}]" if detail else "")
        return False


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
