import numpy as np
import pytest

from mier import nn
from mier.core import DataError, IntentLabelMatrix, Resolution
from mier.embedding import PairEmbeddingSet
from mier.matchers import (BinaryMatcher, MultiLabelMatcher, extract_representations,
                           load_matchers, naive_multi_intent, predict, save_matchers,
                           train_binary, train_in_parallel, train_multilabel)
from mier.metrics import f1_score


def separable(n=120, d=6, P=2, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    y = np.stack([(x[:, p] > 0.2 * p).astype(int) for p in range(P)], axis=1)
    tags = np.array(["train", "valid", "test"], dtype=object)[np.arange(n) % 3]
    return x, IntentLabelMatrix(y, tags)


def test_binary_argmax_ties_and_example():
    m = BinaryMatcher(2, hidden=3)
    for p in m.parameters():
        p.value[...] = 0.0
    m.out.b.value[...] = [[2.0, -1.0]]
    assert m.predict(np.ones((1, 2))).tolist() == [0]
    m.out.b.value[...] = [[0.5, 0.5]]
    assert m.predict(np.ones((1, 2))).tolist() == [0]
    assert m.predict_proba(np.ones((1, 2)))[0] == 0.5


def test_multilabel_threshold_at_zero_logit():
    m = MultiLabelMatcher(3, 2, hidden=4, branch=4)
    for p in m.parameters():
        p.value[...] = 0.0
    m.heads[1].b.value[...] = -0.1
    assert m.predict(np.ones((1, 3))).tolist() == [[1, 0]]
    res, scores = predict(m, np.ones((2, 3)), pair_ids=[7, 9])
    assert res[0].matched == {7, 9} and res[1].matched == frozenset()
    assert scores[0].tolist() == [0.5, pytest.approx(nn.sigmoid(np.array(-0.1)))]


def test_separable_training_reaches_f1_one():
    x, lab = separable()
    m = train_binary(x, lab, 0, nn.TrainHyper(epochs=150, seed=1), hidden=16)
    tr = lab.indices("train")
    assert f1_score(m.predict(x[tr]), lab.labels[tr, 0]) == 1.0
    ml = train_multilabel(x, lab, nn.TrainHyper(epochs=150, seed=1), hidden=16, branch=8)
    pred = ml.predict(x[tr])
    assert all(f1_score(pred[:, p], lab.labels[tr, p]) > 0.95 for p in range(2))


def test_best_epoch_selection_and_traces():
    x, lab = separable(seed=3)
    ms = train_in_parallel(x, lab, nn.TrainHyper(epochs=20, seed=2), hidden=8)
    assert len(ms) == 2
    for m in ms:
        assert len(m.loss_trace) == 20 and 0 <= m.best_epoch < 20
        assert np.all(np.isfinite(m.loss_trace))


def test_zero_positive_intent_is_rejected():
    x, lab = separable()
    y = lab.labels.copy()
    y[:, 1] = 0
    with pytest.raises(DataError, match="intent 1"):
        train_in_parallel(x, IntentLabelMatrix(y, lab.splits), nn.TrainHyper(epochs=2))


def test_single_intent_losses_agree(rng):
    # P=1 BCE on logit z is two-class CE on logits (0, z): same values, same slopes
    z = rng.normal(scale=4, size=500)
    y = rng.integers(0, 2, size=500)
    logits2 = np.stack([np.zeros_like(z), z], axis=1)
    ce, g2 = nn.softmax_ce(logits2, y)
    bce = nn.weighted_bce_loss(z[:, None], y[:, None])
    assert ce == pytest.approx(bce.sum(), abs=1e-9)
    assert np.allclose(g2[:, 1], nn.weighted_bce_grad(z[:, None], y[:, None])[:, 0],
                       atol=1e-12)


def test_naive_copies_equivalence():
    eq = Resolution(0, frozenset({1, 4, 5}))
    out = naive_multi_intent(eq, 3)
    assert [r.intent_id for r in out] == [0, 1, 2]
    assert all(r.matched == eq.matched for r in out)


def test_extract_representations_pure():
    x, lab = separable()
    ms = train_in_parallel(x, lab, nn.TrainHyper(epochs=5), hidden=8)
    a = extract_representations(ms, x)
    b = extract_representations(ms, PairEmbeddingSet(None, x, np.arange(len(x))))
    assert [s.dim for s in a] == [8, 8]
    assert np.all(a[0].vectors >= 0)
    assert np.allclose(a[1].vectors, b[1].vectors)
    pre = extract_representations(ms, x, layer="pre_activation")
    assert np.allclose(np.maximum(pre[0].vectors, 0), a[0].vectors)
    ml = train_multilabel(x, lab, nn.TrainHyper(epochs=5), hidden=8, branch=6)
    reps = extract_representations(ml, x)
    assert len(reps) == 2 and reps[0].dim == 6 and reps[1].intent_id == 1


def test_save_load_round_trip(tmp_path):
    x, lab = separable()
    ms = train_in_parallel(x, lab, nn.TrainHyper(epochs=3), hidden=8)
    save_matchers(ms, tmp_path / "ip.ckpt")
    back = load_matchers(tmp_path / "ip.ckpt")
    assert np.array_equal(predict(back, x)[1], predict(ms, x)[1])
    ml = train_multilabel(x, lab, nn.TrainHyper(epochs=3), hidden=8, branch=4)
    save_matchers(ml, tmp_path / "ml.ckpt")
    assert np.array_equal(load_matchers(tmp_path / "ml.ckpt").logits(x), ml.logits(x))
    nn.save_checkpoint(ms[0].parameters(), tmp_path / "raw.ckpt")
    with pytest.raises(DataError):
        load_matchers(tmp_path / "raw.ckpt")
