import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from weakloc import evaluation as E
from weakloc.data import Batch

from oracles import auroc_all_pairs, dice_count, kappa_confusion, otsu_exhaustive


def test_dice_examples():
    a = np.array([1, 1, 0, 0], bool)
    b = np.array([1, 0, 0, 0], bool)
    assert E.dice(a, b) == pytest.approx(2 / 3)
    assert E.dice(a, a) == 1.0
    assert E.dice(a, ~a) == 0.0
    assert E.dice(np.zeros(4, bool), np.zeros(4, bool)) == 1.0


def test_dice_shape_mismatch():
    with pytest.raises(ValueError):
        E.dice(np.zeros(3), np.zeros(4))


@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=64))
def test_dice_symmetric_and_matches_count(pairs):
    a = np.array([p[0] for p in pairs])
    b = np.array([p[1] for p in pairs])
    assert E.dice(a, b) == E.dice(b, a) == dice_count(a, b)


def test_auroc_examples():
    assert E.auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert E.auroc([0.1, 0.2, 0.9, 0.95], [0, 0, 1, 1]) == 1.0
    assert E.auroc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_auroc_degenerate():
    with pytest.raises(E.DegenerateLabels):
        E.auroc([0.1, 0.2], [1, 1])


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_auroc_equals_all_pairs(data):
    n = data.draw(st.integers(2, 200))
    # coarse grid of values so ties are common
    scores = data.draw(st.lists(st.integers(0, 20), min_size=n, max_size=n))
    labels = data.draw(st.lists(st.booleans(), min_size=n, max_size=n).filter(lambda l: 0 < sum(l) < len(l)))
    assert E.auroc(np.array(scores) / 7.0, labels) == auroc_all_pairs(np.array(scores) / 7.0, labels)


def test_mse_stats_examples():
    a = np.zeros((2, 2))
    assert E.mse_stats([(a, a), (a, a)]) == (0.0, 0.0)
    b = np.full((2, 2), math.sqrt(2))
    mean, var = E.mse_stats([(a, a), (a, b)])
    assert mean == pytest.approx(1.0)
    assert var == pytest.approx(1.0)
    with pytest.raises(E.EmptySet):
        E.mse_stats([])


def test_mse_permutation_invariant():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 8, 8))
    perm = rng.permutation(64)
    assert E.mse(a, b) == pytest.approx(E.mse(a.ravel()[perm], b.ravel()[perm]))


def test_ssim_identity_and_anticorrelation():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(32, 32))
    assert E.ssim(a, a) == pytest.approx(1.0)
    # checkerboard: every Gaussian window averages to ~0
    checker = np.indices((32, 32)).sum(axis=0) % 2 * 2.0 - 1.0
    assert E.ssim(checker, -checker) < 0


def test_ssim_constant_images_closed_form():
    # single-window formula: mu_a = 0, mu_b = 0.5, all variances zero
    c1 = (0.01 * 2) ** 2
    expected = c1 / (0.25 + c1)
    assert E.ssim(np.zeros((16, 16)), np.full((16, 16), 0.5), data_range=2.0) == pytest.approx(expected, rel=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(-0.5, 0.5))
def test_ssim_offset_invariance_of_self_similarity(seed, offset):
    a = np.random.default_rng(seed).uniform(-0.5, 0.5, size=(20, 20))
    assert E.ssim(a + offset, a + offset) == pytest.approx(1.0)


def test_otsu_bimodal():
    x = np.array([0.1] * 50 + [0.9] * 50)
    t, degenerate = E.otsu_threshold(x)
    assert 0.1 < t < 0.9 and not degenerate


def test_otsu_constant_is_flagged():
    t, degenerate = E.otsu_threshold(np.full(10, 0.3))
    assert degenerate and t == 0.3
    mean, flagged = E.average_otsu_threshold([np.full((4, 4), 0.3), np.array([[0.0, 1.0]])])
    assert flagged == [0]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_otsu_matches_exhaustive_search(seed):
    rng = np.random.default_rng(seed)
    n = rng.integers(10, 400)
    x = np.concatenate([rng.normal(rng.uniform(0, 1), rng.uniform(0.01, 0.3), n), rng.uniform(0, 2, n // 3)])
    assert E.otsu_threshold(x)[0] == otsu_exhaustive(x)


def test_average_otsu_is_mean_of_abs_thresholds():
    rng = np.random.default_rng(3)
    maps = [rng.normal(size=(8, 8)) for _ in range(4)]
    expected = np.mean([otsu_exhaustive(np.abs(m)) for m in maps])
    assert E.average_otsu_threshold(maps)[0] == pytest.approx(expected)


def test_kappa_confusion_example():
    # [[40, 10], [20, 30]]: rows true class, columns prediction
    y_true = [0] * 50 + [1] * 50
    y_pred = [0] * 40 + [1] * 10 + [0] * 20 + [1] * 30
    probs = np.eye(2)[y_pred]
    acc, kappa, _ = E.classification_metrics(probs, y_true)
    assert acc == pytest.approx(0.7)
    assert kappa == pytest.approx(0.4)


def test_classification_perfect():
    y = np.array([0, 1, 1, 0])
    probs = np.stack([1 - y * 0.9 - 0.05, y * 0.9 + 0.05], axis=1)
    assert E.classification_metrics(probs, y) == (1.0, 1.0, 1.0)


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_kappa_matches_confusion_arithmetic(data):
    n = data.draw(st.integers(2, 100))
    y = data.draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
    p = data.draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
    if len(set(y)) == 1 and set(y) == set(p):
        with pytest.raises(E.DegenerateLabels):
            E.cohen_kappa(y, p)
        return
    k = E.cohen_kappa(y, p)
    assert k == pytest.approx(kappa_confusion(y, p), abs=1e-12)
    assert E.cohen_kappa([1 - v for v in y], [1 - v for v in p]) == pytest.approx(k, abs=1e-12)
    assert -1 <= k <= 1


def test_kappa_near_zero_for_independent_predictions():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 20000)
    p = rng.integers(0, 2, 20000)
    assert abs(E.cohen_kappa(y, p)) < 0.03


# --- model-level evaluation -------------------------------------------------

def _handle_with_gt(tmp_path):
    from weakloc import synthetic, data

    synthetic.generate_dataset(0, 0, 3, seed=5, out_dir=tmp_path, size=32)
    return data.load_synthetic(tmp_path / "manifest.csv", "test")


def test_evaluate_oracle_generator(tmp_path):
    handle = _handle_with_gt(tmp_path)

    def oracle(batch: Batch):
        return batch.images + batch.gt  # healthy = diseased + (healthy - diseased)

    def classify(batch: Batch):
        return torch.nn.functional.one_hot(batch.labels, 2).float()

    r = E.evaluate(handle, oracle, classify)
    assert r.dice == 1.0
    assert r.auroc_pix == pytest.approx(1.0)
    assert r.mse_d_gt == pytest.approx(0.0, abs=1e-12)
    assert r.ssim == pytest.approx(1.0)
    assert r.mse_rh_ah == 0.0
    assert (r.accuracy_cls, r.kappa, r.auroc_image) == (1.0, 1.0, 1.0)


def test_evaluate_identity_generator(tmp_path):
    handle = _handle_with_gt(tmp_path)
    r = E.evaluate(handle, lambda b: b.images)
    assert r.mse_rh_ah == 0.0
    assert r.dice == 0.0
    assert r.accuracy_cls is None


def test_metrics_report_roundtrip(tmp_path):
    r = E.MetricsReport(dice=0.5, auroc_pix=0.9, mse_d_gt=0.01, mse_d_gt_var=0.0, ssim=0.8)
    r.save(tmp_path / "m.json")
    assert E.MetricsReport.load(tmp_path / "m.json") == r
    assert "Dice 0.500" in r.table_row()


def test_difference_map_is_exact_subtraction():
    from weakloc.networks import Generator, TINY_GENERATOR

    torch.manual_seed(0)
    g = Generator(TINY_GENERATOR)
    x = torch.rand(2, 1, 16, 16) * 2 - 1
    d = E.difference_map(g, x)
    g.eval()
    with torch.no_grad():
        assert torch.equal(d, g.translate(x, "h") - x)
    assert d.abs().max() <= 2
