from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from visionmt import evaluation as ev
from visionmt.data.schema import detokenize
from visionmt.trainer import TrainConfig
from visionmt.model import StudentModel


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    cfg = TrainConfig(layers=2, width=16, heads=2, tap_layers=(1, 2), prototypes=16, depth_width=8)
    return StudentModel(cfg.model_config()).eval()


@pytest.fixture(scope="module")
def suite():
    return ev.EvalSuite.build(n_zeroshot=100, n_pairs=20, n_probe_train=40, n_probe_eval=20)


def test_eval_result_validation():
    ev.EvalResult("zeroshot_acc", 0.5, "d", "c", 0)
    with pytest.raises(ValueError):
        ev.EvalResult("accuracy", 0.5, "d", "c", 0)
    with pytest.raises(ValueError):
        ev.EvalResult("depth_rmse", float("nan"), "d", "c", 0)


def test_argmax_tie_goes_to_lowest_index():
    scores = np.array([[0.3, 0.7, 0.7], [0.5, 0.5, 0.1], [0.2, 0.2, 0.2]])
    assert ev.argmax_lowest(scores).tolist() == [1, 0, 0]
    img = np.array([[1.0, 0.0]])
    classes = np.array([[1.0, 1.0], [1.0, -1.0]])  # both at 45 degrees
    assert ev.zero_shot_predict(img, classes).tolist() == [0]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100.0), st.floats(-10, 10))
def test_zero_shot_argmax_invariances(seed, c, shift):
    rng = np.random.default_rng(seed)
    sim = rng.normal(size=(6, 5))
    base = ev.argmax_lowest(sim)
    assert np.array_equal(ev.argmax_lowest(sim * c), base)
    per_image = shift * rng.normal(size=(6, 1))
    assert np.array_equal(ev.argmax_lowest(sim + per_image), base)
    img, cls = rng.normal(size=(6, 4)), rng.normal(size=(5, 4))
    assert np.array_equal(ev.zero_shot_predict(img * c, cls), ev.zero_shot_predict(img, cls))


def test_zero_shot_single_class_and_empty(model, suite):
    assert ev.zero_shot_classify(model, suite.prompts[:1], suite.zs_images[:3], [0, 0, 0]) == 1.0
    with pytest.raises(ValueError):
        ev.zero_shot_classify(model, suite.prompts, suite.zs_images[:0], [])


def test_zero_shot_untrained_is_near_chance(model):
    big = ev.EvalSuite.build(n_zeroshot=250, n_pairs=2, n_probe_train=2, n_probe_eval=2)
    acc = ev.zero_shot_classify(model, big.prompts, big.zs_images, big.zs_labels)
    assert abs(acc - 0.2) <= 0.1


def test_recall_orthogonal_pairs_perfect():
    for n in (2, 5, 16):
        e = np.eye(n)
        assert ev.recall_at_1(e, e) == (1.0, 1.0)


def test_recall_swapped_pairs_zero():
    v = np.eye(2)
    assert ev.recall_at_1(v, v[::-1].copy()) == (0.0, 0.0)


def test_recall_random_expectation():
    rng = np.random.default_rng(0)
    n, trials = 10, 3000
    vals = [ev.recall_at_1(rng.normal(size=(n, 8)), rng.normal(size=(n, 8))) for _ in range(trials)]
    mean = np.mean(vals, axis=0)
    assert np.allclose(mean, 1 / n, atol=0.01)


def test_recall_rejects_single_pair():
    with pytest.raises(ValueError):
        ev.recall_at_1(np.ones((1, 2)), np.ones((1, 2)))


def test_retrieval_flags_duplicates(model, suite):
    caps = [suite.ret_captions[0], suite.ret_captions[0]]
    _, _, dup = ev.retrieval_recall_at_1(model, suite.ret_images[:2], caps)
    assert dup
    _, _, dup = ev.retrieval_recall_at_1(model, suite.ret_images[:2], suite.ret_captions[:2])
    assert not dup


def test_suite_pairs_unique_beyond_prefix(suite):
    cores = [ev.strip_prefix(detokenize(c)) for c in suite.ret_captions]
    assert len(set(cores)) == len(cores) == 20
    assert ev.strip_prefix("a photo of a red circle on the top left") == "a red circle on the top left"
    assert ev.strip_prefix("a red circle on the top left") == "a red circle on the top left"


def test_suite_zero_shot_is_balanced(suite):
    assert np.bincount(suite.zs_labels).tolist() == [20] * 5


def test_rmse_baselines():
    rng = np.random.default_rng(0)
    y = rng.random((7, 4, 9))
    assert ev.rmse(np.full_like(y, y.mean()), y) == pytest.approx(y.std(), rel=1e-12)
    assert ev.rmse(y, y) == 0.0


def test_depth_targets_layout():
    d = np.arange(16.0).reshape(1, 4, 4)
    t = ev.depth_targets(d, 2)
    assert t.shape == (1, 4, 4)
    assert t[0, 0].tolist() == [0, 1, 4, 5]
    assert t[0, 3].tolist() == [10, 11, 14, 15]


def test_linear_probe_recovers_linear_map():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(200, 5))
    w = rng.normal(size=(5, 3))
    y = x @ w + 0.5
    coef = ev.fit_linear_probe(x, y, ridge=1e-9)
    assert np.allclose(coef[:5], w, atol=1e-6) and np.allclose(coef[5], 0.5, atol=1e-6)


def test_depth_probe_finite_and_evaluate_keys(model, suite):
    d, base, diverged = ev.depth_probe_rmse(model, suite.probe_train_images, suite.probe_train_depth,
                                            suite.probe_eval_images, suite.probe_eval_depth)
    assert not diverged and np.isfinite(d) and base > 0
    res = ev.evaluate(model, suite, checkpoint="x", seed=3)
    assert set(res) == set(ev.METRICS) | {"depth_baseline"}
    assert res["depth_baseline"].value == pytest.approx(base)
    assert res["zeroshot_acc"].to_record()["seed"] == 3
