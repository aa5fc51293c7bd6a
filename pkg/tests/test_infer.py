import numpy as np
import pytest
import torch

from gliomaseg.checkpoint import from_model, to_model
from gliomaseg.infer import (
    InferenceConfig, compose_prediction, ensemble, evaluate_models, predict_case, predict_probabilities,
    sliding_window_infer, window_starts, window_weights,
)
from gliomaseg.phantom import PhantomSpec, generate_cases
from gliomaseg.segnet import baseline_config, build, expanded_config
from gliomaseg.train import train
from gliomaseg.volume import Geometry, MultiModalVolume, is_hierarchical, labels_to_regions

SMALL = PhantomSpec(shape=(16, 16, 16), et_radius=(1, 1.5), tc_radius=(2, 2.5), wt_radius=(3, 4), seed=4)


class Constant:
    def __init__(self, values):
        self.values = torch.tensor(values, dtype=torch.float32).view(1, 3, 1, 1, 1)

    def __call__(self, x):
        return self.values.expand(1, 3, *x.shape[2:]).clone()


class StartMarker:
    """Emits ``a`` for the window at the origin of axis 2 and ``b`` for any other window."""

    def __init__(self, a, b):
        self.a, self.b, self.calls = a, b, 0

    def __call__(self, x):
        self.calls += 1
        value = self.a if self.calls == 1 else self.b
        return torch.full((1, 3, *x.shape[2:]), value)


def test_window_starts_cover_and_overlap():
    assert window_starts(8, 8, 0.5) == [0]
    assert window_starts(5, 8, 0.5) == [0]
    assert window_starts(16, 8, 0.5) == [0, 4, 8]
    starts = window_starts(21, 8, 0.5)
    assert starts[0] == 0 and starts[-1] == 13
    assert all(0 < b - a <= 4 for a, b in zip(starts, starts[1:]))


def test_window_weights_positive():
    w = window_weights((8, 6, 4))
    assert (w > 0).all() and w.max() == 1.0
    assert (window_weights((3, 3, 3), "uniform") == 1).all()


@pytest.mark.parametrize("overlap,weighting", [(0.0, "uniform"), (0.5, "gaussian"), (0.75, "gaussian")])
def test_constant_model_gives_constant(overlap, weighting):
    vol = np.zeros((4, 13, 17, 9), np.float32)
    cfg = InferenceConfig(patch_shape=(8, 8, 8), overlap=overlap, weighting=weighting)
    out = sliding_window_infer(Constant([0.3, 0.6, 0.9]), vol, cfg)
    assert out.shape == (3, 13, 17, 9)
    for c, v in enumerate((0.3, 0.6, 0.9)):
        np.testing.assert_allclose(out[c], v, rtol=0, atol=1e-6)


def test_padding_is_transparent():
    vol = np.zeros((4, 5, 6, 7), np.float32)
    out = sliding_window_infer(Constant([0.2, 0.2, 0.2]), vol, InferenceConfig(patch_shape=(8, 8, 8)))
    assert out.shape == (3, 5, 6, 7)
    np.testing.assert_allclose(out, 0.2, atol=1e-6)


def test_two_overlapping_windows_average():
    vol = np.zeros((4, 4, 4, 12), np.float32)
    cfg = InferenceConfig(patch_shape=(4, 4, 8), overlap=0.5, weighting="uniform")
    assert window_starts(12, 8, 0.5) == [0, 4]
    out = sliding_window_infer(StartMarker(0.2, 0.6), vol, cfg)
    np.testing.assert_allclose(out[:, :, :, :4], 0.2, atol=1e-7)
    np.testing.assert_allclose(out[:, :, :, 4:8], (0.2 + 0.6) / 2, atol=1e-7)
    np.testing.assert_allclose(out[:, :, :, 8:], 0.6, atol=1e-7)


def test_single_window_equals_forward(rng):
    model = build(baseline_config(base_filters=4, levels=2, patch_shape=(8, 8, 8)), init_seed=3)
    model.eval()
    vol = rng.normal(size=(4, 8, 8, 8)).astype(np.float32)
    out = sliding_window_infer(model, vol)
    with torch.no_grad():
        ref = model(torch.from_numpy(vol)[None])[0][0].numpy()
    np.testing.assert_allclose(out, ref, atol=1e-6)


def test_callable_needs_patch_shape():
    with pytest.raises(ValueError):
        sliding_window_infer(Constant([0, 0, 0]), np.zeros((4, 8, 8, 8), np.float32))


def test_ensemble_examples(rng):
    m = rng.random((3, 4, 4, 4)).astype(np.float32)
    np.testing.assert_array_equal(ensemble([m, m]), m)
    np.testing.assert_allclose(ensemble([np.zeros((3, 2, 2, 2)), np.ones((3, 2, 2, 2))]), 0.5)
    np.testing.assert_allclose(ensemble([np.full((3, 2), 0.2), np.full((3, 2), 0.6)], (0.25, 0.75)), 0.5, atol=1e-7)
    a, b, c = (rng.random((3, 5)) for _ in range(3))
    np.testing.assert_allclose(ensemble([a, b, c]), ensemble([c, a, b]), atol=1e-7)
    with pytest.raises(ValueError):
        ensemble([m, m[:, :2]])
    with pytest.raises(ValueError):
        ensemble([m, m], (0.7, 0.7))
    with pytest.raises(ValueError):
        ensemble([])


@pytest.mark.parametrize("probs,label", [((0.9, 0.9, 0.9), 3), ((0.1, 0.1, 0.9), 2), ((0.9, 0.1, 0.1), 3),
                                         ((0.1, 0.9, 0.9), 1), ((0.1, 0.1, 0.1), 0)])
def test_compose_prediction_examples(probs, label):
    p = np.array(probs, np.float32).reshape(3, 1, 1, 1)
    assert compose_prediction(p).labels[0, 0, 0] == label


def test_inference_config_validation():
    with pytest.raises(ValueError):
        InferenceConfig(overlap=1.0)
    with pytest.raises(ValueError):
        InferenceConfig(threshold=1.0)
    with pytest.raises(ValueError):
        InferenceConfig(ensemble_weights=(0.5, 0.6))
    with pytest.raises(ValueError):
        InferenceConfig(weighting="cosine")


def test_ensemble_of_disagreeing_models_differs_from_each():
    image = MultiModalVolume(np.ones((4, 8, 8, 8), np.float32), Geometry((8, 8, 8)))
    cfg = InferenceConfig(patch_shape=(8, 8, 8))
    hot, cold = Constant([0.9, 0.9, 0.9]), Constant([0.1, 0.1, 0.4])
    assert (predict_case([hot], image, cfg).labels == 3).all()
    assert (predict_case([cold], image, cfg).labels == 0).all()
    # mean probabilities (0.5, 0.5, 0.65): only WT crosses 0.5
    assert (predict_case([hot, cold], image, cfg).labels == 2).all()


def test_duplicate_checkpoint_equals_single(rng):
    model = build(expanded_config(base_filters=4, levels=2, patch_shape=(8, 8, 8)), init_seed=1)
    image = MultiModalVolume(rng.normal(size=(4, 12, 12, 12)).astype(np.float32), Geometry((12, 12, 12)))
    twin = to_model(from_model(model))
    one = predict_probabilities([model], image)
    two = predict_probabilities([model, twin], image)
    np.testing.assert_allclose(one, two, atol=1e-7)
    np.testing.assert_array_equal(predict_case([model], image).labels,
                                  predict_case([model], image, InferenceConfig(ensemble_weights=(1.0,))).labels)


def test_trained_pair_emits_valid_labels():
    cases = generate_cases(SMALL, 4)
    models = []
    for i, make in enumerate((baseline_config, expanded_config)):
        m, _ = train(build(make(base_filters=4, levels=2, patch_shape=(8, 8, 8)), init_seed=i), cases[:3], steps=20)
        models.append(m)
    pred = predict_case(models, cases[3])
    assert pred.labels.shape == cases[3].labels.labels.shape
    r = labels_to_regions(pred)
    assert is_hierarchical(r.et, r.tc, r.wt)
    (metrics,) = evaluate_models(models, cases[3:])
    assert all(0 <= d <= 1 for d in metrics.dice)
    assert all(np.isfinite(h) for h in metrics.hd95)
