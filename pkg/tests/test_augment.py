import numpy as np
import pytest

from gliomaseg.augment import AugmentationConfig, augment, gamma_transform, rotation_matrix, spatial_transform


def _crafted(rng):
    image = rng.normal(size=(2, 7, 7, 7)).astype(np.float32)
    labels = np.zeros((7, 7, 7), np.uint8)
    labels[1:3, 2:5, 4:6] = 2
    labels[2, 3, 5] = 3
    labels[5, 1, 1] = 1
    return image, labels


def test_disabled_is_identity(rng):
    image, labels = _crafted(rng)
    out, lab = augment(image, labels, AugmentationConfig.disabled(), rng)
    np.testing.assert_array_equal(out, image)
    np.testing.assert_array_equal(lab, labels)
    assert out is not image


@pytest.mark.parametrize("axis,axes", [(0, (1, 2)), (1, (0, 2)), (2, (0, 1))])
def test_quarter_turn_matches_rot90(rng, axis, axes):
    image, labels = _crafted(rng)
    angles = [0.0, 0.0, 0.0]
    angles[axis] = 90.0
    out, lab = spatial_transform(image, labels, angles)
    np.testing.assert_allclose(out, np.rot90(image, 1, axes=tuple(a + 1 for a in axes)), atol=1e-5)
    np.testing.assert_array_equal(lab, np.rot90(labels, 1, axes=axes))


def test_identity_parameters_keep_labels(rng):
    image, labels = _crafted(rng)
    out, lab = spatial_transform(image, labels)
    np.testing.assert_array_equal(lab, labels)
    np.testing.assert_allclose(out, image, atol=1e-6)


def test_rotation_and_scaling_roughly_preserve_tumor_volume():
    labels = np.zeros((24, 24, 24), np.uint8)
    z, y, x = np.indices(labels.shape)
    labels[(z - 11.5) ** 2 + (y - 11.5) ** 2 + (x - 11.5) ** 2 <= 36] = 2
    image = labels[None].astype(np.float32)
    before = (labels > 0).sum()
    _, rot = spatial_transform(image, labels, (20.0, -15.0, 10.0))
    assert abs((rot > 0).sum() - before) / before < 0.2
    _, sc = spatial_transform(image, labels, scale=1.05)
    assert abs((sc > 0).sum() - before * 1.05 ** 3) / before < 0.2


def test_labels_stay_in_label_set(rng):
    image, labels = _crafted(rng)
    cfg = AugmentationConfig(p_rotation=1, p_scaling=1, p_elastic=1, p_brightness=1, p_gamma=1)
    _, lab = augment(image, labels, cfg, np.random.default_rng(3))
    assert set(np.unique(lab)) <= {0, 1, 2, 3}


def test_augment_deterministic_given_rng(rng):
    image, labels = _crafted(rng)
    cfg = AugmentationConfig(p_rotation=1, p_scaling=1, p_elastic=1, p_brightness=1, p_gamma=1)
    a = augment(image, labels, cfg, np.random.default_rng(11))
    b = augment(image, labels, cfg, np.random.default_rng(11))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_intensity_only_leaves_labels(rng):
    image, labels = _crafted(rng)
    cfg = AugmentationConfig(rotation=False, scaling=False, elastic=False, p_brightness=1, p_gamma=1)
    out, lab = augment(image, labels, cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(lab, labels)
    assert not np.array_equal(out, image)


def test_gamma_monotone_and_in_range(rng):
    x = rng.random(500)
    x[0], x[1] = 0.0, 1.0
    for g in (0.7, 1.0, 1.5):
        y = gamma_transform(x, g)
        assert y.min() >= 0 and y.max() <= 1
        order = np.argsort(x)
        assert np.all(np.diff(y[order]) >= 0)
    np.testing.assert_array_equal(gamma_transform(np.full(4, 2.0), 1.3), np.full(4, 2.0))


def test_rotation_matrix_orthonormal():
    r = rotation_matrix((10.0, 20.0, 30.0))
    np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(r) == pytest.approx(1.0)


def test_invalid_ranges_rejected():
    with pytest.raises(ValueError):
        AugmentationConfig(gamma_range=(0.0, 1.5))
    with pytest.raises(ValueError):
        AugmentationConfig(rotation_deg=(10.0, -10.0))
    with pytest.raises(ValueError):
        AugmentationConfig(p_gamma=1.5)
