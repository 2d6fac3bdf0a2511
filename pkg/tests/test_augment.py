import numpy as np
import pytest

from dentaldet.augment import (
    AugmentConfig,
    Sample,
    affine_matrix,
    apply_affine,
    apply_augmentations,
    horizontal_flip,
    transform_box,
)
from dentaldet.core import ALL_FDI, flip_fdi
from dentaldet.dataio import AnnotationTier
from dentaldet.errors import DegenerateTransform
from conftest import record


def random_sample(rng, width=100, height=60, n=6):
    image = rng.integers(0, 256, size=(height, width, 1), dtype=np.uint8)
    recs = []
    codes = rng.choice([f.code() for f in ALL_FDI], size=n, replace=False)
    for code in codes:
        x0, y0 = rng.uniform(0, width - 10), rng.uniform(0, height - 10)
        x1, y1 = rng.uniform(x0 + 1, width), rng.uniform(y0 + 1, height)
        attrs = tuple(bool(v) for v in rng.integers(0, 2, size=4))
        recs.append(record((x0, y0, x1, y1), int(code), attrs))
    recs.append(record((1, 2, 30, 40), quadrant=int(rng.integers(1, 5))))
    return Sample(image, recs, AnnotationTier.DISEASE, image_id=3)


def test_flip_example():
    s = Sample(np.zeros((50, 100, 1), np.uint8), [record((10, 20, 30, 40), 14, (False, False, False, True))], AnnotationTier.DISEASE)
    (rec,) = horizontal_flip(s).records
    assert rec.fdi.code() == 24
    assert rec.box.as_tuple() == (70, 20, 90, 40)
    assert rec.attributes.as_tuple() == (False, False, False, True)


def test_flip_quadrant_only_record():
    s = Sample(np.zeros((50, 100)), [record((10, 20, 30, 40), quadrant=3)], AnnotationTier.QUADRANT)
    assert horizontal_flip(s).records[0].quadrant == 4


def test_flip_twice_is_identity(rng):
    for _ in range(100):
        s = random_sample(rng)
        twice = horizontal_flip(horizontal_flip(s))
        assert np.array_equal(twice.image, s.image)
        assert twice.records == s.records


def test_flip_preserves_areas_and_positions(rng):
    s = random_sample(rng)
    f = horizontal_flip(s)
    for a, b in zip(s.records, f.records):
        assert a.box.area == b.box.area
    pos = lambda recs, qs: sorted(r.fdi.position for r in recs if r.fdi and r.fdi.quadrant in qs)
    assert pos(s.records, (1, 2)) == pos(f.records, (1, 2))
    assert pos(s.records, (3, 4)) == pos(f.records, (3, 4))


def test_flip_fdi_table():
    table = {1: 2, 2: 1, 3: 4, 4: 3}
    for f in ALL_FDI:
        g = flip_fdi(f)
        assert (g.quadrant, g.position) == (table[f.quadrant], f.position)


def test_identity_config_leaves_sample_unchanged(rng):
    s = random_sample(rng)
    out = apply_augmentations(s, AugmentConfig.identity(), seed=5)
    assert np.array_equal(out.image, s.image) and out.records == s.records


def test_same_seed_same_output(rng):
    s = random_sample(rng)
    a = apply_augmentations(s, AugmentConfig(), seed=11)
    b = apply_augmentations(s, AugmentConfig(), seed=11)
    assert a.image.tobytes() == b.image.tobytes()
    assert a.records == b.records


def test_translation_moves_boxes_and_clips():
    s = Sample(np.zeros((50, 100, 1), np.uint8),
               [record((10, 5, 20, 15), 11), record((85, 5, 95, 15), 12)], AnnotationTier.ENUMERATION)
    out = apply_affine(s, affine_matrix(100, 50, shift=(10, 0)), min_visibility=0.25)
    assert out.records[0].box.as_tuple() == pytest.approx((20, 5, 30, 15))
    assert out.records[1].box.as_tuple() == pytest.approx((95, 5, 100, 15))


def test_translation_moves_pixels():
    img = np.zeros((20, 40), np.float64)
    img[5:10, 5:10] = 1.0
    s = Sample(img, [], AnnotationTier.ENUMERATION)
    out = apply_affine(s, affine_matrix(40, 20, shift=(10, 0)))
    assert np.allclose(out.image[:, 10:40], img[:, 0:30])


def test_sliver_is_dropped():
    s = Sample(np.zeros((50, 100)), [record((90, 5, 99, 15), 11)], AnnotationTier.ENUMERATION)
    assert apply_affine(s, affine_matrix(100, 50, shift=(9, 0))).records == ()


def test_box_is_hull_of_transformed_corners(rng):
    for _ in range(50):
        m = affine_matrix(200, 100, rng.uniform(0.8, 1.2), rng.uniform(-10, 10), rng.uniform(-10, 10, 2))
        s = Sample(np.zeros((100, 200)), [record((80, 30, 120, 70), 11)], AnnotationTier.ENUMERATION)
        (rec,) = apply_affine(s, m, 0.0).records
        c = np.array([[80, 30], [120, 30], [80, 70], [120, 70]], float) @ m[:, :2].T + m[:, 2]
        hull = (c[:, 0].min(), c[:, 1].min(), c[:, 0].max(), c[:, 1].max())
        assert rec.box.as_tuple() == pytest.approx(hull, abs=1e-6)
        assert transform_box(s.records[0].box, m) == pytest.approx(hull, abs=1e-6)


def test_degenerate_transform_rejected():
    s = Sample(np.zeros((10, 10)), [], AnnotationTier.ENUMERATION)
    with pytest.raises(DegenerateTransform):
        apply_affine(s, np.array([[-1.0, 0, 10], [0, 1.0, 0]]))
    with pytest.raises(DegenerateTransform):
        AugmentConfig(scale=1.0)
