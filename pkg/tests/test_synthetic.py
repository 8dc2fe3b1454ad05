import numpy as np
import pytest

from cycledeform.synthetic import (
    BUILDERS,
    FAMILIES,
    SynthSpec,
    generate_synthetic,
    part_areas,
    sample_boxes,
    sample_parameters,
)


@pytest.mark.parametrize("family", sorted(FAMILIES))
def test_deterministic_in_seed(family):
    a = generate_synthetic(SynthSpec(family, 4, 11, 300))
    b = generate_synthetic(SynthSpec(family, 4, 11, 300))
    c = generate_synthetic(SynthSpec(family, 4, 12, 300))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.points, y.points)
        np.testing.assert_array_equal(x.labels, y.labels)
    assert not np.array_equal(a[0].points, c[0].points)
    assert [s.name for s in a] == [f"{family}_{i:04d}" for i in range(4)]


@pytest.mark.parametrize("family", sorted(FAMILIES))
def test_labels_cover_every_part_and_clouds_are_normalised(family):
    for s in generate_synthetic(SynthSpec(family, 5, 0, 2048)):
        L = len(FAMILIES[family])
        assert s.num_parts == L
        assert set(np.unique(s.labels)) == set(range(L))
        lo, hi = s.points.min(axis=0), s.points.max(axis=0)
        np.testing.assert_allclose((lo + hi) / 2, 0, atol=1e-12)
        assert np.max(hi - lo) == pytest.approx(2.0, abs=1e-12)


def test_unit_cube_area_and_surface_points():
    boxes = [(np.zeros(3), np.ones(3), 0)]
    assert part_areas(boxes, 1)[0] == pytest.approx(6.0)
    pts, labels = sample_boxes(boxes, 500, np.random.default_rng(0))
    # every point lies on some face of the cube
    assert np.all(np.isclose(np.abs(pts).max(axis=1), 0.5))
    assert np.all(labels == 0)


def test_zero_thickness_legs_leave_only_the_top():
    spec = SynthSpec("table", 3, 0, 500, ranges={"leg_thickness": (0.0, 0.0)})
    for s in generate_synthetic(spec):
        assert np.all(s.labels == 0)


@pytest.mark.parametrize("family", sorted(FAMILIES))
def test_part_fractions_follow_surface_area(family):
    spec = SynthSpec(family, 1, 5)
    rng = np.random.default_rng(5)
    params, legs = sample_parameters(spec, rng)
    boxes = BUILDERS[family](params, legs)
    n = 20_000
    _, labels = sample_boxes(boxes, n, rng)
    p = part_areas(boxes, spec.num_parts)
    p = p / p.sum()
    frac = np.bincount(labels, minlength=spec.num_parts) / n
    sigma = np.sqrt(p * (1 - p) / n)
    assert np.all(np.abs(frac - p) <= 3 * sigma + 1e-12)


def test_leg_counts_and_ranges():
    spec = SynthSpec("chair", 1, 0, leg_counts=(3,), ranges={"leg_height": (0.8, 0.8)})
    params, legs = sample_parameters(spec, np.random.default_rng(0))
    assert legs == 3 and params["leg_height"] == 0.8
    assert sum(1 for b in BUILDERS["chair"](params, legs) if b[2] == 2) == 3
    for bad in (dict(family="sofa"), dict(count=0), dict(ranges={"nope": (0, 1)}),
                dict(ranges={"leg_height": (2, 1)}), dict(leg_counts=(5,))):
        with pytest.raises(ValueError):
            SynthSpec(**{"family": "chair", **bad})
