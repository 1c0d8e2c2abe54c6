import numpy as np
import pytest

from twostream.data import SHAPES, SyntheticVideoSpec, make_dataset, shape_mask


def test_zero_velocity_gives_identical_frames():
    ds = make_dataset(SyntheticVideoSpec(velocities=((0, 0),)))
    clip = ds.clip(2, 5)
    for f in range(1, clip.shape[0]):
        assert clip[f].tobytes() == clip[0].tobytes()


def test_unit_velocity_wraps_back_after_width_frames():
    ds = make_dataset(SyntheticVideoSpec(frames=8, height=8, width=8, shape_size=3, velocities=((1, 0),)))
    clip = ds.clip(0, 0)
    for f in range(8):
        np.testing.assert_array_equal(clip[f], np.roll(clip[0], f, axis=2))
    assert clip[0].tobytes() == np.roll(clip[7], 1, axis=2).tobytes()


def test_items_are_deterministic_and_labelled():
    spec = SyntheticVideoSpec(samples_per_class=3)
    a, b = make_dataset(spec), make_dataset(spec)
    assert len(a) == 12
    for i in range(len(a)):
        (ca, ka), (cb, kb) = a[i], b[i]
        assert ca.tobytes() == cb.tobytes() and ka == kb == i % 4
    x, cond = a.batch([0, 5, 6])
    assert x.shape == (3, 8, 4, 32, 32) and cond.tolist() == [0, 1, 2]
    assert x.min() == -1.0 and x.max() <= 1.0
    assert make_dataset(SyntheticVideoSpec(seed=1))[0][0].tobytes() != a[0][0].tobytes()


def test_classes_use_distinct_stencils():
    masks = {k: shape_mask(k, 10).tobytes() for k in SHAPES}
    assert len(set(masks.values())) == len(SHAPES)
    assert shape_mask("square", 4).all()


@pytest.mark.parametrize("kw", [dict(shape_size=40), dict(shape_size=0), dict(num_classes=0), dict(frames=0)])
def test_invalid_specs_rejected(kw):
    with pytest.raises(ValueError):
        make_dataset(SyntheticVideoSpec(**kw))


def test_out_of_range_items():
    ds = make_dataset(SyntheticVideoSpec(samples_per_class=1))
    with pytest.raises(IndexError):
        ds[4]
    with pytest.raises(IndexError):
        ds.clip(4, 0)
    with pytest.raises(ValueError):
        shape_mask("star", 5)
