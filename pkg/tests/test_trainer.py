import numpy as np
import pytest

from twostream.autodiff import Tape, backward
from twostream.data import SyntheticVideoSpec, make_dataset
from twostream.diffusion import denoise_loss, make_schedule
from twostream.trainer import (
    Adam, TrainOptions, TrainingAborted, TuningMode, set_tuning_mode, train,
)
from twostream.unet import build_unet


def _setup(cfg):
    spec = SyntheticVideoSpec(frames=cfg.frames, height=cfg.height, width=cfg.width, shape_size=6,
                              samples_per_class=2)
    return build_unet(cfg), make_dataset(spec), make_schedule(cfg.num_timesteps)


def _state(model):
    return {n: p.data.copy() for n, p in model.params.items()}


def test_delta_freezes_exactly_the_spatial_tag(small_cfg):
    model = build_unet(small_cfg)
    set_tuning_mode(model, TuningMode.DELTA)
    frozen = {n for n, p in model.params.items() if p.frozen}
    assert frozen == {p.name for p in model.by_tag("spatial")}
    assert sum(model.params[n].size for n in frozen) == model.census()["spatial"]
    set_tuning_mode(model, "full")
    assert not any(p.frozen for p in model.params.values())
    with pytest.raises(ValueError):
        set_tuning_mode(model, "partial")


def test_delta_gradients_cover_temporal_and_plumbing(small_cfg):
    model, ds, s = _setup(small_cfg)
    set_tuning_mode(model, "delta")
    x, cond = ds.batch([0, 1])
    with Tape() as tape:
        loss = denoise_loss(model, x, cond, s, np.random.default_rng(0))
    grads = backward(tape, loss)
    want = {p.name for p in model.parameters() if p.tag in ("temporal", "plumbing")}
    assert set(grads) == want
    assert all(model.params[n].grad is None for n in model.params if n not in want)


def test_adam_first_step_is_sign_times_lr():
    from twostream.autodiff import Parameter
    p = Parameter("w", np.array([1.0, -2.0, 3.0]), tag="temporal")
    q = Parameter("f", np.array([5.0]), tag="spatial", frozen=True)
    p.grad = np.array([0.5, -4.0, 0.0])
    opt = Adam([p, q], lr=0.1)
    assert opt.step() == ["w"]
    np.testing.assert_allclose(p.data, [0.9, -1.9, 3.0], rtol=1e-6)
    assert q.data.tolist() == [5.0]


def test_zero_lr_leaves_weights_bitwise(small_cfg):
    model, ds, s = _setup(small_cfg)
    before = _state(model)
    report = train(model, ds, s, "full", TrainOptions(steps=1, batch=1, accumulation=1, lr=0.0))
    assert len(report.losses) == 1
    assert all(before[n].tobytes() == p.data.tobytes() for n, p in model.params.items())


def test_delta_training_never_touches_spatial_bytes(small_cfg):
    model, ds, s = _setup(small_cfg)
    before = model.state_bytes("spatial")
    report = train(model, ds, s, "delta", TrainOptions(steps=2, batch=1, accumulation=1))
    assert model.state_bytes("spatial") == before
    assert report.touched == {p.name for p in model.parameters() if p.tag != "spatial"}
    assert model.state_bytes("temporal") != build_unet(small_cfg).state_bytes("temporal")


def test_accumulation_matches_single_batch(small_cfg):
    a, ds, s = _setup(small_cfg)
    b, _, _ = _setup(small_cfg)
    ra = train(a, ds, s, "delta", TrainOptions(steps=2, batch=2, accumulation=1, seed=3))
    rb = train(b, ds, s, "delta", TrainOptions(steps=2, batch=1, accumulation=2, seed=3))
    assert all(a.params[n].data.tobytes() == b.params[n].data.tobytes() for n in a.params)
    np.testing.assert_allclose(ra.losses, rb.losses, rtol=1e-14)


def test_non_finite_input_aborts_with_step_index(small_cfg):
    model, ds, s = _setup(small_cfg)

    class Poisoned:
        calls = 0

        def __len__(self):
            return len(ds)

        def batch(self, idx):
            self.calls += 1
            x, c = ds.batch(idx)
            if self.calls == 3:
                x[0, 0, 0, 0, 0] = np.nan
            return x, c

    with pytest.raises(TrainingAborted) as info:
        train(model, Poisoned(), s, "delta", TrainOptions(steps=5, batch=1, accumulation=1))
    assert info.value.step == 2


def test_report_files(tmp_path, small_cfg):
    model, ds, s = _setup(small_cfg)
    report = train(model, ds, s, "delta", TrainOptions(steps=2, batch=1, accumulation=1))
    report.write_csv(tmp_path / "train.csv")
    lines = (tmp_path / "train.csv").read_text().splitlines()
    assert lines[0] == "step,loss,ms,retained_bytes" and len(lines) == 3
    assert float(lines[1].split(",")[1]) == report.losses[0]
    report.write_summary(tmp_path / "summary.txt", "mode=parallel")
    text = (tmp_path / "summary.txt").read_text()
    assert "steps: 2" in text and "config: mode=parallel" in text


def test_options_validation():
    for kw in (dict(steps=-1), dict(batch=0), dict(accumulation=0), dict(lr=-1.0)):
        with pytest.raises(ValueError):
            TrainOptions(**kw).validate()
