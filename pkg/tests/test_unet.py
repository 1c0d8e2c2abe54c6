import hashlib
from pathlib import Path

import numpy as np
import pytest

from twostream.autodiff import ShapeError, no_grad
from twostream.unet import UNetConfig, build_unet, load_checkpoint, parse_config_echo, save_checkpoint

FIXTURE = Path(__file__).parent / "fixtures" / "pretrained_spatial.sha256"


def block_counts(c_in, c, t_in, E, ff):
    m = ff * c
    spatial = E * c + c
    for ci in (c_in, c):
        spatial += 2 * ci + 9 * ci * c + c + 2 * c + 9 * c * c + c
        if ci != c:
            spatial += ci * c + c
    spatial += 2 * c + (c * c + c) + 4 * (c * c + c) + 2 * c + (c * m + m) + (m * c + c) + (c * c + c)
    temporal = 2 * c + (3 * c + c) + 2 * c + (3 * c + c) + 2 * c + 4 * (c * c + c)
    if t_in != c:
        temporal += t_in * c + c
    return spatial, temporal


def closed_form_census(cfg):
    b, E, ff, cin = cfg.base_width, cfg.embed_dim, cfg.ff_mult, cfg.in_channels
    w = cfg.widths
    parallel = cfg.mode == "parallel"
    s = 9 * cin * b + b + 2 * (E * E + E) + cfg.cond_vocab * E + 2 * b + 9 * b * cin + cin
    t = plumbing = 0
    prev = b
    for c in w:
        ds, dt = block_counts(prev, c, prev if parallel else c, E, ff)
        s, t, prev = s + ds, t + dt, c
    ds, dt = block_counts(w[-1], w[-1], w[-1], E, ff)
    s, t = s + ds, t + dt
    up = w[::-1]
    for k in range(4):
        first = w[-1] if k == 0 else up[k - 1]
        fan = first + w[3 - k]
        s += fan * up[k] + up[k]
        if parallel:
            t += fan * up[k] + up[k]
        ds, dt = block_counts(up[k], up[k], up[k], E, ff)
        s, t = s + ds, t + dt
    if parallel:
        plumbing = 2 * b * b * cfg.fusion_kernel ** 2 + b
    return {"spatial": s, "temporal": t, "plumbing": plumbing, "total": s + t + plumbing}


@pytest.mark.parametrize("mode", ["serial", "parallel"])
def test_census_matches_closed_form(mode):
    cfg = UNetConfig(mode=mode)
    assert build_unet(cfg).census() == closed_form_census(cfg)


def test_default_census_values():
    assert build_unet(UNetConfig(mode="serial")).census()["total"] == 886340
    assert build_unet(UNetConfig(mode="parallel")).census() == {
        "spatial": 812420, "temporal": 90800, "plumbing": 4624, "total": 907844}


def test_config_validation():
    with pytest.raises(ValueError):
        UNetConfig(channel_multipliers=(1, 0, 2, 4))
    with pytest.raises(ValueError):
        UNetConfig(channel_multipliers=(1, 2, 4))
    with pytest.raises(ValueError):
        UNetConfig(height=20)
    with pytest.raises(ValueError):
        UNetConfig(mode="diagonal")
    with pytest.raises(ValueError):
        UNetConfig(base_width=12)


def test_spatial_weights_match_committed_fixture():
    want = [ln for ln in FIXTURE.read_text().splitlines() if ln and not ln.startswith("#")][0]
    for mode in ("serial", "parallel"):
        m = build_unet(UNetConfig(mode=mode))
        assert hashlib.sha256(m.state_bytes("spatial")).hexdigest() == want


def test_build_is_deterministic_and_seeded():
    a = build_unet(UNetConfig(seed=3, frames=2, height=8, width=8))
    b = build_unet(UNetConfig(seed=3, frames=2, height=8, width=8))
    c = build_unet(UNetConfig(seed=4, frames=2, height=8, width=8))
    assert a.state_bytes() == b.state_bytes() != c.state_bytes()


def test_forward_input_validation(small_cfg, rng):
    m = build_unet(small_cfg)
    x = rng.normal(size=(1, 4, 4, 16, 16))
    with pytest.raises(ShapeError):
        m(rng.normal(size=(1, 4, 4, 8, 8)), [0], [0])
    with pytest.raises(ValueError):
        m(x, [small_cfg.num_timesteps], [0])
    with pytest.raises(IndexError):
        m(x, [0], [small_cfg.cond_vocab])


def test_spatial_only_forward_agrees_across_wirings(small_cfg, rng):
    # both wirings reduce to the same spatial network when temporal layers are dropped
    x = rng.normal(size=(2, 4, 4, 16, 16))
    with no_grad():
        p = build_unet(small_cfg)(x, [5, 50], [0, 3], spatial_only=True).data
        s_model = build_unet(small_cfg.replace(mode="serial"))
        s = s_model(x, [5, 50], [0, 3], spatial_only=True).data
        s_full = s_model(x, [5, 50], [0, 3]).data
    assert p.tobytes() == s.tobytes() == s_full.tobytes()


def test_forward_is_batch_independent(small_cfg, rng):
    m = build_unet(small_cfg)
    for p in m.by_tag("temporal") + m.by_tag("plumbing"):
        p.data[...] += 0.1 * rng.normal(size=p.shape)
    x = rng.normal(size=(2, 4, 4, 16, 16))
    with no_grad():
        both = m(x, [7, 60], [1, 2]).data
        one = m(x[1:], [60], [2]).data
    assert both[1].tobytes() == one[0].tobytes()


def test_checkpoint_round_trip(tmp_path, small_cfg, rng):
    m = build_unet(small_cfg.replace(seed=9))
    m.params["fusion.bias"].data[...] = rng.normal(size=16)
    m.params["down.0.tc.norm1.weight"].frozen = True
    save_checkpoint(m, tmp_path / "ck", {"note": "x"})
    manifest = (tmp_path / "ck" / "manifest.txt").read_text()
    assert manifest.startswith("# seed: 9\n# config: ")
    back = load_checkpoint(tmp_path / "ck")
    assert back.cfg == m.cfg
    assert back.state_bytes() == m.state_bytes()
    assert back.params["down.0.tc.norm1.weight"].frozen
    assert parse_config_echo(m.cfg.echo()) == m.cfg
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing")
