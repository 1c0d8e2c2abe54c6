import numpy as np
import pytest

from twostream.autodiff import ShapeError, Tape, Tensor, no_grad
from twostream.blocks import bridge_route, fuse, parallel_block, routing_table, serial_block, temporal_conv
from twostream.unet import UNetConfig, build_unet, sinusoidal_embedding


def test_routing_table_is_identical_for_both_streams():
    want = {1: ("M0", "D4"), 2: ("U1", "D3"), 3: ("U2", "D2"), 4: ("U3", "D1")}
    assert routing_table("h") == routing_table("t") == want
    with pytest.raises(ValueError):
        routing_table("x")


def test_bridge_concatenates_in_table_order():
    d = [Tensor(np.full((1, 1, 1, 2, 2), float(i + 1))) for i in range(4)]
    m = Tensor(np.full((1, 1, 1, 2, 2), 9.0))
    out = bridge_route("h", d, m, 1).data
    np.testing.assert_array_equal(out[0, 0, :, 0, 0], [9.0, 4.0])
    u1 = Tensor(np.full((1, 1, 1, 2, 2), 7.0))
    np.testing.assert_array_equal(bridge_route("t", d, m, 2, [u1]).data[0, 0, :, 0, 0], [7.0, 3.0])


def test_bridge_errors():
    d = [Tensor(np.zeros((1, 1, 1, 2, 2))) for _ in range(4)]
    m = Tensor(np.zeros((1, 1, 1, 4, 4)))
    with pytest.raises(ShapeError, match="M0.*D4"):
        bridge_route("h", d, m, 1)
    with pytest.raises(ValueError, match="U1"):
        bridge_route("h", d, Tensor(np.zeros((1, 1, 1, 2, 2))), 2)


def block_inputs(cfg, model, rng, idx=1):
    blk = model.blocks[idx]
    h = Tensor(rng.normal(size=(1, cfg.frames, blk.c_in, 4, 4)))
    temb = model._embedding(np.array([3]), np.array([1]))
    return blk, h, temb


def test_zero_init_temporal_layers_are_identities(rng):
    cfg = UNetConfig(mode="serial", frames=4, height=16, width=16)
    model = build_unet(cfg)
    blk, h, temb = block_inputs(cfg, model, rng)
    with no_grad():
        full = serial_block(h, blk, temb).data
        sp = serial_block(h, blk, temb, spatial_only=True).data
    assert full.tobytes() == sp.tobytes()
    x = Tensor(rng.normal(size=(1, cfg.frames, blk.c_out, 4, 4)))
    assert temporal_conv(x, blk).data.tobytes() == x.data.tobytes()


def test_parallel_block_time_state_starts_at_hidden_state(rng):
    cfg = UNetConfig(frames=4, height=16, width=16)
    model = build_unet(cfg)
    blk, h, temb = block_inputs(cfg, model, rng, idx=0)
    hn, tn = parallel_block(h, h.detach(), blk, temb)
    # zero TA projection: t' = h' exactly
    assert tn.data.tobytes() == hn.data.tobytes()
    with pytest.raises(ShapeError):
        parallel_block(h, Tensor(np.zeros((1, cfg.frames, blk.c_in, 2, 2))), blk, temb)


def test_parallel_block_records_no_spatial_nodes_when_asked(rng):
    cfg = UNetConfig(frames=4, height=16, width=16)
    model = build_unet(cfg)
    blk, h, temb = block_inputs(cfg, model, rng, idx=0)
    with Tape() as tape:
        parallel_block(h, h.detach(), blk, temb, record_spatial=False)
    assert {n.layer_tag for n in tape.nodes} <= {"temporal", "plumbing"}
    assert {n.scope for n in tape.nodes} == {"tc", "ta"}


def test_fuse_at_init_returns_hidden_state(rng):
    model = build_unet(UNetConfig(frames=2, height=8, width=8))
    h = Tensor(rng.normal(size=(1, 2, 16, 8, 8)))
    t = Tensor(rng.normal(size=(1, 2, 16, 8, 8)))
    assert fuse(h, t, model.fusion["weight"], model.fusion["bias"]).data.tobytes() == h.data.tobytes()
    with pytest.raises(ShapeError):
        fuse(h, Tensor(np.zeros((1, 2, 16, 4, 4))), model.fusion["weight"], model.fusion["bias"])


def test_sinusoidal_embedding_rows_do_not_depend_on_batch():
    both = sinusoidal_embedding(np.array([3, 70]), 64)
    assert both[1].tobytes() == sinusoidal_embedding(np.array([70]), 64)[0].tobytes()
    np.testing.assert_allclose(sinusoidal_embedding(np.array([0]), 8)[0], [0, 0, 0, 0, 1, 1, 1, 1])
