"""Spatial/temporal sub-layers and the two block wirings.

A block owns four sub-layers:

* SC  spatial conv stack: two residual units (GN, SiLU, 3x3 conv, timestep
      injection, GN, SiLU, 3x3 conv), 1x1 projection shortcut on channel change
* SA  spatial transformer: GN, 1x1 in-projection, attention, GN + 1x1
      feed-forward, 1x1 out-projection, all residual
* TC  temporal conv unit: GN, SiLU, depthwise frame conv, twice, residual
* TA  temporal attention: GN then attention across frames

Serial wiring chains them ``TA(SA(TC(SC(h))))``.  Parallel wiring keeps a
second state ``t``: ``h' = SA(SC(h))`` and ``t' = h' + TA(SC(h) + TC(t))``,
where the spatial values enter the ``t`` branch as constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

from .autodiff import Parameter, ShapeError, Tensor, name_scope, recording
from .autodiff import ops

ATTN_KEYS = ("q.weight", "q.bias", "k.weight", "k.bias", "v.weight", "v.bias", "o.weight", "o.bias")

# U_k <- (first operand, second operand), concatenated on channels in this order
ROUTES = {1: ("M0", "D4"), 2: ("U1", "D3"), 3: ("U2", "D2"), 4: ("U3", "D1")}


@dataclass(eq=False)
class BlockParams:
    name: str
    c_in: int
    c_out: int
    groups: int
    sc: dict = field(default_factory=dict)
    sa: dict = field(default_factory=dict)
    tc: dict = field(default_factory=dict)
    ta: dict = field(default_factory=dict)
    time_proj: dict = field(default_factory=dict)

    def groups_by_name(self) -> dict:
        return {"sc": self.sc, "sa": self.sa, "tc": self.tc, "ta": self.ta, "time_proj": self.time_proj}

    def all_params(self) -> list[Parameter]:
        return [p for g in self.groups_by_name().values() for p in g.values()]


def _attn_params(group: dict, prefix: str = "attn.") -> list[Parameter]:
    return [group[prefix + k] for k in ATTN_KEYS]


def _res_unit(x: Tensor, sc: dict, u: int, tinj: Tensor, groups: int) -> Tensor:
    g = lambda k: sc[f"res{u}.{k}"]  # noqa: E731
    h = ops.group_norm(x, g("norm1.weight"), g("norm1.bias"), groups)
    h = ops.silu(h)
    h = ops.conv_spatial(h, g("conv1.weight"), g("conv1.bias"))
    h = ops.add(h, tinj)
    h = ops.group_norm(h, g("norm2.weight"), g("norm2.bias"), groups)
    h = ops.silu(h)
    h = ops.conv_spatial(h, g("conv2.weight"), g("conv2.bias"))
    if f"res{u}.shortcut.weight" in sc:
        x = ops.conv_spatial(x, g("shortcut.weight"), g("shortcut.bias"))
    return ops.add(x, h)


def spatial_conv(h: Tensor, p: BlockParams, temb_act: Tensor) -> Tensor:
    """SC.  ``temb_act`` is the activated [B, E] timestep/condition embedding."""
    tinj = ops.linear(temb_act, p.time_proj["weight"], p.time_proj["bias"])
    h = _res_unit(h, p.sc, 0, tinj, p.groups)
    return _res_unit(h, p.sc, 1, tinj, p.groups)


def spatial_attn(x: Tensor, p: BlockParams) -> Tensor:
    sa = p.sa
    n = ops.group_norm(x, sa["norm1.weight"], sa["norm1.bias"], p.groups)
    a_in = ops.conv_spatial(n, sa["proj_in.weight"], sa["proj_in.bias"])
    a = ops.add(a_in, ops.attn_spatial(a_in, _attn_params(sa)))
    n2 = ops.group_norm(a, sa["norm2.weight"], sa["norm2.bias"], p.groups)
    f = ops.silu(ops.conv_spatial(n2, sa["ff_in.weight"], sa["ff_in.bias"]))
    a = ops.add(a, ops.conv_spatial(f, sa["ff_out.weight"], sa["ff_out.bias"]))
    return ops.add(x, ops.conv_spatial(a, sa["proj_out.weight"], sa["proj_out.bias"]))


def temporal_conv(x: Tensor, p: BlockParams) -> Tensor:
    """TC.  A channel change (parallel stream only) goes through a 1x1
    projection first; the residual then wraps the depthwise frame convs."""
    tc = p.tc
    if "proj.weight" in tc:
        x = ops.linear(x, tc["proj.weight"], tc["proj.bias"])
    h = ops.silu(ops.group_norm(x, tc["norm1.weight"], tc["norm1.bias"], p.groups))
    h = ops.conv_temporal(h, tc["conv1.weight"], tc["conv1.bias"])
    h = ops.silu(ops.group_norm(h, tc["norm2.weight"], tc["norm2.bias"], p.groups))
    h = ops.conv_temporal(h, tc["conv2.weight"], tc["conv2.bias"])
    return ops.add(x, h)


def temporal_attn_branch(x: Tensor, p: BlockParams) -> Tensor:
    """TA without its residual; zero out-projection makes this exactly 0."""
    ta = p.ta
    n = ops.group_norm(x, ta["norm.weight"], ta["norm.bias"], p.groups)
    return ops.attn_temporal(n, _attn_params(ta))


def serial_block(h: Tensor, p: BlockParams, temb_act: Tensor, spatial_only: bool = False) -> Tensor:
    with name_scope("sc"):
        h = spatial_conv(h, p, temb_act)
    if not spatial_only:
        with name_scope("tc"):
            h = temporal_conv(h, p)
    with name_scope("sa"):
        h = spatial_attn(h, p)
    if not spatial_only:
        with name_scope("ta"):
            h = ops.add(h, temporal_attn_branch(h, p))
    return h


def parallel_block(h: Tensor, t: Optional[Tensor], p: BlockParams, temb_act: Tensor,
                   record_spatial: bool = True, taps: Optional[list] = None):
    """Returns ``(h_next, t_next)``; ``t=None`` runs the spatial path only.

    The spatial path is recorded only when ``record_spatial``; either way its
    outputs are grafted into the temporal branch as constants.
    """
    if t is not None and t.shape != h.shape:
        raise ShapeError(f"hidden/time state shape mismatch: {h.shape} vs {t.shape}")
    with recording(record_spatial):
        with name_scope("sc"):
            s = spatial_conv(h, p, temb_act)
        with name_scope("sa"):
            h_next = spatial_attn(s, p)
    if taps is not None:
        taps.extend((s, h_next))
    if t is None:
        return h_next, None
    with name_scope("tc"):
        mixed = ops.add(s.detach(), temporal_conv(t, p))
    with name_scope("ta"):
        t_next = ops.add(h_next.detach(), temporal_attn_branch(mixed, p))
    return h_next, t_next


def routing_table(stream: str) -> dict:
    if stream not in ("h", "t"):
        raise ValueError(f"stream must be 'h' or 't', got {stream!r}")
    return dict(ROUTES)


def bridge_route(stream: str, down_outputs: Sequence[Tensor], mid_output: Tensor,
                 up_index: int, up_outputs: Sequence[Tensor] = ()) -> Tensor:
    """Skip routing into up block ``U_{up_index}`` (1-based).

    ``down_outputs`` are D_1..D_4 (pre-downsampling); ``up_outputs`` are the
    already-upsampled outputs of the up blocks processed so far.
    """
    first, second = routing_table(stream)[up_index]
    lookup = {"M0": mid_output}
    lookup.update({f"D{i + 1}": d for i, d in enumerate(down_outputs)})
    lookup.update({f"U{i + 1}": u for i, u in enumerate(up_outputs)})
    try:
        a, b = lookup[first], lookup[second]
    except KeyError as exc:
        raise ValueError(f"U{up_index} needs {exc.args[0]}, which has not been produced yet") from None
    if a.shape[3:] != b.shape[3:]:
        raise ShapeError(f"bridge resolution mismatch for U{up_index}: {first} {a.shape} vs {second} {b.shape}")
    return ops.concat(a, b)


def fuse(h: Tensor, t: Tensor, weight: Parameter, bias: Parameter) -> Tensor:
    """Merge the two states: conv over ``concat(h, t)``, 2C -> C channels."""
    if h.shape != t.shape:
        raise ShapeError(f"fuse shape mismatch: {h.shape} vs {t.shape}")
    return ops.conv2d(ops.concat(h, t), weight, bias, kind="conv_io")
