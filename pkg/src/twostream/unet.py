"""Spatial-temporal denoising UNet (4 down / 1 mid / 4 up) in serial or
parallel wiring."""

from __future__ import annotations

import hashlib
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import Parameter, ShapeError, Tensor, name_scope, recording, snapshot
from .autodiff import ops
from .blocks import BlockParams, bridge_route, fuse, parallel_block, serial_block

MODES = ("serial", "parallel")


@dataclass(frozen=True)
class UNetConfig:
    mode: str = "parallel"
    in_channels: int = 4
    base_width: int = 16
    channel_multipliers: tuple = (1, 2, 2, 4)
    frames: int = 8
    height: int = 32
    width: int = 32
    num_timesteps: int = 100
    cond_vocab: int = 4
    seed: int = 0
    groups: int = 8
    ff_mult: int = 2
    fusion_kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(int(m) for m in self.channel_multipliers))
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if len(self.channel_multipliers) != 4:
            raise ValueError(f"need exactly 4 channel multipliers, got {self.channel_multipliers}")
        if any(m < 1 for m in self.channel_multipliers):
            raise ValueError(f"channel multipliers must be >= 1, got {self.channel_multipliers}")
        for name in ("in_channels", "base_width", "frames", "height", "width",
                     "num_timesteps", "cond_vocab", "groups", "ff_mult"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.base_width % self.groups:
            raise ValueError(f"base_width {self.base_width} not divisible by groups {self.groups}")
        if self.height % 8 or self.width % 8:
            raise ValueError(f"height/width must be divisible by 8 (three halvings), got {self.height}x{self.width}")
        if self.fusion_kernel not in (1, 3):
            raise ValueError("fusion_kernel must be 1 or 3")

    @property
    def widths(self) -> list[int]:
        return [self.base_width * m for m in self.channel_multipliers]

    @property
    def embed_dim(self) -> int:
        return 4 * self.base_width

    def replace(self, **kw) -> "UNetConfig":
        d = asdict(self)
        d.update(kw)
        return UNetConfig(**d)

    def echo(self) -> str:
        parts = []
        for f in fields(self):
            v = getattr(self, f.name)
            parts.append(f"{f.name}={','.join(map(str, v)) if isinstance(v, tuple) else v}")
        return " ".join(parts)

    def digest(self) -> str:
        return hashlib.sha256(self.echo().encode()).hexdigest()[:16]


class _Init:
    """Per-parameter generators keyed by (seed, name): values never depend on
    construction order or wiring mode."""

    def __init__(self, seed: int):
        self.seed = seed
        self.params: dict[str, Parameter] = {}

    def rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, zlib.crc32(name.encode())])

    def put(self, name: str, value: np.ndarray, tag: str) -> Parameter:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        p = Parameter(name, Tensor(np.array(value, dtype=np.float64)), tag)
        self.params[name] = p
        return p

    def normal(self, name, shape, std, tag, mean=0.0):
        return self.put(name, mean + std * self.rng(name).standard_normal(shape), tag)

    def zeros(self, name, shape, tag):
        return self.put(name, np.zeros(shape), tag)

    def conv(self, prefix, c_out, c_in, k, tag, gain=1.0) -> dict:
        return {"weight": self.normal(f"{prefix}.weight", (c_out, c_in, k, k), gain / np.sqrt(c_in * k * k), tag),
                "bias": self.normal(f"{prefix}.bias", (c_out,), 0.02, tag)}

    def linear(self, prefix, c_out, c_in, tag, gain=1.0) -> dict:
        return {"weight": self.normal(f"{prefix}.weight", (c_out, c_in), gain / np.sqrt(c_in), tag),
                "bias": self.normal(f"{prefix}.bias", (c_out,), 0.02, tag)}

    def norm(self, prefix, c, tag) -> dict:
        return {"weight": self.normal(f"{prefix}.weight", (c,), 0.05, tag, mean=1.0),
                "bias": self.normal(f"{prefix}.bias", (c,), 0.05, tag)}


def _flat(prefix: str, group: dict) -> dict:
    return {f"{prefix}.{k}": v for k, v in group.items()}


def _build_block(init: _Init, name: str, c_in: int, c: int, t_in: int, cfg: UNetConfig) -> BlockParams:
    """``t_in`` is the channel count arriving on the time state (parallel)."""
    S, T = "spatial", "temporal"
    E = cfg.embed_dim
    p = BlockParams(name=name, c_in=c_in, c_out=c, groups=cfg.groups)
    p.time_proj = init.linear(f"{name}.time_proj", c, E, S)
    for u in range(2):
        ci = c_in if u == 0 else c
        base = f"{name}.sc.res{u}"
        p.sc.update(_flat(f"res{u}.norm1", init.norm(f"{base}.norm1", ci, S)))
        p.sc.update(_flat(f"res{u}.conv1", init.conv(f"{base}.conv1", c, ci, 3, S)))
        p.sc.update(_flat(f"res{u}.norm2", init.norm(f"{base}.norm2", c, S)))
        p.sc.update(_flat(f"res{u}.conv2", init.conv(f"{base}.conv2", c, c, 3, S, gain=0.5)))
        if ci != c:
            p.sc.update(_flat(f"res{u}.shortcut", init.conv(f"{base}.shortcut", c, ci, 1, S)))

    m = cfg.ff_mult * c
    sa = f"{name}.sa"
    p.sa.update(_flat("norm1", init.norm(f"{sa}.norm1", c, S)))
    p.sa.update(_flat("proj_in", init.conv(f"{sa}.proj_in", c, c, 1, S)))
    for k in "qkvo":
        p.sa.update(_flat(f"attn.{k}", init.linear(f"{sa}.attn.{k}", c, c, S)))
    p.sa.update(_flat("norm2", init.norm(f"{sa}.norm2", c, S)))
    p.sa.update(_flat("ff_in", init.conv(f"{sa}.ff_in", m, c, 1, S)))
    p.sa.update(_flat("ff_out", init.conv(f"{sa}.ff_out", c, m, 1, S, gain=0.5)))
    p.sa.update(_flat("proj_out", init.conv(f"{sa}.proj_out", c, c, 1, S, gain=0.5)))

    tc = f"{name}.tc"
    if t_in != c:
        p.tc.update(_flat("proj", init.linear(f"{tc}.proj", c, t_in, T)))
    p.tc.update(_flat("norm1", init.norm(f"{tc}.norm1", c, T)))
    p.tc["conv1.weight"] = init.normal(f"{tc}.conv1.weight", (c, 3), 0.5, T)
    p.tc["conv1.bias"] = init.normal(f"{tc}.conv1.bias", (c,), 0.02, T)
    p.tc.update(_flat("norm2", init.norm(f"{tc}.norm2", c, T)))
    p.tc["conv2.weight"] = init.zeros(f"{tc}.conv2.weight", (c, 3), T)
    p.tc["conv2.bias"] = init.zeros(f"{tc}.conv2.bias", (c,), T)

    ta = f"{name}.ta"
    p.ta.update(_flat("norm", init.norm(f"{ta}.norm", c, T)))
    for k in "qkv":
        p.ta.update(_flat(f"attn.{k}", init.linear(f"{ta}.attn.{k}", c, c, T)))
    p.ta["attn.o.weight"] = init.zeros(f"{ta}.attn.o.weight", (c, c), T)
    p.ta["attn.o.bias"] = init.zeros(f"{ta}.attn.o.bias", (c,), T)
    return p


def sinusoidal_embedding(timesteps: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    emb = np.zeros((len(timesteps), dim))
    # row by row: transcendental kernels must not see batch-size-dependent array lengths
    for i, t in enumerate(np.asarray(timesteps, dtype=np.float64)):
        ang = t * freqs
        emb[i, :half] = np.sin(ang)
        emb[i, half:2 * half] = np.cos(ang)
    return emb


class UNetModel:
    """Parameters plus the forward pass.  Build with :func:`build_unet`."""

    def __init__(self, cfg: UNetConfig, params: dict, down, mid, up, adapters_h, adapters_t,
                 pre: dict, post: dict, fusion: Optional[dict]):
        self.cfg = cfg
        self.params = params
        self.down: list[BlockParams] = down
        self.mid: BlockParams = mid
        self.up: list[BlockParams] = up
        self.adapters_h = adapters_h
        self.adapters_t = adapters_t
        self.pre = pre
        self.post = post
        self.fusion = fusion

    @property
    def mode(self) -> str:
        return self.cfg.mode

    @property
    def blocks(self) -> list[BlockParams]:
        return [*self.down, self.mid, *self.up]

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def by_tag(self, tag: str) -> list[Parameter]:
        return [p for p in self.params.values() if p.tag == tag]

    def trainable(self) -> list[Parameter]:
        return [p for p in self.params.values() if not p.frozen]

    def spatial_trainable(self) -> bool:
        return any(not p.frozen for p in self.params.values() if p.tag == "spatial")

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_bytes(self, tag: Optional[str] = None) -> bytes:
        return b"".join(p.data.tobytes() for p in self.params.values() if tag is None or p.tag == tag)

    # ----------------------------------------------------------------- forward

    def _embedding(self, timesteps: np.ndarray, cond: np.ndarray) -> Tensor:
        pre = self.pre
        e = Tensor(sinusoidal_embedding(timesteps, self.cfg.embed_dim))
        e = ops.linear(e, pre["time_mlp.0.weight"], pre["time_mlp.0.bias"])
        e = ops.linear(ops.silu(e), pre["time_mlp.1.weight"], pre["time_mlp.1.bias"])
        e = ops.add(e, ops.embed(pre["cond_embed.weight"], cond))
        return ops.silu(e)

    def _check_inputs(self, x, timesteps, cond):
        cfg = self.cfg
        x = x if isinstance(x, Tensor) else Tensor(x)
        B = x.shape[0]
        want = (B, cfg.frames, cfg.in_channels, cfg.height, cfg.width)
        if x.shape != want:
            raise ShapeError(f"input shape {x.shape} does not match config {want}")
        ts = np.broadcast_to(np.asarray(timesteps, dtype=np.int64).reshape(-1), (B,)).copy()
        if ts.min() < 0 or ts.max() >= cfg.num_timesteps:
            raise ValueError(f"timestep(s) {ts.tolist()} outside [0, {cfg.num_timesteps})")
        cond = np.broadcast_to(np.asarray(cond, dtype=np.int64).reshape(-1), (B,)).copy()
        return x, ts, cond

    def forward(self, x, timesteps, cond, spatial_only: bool = False, trace: bool = False,
                taps: Optional[list] = None) -> Tensor:
        """Predicted noise, same shape as ``x``.

        ``spatial_only`` drops every temporal sub-layer (parallel: fuse gets
        ``(h, h)``).  ``trace`` records the spatial stream even when frozen, for
        structural analysis.  ``taps`` collects every hidden-state tensor.
        """
        x, ts, cond = self._check_inputs(x, timesteps, cond)
        parallel = self.mode == "parallel"
        rec_h = (not parallel) or trace or self.spatial_trainable()
        tap = taps.append if taps is not None else (lambda _t: None)

        with recording(rec_h), name_scope("pre"):
            temb = self._embedding(ts, cond)
            h = ops.conv2d(x, self.pre["conv_in.weight"], self.pre["conv_in.bias"], kind="conv_io")
        tap(h)
        t = h.detach() if parallel and not spatial_only else None

        def run_block(blk, h, t):
            with name_scope(blk.name):
                if parallel:
                    return parallel_block(h, t, blk, temb, rec_h, taps)
                return serial_block(h, blk, temb, spatial_only), None

        skips_h, skips_t = [], []
        for i, blk in enumerate(self.down):
            h, t = run_block(blk, h, t)
            tap(h)
            skips_h.append(h)
            skips_t.append(t)
            if i < 3:
                with name_scope(f"{blk.name}.resample"):
                    with recording(rec_h):
                        h = ops.resample(h, "down")
                    if t is not None:
                        t = ops.resample(t, "down")
                tap(h)
        h, t = run_block(self.mid, h, t)
        tap(h)
        mid_h, mid_t = h, t

        ups_h, ups_t = [], []
        for k, blk in enumerate(self.up, start=1):
            with name_scope(f"{blk.name}.bridge"):
                with recording(rec_h):
                    h = bridge_route("h", skips_h, mid_h, k, ups_h)
                    h = ops.linear(h, self.adapters_h[k - 1]["weight"], self.adapters_h[k - 1]["bias"])
                if t is not None:
                    t = bridge_route("t", skips_t, mid_t, k, ups_t)
                    t = ops.linear(t, self.adapters_t[k - 1]["weight"], self.adapters_t[k - 1]["bias"])
            tap(h)
            h, t = run_block(blk, h, t)
            tap(h)
            if k < 4:
                with name_scope(f"{blk.name}.resample"):
                    with recording(rec_h):
                        h = ops.resample(h, "up")
                    if t is not None:
                        t = ops.resample(t, "up")
                tap(h)
            ups_h.append(h)
            ups_t.append(t)

        if parallel:
            with name_scope("fusion"):
                h = fuse(h, h if t is None else t, self.fusion["weight"], self.fusion["bias"])
        with name_scope("post"):
            post = self.post
            h = ops.silu(ops.group_norm(h, post["norm.weight"], post["norm.bias"], self.cfg.groups))
            return ops.conv2d(h, post["conv_out.weight"], post["conv_out.bias"], kind="conv_io")

    __call__ = forward

    # -------------------------------------------------------------- reporting

    def census(self) -> dict:
        out = {tag: 0 for tag in ("spatial", "temporal", "plumbing")}
        for p in self.params.values():
            out[p.tag] += p.size
        out["total"] = sum(p.size for p in self.params.values())
        return out


def build_unet(cfg: UNetConfig) -> UNetModel:
    """Deterministic construction from ``cfg.seed``.

    Spatial weights are random draws standing in for a pretrained image
    model; temporal output projections (TC second conv, TA out-projection)
    start at zero, and the fusion conv starts as identity on ``h`` and zero on
    ``t``.
    """
    cfg.validate()
    init = _Init(cfg.seed)
    S = "spatial"
    b, E = cfg.base_width, cfg.embed_dim
    parallel = cfg.mode == "parallel"

    pre = {}
    pre.update(_flat("conv_in", init.conv("pre.conv_in", b, cfg.in_channels, 3, S)))
    pre.update(_flat("time_mlp.0", init.linear("pre.time_mlp.0", E, E, S)))
    pre.update(_flat("time_mlp.1", init.linear("pre.time_mlp.1", E, E, S)))
    pre["cond_embed.weight"] = init.normal("pre.cond_embed.weight", (cfg.cond_vocab, E), 1.0, S)

    widths = cfg.widths
    down, c_prev = [], b
    for i, c in enumerate(widths):
        t_in = c_prev if parallel else c
        down.append(_build_block(init, f"down.{i}", c_prev, c, t_in, cfg))
        c_prev = c
    mid = _build_block(init, "mid", c_prev, c_prev, c_prev, cfg)

    up, adapters_h, adapters_t = [], [], []
    up_widths = widths[::-1]
    for k in range(1, 5):
        first = mid.c_out if k == 1 else up_widths[k - 2]
        second = widths[4 - k]
        c = up_widths[k - 1]
        adapters_h.append(init.linear(f"up.{k - 1}.adapter_h", c, first + second, S))
        if parallel:
            adapters_t.append(init.linear(f"up.{k - 1}.adapter_t", c, first + second, "temporal"))
        up.append(_build_block(init, f"up.{k - 1}", c, c, c, cfg))

    fusion = None
    if parallel:
        k = cfg.fusion_kernel
        w = np.zeros((b, 2 * b, k, k))
        w[np.arange(b), np.arange(b), k // 2, k // 2] = 1.0
        fusion = {"weight": init.put("fusion.weight", w, "plumbing"),
                  "bias": init.zeros("fusion.bias", (b,), "plumbing")}

    post = {}
    post.update(_flat("norm", init.norm("post.norm", b, S)))
    post.update(_flat("conv_out", init.conv("post.conv_out", cfg.in_channels, b, 3, S, gain=0.5)))
    return UNetModel(cfg, init.params, down, mid, up, adapters_h, adapters_t, pre, post, fusion)


def jitter_parameters(params, seed: int, gain: float = 1.0) -> None:
    """Add fan-in scaled noise (``gain / sqrt(prod(shape[1:]))``; 0.02 for
    vectors) in place.  Moves zero-initialized projections to a generic point,
    where gradients through them no longer vanish."""
    for p in params:
        rng = np.random.default_rng([seed, zlib.crc32(p.name.encode()), 1])
        std = gain / np.sqrt(np.prod(p.shape[1:])) if len(p.shape) > 1 else 0.02
        p.data[...] += std * rng.standard_normal(p.shape)


def shift_invariant(name: str) -> bool:
    """Key biases add ``q . b`` to every logit of a softmax row, which the
    softmax ignores; their true gradient is exactly zero."""
    return name.endswith(".attn.k.bias")


def gradcheck_split(params) -> tuple[list, list]:
    """``(checked, structurally_zero)``: relative error is undefined for the
    second group, which is checked for a zero gradient instead."""
    params = list(params)
    return [p for p in params if not shift_invariant(p.name)], [p for p in params if shift_invariant(p.name)]


# ------------------------------------------------------------------ checkpoint

def save_checkpoint(model: UNetModel, directory, extra: Optional[dict] = None) -> Path:
    """One MOBT file per parameter plus ``manifest.txt``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = [f"# seed: {model.cfg.seed}", f"# config: {model.cfg.echo()}"]
    for k, v in (extra or {}).items():
        lines.append(f"# {k}: {v}")
    for p in model.params.values():
        snapshot.save(d / f"{p.name}.mobt", p.data)
        shape = "x".join(map(str, p.shape))
        lines.append(f"{p.name}\t{shape}\t{p.tag}\t{int(p.frozen)}")
    snapshot.atomic_write(d / "manifest.txt", ("\n".join(lines) + "\n").encode())
    return d


def parse_config_echo(text: str) -> UNetConfig:
    kw = {}
    types = {f.name: f.type for f in fields(UNetConfig)}
    for tok in text.split():
        key, val = tok.split("=", 1)
        if key not in types:
            raise ValueError(f"unknown config key {key!r} in checkpoint")
        if key == "channel_multipliers":
            kw[key] = tuple(int(v) for v in val.split(","))
        elif key == "mode":
            kw[key] = val
        else:
            kw[key] = int(val)
    return UNetConfig(**kw)


def load_checkpoint(directory) -> UNetModel:
    d = Path(directory)
    manifest = d / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest}")
    cfg = None
    rows = []
    for line in manifest.read_text().splitlines():
        if line.startswith("# config: "):
            cfg = parse_config_echo(line[len("# config: "):])
        elif line and not line.startswith("#"):
            rows.append(line.split("\t"))
    if cfg is None:
        raise ValueError(f"{manifest} has no config line")
    model = build_unet(cfg)
    for name, _shape, _tag, frozen in rows:
        p = model.params[name]
        arr = snapshot.load(d / f"{name}.mobt")
        if arr.shape != p.shape:
            raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model {p.shape}")
        p.value.data[...] = arr
        p.frozen = bool(int(frozen))
    return model

