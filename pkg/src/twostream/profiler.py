"""Op counts, retained-activation accounting, wall-time measurement and bench tables."""

from __future__ import annotations

import resource
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .autodiff import Tape, backward, required_set, retained_bytes, snapshot
from .autodiff.graph import BYTES_PER_ELEMENT, trainable_names
from .blocks import ROUTES
from .diffusion import denoise_loss, make_schedule
from .trainer import TuningMode, set_tuning_mode
from .unet import UNetConfig, UNetModel, build_unet

CSV_HEADER = "mode,tuning,retained_bytes,params_total,params_trainable,fwd_ms,bwd_ms,step_ms"

# figures reported for the full-scale system (datacenter GPUs); context only
REFERENCE_FIGURES = {
    "memory_mb_serial": 37758,
    "memory_mb_parallel": 28898,
    "hours_per_100k_serial": 119,
    "hours_per_100k_parallel": 105,
    "memory_saving": 0.24,
    "time_saving": 0.12,
}

ALPHA_KINDS = ("attn_spatial", "attn_temporal")
BETA_KINDS = ("conv_spatial", "conv_temporal")
SUBLAYERS = ("sc", "tc", "sa", "ta")


# ------------------------------------------------------------------ census

def param_census(model: UNetModel) -> dict:
    """Per-tag parameter counts and bytes, plus the share of the denoising
    network proper (everything except the condition table) in the total."""
    out = {}
    for tag in ("spatial", "temporal", "plumbing"):
        n = sum(p.size for p in model.by_tag(tag))
        out[tag] = {"count": n, "bytes": n * BYTES_PER_ELEMENT}
    total = sum(p.size for p in model.parameters())
    out["total"] = {"count": total, "bytes": total * BYTES_PER_ELEMENT}
    cond = model.params["pre.cond_embed.weight"].size
    out["unet_share"] = (total - cond) / total
    out["trainable"] = sum(p.size for p in model.trainable())
    return out


# ------------------------------------------------------------------ op counts

@dataclass
class CostReport:
    forward: dict = field(default_factory=dict)      # op kind -> count on the tape
    backward: dict = field(default_factory=dict)     # op kind -> count in the required set
    critical_path: dict = field(default_factory=dict)  # block name -> sub-layer depth

    @property
    def alpha(self) -> tuple[int, int]:
        return sum(self.forward.get(k, 0) for k in ALPHA_KINDS), sum(self.backward.get(k, 0) for k in ALPHA_KINDS)

    @property
    def beta(self) -> tuple[int, int]:
        return sum(self.forward.get(k, 0) for k in BETA_KINDS), sum(self.backward.get(k, 0) for k in BETA_KINDS)

    def spatial_backward(self) -> int:
        return self.backward.get("attn_spatial", 0) + self.backward.get("conv_spatial", 0)

    def max_depth(self) -> int:
        return max(self.critical_path.values(), default=0)


def _split_scope(scope: str) -> tuple[Optional[str], Optional[str]]:
    """``"down.1.tc"`` -> ``("down.1", "tc")``; non-sub-layer scopes give ``(None, None)``."""
    parts = scope.split(".")
    for j, part in enumerate(parts):
        if part in SUBLAYERS:
            return ".".join(parts[:j]), part
    return None, None


def critical_paths(tape: Tape) -> dict:
    """Longest chain of sub-layers per block, following data dependencies
    including those through detached values (``dep_ids``).

    Depth increases by one each time the chain enters a different sub-layer.
    Use a tape recorded with ``trace=True`` so the spatial stream is present.
    """
    depth: dict[int, tuple[str, int, str]] = {}
    out: dict[str, int] = {}
    for node in tape.nodes:
        blk, sub = _split_scope(node.scope)
        if blk is None:
            continue
        d = 1
        for dep in node.dep_ids:
            if dep in depth and depth[dep][0] == blk:
                _, pd, psub = depth[dep]
                d = max(d, pd + (psub != sub))
        depth[node.id] = (blk, d, sub)
        out[blk] = max(out.get(blk, 0), d)
    return out


def op_count(tape: Tape, req: Iterable[int]) -> CostReport:
    req = set(req)
    rep = CostReport()
    for node in tape.nodes:
        rep.forward[node.op_kind] = rep.forward.get(node.op_kind, 0) + 1
        if node.id in req:
            rep.backward[node.op_kind] = rep.backward.get(node.op_kind, 0) + 1
    rep.critical_path = critical_paths(tape)
    return rep


def _inputs(cfg: UNetConfig, batch: int, seed: int):
    rng = np.random.default_rng([seed, 7])
    x0 = rng.uniform(-1.0, 1.0, (batch, cfg.frames, cfg.in_channels, cfg.height, cfg.width))
    cond = np.arange(batch) % cfg.cond_vocab
    return x0, cond


def cost_report(model: UNetModel, batch: int = 1, seed: int = 0) -> CostReport:
    """Op counts over a fully traced step (spatial stream recorded even when
    frozen) with the required set of the model's current trainables."""
    x0, cond = _inputs(model.cfg, batch, seed)
    sched = make_schedule(model.cfg.num_timesteps)
    fwd = lambda x, t, c: model.forward(x, t, c, trace=True)  # noqa: E731
    with Tape() as tape:
        denoise_loss(fwd, x0, cond, sched, np.random.default_rng(seed))
    req = required_set(tape, trainable_names(tape))
    return op_count(tape, req)


# ------------------------------------------------------------------ analytic oracle

class _Val:
    __slots__ = ("node", "buf", "shape")

    def __init__(self, node, buf, shape):
        self.node, self.buf, self.shape = node, buf, tuple(shape)


class _ShapeWalk:
    """Symbolic replay of one training step: shapes, graph edges and which
    buffers each op keeps for its backward rule.  No arrays are allocated."""

    def __init__(self, trainable_tags: set):
        self.trainable_tags = trainable_tags
        self.sizes: list[int] = []
        self.nodes: list[tuple] = []   # (input node ids, trainable, kept buffer ids)

    def buf(self, shape) -> int:
        self.sizes.append(int(np.prod(shape)))
        return len(self.sizes) - 1

    def const(self, shape) -> _Val:
        return _Val(None, self.buf(shape), shape)

    @staticmethod
    def detach(v: _Val) -> _Val:
        return _Val(None, v.buf, v.shape)

    def op(self, inputs, tag, keep, out_shape) -> _Val:
        out = self.buf(out_shape)
        ins = tuple(v.node for v in inputs if v.node is not None)
        self.nodes.append((ins, tag is not None and tag in self.trainable_tags, tuple(keep) + (out,)))
        return _Val(len(self.nodes) - 1, out, out_shape)

    # op mirrors -------------------------------------------------------------
    def conv(self, x, c, tag):
        B, F, _, H, W = x.shape
        return self.op([x], tag, [x.buf], (B, F, c, H, W))

    def linear(self, x, c, tag):
        shape = (x.shape[0], c) if len(x.shape) == 2 else (*x.shape[:2], c, *x.shape[3:])
        return self.op([x], tag, [x.buf], shape)

    def gn(self, x, groups, tag):
        stats = (x.shape[0], x.shape[1], groups)
        return self.op([x], tag, [x.buf, self.buf(stats), self.buf(stats)], x.shape)

    def silu(self, x):
        return self.op([x], None, [x.buf], x.shape)

    def add(self, a, b):
        return self.op([a, b], None, [], a.shape)

    def concat(self, a, b):
        return self.op([a, b], None, [], (*a.shape[:2], a.shape[2] + b.shape[2], *a.shape[3:]))

    def resample(self, x, mode):
        B, F, C, H, W = x.shape
        f = 0.5 if mode == "down" else 2
        return self.op([x], None, [], (B, F, C, int(H * f), int(W * f)))

    def attn(self, x, temporal, tag):
        B, F, C, H, W = x.shape
        S, L = (H * W, F) if temporal else (F, H * W)
        return self.op([x], tag, [x.buf, self.buf((B, S, L, L))], x.shape)

    def conv_t(self, x, tag):
        return self.op([x], tag, [x.buf], x.shape)

    def embed(self, B, E, tag):
        return self.op([], tag, [], (B, E))

    def mean_sq(self, x):
        return self.op([x], None, [x.buf], (1,))

    # accounting -------------------------------------------------------------
    def retained(self) -> int:
        down = set()
        for i, (ins, trainable, _) in enumerate(self.nodes):
            if trainable or any(j in down for j in ins):
                down.add(i)
        up = {len(self.nodes) - 1}
        for i in range(len(self.nodes) - 1, -1, -1):
            if i in up:
                up.update(self.nodes[i][0])
        bufs = {b for i in down & up for b in self.nodes[i][2]}
        return BYTES_PER_ELEMENT * sum(self.sizes[b] for b in bufs)


def predict_retained_bytes(cfg: UNetConfig, tuning, batch: int) -> int:
    """Retained-activation bytes of one denoising-loss step, from shapes alone."""
    tuning = TuningMode(tuning)
    tags = {"temporal", "plumbing"} | ({"spatial"} if tuning is TuningMode.FULL else set())
    g = _ShapeWalk(tags)
    S, T, P = "spatial", "temporal", "plumbing"
    G, B, E, b = cfg.groups, batch, cfg.embed_dim, cfg.base_width
    parallel = cfg.mode == "parallel"

    e = g.const((B, E))
    e = g.linear(g.silu(g.linear(e, E, S)), E, S)
    temb = g.silu(g.add(e, g.embed(B, E, S)))
    h = g.conv(g.const((B, cfg.frames, cfg.in_channels, cfg.height, cfg.width)), b, S)
    t = g.detach(h) if parallel else None

    def res(x, c, tinj):
        y = g.conv(g.silu(g.gn(x, G, S)), c, S)
        y = g.add(y, tinj)
        y = g.conv(g.silu(g.gn(y, G, S)), c, S)
        if x.shape[2] != c:
            x = g.conv(x, c, S)
        return g.add(x, y)

    def sc(x, c):
        tinj = g.linear(temb, c, S)
        return res(res(x, c, tinj), c, tinj)

    def sa(x):
        c = x.shape[2]
        a_in = g.conv(g.gn(x, G, S), c, S)
        a = g.add(a_in, g.attn(a_in, False, S))
        f = g.silu(g.conv(g.gn(a, G, S), cfg.ff_mult * c, S))
        a = g.add(a, g.conv(f, c, S))
        return g.add(x, g.conv(a, c, S))

    def tc(x, c):
        if x.shape[2] != c:
            x = g.linear(x, c, T)
        y = g.conv_t(g.silu(g.gn(x, G, T)), T)
        y = g.conv_t(g.silu(g.gn(y, G, T)), T)
        return g.add(x, y)

    def ta_branch(x):
        return g.attn(g.gn(x, G, T), True, T)

    def block(h, t, c):
        if not parallel:
            x = tc(sc(h, c), c)
            x = sa(x)
            return g.add(x, ta_branch(x)), None
        s = sc(h, c)
        hn = sa(s)
        mixed = g.add(g.detach(s), tc(t, c))
        return hn, g.add(g.detach(hn), ta_branch(mixed))

    widths = cfg.widths
    skips = {}
    for i, c in enumerate(widths):
        h, t = block(h, t, c)
        skips[f"D{i + 1}"] = (h, t)
        if i < 3:
            h = g.resample(h, "down")
            t = g.resample(t, "down") if parallel else None
    h, t = block(h, t, widths[-1])
    skips["M0"] = (h, t)
    for k in range(1, 5):
        c = widths[4 - k]
        first, second = ROUTES[k]
        h = g.linear(g.concat(skips[first][0], skips[second][0]), c, S)
        if parallel:
            t = g.linear(g.concat(skips[first][1], skips[second][1]), c, T)
        h, t = block(h, t, c)
        if k < 4:
            h = g.resample(h, "up")
            t = g.resample(t, "up") if parallel else None
        skips[f"U{k}"] = (h, t)
    if parallel:
        h = g.conv(g.concat(h, t), b, P)
    pred = g.conv(g.silu(g.gn(h, G, S)), cfg.in_channels, S)
    g.mean_sq(g.add(pred, g.const(pred.shape)))
    return g.retained()


# ------------------------------------------------------------------ timing

@dataclass
class StepMeasurement:
    retained_bytes: int
    fwd_ms: float
    bwd_ms: float
    step_ms: float
    repeats: int
    nodes: int = 0
    required: int = 0


def measure_step(model: UNetModel, tuning, batch: int = 2, repeats: int = 10, warmup: int = 3,
                 seed: int = 0, min_ms: float = 1.0, max_repeats: int = 10_000) -> StepMeasurement:
    """Median forward / backward wall-time over ``repeats`` identical steps
    after ``warmup`` discarded ones.  Steps faster than ``min_ms`` get more
    repetitions until the median clears the timer-resolution floor."""
    if repeats < 1 or warmup < 0:
        raise ValueError("repeats must be >= 1 and warmup >= 0")
    set_tuning_mode(model, tuning)
    x0, cond = _inputs(model.cfg, batch, seed)
    sched = make_schedule(model.cfg.num_timesteps)

    def one():
        model.zero_grad()
        rng = np.random.default_rng([seed, 11])
        t0 = time.perf_counter()
        with Tape() as tape:
            loss = denoise_loss(model, x0, cond, sched, rng)
        t1 = time.perf_counter()
        grads = backward(tape, loss)
        t2 = time.perf_counter()
        return tape, grads, 1e3 * (t1 - t0), 1e3 * (t2 - t1)

    for _ in range(warmup):
        one()
    n = repeats
    while True:
        fw, bw = [], []
        for _ in range(n):
            tape, grads, f, b_ = one()
            fw.append(f)
            bw.append(b_)
        if min(statistics.median(fw), statistics.median(bw)) >= min_ms or n >= max_repeats:
            break
        n = min(max_repeats, n * 4)
    rb = retained_bytes(tape, grads.required)
    model.zero_grad()
    f_med, b_med = statistics.median(fw), statistics.median(bw)
    step = statistics.median([f + b_ for f, b_ in zip(fw, bw)])
    return StepMeasurement(rb, f_med, b_med, step, n, len(tape.nodes), len(grads.required))


# ------------------------------------------------------------------ bench table

class RatioGuardError(RuntimeError):
    pass


@dataclass
class BenchRow:
    mode: str
    tuning: str
    retained_bytes: int
    params_total: int
    params_trainable: int
    fwd_ms: float
    bwd_ms: float
    step_ms: float
    config_digest: str
    rss_kb: int = 0

    def csv(self) -> str:
        return (f"{self.mode},{self.tuning},{self.retained_bytes},{self.params_total},"
                f"{self.params_trainable},{self.fwd_ms:.3f},{self.bwd_ms:.3f},{self.step_ms:.3f}")


@dataclass
class BenchTable:
    rows: list = field(default_factory=list)

    def to_csv(self) -> str:
        return "\n".join([CSV_HEADER] + [r.csv() for r in self.rows]) + "\n"

    def row(self, mode: str, tuning: str) -> Optional[BenchRow]:
        return next((r for r in self.rows if r.mode == mode and r.tuning == tuning), None)

    def ratios(self) -> dict:
        """``{tuning: {memory_ratio, bwd_time_ratio}}`` for tunings with both modes."""
        digests = {r.config_digest for r in self.rows}
        if len(digests) > 1:
            raise RatioGuardError(f"rows come from different model configs ({sorted(digests)}); refusing ratios")
        out = {}
        for tuning in dict.fromkeys(r.tuning for r in self.rows):
            s, p = self.row("serial", tuning), self.row("parallel", tuning)
            if s and p:
                out[tuning] = {"memory_ratio": p.retained_bytes / s.retained_bytes,
                               "bwd_time_ratio": p.bwd_ms / s.bwd_ms}
        return out

    def summary(self) -> str:
        lines = []
        width = max((r.retained_bytes for r in self.rows), default=1)
        for r in self.rows:
            bar = "#" * max(1, round(40 * r.retained_bytes / width))
            lines.append(f"{r.mode:8s} {r.tuning:5s} {r.retained_bytes / 2**20:9.2f} MiB {bar}")
        for tuning, rs in self.ratios().items():
            lines.append(f"memory_ratio[{tuning}]: {rs['memory_ratio']:.4f}")
            lines.append(f"bwd_time_ratio[{tuning}]: {rs['bwd_time_ratio']:.4f}")
        return "\n".join(lines)


def _peak_rss_kb() -> int:
    return int(resource.getrusage(resource.RUSAGE_SELF).ru_maxrss)


def run_bench(cfg: UNetConfig, pairs: Sequence[tuple], out_path=None, batch: int = 2,
              repeats: int = 10, warmup: int = 3, workers: int = 1) -> BenchTable:
    """Measure every (mode, tuning) pair on one shared config.

    Writes the CSV to ``out_path`` and a ``key: value`` summary next to it
    (``<stem>_summary.txt``) when a path is given.
    """
    if workers != 1:
        raise ValueError("benchmarks are single-worker only")
    table = BenchTable()
    for mode, tuning in pairs:
        model = build_unet(cfg.replace(mode=mode))
        m = measure_step(model, tuning, batch=batch, repeats=repeats, warmup=warmup, seed=cfg.seed)
        table.rows.append(BenchRow(mode, TuningMode(tuning).value, m.retained_bytes,
                                   sum(p.size for p in model.parameters()),
                                   sum(p.size for p in model.trainable()),
                                   m.fwd_ms, m.bwd_ms, m.step_ms,
                                   model.cfg.replace(mode="serial").digest(), _peak_rss_kb()))
    if out_path is not None:
        out = Path(out_path)
        try:
            snapshot.atomic_write(out, table.to_csv().encode())
            snapshot.atomic_write(out.with_name(out.stem + "_summary.txt"),
                                  bench_summary_text(table, cfg, batch).encode())
        except OSError as exc:
            raise OSError(f"cannot write bench output to {out}: {exc}") from exc
    return table


def bench_summary_text(table: BenchTable, cfg: UNetConfig, batch: int) -> str:
    lines = [f"config: {cfg.echo()}", f"batch: {batch}"]
    for r in table.rows:
        key = f"{r.mode}_{r.tuning}"
        lines += [f"{key}_retained_bytes: {r.retained_bytes}", f"{key}_bwd_ms: {r.bwd_ms:.3f}",
                  f"{key}_rss_kb_aux: {r.rss_kb}"]
    for tuning, rs in table.ratios().items():
        lines += [f"memory_ratio_{tuning}: {rs['memory_ratio']:.6f}",
                  f"bwd_time_ratio_{tuning}: {rs['bwd_time_ratio']:.6f}"]
    ref = REFERENCE_FIGURES
    lines += [
        "# reference (full-scale system, datacenter GPUs; not comparable, not asserted):",
        f"# memory {ref['memory_mb_serial']} MB serial vs {ref['memory_mb_parallel']} MB parallel"
        f" (saving {ref['memory_saving']:.0%})",
        f"# time {ref['hours_per_100k_serial']} h vs {ref['hours_per_100k_parallel']} h per 100k steps"
        f" (saving {ref['time_saving']:.0%})",
    ]
    return "\n".join(lines) + "\n"
