"""``twostream`` command line: build / train / bench / verify / sample / analyze.

Exit codes: 0 success, 1 verification failure, 2 usage or config error,
3 numeric abort or guard failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import Tape, backward, finite_diff_check, no_grad, required_set, retained_bytes, snapshot, spatial_nodes
from .data import SyntheticVideoSpec, make_dataset
from .diffusion import ddim_sample, denoise_loss, denoise_residual, make_schedule, write_frames
from .profiler import RatioGuardError, cost_report, param_census, predict_retained_bytes, run_bench
from .trainer import TrainingAborted, TrainOptions, set_tuning_mode, train
from .unet import UNetConfig, build_unet, gradcheck_split, jitter_parameters, load_checkpoint, save_checkpoint

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
SEED_ENV = "MOBIUS_SEED"

_UNET_KEYS = {f.name for f in fields(UNetConfig)}
RUN_DEFAULTS = {
    **{f.name: f.default for f in fields(UNetConfig)},
    "tuning": "delta",
    "beta_start": 1e-4,
    "beta_end": 0.02,
    "steps": 500,
    "batch": 2,
    "accumulation": 2,
    "lr": 1e-3,
    "samples_per_class": 16,
    "shape_size": 10,
    "repeats": 10,
    "warmup": 3,
    "sample_steps": 20,
    "sample_class": 0,
}


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw):
    if key not in RUN_DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    default = RUN_DEFAULTS[key]
    try:
        if isinstance(default, tuple):
            return tuple(int(v) for v in str(raw).split(",")) if isinstance(raw, str) else tuple(raw)
        if isinstance(default, bool):
            return str(raw).lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return str(raw)


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected key=value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key] = _coerce(key, val)
    return out


def echo(cfg: dict) -> str:
    def fmt(v):
        return ",".join(map(str, v)) if isinstance(v, tuple) else repr(v) if isinstance(v, float) else str(v)
    return "\n".join(f"{k}={fmt(cfg[k])}" for k in sorted(cfg))


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults < config file < environment seed fallback < flags."""
    cfg = dict(RUN_DEFAULTS)
    from_file = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        from_file = parse_config_text(path.read_text(), str(path))
    cfg.update(from_file)
    if "seed" not in from_file and os.environ.get(SEED_ENV):
        cfg["seed"] = _coerce("seed", os.environ[SEED_ENV])
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg[k.strip()] = _coerce(k.strip(), v.strip())
    explicit = set(from_file) | {i.split("=", 1)[0].strip() for i in getattr(args, "set", None) or []}
    for key in ("mode", "tuning", "steps", "seed", "batch", "accumulation", "lr", "repeats", "warmup",
                "sample_steps", "sample_class"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = _coerce(key, val)
            explicit.add(key)
    args.explicit = explicit
    if cfg["tuning"] not in ("delta", "full"):
        raise ConfigError(f"tuning must be delta or full, got {cfg['tuning']!r}")
    try:
        unet_config(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def unet_config(cfg: dict) -> UNetConfig:
    return UNetConfig(**{k: cfg[k] for k in _UNET_KEYS})


def _announce(cmd: str, cfg: dict, out: Optional[Path]) -> None:
    print(f"[{cmd}] resolved config:")
    print(echo(cfg))
    if out is not None:
        snapshot.atomic_write(out / "config.txt", (echo(cfg) + "\n").encode())


def _write_manifest(out: Path, cmd: str, artifacts: list) -> None:
    lines = [f"# command: {cmd}"] + [str(Path(a).relative_to(out)) for a in artifacts]
    snapshot.atomic_write(out / "manifest.txt", ("\n".join(lines) + "\n").encode())


# ------------------------------------------------------------------ commands

def cmd_build(args, cfg) -> int:
    out = Path(args.out)
    _announce("build", cfg, out)
    model = set_tuning_mode(build_unet(unet_config(cfg)), cfg["tuning"])
    ckpt = save_checkpoint(model, out / "checkpoint")
    c = param_census(model)
    for tag in ("spatial", "temporal", "plumbing", "total"):
        print(f"params_{tag}={c[tag]['count']}")
    _write_manifest(out, "build", [out / "config.txt", ckpt / "manifest.txt"])
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    out = Path(args.out)
    _announce("train", cfg, out)
    model = build_unet(unet_config(cfg))
    ds = make_dataset(SyntheticVideoSpec(
        num_classes=cfg["cond_vocab"], frames=cfg["frames"], channels=cfg["in_channels"],
        height=cfg["height"], width=cfg["width"], shape_size=min(cfg["shape_size"], cfg["height"], cfg["width"]),
        samples_per_class=cfg["samples_per_class"], seed=cfg["seed"]))
    sched = make_schedule(cfg["num_timesteps"], cfg["beta_start"], cfg["beta_end"])
    opts = TrainOptions(steps=cfg["steps"], batch=cfg["batch"], accumulation=cfg["accumulation"],
                        lr=cfg["lr"], seed=cfg["seed"])
    try:
        report = train(model, ds, sched, cfg["tuning"], opts, log_every=args.log_every)
    except TrainingAborted as exc:
        print(f"error: training aborted at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except AssertionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    ckpt = save_checkpoint(model, out / "checkpoint", {"tuning": cfg["tuning"], "steps": cfg["steps"]})
    report.write_csv(out / "train.csv")
    report.write_summary(out / "summary.txt", unet_config(cfg).echo())
    for k, v in report.summary().items():
        print(f"{k}: {v}")
    _write_manifest(out, "train", [out / "config.txt", ckpt / "manifest.txt", out / "train.csv", out / "summary.txt"])
    return EXIT_OK


def cmd_bench(args, cfg) -> int:
    out = Path(args.out)
    _announce("bench", cfg, out)
    if args.cross:
        pairs = [(m, t) for m in ("serial", "parallel") for t in ("delta", "full")]
    else:
        pairs = [(cfg["mode"], cfg["tuning"])]
    try:
        table = run_bench(unet_config(cfg), pairs, out / "bench.csv", batch=cfg["batch"],
                          repeats=cfg["repeats"], warmup=cfg["warmup"], workers=args.workers)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RatioGuardError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(table.to_csv(), end="")
    try:
        ratios = table.ratios()
    except RatioGuardError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if ratios:
        rs = ratios.get("delta") or next(iter(ratios.values()))
        if not all(np.isfinite(v) and v > 0 for v in rs.values()):
            print(f"error: degenerate ratios {rs}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"memory_ratio={rs['memory_ratio']:.6f}")
        print(f"bwd_time_ratio={rs['bwd_time_ratio']:.6f}")
    _write_manifest(out, "bench", [out / "config.txt", out / "bench.csv", out / "bench_summary.txt"])
    return EXIT_OK


def verify_checks(cfg: dict, poison: Optional[str] = None, coords: int = 40) -> list[tuple[str, str, str]]:
    """Run the invariant suite; returns ``(check, status, detail)`` rows with
    status PASS, FAIL or EXPECTED-ABSENT."""
    ucfg = unet_config(cfg)
    sched = make_schedule(ucfg.num_timesteps, cfg["beta_start"], cfg["beta_end"])
    rng = np.random.default_rng([ucfg.seed, 5])
    x0 = rng.uniform(-1, 1, (1, ucfg.frames, ucfg.in_channels, ucfg.height, ucfg.width))
    cond = np.array([0])
    rows = []

    # zero-init equivalence on a fresh model
    model = build_unet(ucfg)
    ts = np.array([ucfg.num_timesteps // 2])
    with no_grad():
        full = model(x0, ts, cond).data
        sp = model(x0, ts, cond, spatial_only=True).data
    same = full.tobytes() == sp.tobytes()
    rows.append(("zero_init_equivalence", "PASS" if same else "FAIL",
                 "" if same else f"max |diff| {np.abs(full - sp).max():.3e}"))

    # gradient isolation
    model = set_tuning_mode(build_unet(ucfg), "delta")
    if poison == "spatial":
        model.params[model.down[0].name + ".sc.res0.conv1.weight"].frozen = False
    with Tape() as tape:
        denoise_loss(model, x0, cond, sched, np.random.default_rng(ucfg.seed))
    req = required_set(tape, [p.name for p in model.trainable()])
    leaked = len(spatial_nodes(tape, req))
    if ucfg.mode == "serial":
        rows.append(("gradient_isolation", "EXPECTED-ABSENT",
                     f"serial baseline: {leaked} spatial nodes in the required set"))
    else:
        rows.append(("gradient_isolation", "PASS" if leaked == 0 else "FAIL",
                     f"{leaked} spatial nodes in the required set"))

    # retained-byte accounting against the shape-walk prediction
    for tuning in ("delta", "full"):
        model = set_tuning_mode(build_unet(ucfg), tuning)
        with Tape() as tape:
            loss = denoise_loss(model, x0, cond, sched, np.random.default_rng(ucfg.seed))
        grads = backward(tape, loss, accumulate=False)
        got = retained_bytes(tape, grads.required)
        want = predict_retained_bytes(ucfg, tuning, 1)
        rows.append((f"accounting_{tuning}", "PASS" if got == want else "FAIL",
                     f"measured {got} predicted {want}"))

    # gradient check through the full model and loss
    model = set_tuning_mode(build_unet(ucfg), "delta")
    jitter_parameters(model.trainable(), ucfg.seed)
    loss_fn = lambda: denoise_loss(model, x0, cond, sched, np.random.default_rng(ucfg.seed))  # noqa: E731
    res_fn = lambda: denoise_residual(model, x0, cond, sched, np.random.default_rng(ucfg.seed))  # noqa: E731
    checked, zero = gradcheck_split(model.by_tag("temporal"))
    rep = finite_diff_check(loss_fn, checked, step=1e-5, tolerance=1e-6, n_coords=coords,
                            seed=ucfg.seed, residual_fn=res_fn)
    rows.append(("gradcheck", "PASS" if rep.passed else "FAIL", f"max rel err {rep.worst:.3e} over {len(rep.coords)} coords"))
    with Tape() as tape:
        loss = loss_fn()
    grads = backward(tape, loss, accumulate=False)
    worst = max((float(np.abs(grads[p.name]).max()) for p in zero if p.name in grads), default=0.0)
    rows.append(("shift_invariant_zero", "PASS" if worst <= 1e-15 else "FAIL",
                 f"max |grad| {worst:.1e} over {len(zero)} key biases"))
    return rows


def cmd_verify(args, cfg) -> int:
    _announce("verify", cfg, None)
    rows = verify_checks(cfg, poison=args.poison, coords=args.coords)
    for name, status, detail in rows:
        print(f"{status:15s} {name}  {detail}".rstrip())
    failed = [name for name, status, _ in rows if status == "FAIL"]
    if failed:
        print(f"verification failed: {failed[0]}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_sample(args, cfg) -> int:
    ckpt = Path(args.checkpoint)
    if not (ckpt / "manifest.txt").exists():
        print(f"error: no checkpoint at {ckpt}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    _announce("sample", cfg, out)
    model = load_checkpoint(ckpt)
    c = model.cfg
    sched = make_schedule(c.num_timesteps, cfg["beta_start"], cfg["beta_end"])
    steps, klass = cfg["sample_steps"], cfg["sample_class"]
    if not 0 <= klass < c.cond_vocab:
        print(f"error: class {klass} outside [0, {c.cond_vocab})", file=sys.stderr)
        return EXIT_CONFIG
    if steps > c.num_timesteps or steps < 1:
        print(f"error: steps must be in [1, {c.num_timesteps}]", file=sys.stderr)
        return EXIT_CONFIG
    fwd = (lambda x, t, k: model.forward(x, t, k, spatial_only=True)) if args.spatial_only else model
    shape = (1, c.frames, c.in_channels, c.height, c.width)
    video = ddim_sample(fwd, sched, steps, shape, [klass], cfg["seed"])
    snapshot.save(out / "sample.mobt", video)
    frames = write_frames(video[0], out / "frames")
    print(f"wrote {len(frames)} frames and sample.mobt to {out}")
    _write_manifest(out, "sample", [out / "config.txt", out / "sample.mobt", *frames])
    return EXIT_OK


def cmd_analyze(args, cfg) -> int:
    _announce("analyze", cfg, None)
    ucfg = unet_config(cfg)
    model = set_tuning_mode(build_unet(ucfg), cfg["tuning"])
    c = param_census(model)
    for tag in ("spatial", "temporal", "plumbing", "total"):
        print(f"params_{tag}: {c[tag]['count']} ({c[tag]['bytes']} bytes)")
    print(f"params_trainable: {c['trainable']}")
    print(f"unet_share: {c['unet_share']:.4f}")
    rep = cost_report(model, batch=1, seed=ucfg.seed)
    print(f"alpha_ops forward/backward: {rep.alpha[0]}/{rep.alpha[1]}")
    print(f"beta_ops forward/backward: {rep.beta[0]}/{rep.beta[1]}")
    print(f"spatial_ops_backward: {rep.spatial_backward()}")
    print(f"critical_path_per_block: {rep.max_depth()}")
    for mode in ("serial", "parallel"):
        for tuning in ("delta", "full"):
            rb = predict_retained_bytes(ucfg.replace(mode=mode), tuning, cfg["batch"])
            print(f"predicted_retained_bytes[{mode},{tuning},batch={cfg['batch']}]: {rb}")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="twostream", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="key=value file; flags override it")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
        p.add_argument("--mode", choices=("serial", "parallel"))
        p.add_argument("--tuning", choices=("delta", "full"))
        p.add_argument("--seed", type=int, help=f"default from ${SEED_ENV}, then 0")
        if out_required is not None:
            p.add_argument("--out", required=out_required, help="run directory")

    p = sub.add_parser("build", help="construct a model and write its checkpoint")
    common(p)
    p.set_defaults(fn=cmd_build)

    p = sub.add_parser("train", help="fine-tune on the synthetic clips")
    common(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--accumulation", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(fn=cmd_train, needs_mode=True)

    p = sub.add_parser("bench", help="retained bytes and wall time per (mode, tuning)")
    common(p)
    p.add_argument("--cross", action="store_true", help="serial/parallel x delta/full")
    p.add_argument("--batch", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("verify", help="run the invariant suite")
    common(p, out_required=None)
    p.add_argument("--poison", choices=("spatial",), help="test hook: unfreeze one spatial parameter")
    p.add_argument("--coords", type=int, default=40, help="gradient-check coordinates")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("sample", help="deterministic sampling from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--steps", type=int, dest="sample_steps", help="sampler steps")
    p.add_argument("--class", type=int, dest="sample_class")
    p.add_argument("--spatial-only", action="store_true")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("analyze", help="census, op counts and predicted retained bytes")
    common(p, out_required=None)
    p.add_argument("--batch", type=int)
    p.set_defaults(fn=cmd_analyze)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if getattr(args, "needs_mode", False) and "mode" not in args.explicit:
        parser.print_usage(sys.stderr)
        print("error: --mode is required (or mode= in --config)", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.fn(args, cfg)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
