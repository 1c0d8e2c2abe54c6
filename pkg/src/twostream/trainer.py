"""Delta / full fine-tuning loop with Adam and gradient accumulation."""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import NonFiniteError, Tape, backward, retained_bytes, snapshot, spatial_nodes
from .data import VideoDataset
from .diffusion import NoiseSchedule, denoise_loss
from .unet import UNetModel


class TuningMode(str, enum.Enum):
    FULL = "full"
    DELTA = "delta"


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class IsolationViolation(AssertionError):
    pass


def set_tuning_mode(model: UNetModel, mode) -> UNetModel:
    """Delta freezes exactly the spatial-tagged parameters; full freezes none."""
    mode = TuningMode(mode)
    for p in model.params.values():
        p.frozen = mode is TuningMode.DELTA and p.tag == "spatial"
        p.grad = None
    return model


class Adam:
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {p.name: np.zeros(p.shape) for p in self.params}
        self.v = {p.name: np.zeros(p.shape) for p in self.params}

    def step(self) -> list[str]:
        """Apply one update in place; returns the names that received a gradient."""
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        touched = []
        for p in self.params:
            if p.frozen or p.grad is None:
                continue
            g = p.grad
            m = self.m[p.name] = self.b1 * self.m[p.name] + (1.0 - self.b1) * g
            v = self.v[p.name] = self.b2 * self.v[p.name] + (1.0 - self.b2) * g * g
            p.data[...] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            touched.append(p.name)
        return touched


@dataclass
class TrainOptions:
    steps: int = 500
    batch: int = 2
    accumulation: int = 2
    lr: float = 1e-3
    seed: int = 0

    def validate(self) -> None:
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch < 1 or self.accumulation < 1:
            raise ValueError("batch and accumulation must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    ms: list = field(default_factory=list)
    retained: list = field(default_factory=list)
    touched: set = field(default_factory=set)

    def write_csv(self, path) -> None:
        rows = ["step,loss,ms,retained_bytes"]
        rows += [f"{i + 1},{loss!r},{ms:.3f},{rb}"
                 for i, (loss, ms, rb) in enumerate(zip(self.losses, self.ms, self.retained))]
        snapshot.atomic_write(path, ("\n".join(rows) + "\n").encode())

    def summary(self, config_echo: str = "") -> dict:
        n = len(self.losses)
        k = min(50, n)
        out = {
            "steps": n,
            "final_loss": self.losses[-1] if n else "nan",
            "first_window_mean": float(np.mean(self.losses[:k])) if n else "nan",
            "last_window_mean": float(np.mean(self.losses[-k:])) if n else "nan",
            "total_ms": float(np.sum(self.ms)),
            "peak_retained_bytes": max(self.retained, default=0),
            "params_touched": len(self.touched),
        }
        if config_echo:
            out["config"] = config_echo
        return out

    def write_summary(self, path, config_echo: str = "") -> None:
        text = "".join(f"{k}: {v}\n" for k, v in self.summary(config_echo).items())
        snapshot.atomic_write(path, text.encode())


def train(model: UNetModel, dataset: VideoDataset, schedule: NoiseSchedule,
          mode=TuningMode.DELTA, opts: Optional[TrainOptions] = None, log_every: int = 0) -> TrainReport:
    """Deterministic given ``opts.seed``.

    Each step draws ``batch * accumulation`` dataset indices up front, then
    runs ``accumulation`` micro-batches in order; every micro-batch backward
    is seeded with ``1 / accumulation`` so the summed gradient is the gradient
    of the mean loss over the whole step.  Noise draws are item-major, so the
    update does not depend on how a step is split into micro-batches.
    """
    opts = opts or TrainOptions()
    opts.validate()
    set_tuning_mode(model, mode)
    isolate = model.mode == "parallel" and TuningMode(mode) is TuningMode.DELTA
    data_rng = np.random.default_rng([opts.seed, 1])
    noise_rng = np.random.default_rng([opts.seed, 2])
    opt = Adam(model.trainable(), lr=opts.lr)
    report = TrainReport()
    a, b = opts.accumulation, opts.batch
    seed = 1.0 / a

    for step in range(opts.steps):
        t0 = time.perf_counter()
        idx = data_rng.integers(0, len(dataset), size=a * b)
        model.zero_grad()
        step_loss, peak = 0.0, 0
        for j in range(a):
            x0, cond = dataset.batch(idx[j * b:(j + 1) * b])
            try:
                with Tape() as tape:
                    loss = denoise_loss(model, x0, cond, schedule, noise_rng)
            except NonFiniteError as exc:
                raise TrainingAborted(f"non-finite value at step {step}: {exc}", step) from exc
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingAborted(f"non-finite loss {value} at step {step}", step)
            grads = backward(tape, loss, seed=seed)
            if isolate:
                leaked = spatial_nodes(tape, grads.required)
                if leaked:
                    raise IsolationViolation(f"step {step}: {len(leaked)} spatial nodes in the required set")
            peak = max(peak, retained_bytes(tape, grads.required))
            step_loss += value / a
            del tape, loss, grads
        report.touched.update(opt.step())
        report.losses.append(step_loss)
        report.retained.append(peak)
        report.ms.append(1e3 * (time.perf_counter() - t0))
        if log_every and (step + 1) % log_every == 0:
            print(f"step {step + 1}/{opts.steps} loss {step_loss:.5f} ({report.ms[-1]:.0f} ms)", flush=True)
    return report
