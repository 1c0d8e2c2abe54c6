"""Tensors, parameters and the recording tape.

Every op in :mod:`twostream.autodiff.ops` computes its forward value with
numpy and, while a :class:`Tape` is active and recording, appends one
:class:`TapeNode` carrying the arrays it saved for backward plus a VJP
closure.  Nothing is recorded outside an active tape.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

OP_KINDS = frozenset({
    "conv_spatial", "conv_temporal", "attn_spatial", "attn_temporal",
    "linear", "group_norm", "silu", "add", "concat", "resample", "embed",
    "reduce_mean_sq", "conv_io",
})
SPATIAL_KINDS = frozenset({"conv_spatial", "attn_spatial"})
TEMPORAL_KINDS = frozenset({"conv_temporal", "attn_temporal"})
PARAM_TAGS = ("spatial", "temporal", "plumbing")


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN/Inf.  ``node_id`` is the id the node
    had (or would have had) on the active tape, else ``None``."""

    def __init__(self, message: str, node_id: Optional[int] = None, op_kind: str = ""):
        super().__init__(message)
        self.node_id = node_id
        self.op_kind = op_kind


def layer_tag_for(op_kind: str) -> str:
    if op_kind in SPATIAL_KINDS:
        return "spatial"
    if op_kind in TEMPORAL_KINDS:
        return "temporal"
    return "plumbing"


class Tensor:
    """Dense f64 array plus an optional link to the node that produced it.

    ``origin`` survives :meth:`detach` and is only used for forward-dependency
    analysis (critical paths); gradients follow ``node_id`` alone.
    """

    __slots__ = ("data", "node_id", "origin")

    def __init__(self, data, node_id: Optional[int] = None, origin: Optional[int] = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.node_id = node_id
        self.origin = origin if origin is not None else node_id

    @classmethod
    def _wrap(cls, arr: np.ndarray, node_id=None, origin=None) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.node_id = node_id
        t.origin = origin if origin is not None else node_id
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Same values, no gradient edge.  Shares the underlying array."""
        return Tensor._wrap(self.data, None, self.origin)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node={self.node_id})"


@dataclass(eq=False)
class Parameter:
    name: str
    value: Tensor
    tag: str = "plumbing"
    frozen: bool = False
    grad: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.tag not in PARAM_TAGS:
            raise ValueError(f"unknown parameter tag {self.tag!r} for {self.name}")
        if not isinstance(self.value, Tensor):
            self.value = Tensor(self.value)

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.data.size)

    def accumulate(self, g: np.ndarray) -> None:
        if self.frozen:
            raise RuntimeError(f"attempted to write a gradient into frozen {self.name}")
        if g.shape != self.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {self.shape} ({self.name})")
        self.grad = np.array(g, copy=True) if self.grad is None else self.grad + g

    def zero_grad(self) -> None:
        self.grad = None


# VJP signature: (grad_out, need_inputs, need_params) -> (input_grads, param_grads)
Vjp = Callable[[np.ndarray, Sequence[bool], Sequence[bool]], tuple]


@dataclass(eq=False)
class TapeNode:
    id: int
    op_kind: str
    input_ids: tuple
    param_names: tuple
    saved: tuple
    output_shape: tuple
    layer_tag: str
    scope: str = ""
    dep_ids: tuple = ()
    output: Optional[np.ndarray] = field(default=None, repr=False)
    params: tuple = field(default=(), repr=False)
    vjp: Optional[Vjp] = field(default=None, repr=False)


class Tape:
    """Ordered record of executed ops.

    Use as a context manager; leaving the block finalizes the tape.  Nodes
    are appended in execution order, so ``input_ids`` always point backwards.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.recording = True
        self.finalized = False
        # names of parameters touched while this tape was active, recorded or not
        self.seen_params: set[str] = set()

    def __enter__(self) -> "Tape":
        if self.finalized:
            raise RuntimeError("tape already finalized; build a new one per step")
        _STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        top = _STACK.pop()
        assert top is self, "tape stack corrupted"
        self.finalized = True

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def loss_id(self) -> int:
        if not self.nodes:
            raise ValueError("empty tape")
        return self.nodes[-1].id


_STACK: list[Tape] = []
_SCOPE: list[str] = []


def active_tape() -> Optional[Tape]:
    return _STACK[-1] if _STACK else None


def is_recording() -> bool:
    return bool(_STACK) and _STACK[-1].recording


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    tape = active_tape()
    if tape is None:
        yield
        return
    prev = tape.recording
    tape.recording = False
    try:
        yield
    finally:
        tape.recording = prev


@contextlib.contextmanager
def recording(enabled: bool) -> Iterator[None]:
    """``no_grad`` when *enabled* is false, otherwise a pass-through."""
    if enabled:
        yield
    else:
        with no_grad():
            yield


@contextlib.contextmanager
def name_scope(name: str) -> Iterator[None]:
    _SCOPE.append(name)
    try:
        yield
    finally:
        _SCOPE.pop()


def current_scope() -> str:
    return ".".join(_SCOPE)


def record(op_kind: str, inputs: Sequence[Optional[Tensor]], params: Sequence[Parameter],
           saved: Sequence[np.ndarray], out: np.ndarray, vjp: Vjp) -> Tensor:
    """Finite-check ``out`` and, if recording, append a node for it."""
    tape = active_tape()
    if tape is not None:
        for p in params:
            tape.seen_params.add(p.name)
    live = tape is not None and tape.recording
    if not np.isfinite(out).all():
        nid = len(tape.nodes) if live else None
        raise NonFiniteError(
            f"non-finite output from {op_kind} at node {nid} (scope '{current_scope()}')",
            node_id=nid, op_kind=op_kind)
    if not live:
        return Tensor._wrap(out)
    node = TapeNode(
        id=len(tape.nodes),
        op_kind=op_kind,
        input_ids=tuple(None if x is None else x.node_id for x in inputs),
        param_names=tuple(p.name for p in params),
        saved=tuple(saved),
        output_shape=out.shape,
        layer_tag=layer_tag_for(op_kind),
        scope=current_scope(),
        dep_ids=tuple(x.origin for x in inputs if x is not None and x.origin is not None),
        output=out,
        params=tuple(params),
        vjp=vjp,
    )
    tape.nodes.append(node)
    return Tensor._wrap(out, node.id)
