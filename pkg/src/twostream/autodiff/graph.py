"""Backward-requirement analysis, reverse sweep and activation accounting."""

from __future__ import annotations

from typing import Iterable, Optional, Union

import numpy as np

from .core import ShapeError, Tape, Tensor

BYTES_PER_ELEMENT = 8


class UnknownParameterError(KeyError):
    pass


class GradientMap(dict):
    """``{parameter name: gradient}`` from one backward call.

    ``visited`` is the traversal log (node ids in the order their VJPs ran);
    ``required`` is the node set the sweep was restricted to.
    """

    def __init__(self, *args, visited=(), required=frozenset(), **kw):
        super().__init__(*args, **kw)
        self.visited = list(visited)
        self.required = required


def _loss_id(tape: Tape, loss: Union[Tensor, int, None]) -> int:
    if loss is None:
        return tape.loss_id
    nid = loss.node_id if isinstance(loss, Tensor) else int(loss)
    if nid is None or not 0 <= nid < len(tape.nodes):
        raise ValueError(f"loss {loss!r} is not a node on this tape")
    return nid


def trainable_names(tape: Tape) -> set[str]:
    return {p.name for node in tape.nodes for p in node.params if not p.frozen}


def required_set(tape: Tape, trainables: Iterable[str], loss: Union[Tensor, int, None] = None) -> frozenset:
    """Node ids lying on a directed path from a node that consumes one of
    ``trainables`` to the loss node (both endpoints included)."""
    trainables = set(trainables)
    unknown = sorted(trainables - tape.seen_params)
    if unknown:
        raise UnknownParameterError(f"parameters not used on this tape: {unknown}")
    if not trainables or not tape.nodes:
        return frozenset()
    loss_id = _loss_id(tape, loss)

    downstream: set[int] = set()
    for node in tape.nodes:
        if any(n in trainables for n in node.param_names) or \
                any(i is not None and i in downstream for i in node.input_ids):
            downstream.add(node.id)

    upstream = {loss_id}
    for node in reversed(tape.nodes[:loss_id + 1]):
        if node.id in upstream:
            upstream.update(i for i in node.input_ids if i is not None)
    return frozenset(downstream & upstream)


def backward(tape: Tape, loss: Union[Tensor, int, None] = None, seed: float = 1.0,
             accumulate: bool = True) -> GradientMap:
    """Reverse sweep restricted to ``required_set`` of the non-frozen parameters.

    ``seed`` scales the loss gradient (``1/a`` under gradient accumulation).
    With ``accumulate`` the results are also added into ``Parameter.grad``.
    """
    if not tape.finalized:
        raise RuntimeError("backward needs a finalized tape (leave the `with Tape()` block first)")
    loss_id = _loss_id(tape, loss)
    loss_node = tape.nodes[loss_id]
    if int(np.prod(loss_node.output_shape)) != 1:
        raise ShapeError(f"loss must be scalar, node {loss_id} has shape {loss_node.output_shape}")

    req = required_set(tape, trainable_names(tape), loss_id)
    grads: dict[int, np.ndarray] = {loss_id: np.full(loss_node.output_shape, float(seed))}
    pgrads: dict[str, np.ndarray] = {}
    params = {}
    visited = []

    for nid in sorted(req, reverse=True):
        node = tape.nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            raise RuntimeError(f"node {nid} is required but received no gradient (tape not topological?)")
        need_in = [i is not None and i in req for i in node.input_ids]
        for i in node.input_ids:
            if i is not None and i >= nid:
                raise RuntimeError(f"cycle: node {nid} consumes later node {i}")
        need_p = [not p.frozen for p in node.params]
        in_grads, p_grads = node.vjp(g, need_in, need_p)
        visited.append(nid)
        for i, gi, need in zip(node.input_ids, in_grads, need_in):
            if need:
                grads[i] = gi if i not in grads else grads[i] + gi
        for p, gp, need in zip(node.params, p_grads, need_p):
            if need:
                pgrads[p.name] = gp if p.name not in pgrads else pgrads[p.name] + gp
                params[p.name] = p

    if accumulate:
        for name in sorted(pgrads):
            params[name].accumulate(pgrads[name])
    return GradientMap(sorted(pgrads.items()), visited=visited, required=req)


def retained_bytes(tape: Tape, req: Iterable[int]) -> int:
    """Bytes of every distinct array a required node saves or outputs."""
    seen: dict[int, int] = {}
    for nid in req:
        node = tape.nodes[nid]
        for arr in (*node.saved, node.output):
            if arr is not None:
                seen[id(arr)] = arr.size
    return BYTES_PER_ELEMENT * sum(seen.values())


def tagged(tape: Tape, ids: Iterable[int], tag: str) -> list[int]:
    return sorted(i for i in ids if tape.nodes[i].layer_tag == tag)


def spatial_nodes(tape: Tape, ids: Optional[Iterable[int]] = None) -> list[int]:
    ids = range(len(tape.nodes)) if ids is None else ids
    return tagged(tape, ids, "spatial")
