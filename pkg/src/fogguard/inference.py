"""Failure-masked forward passes through a distributed DNN.

The output of a failed node is the null value ``NULL``. Under the Add
operation a null operand is ignored; a node whose whole input is null emits
null; a null reaching the output layer forces a random guess.

All functions accept a single vector or a batch (one sample per row). A
failure combination applies to the whole batch, so a node output is either
an array or ``NULL`` for every row at once.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .nn import ShapeError, dense_forward
from .topology import DistributedDnn

RANDOM_GUESS = -1


class _Null:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "NULL"

    def __reduce__(self):
        return (_Null, ())


NULL = _Null()

Activation = Union[np.ndarray, _Null]


def is_null(x) -> bool:
    return x is NULL


def pad_to(x: np.ndarray, dim: int) -> np.ndarray:
    """Zero-pad the last axis of ``x`` at the tail up to ``dim`` entries."""
    have = x.shape[-1]
    if have == dim:
        return x
    if have > dim:
        raise ShapeError(f"cannot pad a {have}-vector down to {dim}")
    widths = [(0, 0)] * (x.ndim - 1) + [(0, dim - have)]
    return np.pad(x, widths)


def add_inputs(inputs: Sequence[Activation]) -> Activation:
    """Element-wise sum of hyperconnection vectors with null and padding rules."""
    if len(inputs) == 0:
        raise ValueError("add_inputs needs at least one operand")
    live = [np.asarray(x) for x in inputs if not is_null(x)]
    if not live:
        return NULL
    dim = max(x.shape[-1] for x in live)
    total = pad_to(live[0], dim).copy()
    for x in live[1:]:
        total += pad_to(x, dim)
    return total


def node_forward(dnn: DistributedDnn, node_id: str, x: Activation) -> Activation:
    """Expansion layer then the node's dense slab; null in gives null out."""
    if is_null(x):
        return NULL
    width = dnn.expansion_widths[node_id]
    if x.shape[-1] > width:
        raise ShapeError(f"node {node_id}: input dim {x.shape[-1]} exceeds expansion width {width}")
    h = pad_to(x, width)
    for layer in dnn.layers[node_id]:
        h = dense_forward(layer, h)
    return h


@dataclass
class InferenceOutcome:
    logits: Activation
    predicted: Union[int, np.ndarray]

    @property
    def random_guess(self) -> bool:
        return is_null(self.logits)


def failed_nodes(dnn: DistributedDnn, combination: Optional[Sequence[int]]) -> set[str]:
    """Ids of the nodes a survive(1)/fail(0) tuple marks as failed."""
    if combination is None:
        return set()
    combination = tuple(int(b) for b in combination)
    if len(combination) != len(dnn.fallible_order):
        raise ValueError(
            f"failure combination has {len(combination)} entries, graph has "
            f"{len(dnn.fallible_order)} fallible nodes"
        )
    if any(b not in (0, 1) for b in combination):
        raise ValueError("failure combination entries must be 0 or 1")
    return {nid for nid, b in zip(dnn.fallible_order, combination) if b == 0}


def _iot_inputs(dnn: DistributedDnn, inputs) -> dict[str, np.ndarray]:
    iot = dnn.iot_nodes
    if not isinstance(inputs, Mapping):
        if len(iot) != 1:
            raise ValueError(f"graph has {len(iot)} IoT nodes; pass a mapping of inputs")
        inputs = {iot[0].id: inputs}
    out = {}
    for n in iot:
        x = np.asarray(inputs[n.id])
        if x.shape[-1] != dnn.output_dim(n.id):
            raise ShapeError(f"IoT node {n.id}: input dim {x.shape[-1]} != {dnn.output_dim(n.id)}")
        out[n.id] = x
    return out


def forward_all(dnn: DistributedDnn, inputs, failed: Optional[Sequence[int]] = None) -> dict[str, Activation]:
    """Output of every node under a failure combination, keyed by node id."""
    dead = failed_nodes(dnn, failed)
    outputs: dict[str, Activation] = dict(_iot_inputs(dnn, inputs))
    for node in dnn.compute_nodes:
        if node.id in dead:
            outputs[node.id] = NULL
            continue
        merged = add_inputs([outputs[h.src] for h in dnn.in_edges(node.id)])
        outputs[node.id] = node_forward(dnn, node.id, merged)
    return outputs


def distributed_forward(dnn: DistributedDnn, inputs, failed: Optional[Sequence[int]] = None) -> InferenceOutcome:
    logits = forward_all(dnn, inputs, failed)[dnn.output_node.id]
    if is_null(logits):
        first = next(iter(_iot_inputs(dnn, inputs).values()))
        predicted = RANDOM_GUESS if first.ndim == 1 else np.full(first.shape[0], RANDOM_GUESS)
    else:
        predicted = np.argmax(logits, axis=-1)
        predicted = int(predicted) if np.ndim(predicted) == 0 else predicted
    return InferenceOutcome(logits, predicted)


def accuracy(
    dnn: DistributedDnn,
    inputs,
    labels: np.ndarray,
    failed: Optional[Sequence[int]] = None,
    guess_mode: str = "expectation",
    seed: int = 0,
) -> float:
    """Fraction of correct predictions; random guesses count 1/K in expectation."""
    if guess_mode not in ("expectation", "sampled"):
        raise ValueError(f"unknown guess mode {guess_mode!r}")
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("accuracy needs a non-empty labelled split")
    k = dnn.spec.output_dim
    outcome = distributed_forward(dnn, inputs, failed)
    if not outcome.random_guess:
        return float(np.mean(outcome.predicted == labels))
    if guess_mode == "expectation":
        return 1.0 / k
    guesses = np.random.default_rng(seed).integers(0, k, size=labels.shape[0])
    return float(np.mean(guesses == labels))
