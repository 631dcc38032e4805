"""Simulated (single-process) training of distributed DNN graphs.

No failures are injected while training: every node is alive and the graph
is trained as one network whose junctions are the Add operations.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .nn import Adam, DenseLayer, LossSpec, OptimizerSpec, batch_loss_and_grad, dense_backward, dense_forward
from .inference import pad_to
from .topology import DistributedDnn

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


# Published optimiser settings per experiment. camera.yaml trains with a
# smaller rate: at 0.1 this 14-layer net collapses to the majority class.
REFERENCE_OPTIMIZERS = {
    "health": OptimizerSpec(learning_rate=0.001, batch_size=1024),
    "camera": OptimizerSpec(learning_rate=0.1, batch_size=64),
}


@dataclass
class TrainConfig:
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    epochs: int = 50
    seed: int = 0
    loss: LossSpec = field(default_factory=LossSpec)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")


@dataclass
class TrainedModel:
    dnn: DistributedDnn
    best_epoch: int
    val_accuracy: float
    history: list[dict]


def _batch_inputs(inputs, idx):
    if isinstance(inputs, Mapping):
        return {k: v[idx] for k, v in inputs.items()}
    return inputs[idx]


def _n_rows(inputs) -> int:
    if isinstance(inputs, Mapping):
        return next(iter(inputs.values())).shape[0]
    return inputs.shape[0]


def graph_forward(dnn: DistributedDnn, inputs, drop_skips: bool = False):
    """All-alive batched forward pass that keeps what backprop needs.

    Returns ``(logits, cache)``. With ``drop_skips`` every skip hyperconnection
    contributes nothing, which reproduces the Vanilla computation.
    """
    iot = dnn.iot_nodes
    if not isinstance(inputs, Mapping):
        inputs = {iot[0].id: inputs}
    outputs = {n.id: np.atleast_2d(inputs[n.id]) for n in iot}
    cache = {}
    for node in dnn.compute_nodes:
        width = dnn.expansion_widths[node.id]
        edges = [h for h in dnn.in_edges(node.id) if not (drop_skips and h.kind == "skip")]
        h = None
        for e in edges:
            x = pad_to(outputs[e.src], width)
            h = x.copy() if h is None else h + x
        acts = [h]
        for layer in dnn.layers[node.id]:
            acts.append(dense_forward(layer, acts[-1]))
        cache[node.id] = (edges, acts)
        outputs[node.id] = acts[-1]
    return outputs[dnn.output_node.id], cache


def graph_backward(dnn: DistributedDnn, cache, grad_logits: np.ndarray) -> list[np.ndarray]:
    """Gradients for ``dnn.parameters()`` given dL/d(logits).

    At an Add junction each operand receives the upstream gradient truncated
    to its own width, so zero-padded slots pass nothing back.
    """
    grad_out = {dnn.output_node.id: grad_logits}
    per_node: dict[str, list[np.ndarray]] = {}
    for node in reversed(dnn.compute_nodes):
        edges, acts = cache[node.id]
        g = grad_out.pop(node.id, None)
        slab = dnn.layers[node.id]
        if g is None:
            per_node[node.id] = [x for l in slab for x in (np.zeros_like(l.weights), np.zeros_like(l.bias))]
            continue
        grads: list[np.ndarray] = []
        for layer, a_in, a_out in zip(reversed(slab), reversed(acts[:-1]), reversed(acts[1:])):
            g, gw, gb = dense_backward(layer, a_in, a_out, g)
            grads = [gw, gb] + grads
        per_node[node.id] = grads
        for e in edges:
            if dnn.node(e.src).is_iot:
                continue
            part = g[:, : e.dim]
            if e.src in grad_out:
                grad_out[e.src] = grad_out[e.src] + part
            else:
                grad_out[e.src] = part
    return [x for n in dnn.compute_nodes for x in per_node[n.id]]


class GraphNetwork:
    """Adapter exposing a distributed graph to ``nn.grad_check``."""

    def __init__(self, dnn: DistributedDnn, loss: Optional[LossSpec] = None, drop_skips: bool = False):
        self.dnn = dnn
        self.loss_spec = loss or LossSpec()
        self.drop_skips = drop_skips

    def parameters(self):
        return self.dnn.parameters()

    def loss(self, x, y) -> float:
        logits, _ = graph_forward(self.dnn, x, self.drop_skips)
        return batch_loss_and_grad(self.loss_spec, logits, np.atleast_1d(y))[0]

    def loss_and_grads(self, x, y):
        logits, cache = graph_forward(self.dnn, x, self.drop_skips)
        loss, g = batch_loss_and_grad(self.loss_spec, logits, np.atleast_1d(y))
        return loss, graph_backward(self.dnn, cache, g)


def select_best(history: Sequence) -> int:
    """1-based epoch with the highest validation accuracy (earliest on ties)."""
    if not history:
        raise ValueError("empty training history")
    accs = [h["val_accuracy"] if isinstance(h, Mapping) else h for h in history]
    return int(np.argmax(accs)) + 1


def _snapshot(dnn: DistributedDnn) -> list[DenseLayer]:
    return [l.copy() for l in dnn.all_layers()]


def predict_alive(dnn: DistributedDnn, inputs, batch: int = 8192) -> np.ndarray:
    n = _n_rows(inputs)
    preds = []
    for start in range(0, n, batch):
        idx = slice(start, start + batch)
        logits, _ = graph_forward(dnn, _batch_inputs(inputs, idx))
        preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def train(
    dnn: DistributedDnn,
    data,
    cfg: TrainConfig,
    *,
    drop_skips: bool = False,
    initialise: bool = True,
) -> TrainedModel:
    """Train ``dnn`` on ``data.split_inputs("train")`` with Adam.

    The epoch with the best validation accuracy is kept. ``data`` is a
    ``fogguard.data.Dataset`` (anything with ``split_inputs(name, dnn)``).
    """
    if initialise or dnn.layers is None:
        dnn = dnn.init_weights(cfg.seed)
    x_train, y_train = data.split_inputs("train", dnn)
    x_val, y_val = data.split_inputs("val", dnn)
    n = len(y_train)
    if n == 0:
        raise ValueError("empty training split")
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    opt = Adam(cfg.optimizer)
    params = dnn.parameters()
    bs = cfg.optimizer.batch_size
    history: list[dict] = []
    best = (-1.0, None)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n)
        total, correct = 0.0, 0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            xb, yb = _batch_inputs(x_train, idx), y_train[idx]
            logits, cache = graph_forward(dnn, xb, drop_skips)
            loss, g = batch_loss_and_grad(cfg.loss, logits, yb)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch starting {start}")
            total += loss * len(idx)
            correct += int(np.sum(np.argmax(logits, axis=1) == yb))
            opt.step(params, graph_backward(dnn, cache, g))
        if drop_skips:
            val_pred = np.argmax(graph_forward(dnn, x_val, True)[0], axis=1) if len(y_val) else y_val
        else:
            val_pred = predict_alive(dnn, x_val)
        val_acc = float(np.mean(val_pred == y_val)) if len(y_val) else 0.0
        history.append(
            {"epoch": epoch, "train_loss": total / n, "train_accuracy": correct / n, "val_accuracy": val_acc}
        )
        log.info("epoch %d loss %.4f val %.4f (%.1fs)", epoch, total / n, val_acc, time.perf_counter() - t0)
        if val_acc > best[0]:
            best = (val_acc, _snapshot(dnn))
    best_epoch = select_best(history)
    return TrainedModel(dnn.with_weights(best[1]), best_epoch, history[best_epoch - 1]["val_accuracy"], history)
