"""Random graph generators and independent oracles shared by the tests."""
from __future__ import annotations

import numpy as np

from fogguard.topology import DnnSpec, PartitionMap, PhysicalNode, build_distributed


def split_counts(rng, total, parts):
    """``total`` layers cut into ``parts`` positive contiguous runs."""
    cuts = sorted(rng.choice(np.arange(1, total), size=parts - 1, replace=False)) if parts > 1 else []
    bounds = [0, *cuts, total]
    return [b - a for a, b in zip(bounds[:-1], bounds[1:])]


def random_chain(rng, skip_policy="skip_one", max_levels=4, n_iot=None, extra_skips=True, max_width=6):
    """Vertical chain iot(s) -> n1 -> ... -> cloud with random widths and layer split."""
    levels = int(rng.integers(1, max_levels + 1))
    n_layers = int(rng.integers(levels, levels + 3))
    spec = DnnSpec(
        int(rng.integers(2, max_width)),
        tuple(int(w) for w in rng.integers(1, max_width + 1, size=n_layers - 1)),
        int(rng.integers(2, 5)),
    )
    counts = split_counts(rng, n_layers, levels)
    ids = [f"n{i}" for i in range(levels - 1)] + ["cloud"]
    nodes, first = [], 1
    n_iot = n_iot or int(rng.integers(1, 3))
    for i in range(n_iot):
        dim = spec.input_dim if i == 0 else int(rng.integers(1, spec.input_dim + 1))
        nodes.append(PhysicalNode(f"iot{i}", "iot", parents=(ids[0],), input_dim=dim))
    for i, (nid, c) in enumerate(zip(ids, counts)):
        tier = "cloud" if nid == "cloud" else ("edge" if i == 0 else "fog")
        parents = () if nid == "cloud" else (ids[i + 1],)
        nodes.append(PhysicalNode(nid, tier, tuple(range(first, first + c)), parents=parents))
        first += c
    extra = []
    if extra_skips and levels >= 4 and rng.random() < 0.5:
        extra.append((ids[0], ids[3]))  # bypasses two nodes
    return build_distributed(spec, nodes, PartitionMap.from_nodes(nodes), skip_policy, extra_hyperconnections=extra)


def random_tree(rng, skip_policy="skip_one", max_width=5):
    """Small tree with horizontal splits: 1-2 children per node, 2-3 compute levels."""
    levels = int(rng.integers(2, 4))
    n_layers = int(rng.integers(levels, levels + 2))
    spec = DnnSpec(
        int(rng.integers(2, max_width)),
        tuple(int(w) for w in rng.integers(1, max_width + 1, size=n_layers - 1)),
        int(rng.integers(2, 4)),
    )
    counts = split_counts(rng, n_layers, levels)  # bottom level first
    nodes = []
    serial = [0]

    def grow(level, node_id, parent):  # level 0 is the cloud
        lo = int(sum(counts[: levels - 1 - level])) + 1
        hi = lo + counts[levels - 1 - level] - 1
        tier = "cloud" if level == 0 else ("edge" if level == levels - 1 else "fog")
        nodes.append(PhysicalNode(node_id, tier, tuple(range(lo, hi + 1)), parents=(parent,) if parent else ()))
        for _ in range(int(rng.integers(1, 3))):
            serial[0] += 1
            if level == levels - 1:
                dim = int(rng.integers(1, spec.input_dim + 1))
                nodes.append(PhysicalNode(f"iot{serial[0]}", "iot", parents=(node_id,), input_dim=dim))
            else:
                grow(level + 1, f"n{serial[0]}", node_id)

    grow(0, "cloud", None)
    return build_distributed(spec, nodes, PartitionMap.from_nodes(nodes), skip_policy)


def random_inputs(rng, dnn, batch=None, dtype=np.float64):
    out = {}
    for n in dnn.iot_nodes:
        shape = (dnn.output_dim(n.id),) if batch is None else (batch, dnn.output_dim(n.id))
        out[n.id] = rng.standard_normal(shape).astype(dtype)
    return out


def monolithic_chain_forward(dnn, inputs):
    """Unsplit evaluation of a vertical chain, written with explicit loops.

    The graph is flattened to its layer sequence; hyperconnections become
    extra additive inputs to the first layer of their destination. Used as
    an oracle that shares no code with the inference module.
    """
    spec = dnn.spec
    owner_first = {}
    for n in dnn.compute_nodes:
        owner_first[n.assigned_layers[0]] = n.id
    last_of = {n.id: n.assigned_layers[-1] for n in dnn.compute_nodes}
    layers = {}
    for n in dnn.compute_nodes:
        for idx, layer in zip(n.assigned_layers, dnn.layers[n.id]):
            layers[idx] = layer
    h = {}
    for i in range(1, spec.n_layers + 1):
        if i in owner_first:
            nid = owner_first[i]
            width = dnn.expansion_widths[nid]
            x = [0.0] * width
            for e in dnn.in_edges(nid):
                src = inputs[e.src] if dnn.node(e.src).is_iot else h[last_of[e.src]]
                for j, v in enumerate(src):
                    x[j] += float(v)
        else:
            x = list(h[i - 1])
        layer = layers[i]
        out = []
        for r in range(layer.weights.shape[0]):
            z = float(layer.bias[r])
            for c in range(layer.weights.shape[1]):
                z += float(layer.weights[r, c]) * x[c]
            out.append(max(z, 0.0) if layer.activation == "relu" else z)
        h[i] = out
    return np.array(h[spec.n_layers])
