"""Physical node hierarchy, partition maps and distributed DNN graphs.

A logical DNN (``DnnSpec``) is a stack of dense layers numbered ``1..L+1``
(layer ``L+1`` is the output layer). Physical nodes hold consecutive runs of
those layers; IoT nodes hold none and only emit input vectors. Nodes are
wired by hyperconnections: a *simple* one feeds a node's parent, a *skip* one
bypasses at least one physical node and feeds a strict ancestor.

Horizontally distributed models are expressed by letting several sibling
nodes hold the same layer indices; each path from an IoT node to the cloud
must still pass through every layer exactly once.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .nn import DenseLayer, he_uniform

TIERS = ("iot", "edge", "fog", "cloud")
SKIP_POLICIES = ("none", "skip_one")


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class DnnSpec:
    input_dim: int
    hidden_widths: tuple[int, ...]
    output_dim: int

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1 or self.output_dim < 1 or any(w < 1 for w in self.hidden_widths):
            raise TopologyError("all widths must be at least 1")

    @property
    def n_layers(self) -> int:
        """Number of non-input layers (hidden layers plus the output layer)."""
        return len(self.hidden_widths) + 1

    def width(self, layer: int) -> int:
        if layer == 0:
            return self.input_dim
        if 1 <= layer <= len(self.hidden_widths):
            return self.hidden_widths[layer - 1]
        if layer == self.n_layers:
            return self.output_dim
        raise IndexError(f"layer {layer} outside 0..{self.n_layers}")


@dataclass(frozen=True)
class PhysicalNode:
    id: str
    tier: str
    assigned_layers: tuple[int, ...] = ()
    fallible: Optional[bool] = None
    parents: tuple[str, ...] = ()
    input_dim: Optional[int] = None  # iot nodes only; defaults to DnnSpec.input_dim

    def __post_init__(self):
        if self.tier not in TIERS:
            raise TopologyError(f"node {self.id}: unknown tier {self.tier!r}")
        object.__setattr__(self, "assigned_layers", tuple(self.assigned_layers))
        object.__setattr__(self, "parents", tuple(self.parents))
        if self.fallible is None:
            object.__setattr__(self, "fallible", self.tier in ("edge", "fog"))

    @property
    def is_iot(self) -> bool:
        return self.tier == "iot"


@dataclass(frozen=True)
class PartitionMap:
    """Layer index -> ids of the node(s) housing it.

    A purely vertical split maps every layer to one node; sibling nodes of a
    horizontal split share layer indices.
    """

    assignments: Mapping[int, tuple[str, ...]]

    @classmethod
    def from_layers(cls, layer_to_node: Mapping[int, str]) -> "PartitionMap":
        return cls({int(k): (v,) for k, v in layer_to_node.items()})

    @classmethod
    def from_nodes(cls, nodes: Iterable[PhysicalNode]) -> "PartitionMap":
        out: dict[int, list[str]] = {}
        for node in nodes:
            for layer in node.assigned_layers:
                out.setdefault(layer, []).append(node.id)
        return cls({k: tuple(v) for k, v in sorted(out.items())})

    def layers_of(self, node_id: str) -> tuple[int, ...]:
        return tuple(sorted(l for l, ids in self.assignments.items() if node_id in ids))


@dataclass(frozen=True)
class Hyperconnection:
    src: str
    dst: str
    kind: str
    dim: int

    @property
    def weight(self) -> np.ndarray:
        return np.ones(self.dim, dtype=np.float32)


@dataclass
class DistributedDnn:
    spec: DnnSpec
    nodes: tuple[PhysicalNode, ...]  # topological order
    hyperconnections: tuple[Hyperconnection, ...]
    expansion_widths: dict[str, int]
    fallible_order: tuple[str, ...]
    layers: Optional[dict[str, list[DenseLayer]]] = None
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self._index = {n.id: n for n in self.nodes}

    def node(self, node_id: str) -> PhysicalNode:
        return self._index[node_id]

    @property
    def node_ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    @property
    def iot_nodes(self) -> list[PhysicalNode]:
        return [n for n in self.nodes if n.is_iot]

    @property
    def compute_nodes(self) -> list[PhysicalNode]:
        return [n for n in self.nodes if not n.is_iot]

    @property
    def output_node(self) -> PhysicalNode:
        return self.nodes[-1]

    @property
    def skip_connections(self) -> list[Hyperconnection]:
        return [h for h in self.hyperconnections if h.kind == "skip"]

    def in_edges(self, node_id: str) -> list[Hyperconnection]:
        return [h for h in self.hyperconnections if h.dst == node_id]

    def out_edges(self, node_id: str) -> list[Hyperconnection]:
        return [h for h in self.hyperconnections if h.src == node_id]

    def output_dim(self, node_id: str) -> int:
        node = self.node(node_id)
        if node.is_iot:
            return node.input_dim or self.spec.input_dim
        return self.spec.width(node.assigned_layers[-1])

    def ancestors(self, node_id: str) -> set[str]:
        seen: set[str] = set()
        stack = list(self.node(node_id).parents)
        while stack:
            p = stack.pop()
            if p not in seen:
                seen.add(p)
                stack.extend(self.node(p).parents)
        return seen

    def all_layers(self) -> list[DenseLayer]:
        """Every dense layer in persistence order (topological, then depth)."""
        if self.layers is None:
            raise ValueError("model has no weights")
        return [layer for n in self.compute_nodes for layer in self.layers[n.id]]

    def with_weights(self, layers: Sequence[DenseLayer]) -> "DistributedDnn":
        """Copy of this graph carrying ``layers`` in persistence order."""
        layers = list(layers)
        need = sum(len(n.assigned_layers) for n in self.compute_nodes)
        if len(layers) != need:
            raise ValueError(f"graph holds {need} layers, {len(layers)} supplied")
        it = iter(layers)
        grouped = {n.id: [next(it) for _ in n.assigned_layers] for n in self.compute_nodes}
        out = dataclasses.replace(self, layers=grouped)
        problems = [v for v in validate_topology(out) if "weights" in v]
        if problems:
            raise TopologyError("; ".join(problems))
        return out

    def init_weights(self, seed: int, dtype=np.float32) -> "DistributedDnn":
        """He-uniform initialisation, drawn node by node in topological order."""
        rng = np.random.default_rng(seed)
        layers: dict[str, list[DenseLayer]] = {}
        for n in self.compute_nodes:
            fan_in = self.expansion_widths[n.id]
            slab = []
            for idx in n.assigned_layers:
                width = self.spec.width(idx)
                layer = he_uniform(rng, width, fan_in, dtype)
                if idx == self.spec.n_layers:
                    layer.activation = "identity"
                slab.append(layer)
                fan_in = width
            layers[n.id] = slab
        return dataclasses.replace(self, layers=layers)

    def astype(self, dtype) -> "DistributedDnn":
        layers = {
            k: [DenseLayer(l.weights.astype(dtype), l.bias.astype(dtype), l.activation) for l in v]
            for k, v in (self.layers or {}).items()
        }
        return dataclasses.replace(self, layers=layers)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.all_layers():
            out += [layer.weights, layer.bias]
        return out

    def without_skips(self) -> "DistributedDnn":
        """The Vanilla graph: same nodes and weights, simple hyperconnections only."""
        simple = tuple(h for h in self.hyperconnections if h.kind == "simple")
        widths = _expansion_widths(self.compute_nodes, simple)
        return dataclasses.replace(self, hyperconnections=simple, expansion_widths=widths)


def _topological_order(nodes: Sequence[PhysicalNode], edges: Iterable[tuple[str, str]]) -> list[PhysicalNode]:
    by_id = {n.id: n for n in nodes}
    indeg = {n.id: 0 for n in nodes}
    succ: dict[str, list[str]] = {n.id: [] for n in nodes}
    for a, b in edges:
        succ[a].append(b)
        indeg[b] += 1
    ready = sorted(k for k, d in indeg.items() if d == 0)
    order = []
    while ready:
        k = ready.pop(0)
        order.append(by_id[k])
        for s in succ[k]:
            indeg[s] -= 1
            if indeg[s] == 0:
                ready.append(s)
        ready.sort()
    if len(order) != len(nodes):
        raise TopologyError("node hierarchy contains a cycle")
    return order


def _expansion_widths(compute_nodes, hyperconnections) -> dict[str, int]:
    widths = {}
    for n in compute_nodes:
        dims = [h.dim for h in hyperconnections if h.dst == n.id]
        if dims:
            widths[n.id] = max(dims)
    return widths


def _last_layer(node: PhysicalNode) -> int:
    return node.assigned_layers[-1] if node.assigned_layers else 0


def build_distributed(
    spec: DnnSpec,
    nodes: Sequence[PhysicalNode],
    partition: PartitionMap,
    skip_policy: str = "none",
    *,
    iot_skips: bool = True,
    extra_hyperconnections: Sequence[tuple[str, str]] = (),
    fallible_order: Optional[Sequence[str]] = None,
) -> DistributedDnn:
    """Realise ``spec`` over ``nodes`` according to ``partition``.

    Simple hyperconnections follow each node's ``parents``. With
    ``skip_policy="skip_one"`` a skip hyperconnection ``a -> c`` is added for
    every pair of simple hyperconnections ``a -> b -> c``; ``iot_skips=False``
    leaves IoT nodes out as skip sources (for inputs merged at the edge).
    """
    if skip_policy not in SKIP_POLICIES:
        raise TopologyError(f"unknown skip policy {skip_policy!r}")
    ids = [n.id for n in nodes]
    if len(set(ids)) != len(ids):
        raise TopologyError("duplicate node ids")
    by_id = {n.id: n for n in nodes}

    for layer, owners in partition.assignments.items():
        if not 1 <= layer <= spec.n_layers:
            raise TopologyError(f"partition assigns unknown layer {layer}")
        for owner in owners:
            if owner not in by_id:
                raise TopologyError(f"partition references unknown node {owner!r}")
            if by_id[owner].is_iot:
                raise TopologyError(f"layer {layer} assigned to IoT node {owner!r}")
    missing = set(range(1, spec.n_layers + 1)) - set(partition.assignments)
    if missing:
        raise TopologyError(f"layers {sorted(missing)} are not assigned to any node")

    placed = []
    for n in nodes:
        layers = partition.layers_of(n.id)
        if layers and list(layers) != list(range(layers[0], layers[-1] + 1)):
            raise TopologyError(f"node {n.id!r} holds non-contiguous layers {list(layers)}")
        if not n.is_iot and not layers:
            raise TopologyError(f"compute node {n.id!r} holds no layers")
        for p in n.parents:
            if p not in by_id:
                raise TopologyError(f"node {n.id!r} has unknown parent {p!r}")
        placed.append(dataclasses.replace(n, assigned_layers=layers))
    by_id = {n.id: n for n in placed}

    simple = [(n.id, p) for n in placed for p in n.parents]
    order = _topological_order(placed, simple)

    sinks = [n for n in placed if not n.parents]
    if len(sinks) != 1 or sinks[0].tier != "cloud":
        raise TopologyError("hierarchy must end at exactly one cloud node")
    # every compute node must sit on a path from some IoT node
    reached = {n.id for n in placed if n.is_iot}
    for n in order:
        if n.id in reached:
            reached.update(n.parents)
    unreached = [n.id for n in placed if n.id not in reached]
    if unreached:
        raise TopologyError(f"nodes not fed by any IoT node: {unreached}")

    for a, b in simple:
        if by_id[b].assigned_layers[0] != _last_layer(by_id[a]) + 1:
            raise TopologyError(
                f"{a!r} -> {b!r}: parent must hold layer {_last_layer(by_id[a]) + 1}"
            )
    if _last_layer(sinks[0]) != spec.n_layers:
        raise TopologyError("the cloud node must hold the output layer")

    def dim_of(node_id: str) -> int:
        node = by_id[node_id]
        if node.is_iot:
            return node.input_dim or spec.input_dim
        return spec.width(node.assigned_layers[-1])

    pairs = list(simple)
    if skip_policy == "skip_one":
        for a, b in simple:
            if by_id[a].is_iot and not iot_skips:
                continue
            for c in by_id[b].parents:
                if (a, c) not in pairs:
                    pairs.append((a, c))
    for a, c in extra_hyperconnections:
        if a not in by_id or c not in by_id:
            raise TopologyError(f"hyperconnection {a!r} -> {c!r} references an unknown node")
        if (a, c) not in pairs:
            pairs.append((a, c))

    simple_set = set(simple)
    hcs = tuple(
        Hyperconnection(a, c, "simple" if (a, c) in simple_set else "skip", dim_of(a)) for a, c in pairs
    )
    compute = [n for n in order if not n.is_iot]
    if fallible_order is None:
        fallible_order = [n.id for n in placed if n.fallible]
    dnn = DistributedDnn(
        spec=spec,
        nodes=tuple(order),
        hyperconnections=hcs,
        expansion_widths=_expansion_widths(compute, hcs),
        fallible_order=tuple(fallible_order),
    )
    problems = validate_topology(dnn)
    if problems:
        raise TopologyError("; ".join(problems))
    return dnn


def validate_topology(dnn: DistributedDnn) -> list[str]:
    """Every broken invariant of ``dnn`` as a human-readable string."""
    out: list[str] = []
    spec = dnn.spec
    ids = set(dnn.node_ids)
    for n in dnn.nodes:
        if n.tier == "cloud" and n.fallible:
            out.append(f"cloud node {n.id} is marked fallible")
        if n.is_iot and (n.assigned_layers or n.fallible):
            out.append(f"IoT node {n.id} must hold no layers and be non-fallible")
        layers = list(n.assigned_layers)
        if layers and layers != list(range(layers[0], layers[-1] + 1)):
            out.append(f"node {n.id} holds non-contiguous layers")

    for h in dnn.hyperconnections:
        if h.src not in ids or h.dst not in ids:
            out.append(f"hyperconnection {h.src}->{h.dst} references an unknown node")
            continue
        src, dst = dnn.node(h.src), dnn.node(h.dst)
        if dst.is_iot:
            out.append(f"hyperconnection {h.src}->{h.dst} feeds an IoT node")
            continue
        is_parent = h.dst in src.parents and dst.assigned_layers[:1] == (_last_layer(src) + 1,)
        if h.kind == "simple" and not is_parent:
            out.append(f"simple hyperconnection {h.src}->{h.dst} does not feed the parent")
        if h.kind == "skip" and (h.dst in src.parents or h.dst not in dnn.ancestors(h.src)):
            out.append(f"skip hyperconnection {h.src}->{h.dst} does not feed a strict ancestor")
        if h.kind not in ("simple", "skip"):
            out.append(f"hyperconnection {h.src}->{h.dst} has unknown kind {h.kind!r}")
        if h.dim != dnn.output_dim(h.src):
            out.append(f"hyperconnection {h.src}->{h.dst} dim {h.dim} != source width")

    for n in dnn.compute_nodes:
        incoming = dnn.in_edges(n.id)
        if not incoming:
            out.append(f"compute node {n.id} has no incoming hyperconnection")
            continue
        width = dnn.expansion_widths.get(n.id)
        if width is None:
            out.append(f"node {n.id} lacks an expansion layer")
            continue
        dims = [h.dim for h in incoming]
        if width < max(dims):
            out.append(f"expansion layer of {n.id} ({width}) narrower than incoming dim {max(dims)}")
        elif width != max(dims):
            out.append(f"expansion layer of {n.id} ({width}) wider than its widest input")

    # each IoT->cloud path passes through layers 1..L+1 exactly once
    def walk(node_id: str, expected: int, path: tuple[str, ...]):
        node = dnn.node(node_id)
        if not node.is_iot:
            layers = list(node.assigned_layers)
            if not layers or layers[0] != expected:
                out.append(f"path {'->'.join(path + (node_id,))} does not continue at layer {expected}")
                return
            expected = layers[-1] + 1
        if not node.parents:
            if expected != spec.n_layers + 1:
                out.append(f"path {'->'.join(path + (node_id,))} ends before the output layer")
            return
        for p in node.parents:
            if p in ids:
                walk(p, expected, path + (node_id,))

    for n in dnn.iot_nodes:
        walk(n.id, 1, ())

    if set(dnn.fallible_order) != {n.id for n in dnn.nodes if n.fallible}:
        out.append("fallible_order must list exactly the fallible nodes")

    if dnn.layers is not None:
        for n in dnn.compute_nodes:
            slab = dnn.layers.get(n.id, [])
            if len(slab) != len(n.assigned_layers):
                out.append(f"weights: node {n.id} has {len(slab)} layers, expected {len(n.assigned_layers)}")
                continue
            fan_in = dnn.expansion_widths.get(n.id, 0)
            for idx, layer in zip(n.assigned_layers, slab):
                if layer.weights.shape != (spec.width(idx), fan_in):
                    out.append(f"weights: layer {idx} on {n.id} has shape {layer.weights.shape}")
                fan_in = spec.width(idx)
    return out


# -- reference topologies ---------------------------------------------------


def health_reference_topology(fog_layers: tuple[int, int] = (2, 3)):
    """Vertical chain iot -> e1 -> f2 -> f1 -> cloud over ten 250-wide layers.

    ``fog_layers`` gives the layer counts of the fog next to the edge and the
    fog next to the cloud; pass ``(3, 2)`` for the alternative reading.
    """
    spec = DnnSpec(23, (250,) * 10, 12)
    lower, upper = fog_layers
    if 1 + lower + upper + 4 != 10:
        raise TopologyError("fog layer counts must total five")
    spans = {"e1": (1, 1), "f2": (2, 1 + lower), "f1": (2 + lower, 1 + lower + upper), "cloud": (7, 11)}
    nodes = [
        PhysicalNode("iot", "iot", parents=("e1",)),
        PhysicalNode("e1", "edge", tuple(range(spans["e1"][0], spans["e1"][1] + 1)), parents=("f2",)),
        PhysicalNode("f2", "fog", tuple(range(spans["f2"][0], spans["f2"][1] + 1)), parents=("f1",)),
        PhysicalNode("f1", "fog", tuple(range(spans["f1"][0], spans["f1"][1] + 1)), parents=("cloud",)),
        PhysicalNode("cloud", "cloud", tuple(range(7, 12))),
    ]
    return spec, nodes, PartitionMap.from_nodes(nodes)


HEALTH_FALLIBLE_ORDER = ("f1", "f2", "e1")
CAMERA_FALLIBLE_ORDER = ("f1", "f2", "f3", "f4", "e1", "e2", "e3", "e4")
CAMERA_VIEW_DIM = 32 * 32 * 3


def camera_reference_topology(view_dim: int = CAMERA_VIEW_DIM):
    """Nine compute nodes over fourteen 32-wide layers, fed by six cameras.

    Cameras c1..c6 feed edges e1..e4 (views merged by addition at the edge);
    e1, e2 feed f3 and e3, e4 feed f4; f3 and f4 feed f2, then f1, then cloud.
    """
    spec = DnnSpec(view_dim, (32,) * 14, 3)
    cams = {"c1": "e1", "c2": "e1", "c3": "e2", "c4": "e3", "c5": "e4", "c6": "e4"}
    nodes = [PhysicalNode(c, "iot", parents=(e,), input_dim=view_dim) for c, e in cams.items()]
    nodes += [PhysicalNode(e, "edge", (1, 2), parents=(f,)) for e, f in
              (("e1", "f3"), ("e2", "f3"), ("e3", "f4"), ("e4", "f4"))]
    nodes += [
        PhysicalNode("f3", "fog", (3, 4), parents=("f2",)),
        PhysicalNode("f4", "fog", (3, 4), parents=("f2",)),
        PhysicalNode("f2", "fog", (5, 6, 7), parents=("f1",)),
        PhysicalNode("f1", "fog", (8, 9, 10), parents=("cloud",)),
        PhysicalNode("cloud", "cloud", (11, 12, 13, 14, 15)),
    ]
    return spec, nodes, PartitionMap.from_nodes(nodes)


def build_health(skip_policy: str = "skip_one", fog_layers=(2, 3)) -> DistributedDnn:
    spec, nodes, part = health_reference_topology(fog_layers)
    return build_distributed(spec, nodes, part, skip_policy, fallible_order=HEALTH_FALLIBLE_ORDER)


def build_camera(skip_policy: str = "skip_one", view_dim: int = CAMERA_VIEW_DIM) -> DistributedDnn:
    spec, nodes, part = camera_reference_topology(view_dim)
    return build_distributed(
        spec, nodes, part, skip_policy, iot_skips=False, fallible_order=CAMERA_FALLIBLE_ORDER
    )


def topology_from_config(cfg: Mapping, skip_policy: Optional[str] = None) -> DistributedDnn:
    """Build a graph from the ``topology`` section of an experiment config."""
    preset = cfg.get("preset")
    policy = skip_policy or cfg.get("skip_policy", "skip_one")
    if preset == "health":
        return build_health(policy, tuple(cfg.get("fog_layers", (2, 3))))
    if preset == "camera":
        return build_camera(policy, int(cfg.get("view_dim", CAMERA_VIEW_DIM)))
    if preset is not None:
        raise TopologyError(f"unknown topology preset {preset!r}")

    hidden = cfg["hidden_widths"]
    if isinstance(hidden, Mapping):
        hidden = [hidden["width"]] * hidden["count"]
    spec = DnnSpec(int(cfg["input_dim"]), tuple(hidden), int(cfg["output_dim"]))
    nodes = []
    for raw in cfg["nodes"]:
        span = raw.get("layers")  # inclusive [first, last]
        layers = tuple(range(span[0], span[1] + 1)) if span else ()
        nodes.append(
            PhysicalNode(
                raw["id"],
                raw["tier"],
                tuple(layers),
                raw.get("fallible"),
                tuple(raw.get("parents", ())),
                raw.get("input_dim"),
            )
        )
    return build_distributed(
        spec,
        nodes,
        PartitionMap.from_nodes(nodes),
        policy,
        iot_skips=cfg.get("iot_skips", True),
        extra_hyperconnections=[tuple(p) for p in cfg.get("hyperconnections", ())],
        fallible_order=cfg.get("reliability_order"),
    )
