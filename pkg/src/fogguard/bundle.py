"""Model bundles: a directory holding ``model.json`` and ``weights.dfgw``.

``model.json`` is the run manifest: the topology section needed to rebuild
the graph, the skip policy, seeds, config hash and training history.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

from .nn import load_weights, save_weights
from .topology import DistributedDnn, topology_from_config

BUNDLE_FORMAT = "fogguard-model"
BUNDLE_VERSION = 1


def save_bundle(directory, dnn: DistributedDnn, topology_cfg: Mapping, skip_policy: str, **meta) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_weights(directory / "weights.dfgw", dnn.all_layers())
    manifest = {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "topology": dict(topology_cfg),
        "skip_policy": skip_policy,
        "skip_hyperconnections": [[h.src, h.dst] for h in dnn.skip_connections],
        **meta,
    }
    (directory / "model.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_bundle(directory) -> tuple[DistributedDnn, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "model.json").read_text())
    if manifest.get("format") != BUNDLE_FORMAT:
        raise ValueError(f"{directory}: not a model bundle")
    if manifest.get("version") != BUNDLE_VERSION:
        raise ValueError(f"{directory}: unsupported bundle version {manifest.get('version')}")
    dnn = topology_from_config(manifest["topology"], manifest["skip_policy"])
    return dnn.with_weights(load_weights(directory / "weights.dfgw")), manifest
