"""Experiment configuration files (YAML, format version 1).

A config names a topology, a dataset, training hyperparameters, reliability
tiers, seeds and an output directory. See ``configs/*.yaml`` for the two
shipped experiments and the README for every key.
"""
from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np
import yaml

from . import data as data_mod
from .nn import LossSpec, OptimizerSpec
from .resiliency import RELIABILITY_SETTINGS, TIERS
from .topology import SKIP_POLICIES, DistributedDnn, TopologyError, topology_from_config
from .training import TrainConfig

CONFIG_VERSION = 1
VARIANTS = {"vanilla": "none", "deepfogguard": "skip_one"}
DATASET_KINDS = ("mhealth", "synth_activity", "synth_multiview", "file")

DEFAULTS: dict[str, Any] = {
    "version": CONFIG_VERSION,
    "name": "experiment",
    "dataset": {"split_seed": 0},
    "training": {"epochs": 50, "batch_size": 1024, "learning_rate": 0.001, "loss": "cross_entropy"},
    "reliability": {"tiers": list(TIERS)},
    "evaluation": {"guess_mode": "expectation", "mode": "exact", "samples": 10000, "mc_seed": 0},
    "seeds": [0, 1, 2],
    "output_dir": "runs/experiment",
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def builtin_config(name: str) -> Path:
    return Path(str(resources.files("fogguard") / "configs" / f"{name}.yaml"))


def load_config(path_or_name) -> dict:
    """Read a config file; ``health`` or ``camera`` name the shipped ones."""
    path = Path(path_or_name)
    if not path.exists() and path.suffix == "" and builtin_config(str(path_or_name)).exists():
        path = builtin_config(str(path_or_name))
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping")
    return _merge(DEFAULTS, raw)


HASH_EXCLUDED = ("seeds", "output_dir")


def config_hash(cfg: Mapping) -> str:
    """Identifies the experiment: where it is written and which seeds run do not count."""
    body = {k: v for k, v in cfg.items() if k not in HASH_EXCLUDED}
    blob = json.dumps(body, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def reliability_settings(cfg: Mapping) -> dict[str, tuple[float, ...]]:
    rel = cfg["reliability"]
    custom = rel.get("settings", {})
    out = {}
    for tier in rel["tiers"]:
        if tier in custom:
            out[tier] = tuple(float(x) for x in custom[tier])
        elif tier == "no_failure" and "experiment" not in rel:
            raise ConfigError("no_failure needs reliability.experiment or a custom setting")
        else:
            from .resiliency import table1_settings

            out[tier] = table1_settings(rel["experiment"], tier)
    return out


def validate_config(cfg: Mapping) -> list[str]:
    """All problems found, so they can be reported before any work starts."""
    errors = []
    if cfg.get("version") != CONFIG_VERSION:
        errors.append(f"unsupported config version {cfg.get('version')!r} (expected {CONFIG_VERSION})")
    topo = cfg.get("topology")
    graph: Optional[DistributedDnn] = None
    if not isinstance(topo, Mapping):
        errors.append("missing topology section")
    else:
        if topo.get("skip_policy", "skip_one") not in SKIP_POLICIES:
            errors.append(f"topology.skip_policy must be one of {SKIP_POLICIES}")
        try:
            graph = topology_from_config(topo, "none")
        except (TopologyError, KeyError, TypeError, ValueError) as exc:
            errors.append(f"topology: {exc}")
    ds = cfg.get("dataset", {})
    kind = ds.get("kind")
    if kind not in DATASET_KINDS:
        errors.append(f"dataset.kind must be one of {DATASET_KINDS}")
    elif kind in ("mhealth", "file") and not ds.get("path"):
        errors.append(f"dataset.path is required for kind {kind}")
    tr = cfg.get("training", {})
    try:
        training_config(cfg, 0, class_weights=None if tr.get("loss") != "weighted_cross_entropy" else np.ones(1))
    except (ValueError, TypeError, KeyError) as exc:
        errors.append(f"training: {exc}")
    rel = cfg.get("reliability", {})
    if "experiment" in rel and rel["experiment"] not in RELIABILITY_SETTINGS:
        errors.append(f"reliability.experiment must be one of {sorted(RELIABILITY_SETTINGS)}")
    for tier in rel.get("tiers", []):
        if tier not in TIERS and tier not in rel.get("settings", {}):
            errors.append(f"unknown reliability tier {tier!r}")
    if not errors and graph is not None:
        try:
            for tier, r in reliability_settings(cfg).items():
                if len(r) != len(graph.fallible_order):
                    errors.append(f"tier {tier}: {len(r)} probabilities for {len(graph.fallible_order)} fallible nodes")
                if any(not 0 <= x <= 1 for x in r):
                    errors.append(f"tier {tier}: probabilities must lie in [0, 1]")
        except (KeyError, ConfigError) as exc:
            errors.append(f"reliability: {exc}")
    ev = cfg.get("evaluation", {})
    if ev.get("guess_mode") not in ("expectation", "sampled"):
        errors.append("evaluation.guess_mode must be expectation or sampled")
    if ev.get("mode") not in ("exact", "mc"):
        errors.append("evaluation.mode must be exact or mc")
    seeds = cfg.get("seeds")
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        errors.append("seeds must be a non-empty list of integers")
    return errors


def build_graph(cfg: Mapping, variant: str) -> DistributedDnn:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    return topology_from_config(cfg["topology"], VARIANTS[variant])


def load_data(cfg: Mapping) -> data_mod.Dataset:
    ds = cfg["dataset"]
    kind = ds["kind"]
    split_seed = int(ds.get("split_seed", 0))
    if kind == "mhealth":
        return data_mod.load_mhealth(
            ds["path"], seed=split_seed, split_by=ds.get("split_by", "row"), max_rows=ds.get("max_rows")
        )
    if kind == "synth_activity":
        return data_mod.synth_activity(
            n=int(ds.get("n", 40000)), seed=int(ds.get("seed", 0)), split_seed=split_seed,
            noise=float(ds.get("noise", 0.2)),
        )
    if kind == "synth_multiview":
        fields = {k: ds[k] for k in ("n", "views", "view_dim", "classes", "occlusion_rate", "signal", "seed") if k in ds}
        if "class_skew" in ds:
            fields["class_skew"] = tuple(ds["class_skew"])
        return data_mod.synth_multiview(data_mod.SynthMultiViewSpec(split_seed=split_seed, **fields))
    if kind == "file":
        return data_mod.load_dataset(ds["path"], split_seed=split_seed)
    raise ConfigError(f"unknown dataset kind {kind!r}")


def training_config(cfg: Mapping, seed: int, class_weights=None) -> TrainConfig:
    tr = cfg["training"]
    opt = OptimizerSpec(
        learning_rate=float(tr["learning_rate"]),
        batch_size=int(tr["batch_size"]),
        **{k: float(tr[k]) for k in ("beta1", "beta2", "epsilon") if k in tr},
    )
    if tr.get("loss", "cross_entropy") == "weighted_cross_entropy":
        loss = LossSpec("weighted_cross_entropy", class_weights)
    else:
        loss = LossSpec()
    return TrainConfig(opt, int(tr["epochs"]), int(seed), loss)
