"""Reliability-weighted average accuracy over node failure combinations.

A reliability setting gives each fallible node a survival probability. A
failure combination is a 0/1 tuple over the same nodes (1 = survives).
Failures are independent, so a combination's probability is a product.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from . import inference

MAX_EXACT_NODES = 20
TIERS = ("no_failure", "normal", "poor", "hazardous")

# survival probabilities, Health order (f1, f2, e1); Camera order (f1..f4, e1..e4)
RELIABILITY_SETTINGS = {
    "health": {
        "normal": (0.99, 0.98, 0.96),
        "poor": (0.98, 0.96, 0.92),
        "hazardous": (0.90, 0.85, 0.80),
    },
    "camera": {
        "normal": (0.995, 0.99, 0.98, 0.97, 0.95, 0.95, 0.95, 0.95),
        "poor": (0.99, 0.98, 0.94, 0.93, 0.90, 0.90, 0.87, 0.87),
        "hazardous": (0.90, 0.90, 0.80, 0.80, 0.70, 0.60, 0.70, 0.66),
    },
}


def table1_settings(experiment: str, tier: str) -> tuple[float, ...]:
    if experiment not in RELIABILITY_SETTINGS:
        raise KeyError(f"unknown experiment {experiment!r}")
    if tier == "no_failure":
        return (1.0,) * len(RELIABILITY_SETTINGS[experiment]["normal"])
    if tier not in RELIABILITY_SETTINGS[experiment]:
        raise KeyError(f"unknown reliability tier {tier!r}")
    return RELIABILITY_SETTINGS[experiment][tier]


def check_setting(reliability: Sequence[float]) -> tuple[float, ...]:
    r = tuple(float(x) for x in reliability)
    if any(not 0.0 <= x <= 1.0 for x in r):
        raise ValueError(f"survival probabilities must lie in [0, 1]: {r}")
    return r


def combination_probability(combination: Sequence[int], reliability: Sequence[float]) -> float:
    if len(combination) != len(reliability):
        raise ValueError(f"combination has {len(combination)} entries, setting has {len(reliability)}")
    p = 1.0
    for b, r in zip(combination, reliability):
        p *= r if b else 1.0 - r  # b*r + (1-b)*(1-r) for b in {0, 1}
    return p


def all_combinations(n: int) -> Iterator[tuple[int, ...]]:
    """Every 0/1 tuple of length ``n``, the all-surviving one first."""
    return itertools.product((1, 0), repeat=n)


def bits_str(combination: Sequence[int]) -> str:
    return "".join(str(int(b)) for b in combination)


@dataclass
class ResiliencyReport:
    reliability: tuple[float, ...]
    nodes: tuple[str, ...]
    rows: list[tuple[tuple[int, ...], float, float]]  # (combination, probability, accuracy)
    average_accuracy: float
    method: str = "exact"
    samples: Optional[int] = None
    seed: Optional[int] = None
    std_error: Optional[float] = None
    guess_mode: str = "expectation"
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d["rows"] = [{"bits": bits_str(b), "probability": p, "accuracy": a} for b, p, a in self.rows]
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ResiliencyReport":
        d = json.loads(text)
        d["rows"] = [(tuple(int(c) for c in r["bits"]), r["probability"], r["accuracy"]) for r in d["rows"]]
        d["reliability"] = tuple(d["reliability"])
        d["nodes"] = tuple(d["nodes"])
        return cls(**d)

    def to_csv(self) -> str:
        """Metadata as ``# key=value`` lines, then one row per combination."""
        buf = io.StringIO()
        meta = {
            "method": self.method,
            "average_accuracy": repr(self.average_accuracy),
            "nodes": " ".join(self.nodes),
            "reliability": " ".join(repr(r) for r in self.reliability),
            "samples": "" if self.samples is None else str(self.samples),
            "seed": "" if self.seed is None else str(self.seed),
            "std_error": "" if self.std_error is None else repr(self.std_error),
            "guess_mode": self.guess_mode,
        }
        meta.update({f"meta.{k}": json.dumps(v) for k, v in sorted(self.meta.items())})
        for k, v in meta.items():
            buf.write(f"# {k}={v}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bits", *self.nodes, "probability", "accuracy"])
        for bits, p, a in self.rows:
            w.writerow([bits_str(bits), *bits, repr(p), repr(a)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ResiliencyReport":
        meta, lines = {}, []
        for line in text.splitlines():
            if line.startswith("# "):
                k, _, v = line[2:].partition("=")
                meta[k] = v
            elif line:
                lines.append(line)
        reader = csv.reader(lines)
        next(reader)
        rows = [(tuple(int(c) for c in r[0]), float(r[-2]), float(r[-1])) for r in reader]
        opt = lambda key, conv: conv(meta[key]) if meta.get(key) else None
        return cls(
            reliability=tuple(float(x) for x in meta["reliability"].split()),
            nodes=tuple(meta["nodes"].split()),
            rows=rows,
            average_accuracy=float(meta["average_accuracy"]),
            method=meta["method"],
            samples=opt("samples", int),
            seed=opt("seed", int),
            std_error=opt("std_error", float),
            guess_mode=meta["guess_mode"],
            meta={k[5:]: json.loads(v) for k, v in meta.items() if k.startswith("meta.")},
        )

    def write(self, stem) -> None:
        stem = Path(stem)
        stem.with_suffix(".csv").write_text(self.to_csv())
        stem.with_suffix(".json").write_text(self.to_json())


class CachedEvaluator:
    """Memoises per-combination accuracy so each combination is evaluated once."""

    def __init__(self, fn: Callable[[tuple[int, ...]], float]):
        self.fn = fn
        self.cache: dict[tuple[int, ...], float] = {}

    def __call__(self, combination) -> float:
        key = tuple(int(b) for b in combination)
        if key not in self.cache:
            self.cache[key] = float(self.fn(key))
        return self.cache[key]


def model_evaluator(dnn, inputs, labels, guess_mode: str = "expectation", seed: int = 0) -> CachedEvaluator:
    return CachedEvaluator(lambda bits: inference.accuracy(dnn, inputs, labels, bits, guess_mode, seed))


def exact_average(reliability: Sequence[float], evaluate: Callable, nodes: Sequence[str] = ()) -> ResiliencyReport:
    """Sum of probability x accuracy over all ``2**n`` combinations."""
    r = check_setting(reliability)
    if len(r) > MAX_EXACT_NODES:
        raise ValueError(
            f"{len(r)} fallible nodes exceed the exact-enumeration limit of {MAX_EXACT_NODES}; "
            "use the Monte Carlo estimator"
        )
    rows = []
    total = 0.0
    for bits in all_combinations(len(r)):
        p = combination_probability(bits, r)
        a = evaluate(bits)
        rows.append((bits, p, a))
        total += p * a
    return ResiliencyReport(r, tuple(nodes), rows, total)


def monte_carlo_average(
    reliability: Sequence[float], evaluate: Callable, samples: int, seed: int, nodes: Sequence[str] = ()
) -> ResiliencyReport:
    """Mean accuracy over combinations drawn from independent Bernoulli survivals."""
    r = check_setting(reliability)
    if samples < 1:
        raise ValueError("samples must be at least 1")
    draws = (np.random.default_rng(seed).random((samples, len(r))) < np.array(r)).astype(int)
    accs = np.array([evaluate(tuple(b)) for b in draws])
    mean = float(accs.mean())
    se = float(accs.std(ddof=1) / np.sqrt(samples)) if samples > 1 else 0.0
    counts: dict[tuple[int, ...], int] = {}
    for b in map(tuple, draws):
        counts[b] = counts.get(b, 0) + 1
    rows = [(b, c / samples, evaluate(b)) for b, c in sorted(counts.items(), reverse=True)]
    return ResiliencyReport(r, tuple(nodes), rows, mean, "monte_carlo", samples, seed, se)


def average_accuracy(
    dnn, inputs, labels, reliability: Sequence[float], guess_mode: str = "expectation", seed: int = 0,
    evaluator: Optional[CachedEvaluator] = None,
) -> ResiliencyReport:
    if len(reliability) != len(dnn.fallible_order):
        raise ValueError("reliability setting does not match the graph's fallible nodes")
    evaluate = evaluator or model_evaluator(dnn, inputs, labels, guess_mode, seed)
    rep = exact_average(reliability, evaluate, dnn.fallible_order)
    rep.guess_mode = guess_mode
    return rep


def monte_carlo_average_accuracy(
    dnn, inputs, labels, reliability: Sequence[float], samples: int, seed: int,
    guess_mode: str = "expectation", evaluator: Optional[CachedEvaluator] = None,
) -> ResiliencyReport:
    if len(reliability) != len(dnn.fallible_order):
        raise ValueError("reliability setting does not match the graph's fallible nodes")
    evaluate = evaluator or model_evaluator(dnn, inputs, labels, guess_mode, seed)
    rep = monte_carlo_average(reliability, evaluate, samples, seed, dnn.fallible_order)
    rep.guess_mode = guess_mode
    return rep
