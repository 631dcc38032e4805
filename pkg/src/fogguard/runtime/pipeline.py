"""End-to-end distributed runs: launch node daemons, stream inputs, inject chaos.

The coordinator plays every IoT node (it sends their input vectors into the
graph) and is the sink of the cloud node's output. Daemons run as separate
local processes; a chaos kill is a hard process kill, a revive relaunches
the process on the same port.
"""
from __future__ import annotations

import asyncio
import logging
import os
import socket
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from ..inference import NULL, RANDOM_GUESS, forward_all, is_null
from ..topology import DistributedDnn
from .codec import (
    COORDINATOR_ID,
    LINK_OPEN,
    NODE_READY,
    SINK_ID,
    MsgType,
    ProtocolError,
    WireMessage,
    read_message,
    write_message,
)
from .daemon import RECONNECT_DELAY, wire_ids

log = logging.getLogger(__name__)

_LINK_ERRORS = (asyncio.IncompleteReadError, ConnectionError, OSError, ProtocolError)


class ChaosError(ValueError):
    pass


@dataclass(frozen=True)
class ChaosAction:
    at: int  # applied just before this inference_id is sent
    node: str
    action: str  # kill | revive


@dataclass
class ChaosPlan:
    actions: list[ChaosAction] = field(default_factory=list)

    @classmethod
    def parse(cls, items: Sequence) -> "ChaosPlan":
        """From ``[{"at": 50, "node": "f2", "action": "kill"}, ...]`` or ``"kill:f2@50"`` strings."""
        out = []
        for item in items:
            if isinstance(item, str):
                head, _, at = item.partition("@")
                action, _, node = head.partition(":")
                out.append(ChaosAction(int(at), node, action))
            else:
                out.append(ChaosAction(int(item["at"]), item["node"], item["action"]))
        return cls(out)

    def validate(self, dnn: DistributedDnn) -> None:
        for a in self.actions:
            if a.action not in ("kill", "revive"):
                raise ChaosError(f"unknown chaos action {a.action!r}")
            if a.node not in dnn.node_ids:
                raise ChaosError(f"chaos targets unknown node {a.node!r}")
            if not dnn.node(a.node).fallible:
                raise ChaosError(f"node {a.node!r} ({dnn.node(a.node).tier}) never fails; chaos may only target fallible nodes")

    def at(self, k: int) -> list[ChaosAction]:
        return [a for a in self.actions if a.at == k]

    def failed_at(self, k: int) -> set[str]:
        """Nodes down while instance ``k`` is processed."""
        dead: set[str] = set()
        for a in sorted(self.actions, key=lambda a: a.at):
            if a.at > k:
                break
            if a.action == "kill":
                dead.add(a.node)
            else:
                dead.discard(a.node)
        return dead


def combination_for(dnn: DistributedDnn, dead: set[str]) -> tuple[int, ...]:
    return tuple(0 if n in dead else 1 for n in dnn.fallible_order)


def free_port(host: str = "127.0.0.1") -> int:
    with socket.socket() as s:
        s.bind((host, 0))
        return s.getsockname()[1]


# -- coordinator ------------------------------------------------------------


class Coordinator:
    def __init__(self, dnn: DistributedDnn, host: str = "127.0.0.1", instance_timeout: float = 0.6):
        self.dnn = dnn
        self.host = host
        self.instance_timeout = instance_timeout
        self.ids = wire_ids(dnn)
        self.by_wire = {v: k for k, v in self.ids.items()}
        self.iot_edges = [h for h in dnn.hyperconnections if dnn.node(h.src).is_iot]
        self.ready_count: dict[str, int] = {n.id: 0 for n in dnn.compute_nodes}
        self.iot_writers: dict[tuple[str, str], asyncio.StreamWriter] = {}
        self.control: dict[str, asyncio.StreamWriter] = {}
        self.pending: dict[int, asyncio.Future] = {}
        self.peers: dict[str, tuple[str, int]] = {}
        self._tasks: list[asyncio.Task] = []
        self._changed: Optional[asyncio.Event] = None

    async def start(self) -> tuple[str, int]:
        self._changed = asyncio.Event()
        self._closing = False
        self.server = await asyncio.start_server(self._accept, self.host, 0)
        self.port = self.server.sockets[0].getsockname()[1]
        return self.host, self.port

    def connect_iot(self, peers: Mapping[str, tuple[str, int]]) -> None:
        self.peers = dict(peers)
        self._tasks = [asyncio.create_task(self._iot_link(h.src, h.dst)) for h in self.iot_edges]

    def _notify(self) -> None:
        self._changed.set()
        self._changed = asyncio.Event()

    async def wait_for(self, predicate, timeout: float) -> bool:
        deadline = time.monotonic() + timeout
        while not predicate():
            left = deadline - time.monotonic()
            if left <= 0:
                return False
            try:
                await asyncio.wait_for(self._changed.wait(), min(left, 0.1))
            except asyncio.TimeoutError:
                pass
        return True

    async def _iot_link(self, src: str, dst: str) -> None:
        key = (src, dst)
        while not self._closing:
            try:
                reader, writer = await asyncio.open_connection(*self.peers[dst])
            except OSError:
                await asyncio.sleep(RECONNECT_DELAY)
                continue
            try:
                write_message(writer, WireMessage(MsgType.HELLO, self.ids[src], LINK_OPEN))
                await writer.drain()
                self.iot_writers[key] = writer
                self._notify()
                while True:
                    msg = await read_message(reader)
                    if msg.msg_type == MsgType.KEEPALIVE:
                        write_message(writer, WireMessage(MsgType.KEEPALIVE_ACK, self.ids[src], msg.inference_id))
            except _LINK_ERRORS:
                pass
            finally:
                if self.iot_writers.get(key) is writer:
                    del self.iot_writers[key]
                writer.close()
                self._notify()
            await asyncio.sleep(RECONNECT_DELAY)

    async def _accept(self, reader, writer) -> None:
        try:
            while True:
                msg = await read_message(reader)
                src = self.by_wire.get(msg.source_node)
                if msg.msg_type == MsgType.HELLO and msg.inference_id == NODE_READY and src:
                    self.control[src] = writer
                    self.ready_count[src] += 1
                    self._notify()
                elif msg.msg_type == MsgType.DATA and src == self.dnn.output_node.id:
                    fut = self.pending.get(msg.inference_id)
                    if fut is not None and not fut.done():
                        fut.set_result(NULL if msg.null else msg.payload)
                elif msg.msg_type == MsgType.KEEPALIVE:
                    write_message(writer, WireMessage(MsgType.KEEPALIVE_ACK, SINK_ID, msg.inference_id))
        except _LINK_ERRORS:
            pass
        finally:
            writer.close()

    def links_up(self, alive=None) -> bool:
        """Every IoT link into a live node is open (all nodes when ``alive`` is None)."""
        return all(
            (h.src, h.dst) in self.iot_writers for h in self.iot_edges if alive is None or h.dst in alive
        )

    async def infer(self, k: int, inputs: Mapping[str, np.ndarray]):
        """Send instance ``k`` from every IoT node; the cloud output or NULL on timeout."""
        fut = asyncio.get_running_loop().create_future()
        self.pending[k] = fut
        for (src, dst), w in list(self.iot_writers.items()):
            try:
                write_message(w, WireMessage.data(self.ids[src], k, inputs[src]))
            except (ConnectionError, RuntimeError):
                pass
        try:
            return await asyncio.wait_for(fut, self.instance_timeout)
        except asyncio.TimeoutError:
            return NULL
        finally:
            self.pending.pop(k, None)

    async def close(self) -> None:
        self._closing = True
        for w in list(self.control.values()):
            try:
                write_message(w, WireMessage(MsgType.SHUTDOWN, COORDINATOR_ID))
                await w.drain()
            except (ConnectionError, RuntimeError):
                pass
        for t in self._tasks:
            t.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)
        self.server.close()


# -- local processes --------------------------------------------------------


class LocalCluster:
    """One ``fogguard serve-node`` process per compute node, all on localhost."""

    def __init__(
        self,
        bundle_dir,
        dnn: DistributedDnn,
        coordinator: tuple[str, int],
        round_timeout: float = 0.2,
        heartbeat_interval: float = 0.05,
        suspicion_timeout: float = 0.3,
        log_dir: Optional[Path] = None,
        host: str = "127.0.0.1",
    ):
        self.bundle_dir = str(bundle_dir)
        self.dnn = dnn
        self.coordinator = coordinator
        self.host = host
        self.timeouts = (round_timeout, heartbeat_interval, suspicion_timeout)
        self.addresses = {n.id: (host, free_port(host)) for n in dnn.compute_nodes}
        self.procs: dict[str, subprocess.Popen] = {}
        self.log_dir = log_dir

    def command(self, node_id: str) -> list[str]:
        host, port = self.addresses[node_id]
        cmd = [
            sys.executable, "-m", "fogguard", "serve-node",
            "--model", self.bundle_dir,
            "--node-id", node_id,
            "--listen", f"{host}:{port}",
            "--coordinator", f"{self.coordinator[0]}:{self.coordinator[1]}",
            "--round-timeout", str(self.timeouts[0]),
            "--heartbeat-interval", str(self.timeouts[1]),
            "--suspicion-timeout", str(self.timeouts[2]),
        ]
        for h in self.dnn.out_edges(node_id):
            cmd += ["--peer", f"{h.dst}={self.addresses[h.dst][0]}:{self.addresses[h.dst][1]}"]
        return cmd

    def spawn(self, node_id: str) -> None:
        err = subprocess.DEVNULL
        if self.log_dir is not None:
            err = open(Path(self.log_dir) / f"{node_id}.log", "ab")
        env = dict(os.environ, PYTHONUNBUFFERED="1")
        self.procs[node_id] = subprocess.Popen(self.command(node_id), stdout=subprocess.DEVNULL, stderr=err, env=env)

    def start(self) -> None:
        for n in self.dnn.compute_nodes:
            self.spawn(n.id)

    def kill(self, node_id: str) -> None:
        proc = self.procs.pop(node_id, None)
        if proc is not None:
            proc.kill()
            proc.wait()

    def crashed(self) -> list[str]:
        return [k for k, p in self.procs.items() if p.poll() is not None]

    def stop(self, grace: float = 3.0) -> dict[str, int]:
        codes = {}
        deadline = time.monotonic() + grace
        for k, p in self.procs.items():
            try:
                codes[k] = p.wait(max(0.0, deadline - time.monotonic()))
            except subprocess.TimeoutExpired:
                p.kill()
                codes[k] = p.wait()
        self.procs.clear()
        return codes


# -- driver -----------------------------------------------------------------


@dataclass
class RuntimeOutcome:
    inference_id: int
    logits: object  # np.ndarray or NULL
    dead: frozenset

    @property
    def random_guess(self) -> bool:
        return is_null(self.logits)

    @property
    def predicted(self) -> int:
        return RANDOM_GUESS if self.random_guess else int(np.argmax(self.logits))


def _instance_inputs(dnn: DistributedDnn, inputs, k: int) -> dict[str, np.ndarray]:
    if isinstance(inputs, Mapping):
        return {nid: np.asarray(v[k], dtype=np.float32) for nid, v in inputs.items()}
    return {dnn.iot_nodes[0].id: np.asarray(inputs[k], dtype=np.float32)}


async def _run(
    bundle_dir, dnn, inputs, n, chaos, round_timeout, heartbeat_interval, suspicion_timeout,
    instance_timeout, startup_timeout, log_dir,
) -> list[RuntimeOutcome]:
    coord = Coordinator(dnn, instance_timeout=instance_timeout)
    address = await coord.start()
    cluster = LocalCluster(bundle_dir, dnn, address, round_timeout, heartbeat_interval, suspicion_timeout, log_dir)
    outcomes: list[RuntimeOutcome] = []
    try:
        cluster.start()
        coord.connect_iot(cluster.addresses)
        ok = await coord.wait_for(
            lambda: coord.links_up() and all(c > 0 for c in coord.ready_count.values()), startup_timeout
        )
        if not ok:
            raise RuntimeError(f"daemons not ready after {startup_timeout}s (crashed: {cluster.crashed()})")
        dead: set[str] = set()
        for k in range(n):
            for act in chaos.at(k):
                if act.action == "kill":
                    cluster.kill(act.node)
                    dead.add(act.node)
                else:
                    await _revive(coord, cluster, act.node, startup_timeout)
                    dead.discard(act.node)
            logits = await coord.infer(k, _instance_inputs(dnn, inputs, k))
            outcomes.append(RuntimeOutcome(k, logits, frozenset(dead)))
    finally:
        await coord.close()
        await asyncio.get_running_loop().run_in_executor(None, cluster.stop)
    return outcomes


async def _revive(coord: Coordinator, cluster: LocalCluster, node_id: str, timeout: float) -> None:
    dnn = cluster.dnn
    children = [h.src for h in dnn.in_edges(node_id) if not dnn.node(h.src).is_iot and h.src in cluster.procs]
    before = {c: coord.ready_count[c] for c in [node_id, *children]}
    cluster.spawn(node_id)
    ok = await coord.wait_for(
        lambda: coord.links_up(cluster.procs) and all(coord.ready_count[c] > v for c, v in before.items()), timeout
    )
    if not ok:
        raise RuntimeError(f"revived node {node_id} did not rejoin within {timeout}s")


def run_pipeline(
    bundle_dir,
    dnn: DistributedDnn,
    inputs,
    n: Optional[int] = None,
    chaos: Optional[ChaosPlan] = None,
    round_timeout: float = 0.2,
    heartbeat_interval: float = 0.05,
    suspicion_timeout: float = 0.3,
    instance_timeout: float = 0.6,
    startup_timeout: float = 30.0,
    log_dir=None,
) -> list[RuntimeOutcome]:
    """Stream ``n`` instances through locally launched daemons, in inference_id order."""
    chaos = chaos or ChaosPlan()
    chaos.validate(dnn)
    if n is None:
        n = len(next(iter(inputs.values()))) if isinstance(inputs, Mapping) else len(inputs)
    return asyncio.run(
        _run(bundle_dir, dnn, inputs, n, chaos, round_timeout, heartbeat_interval, suspicion_timeout,
             instance_timeout, startup_timeout, log_dir)
    )


@dataclass
class Verdict:
    passed: bool
    max_deviation: float
    mismatches: list[int]
    compared: int
    rows: list[dict]


def compare_with_simulator(
    dnn: DistributedDnn, inputs, outcomes: Sequence[RuntimeOutcome], tol: float = 1e-5, settle: int = 0,
    chaos: Optional[ChaosPlan] = None,
) -> Verdict:
    """Check each runtime outcome against the simulator under the same failure combination.

    ``settle`` instances right after each chaos action are reported but not judged.
    """
    changes = sorted({a.at for a in (chaos.actions if chaos else [])})
    rows, mismatches, worst, compared = [], [], 0.0, 0
    for o in outcomes:
        bits = combination_for(dnn, set(o.dead))
        expected = forward_all(dnn, _instance_inputs(dnn, inputs, o.inference_id), bits)[dnn.output_node.id]
        if is_null(expected) or o.random_guess:
            ok = is_null(expected) and o.random_guess
            dev = 0.0 if ok else float("inf")
        else:
            dev = float(np.max(np.abs(np.asarray(o.logits) - expected)))
            ok = dev <= tol
        judged = not any(c <= o.inference_id < c + settle for c in changes)
        if judged:
            compared += 1
            worst = max(worst, dev)
            if not ok:
                mismatches.append(o.inference_id)
        rows.append({
            "inference_id": o.inference_id,
            "failed": " ".join(sorted(o.dead)),
            "random_guess": int(o.random_guess),
            "expected_random_guess": int(is_null(expected)),
            "predicted": o.predicted,
            "deviation": dev,
            "judged": int(judged),
            "match": int(ok),
        })
    return Verdict(not mismatches, worst, mismatches, compared, rows)
