"""One physical node of a distributed DNN, served over TCP.

The daemon accepts one connection per incoming hyperconnection, opens one
per outgoing hyperconnection (the cloud node also feeds the coordinator's
sink) and keeps a control connection to the coordinator. Inference runs in
rounds keyed by ``inference_id``: a round completes when every source that
was alive at its start has delivered, or when the round timeout expires;
whatever is missing counts as a null input.
"""
from __future__ import annotations

import asyncio
import logging
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from ..inference import NULL, add_inputs, is_null, node_forward
from ..topology import DistributedDnn
from .codec import (
    LINK_OPEN,
    NODE_READY,
    MsgType,
    ProtocolError,
    WireMessage,
    read_message,
    write_message,
)
from .heartbeat import HeartbeatMonitor

log = logging.getLogger(__name__)

SINK = "__sink__"
RECONNECT_DELAY = 0.05
_LINK_ERRORS = (asyncio.IncompleteReadError, ConnectionError, OSError, ProtocolError)


def wire_ids(dnn: DistributedDnn) -> dict[str, int]:
    return {nid: i for i, nid in enumerate(dnn.node_ids)}


@dataclass
class _Round:
    started: float
    awaited: frozenset
    got: dict = field(default_factory=dict)


class NodeDaemon:
    def __init__(
        self,
        dnn: DistributedDnn,
        node_id: str,
        listen: tuple[str, int],
        peers: Mapping[str, tuple[str, int]],
        coordinator: tuple[str, int],
        round_timeout: float = 0.2,
        heartbeat_interval: float = 0.05,
        suspicion_timeout: float = 0.3,
    ):
        if dnn.node(node_id).is_iot:
            raise ValueError("IoT nodes are driven by the coordinator, not served")
        self.dnn = dnn
        self.node_id = node_id
        self.listen = listen
        self.coordinator = coordinator
        self.round_timeout = round_timeout
        self.ids = wire_ids(dnn)
        self.by_wire = {v: k for k, v in self.ids.items()}
        self.my_wire = self.ids[node_id]
        self.sources = [h.src for h in dnn.in_edges(node_id)]
        self.targets = [h.dst for h in dnn.out_edges(node_id)]
        if node_id == dnn.output_node.id:
            self.targets.append(SINK)
        missing = [t for t in self.targets if t != SINK and t not in peers]
        if missing:
            raise ValueError(f"no address for downstream nodes {missing}")
        self.peers = dict(peers)
        self.monitor = HeartbeatMonitor(self.sources, heartbeat_interval, suspicion_timeout)
        self.heartbeat_interval = heartbeat_interval
        self.out_writers: dict[str, asyncio.StreamWriter] = {}
        self.in_writers: dict[str, asyncio.StreamWriter] = {}
        self.rounds: dict[int, _Round] = {}
        self._done = deque(maxlen=4096)
        self._done_set: set[int] = set()
        self._links_complete = False
        self._control: Optional[asyncio.StreamWriter] = None

    # -- lifecycle ----------------------------------------------------------

    async def run(self) -> None:
        self.events: asyncio.Queue = asyncio.Queue()
        self.stop = asyncio.Event()
        server = await asyncio.start_server(self._accept, *self.listen)
        tasks = [asyncio.create_task(self._outbound(t)) for t in self.targets]
        tasks += [
            asyncio.create_task(self._control_link()),
            asyncio.create_task(self._round_loop()),
            asyncio.create_task(self._heartbeat_loop()),
        ]
        try:
            await self.stop.wait()
        finally:
            for t in tasks:
                t.cancel()
            await asyncio.gather(*tasks, return_exceptions=True)
            server.close()
            for w in [*self.out_writers.values(), *self.in_writers.values()]:
                w.close()
            if self._control:
                self._control.close()

    # -- links --------------------------------------------------------------

    def _address(self, target: str) -> tuple[str, int]:
        return self.coordinator if target == SINK else self.peers[target]

    async def _connect(self, address):
        while not self.stop.is_set():
            try:
                return await asyncio.open_connection(*address)
            except OSError:
                await asyncio.sleep(RECONNECT_DELAY)
        raise asyncio.CancelledError

    async def _outbound(self, target: str) -> None:
        while not self.stop.is_set():
            reader, writer = await self._connect(self._address(target))
            try:
                write_message(writer, WireMessage(MsgType.HELLO, self.my_wire, LINK_OPEN))
                await writer.drain()
                self.out_writers[target] = writer
                self._links_changed()
                while True:
                    msg = await read_message(reader)
                    if msg.msg_type == MsgType.KEEPALIVE:
                        write_message(writer, WireMessage(MsgType.KEEPALIVE_ACK, self.my_wire, msg.inference_id))
                    elif msg.msg_type == MsgType.SHUTDOWN:
                        self.stop.set()
            except _LINK_ERRORS as exc:
                log.info("%s: link to %s lost (%s)", self.node_id, target, exc)
            finally:
                if self.out_writers.get(target) is writer:
                    del self.out_writers[target]
                writer.close()
                self._links_changed()
            await asyncio.sleep(RECONNECT_DELAY)

    def _links_changed(self) -> None:
        complete = all(t in self.out_writers for t in self.targets)
        if complete and not self._links_complete:
            self._send_ready()
        self._links_complete = complete

    def _send_ready(self) -> None:
        if self._control is not None:
            write_message(self._control, WireMessage(MsgType.HELLO, self.my_wire, NODE_READY))

    async def _control_link(self) -> None:
        reader, writer = await self._connect(self.coordinator)
        self._control = writer
        if all(t in self.out_writers for t in self.targets):
            write_message(writer, WireMessage(MsgType.HELLO, self.my_wire, NODE_READY))
        try:
            while True:
                msg = await read_message(reader)
                if msg.msg_type == MsgType.SHUTDOWN:
                    break
                if msg.msg_type == MsgType.KEEPALIVE:
                    write_message(writer, WireMessage(MsgType.KEEPALIVE_ACK, self.my_wire, msg.inference_id))
        except _LINK_ERRORS:
            log.info("%s: coordinator went away", self.node_id)
        self.stop.set()

    async def _accept(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        src = None
        try:
            hello = await asyncio.wait_for(read_message(reader), timeout=5.0)
            src = self.by_wire.get(hello.source_node)
            if hello.msg_type != MsgType.HELLO or src not in self.sources:
                log.warning("%s: rejecting connection from wire id %d", self.node_id, hello.source_node)
                writer.close()
                return
            old = self.in_writers.get(src)
            if old is not None:
                old.close()
            self.in_writers[src] = writer
            if self.monitor.record(src):
                log.info("%s: source %s is back", self.node_id, src)
            while True:
                msg = await read_message(reader)
                if msg.msg_type == MsgType.DATA:
                    self.events.put_nowait(("data", src, msg))
                elif msg.msg_type == MsgType.KEEPALIVE_ACK:
                    self.monitor.record(src)
                elif msg.msg_type == MsgType.SHUTDOWN:
                    self.stop.set()
        except (asyncio.TimeoutError, *_LINK_ERRORS) as exc:
            log.info("%s: inbound link from %s closed (%r)", self.node_id, src, exc)
        finally:
            if src is not None and self.in_writers.get(src) is writer:
                del self.in_writers[src]
                self.monitor.mark_failed(src)
                self.events.put_nowait(("down", src, None))
            writer.close()

    async def _heartbeat_loop(self) -> None:
        seq = 0
        while True:
            seq += 1
            for w in list(self.in_writers.values()):
                try:
                    write_message(w, WireMessage(MsgType.KEEPALIVE, self.my_wire, seq))
                except (ConnectionError, RuntimeError):
                    pass
            for peer in self.monitor.poll():
                log.info("%s: source %s timed out", self.node_id, peer)
                self.events.put_nowait(("down", peer, None))
            await asyncio.sleep(self.heartbeat_interval)

    # -- rounds -------------------------------------------------------------

    async def _round_loop(self) -> None:
        while True:
            timeout = None
            if self.rounds:
                first = min(r.started for r in self.rounds.values())
                timeout = max(0.0, first + self.round_timeout - time.monotonic())
            try:
                kind, src, msg = await asyncio.wait_for(self.events.get(), timeout)
            except asyncio.TimeoutError:
                kind = None
            if kind == "data":
                k = msg.inference_id
                if k in self._done_set:
                    continue  # stale: the round already completed
                rnd = self.rounds.get(k)
                if rnd is None:
                    awaited = frozenset(s for s in self.sources if not self.monitor.is_failed(s)) | {src}
                    rnd = self.rounds[k] = _Round(time.monotonic(), awaited)
                if src in rnd.awaited:
                    rnd.got[src] = NULL if msg.null else msg.payload
            self._complete_ready_rounds()

    def _complete_ready_rounds(self) -> None:
        now = time.monotonic()
        for k in sorted(self.rounds):
            rnd = self.rounds[k]
            pending = {s for s in rnd.awaited if s not in rnd.got and not self.monitor.is_failed(s)}
            if pending and now < rnd.started + self.round_timeout:
                continue
            del self.rounds[k]
            self._finish(k, rnd)

    def _finish(self, k: int, rnd: _Round) -> None:
        if len(self._done) == self._done.maxlen:
            self._done_set.discard(self._done[0])
        self._done.append(k)
        self._done_set.add(k)
        merged = add_inputs([rnd.got.get(s, NULL) for s in self.sources])
        out = node_forward(self.dnn, self.node_id, merged)
        vector = None if is_null(out) else np.asarray(out, dtype=np.float32)
        msg = WireMessage.data(self.my_wire, k, vector)
        for target, w in list(self.out_writers.items()):
            try:
                write_message(w, msg)
            except (ConnectionError, RuntimeError) as exc:
                log.info("%s: send to %s failed (%s)", self.node_id, target, exc)


def serve_node(
    bundle_dir,
    node_id: str,
    listen: tuple[str, int],
    peers: Mapping[str, tuple[str, int]],
    coordinator: tuple[str, int],
    round_timeout: float = 0.2,
    heartbeat_interval: float = 0.05,
    suspicion_timeout: float = 0.3,
) -> None:
    from ..bundle import load_bundle

    dnn, _ = load_bundle(bundle_dir)
    daemon = NodeDaemon(dnn, node_id, listen, peers, coordinator, round_timeout, heartbeat_interval, suspicion_timeout)
    asyncio.run(daemon.run())
