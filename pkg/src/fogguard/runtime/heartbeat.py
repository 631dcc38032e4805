"""Keep-alive bookkeeping for the source nodes feeding a physical node.

The monitor only tracks time; the daemon sends KEEPALIVE frames and feeds
acknowledgements (or transport errors) in. A clock can be injected so the
state machine is testable without sleeping.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, Optional


class PeerState(str, Enum):
    ALIVE = "alive"
    SUSPECTED = "suspected"
    FAILED = "failed"


@dataclass
class PeerStatus:
    node: str
    state: PeerState
    last_heartbeat: float


class HeartbeatMonitor:
    """alive -> failed after ``suspicion_timeout`` without a heartbeat; back on the next one.

    A peer that has missed at least one interval but is not yet timed out is
    reported as suspected; that is a view, not a transition.
    """

    def __init__(
        self,
        peers: Iterable[str],
        interval: float,
        suspicion_timeout: float,
        clock: Callable[[], float] = time.monotonic,
    ):
        if not interval < suspicion_timeout:
            raise ValueError("heartbeat interval must be shorter than the suspicion timeout")
        self.interval = interval
        self.timeout = suspicion_timeout
        self.clock = clock
        now = clock()
        self._last = {p: now for p in peers}
        self._failed = {p: False for p in self._last}

    def record(self, peer: str, now: Optional[float] = None) -> Optional[PeerState]:
        """Note a heartbeat; returns ``ALIVE`` if this revived a failed peer."""
        self._last[peer] = self.clock() if now is None else now
        if self._failed.get(peer, False):
            self._failed[peer] = False
            return PeerState.ALIVE
        self._failed[peer] = False
        return None

    def mark_failed(self, peer: str) -> bool:
        """Transport-level failure; returns True if the state changed."""
        changed = not self._failed.get(peer, False)
        self._failed[peer] = True
        return changed

    def poll(self, now: Optional[float] = None) -> list[str]:
        """Peers that just timed out."""
        now = self.clock() if now is None else now
        newly = []
        for peer, last in self._last.items():
            if not self._failed[peer] and now - last > self.timeout:
                self._failed[peer] = True
                newly.append(peer)
        return newly

    def is_failed(self, peer: str) -> bool:
        return self._failed.get(peer, False)

    def status(self, peer: str, now: Optional[float] = None) -> PeerStatus:
        now = self.clock() if now is None else now
        last = self._last[peer]
        if self._failed[peer]:
            state = PeerState.FAILED
        elif now - last > self.interval * 1.5:
            state = PeerState.SUSPECTED
        else:
            state = PeerState.ALIVE
        return PeerStatus(peer, state, last)

    def alive_peers(self) -> list[str]:
        return [p for p, dead in self._failed.items() if not dead]
