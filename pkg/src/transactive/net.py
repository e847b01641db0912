"""Deterministic discrete-event network.

Nodes are plain objects with ``on_message(net, src, msg)`` and
``on_timer(net, tag)`` handlers (plus an optional ``on_start(net)``). Events
are processed in (time, sequence) order from a heap; all randomness comes from
one seeded ``random.Random``, so a seed and config fully determine the run.
Time is simulated milliseconds.
"""

from __future__ import annotations

import heapq
import json
import math
import random
from dataclasses import dataclass, field
from typing import Any, Callable

from .scenario import FaultSpec, NetConfig

CRASH = "crash"
MUTE = "mute"
EQUIVOCATE = "equivocate"
DELAY = "delay"
BEHAVIORS = (CRASH, MUTE, EQUIVOCATE, DELAY)


class NetworkConfigError(ValueError):
    pass


@dataclass(order=True)
class _Event:
    time: float
    seq: int
    kind: str = field(compare=False)  # "deliver" | "timer"
    src: str = field(compare=False)
    dst: str = field(compare=False)
    payload: Any = field(compare=False)


@dataclass
class RunResult:
    status: str  # "condition" | "time-limit" | "stalled" | "event-limit"
    time: float
    events: int


def describe(msg: Any) -> Any:
    d = getattr(msg, "describe", None)
    return d() if d is not None else type(msg).__name__


class Network:
    def __init__(self, config: NetConfig | None = None, record: bool = True):
        self.config = config or NetConfig()
        self.rng = random.Random(self.config.seed)
        self.nodes: dict[str, Any] = {}
        self.now = 0.0
        self.record = record
        self.log: list[tuple] = []
        self.delivered = 0
        self.dropped = 0
        self._queue: list[_Event] = []
        self._seq = 0
        self._started = False

    # -- setup

    def register(self, name: str, node: Any) -> None:
        if name in self.nodes:
            raise NetworkConfigError(f"node {name!r} registered twice")
        self.nodes[name] = node

    def validate(self) -> None:
        self.config.validate(set(self.nodes))
        for f in self.config.faults:
            if f.behavior not in BEHAVIORS:
                raise NetworkConfigError(f"unknown fault behavior {f.behavior!r}")

    def fault(self, name: str) -> FaultSpec | None:
        """The fault currently active on ``name`` (the latest that has started)."""
        active = None
        for f in self.config.faults:
            if f.node == name and f.at <= self.now:
                active = f
        return active

    def _has(self, name: str, *behaviors: str) -> bool:
        f = self.fault(name)
        return f is not None and f.behavior in behaviors

    def partitioned(self, a: str, b: str, t: float) -> bool:
        for p in self.config.partitions:
            if p.start <= t < p.end and ((a in p.group) != (b in p.group)):
                return True
        return False

    # -- sending

    def _push(self, ev: _Event) -> None:
        heapq.heappush(self._queue, ev)

    def _note(self, event: str, src: str, dst: str, payload: Any, **extra) -> None:
        if self.record:
            self.log.append((self.now, event, src, dst, describe(payload), extra or None))

    def send(self, src: str, dst: str, msg: Any) -> float | None:
        """Schedule delivery; returns the delivery time, or None if dropped."""
        if src not in self.nodes or dst not in self.nodes:
            raise NetworkConfigError(f"unknown node in send {src!r} -> {dst!r}")
        if self._has(src, CRASH, MUTE):
            self._drop(src, dst, msg, "fault")
            return None
        if self.partitioned(src, dst, self.now):
            self._drop(src, dst, msg, "partition")
            return None
        c = self.config
        latency = c.latency_min if c.latency_max == c.latency_min else self.rng.uniform(c.latency_min, c.latency_max)
        if c.drop_prob > 0 and self.rng.random() < c.drop_prob:
            self._drop(src, dst, msg, "loss")
            return None
        f = self.fault(src)
        if f is not None and f.behavior == DELAY:
            latency += f.extra_delay
        self._seq += 1
        at = self.now + latency
        self._push(_Event(at, self._seq, "deliver", src, dst, msg))
        self._note("send", src, dst, msg, at=at)
        return at

    def broadcast(self, src: str, dsts, msg: Any) -> None:
        for d in dsts:
            if d != src:
                self.send(src, d, msg)

    def _drop(self, src: str, dst: str, msg: Any, why: str) -> None:
        self.dropped += 1
        self._note("drop", src, dst, msg, why=why)

    def set_timer(self, node: str, delay: float, tag: Any) -> None:
        if node not in self.nodes:
            raise NetworkConfigError(f"unknown node {node!r}")
        self._seq += 1
        self._push(_Event(self.now + max(0.0, delay), self._seq, "timer", node, node, tag))

    # -- running

    def start(self) -> None:
        if self._started:
            return
        self._started = True
        self.validate()
        for name in sorted(self.nodes):
            hook = getattr(self.nodes[name], "on_start", None)
            if hook is not None:
                hook(self)

    def pending(self) -> int:
        return len(self._queue)

    def run_until(self, condition: Callable[[], bool] | None = None, time_limit: float = math.inf,
                  max_events: int | None = None) -> RunResult:
        """Process events until ``condition()`` holds, time passes ``time_limit``,
        or the queue empties (a stall when a condition was given)."""
        self.start()
        n = 0
        if condition is not None and condition():
            return RunResult("condition", self.now, n)
        while self._queue:
            if self._queue[0].time > time_limit:
                self.now = time_limit
                return RunResult("time-limit", self.now, n)
            if max_events is not None and n >= max_events:
                return RunResult("event-limit", self.now, n)
            ev = heapq.heappop(self._queue)
            self.now = ev.time
            n += 1
            self._dispatch(ev)
            if condition is not None and condition():
                return RunResult("condition", self.now, n)
        return RunResult("stalled" if condition is not None else "idle", self.now, n)

    def _dispatch(self, ev: _Event) -> None:
        node = self.nodes[ev.dst]
        if self._has(ev.dst, CRASH):
            if ev.kind == "deliver":
                self._drop(ev.src, ev.dst, ev.payload, "crashed")
            return
        if ev.kind == "timer":
            node.on_timer(self, ev.payload)
            return
        if self.partitioned(ev.src, ev.dst, self.now):
            self._drop(ev.src, ev.dst, ev.payload, "partition")
            return
        self.delivered += 1
        self._note("deliver", ev.src, ev.dst, ev.payload)
        node.on_message(self, ev.src, ev.payload)

    def export_log(self) -> str:
        """Event log as line-delimited JSON."""
        out = []
        for t, event, src, dst, what, extra in self.log:
            rec = {"t": t, "event": event, "src": src, "dst": dst, "msg": what}
            if extra:
                rec.update(extra)
            out.append(json.dumps(rec, sort_keys=True))
        return "\n".join(out) + ("\n" if out else "")
