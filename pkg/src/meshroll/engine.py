"""Deterministic discrete-event engine.

Time is kept in integer nanoseconds. Events fire in ``(fire_at, seq)`` order,
where ``seq`` is a per-engine insertion counter, so equal timestamps dispatch
in the order they were scheduled. Random numbers come from labelled streams
derived from the run seed; a stream depends only on ``(seed, label, keys)``,
never on how many other streams exist.
"""

from __future__ import annotations

import hashlib
import heapq
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

NS = 1
US = 1_000
MS = 1_000_000
S = 1_000_000_000


def ms(value: float) -> int:
    return round(value * MS)


def us(value: float) -> int:
    return round(value * US)


def seconds(value: float) -> int:
    return round(value * S)


def to_seconds(t: int) -> float:
    return t / S


class SchedulingError(RuntimeError):
    """Raised when an event is scheduled before the current clock."""


@dataclass(order=True)
class Event:
    fire_at: int
    seq: int
    target: Callable[..., Any] = field(compare=False)
    payload: Any = field(default=None, compare=False)
    kind: str = field(default="", compare=False)
    cancelled: bool = field(default=False, compare=False)


@dataclass(frozen=True)
class EngineStats:
    dispatched: int
    clock: int


def _label_words(label: str) -> list[int]:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def stream(seed: int, label: str, *keys: int) -> np.random.Generator:
    """Build the generator for ``(seed, label, keys)`` without an engine."""
    seed &= (1 << 64) - 1
    entropy = [seed & 0xFFFFFFFF, seed >> 32, *_label_words(label)]
    entropy.extend(int(k) & 0xFFFFFFFF for k in keys)
    return np.random.default_rng(np.random.SeedSequence(entropy))


def _splitmix(x: np.ndarray) -> np.ndarray:
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def counter_uniform(seed: int, label: str, *counters) -> np.ndarray:
    """Stateless uniforms in [0, 1) from ``(seed, label, counters...)``.

    Counters broadcast like numpy arrays, so a vector of node ids gives one
    independent draw per node that does not depend on the vector's length.
    """
    words = _label_words(label)
    key = np.uint64((int(seed) & ((1 << 64) - 1)) ^ (words[0] | (words[1] << 32)))
    with np.errstate(over="ignore"):
        x = _splitmix(np.asarray(key, dtype=np.uint64))
        for c in counters:
            x = _splitmix(x ^ np.asarray(c, dtype=np.uint64))
    return (x >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


class Engine:
    def __init__(self, seed: int = 0, trace: bool = False) -> None:
        self.seed = int(seed)
        self.now = 0
        self._queue: list[Event] = []
        self._seq = 0
        self._streams: dict[tuple, np.random.Generator] = {}
        self._stopped = False
        self.dispatched = 0
        self.tracing = trace
        self.trace: list[str] = []
        self._hasher = hashlib.sha256()

    # -- scheduling -------------------------------------------------------
    def schedule(
        self,
        fire_at: int,
        target: Callable[..., Any],
        payload: Any = None,
        kind: str = "",
    ) -> Event:
        fire_at = int(fire_at)
        if fire_at < self.now:
            raise SchedulingError(
                f"event {kind or target!r} at {fire_at} ns is before clock {self.now} ns"
            )
        ev = Event(fire_at, self._seq, target, payload, kind)
        self._seq += 1
        heapq.heappush(self._queue, ev)
        return ev

    def after(
        self, delay: int, target: Callable[..., Any], payload: Any = None, kind: str = ""
    ) -> Event:
        return self.schedule(self.now + int(delay), target, payload, kind)

    @staticmethod
    def cancel(handle: Event) -> None:
        handle.cancelled = True

    def stop(self) -> None:
        """Make the current ``run_until`` return after this dispatch."""
        self._stopped = True

    @property
    def pending(self) -> int:
        return sum(1 for ev in self._queue if not ev.cancelled)

    # -- execution --------------------------------------------------------
    def run_until(self, t_end: int) -> EngineStats:
        t_end = int(t_end)
        self._stopped = False
        count = 0
        queue = self._queue
        while queue and queue[0].fire_at <= t_end:
            ev = heapq.heappop(queue)
            if ev.cancelled:
                continue
            self.now = ev.fire_at
            if self.tracing:
                self._record(ev)
            if ev.payload is None:
                ev.target()
            else:
                ev.target(ev.payload)
            count += 1
            if self._stopped:
                break
        if not self._stopped:
            self.now = max(self.now, t_end)
        self.dispatched += count
        return EngineStats(count, self.now)

    def _record(self, ev: Event) -> None:
        name = getattr(ev.target, "__qualname__", repr(ev.target))
        line = f"{ev.fire_at} {name} {ev.kind}"
        self.trace.append(line)
        self._hasher.update(line.encode())
        self._hasher.update(b"\n")

    def trace_hash(self) -> str:
        return self._hasher.hexdigest()

    def dump_trace(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for line in self.trace:
                fh.write(line + "\n")

    # -- randomness -------------------------------------------------------
    def rng(self, label: str, *keys: int) -> np.random.Generator:
        key = (label, *keys)
        gen = self._streams.get(key)
        if gen is None:
            gen = stream(self.seed, label, *keys)
            self._streams[key] = gen
        return gen
