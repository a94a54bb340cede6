"""Baseline stack: unslotted CSMA-CA over a shared medium, a simplified RPL
(storing "Classic" and non-storing "Lite"), and worst-case per-child unicast
dissemination down the DODAG."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable

import numpy as np

from . import phy
from .engine import Engine, ms, us
from .phy import LinkBudget, PhyProfile, ReceptionParams, Transmission
from .rollout import HEADER_BYTES, DataPacket, RolloutState
from .topology import Topology

log = logging.getLogger(__name__)

BROADCAST = -1
ROOT_RANK = 256
MIN_HOP_RANK_INCREASE = 256


class Variant(str, Enum):
    CLASSIC = "classic"
    LITE = "lite"


@dataclass(frozen=True)
class CsmaParams:
    min_be: int = 3
    max_be: int = 5
    max_backoffs: int = 4
    unit_backoff: int = us(320)
    cca_threshold: float = -85.0
    link_retries: int = 0
    turnaround: int = us(192)
    queue_len: int = 16
    per_neighbor_len: int = 8
    processing_delay: int = us(4500)
    mac_header_bytes: int = 27

    def __post_init__(self) -> None:
        if self.min_be > self.max_be:
            raise ValueError("min_be must not exceed max_be")
        if self.max_backoffs < 0:
            raise ValueError("max_backoffs must be >= 0")
        if self.link_retries != 0:
            raise ValueError("link-layer retransmissions are not modelled")


@dataclass
class Frame:
    src: int
    dst: int
    nbytes: int
    kind: str
    payload: Any = None


@dataclass(frozen=True)
class Sent:
    at: int


@dataclass(frozen=True)
class ChannelAccessFailure:
    attempts: int


# -- medium ------------------------------------------------------------------

class Medium:
    """Shared channel: tracks ongoing frames, answers CCA and resolves
    receptions with the capture rule when a frame ends."""

    def __init__(
        self,
        engine: Engine,
        table: np.ndarray,
        profile: PhyProfile,
        budget: LinkBudget,
        params: ReceptionParams,
        channel: int = 26,
        interferers=(),
    ) -> None:
        self.engine = engine
        self.table = table
        self.gains = np.where(np.isfinite(table), phy.dbm_to_mw(np.where(np.isfinite(table), table, 0.0)), 0.0)
        self.profile = profile
        self.budget = budget
        self.params = params
        self.channel = channel
        self.interferers = list(interferers)
        self.active: list[Transmission] = []
        self.history: list[Transmission] = []
        self.listen_floor = phy.threshold(profile, budget) - 15.0
        self.handlers: dict[int, Callable[[Frame, int], None]] = {}
        self._max_air = phy.airtime(profile, profile.mtu)
        self.frames_sent = 0

    def interference_mw(self, t: int) -> float:
        return sum(i.power_mw(self.channel, t) for i in self.interferers)

    def sensed_mw(self, node: int) -> float:
        total = sum(self.gains[tx.sender, node] for tx in self.active)
        return float(total) + self.interference_mw(self.engine.now)

    def clear(self, node: int, cca_threshold: float) -> bool:
        return phy.channel_clear(self.sensed_mw(node), cca_threshold)

    def transmit(self, frame: Frame, on_end: Callable[[], None]) -> Transmission:
        dur = phy.airtime(self.profile, frame.nbytes)
        tx = Transmission(
            sender=frame.src,
            channel=self.channel,
            start=self.engine.now,
            airtime=dur,
            powers=self.table[frame.src],
            payload=frame,
        )
        self.active.append(tx)
        self.history.append(tx)
        self.frames_sent += 1
        self.engine.after(dur, self._end, (tx, on_end), kind=f"tx-end-{frame.kind}")
        return tx

    def _end(self, arg) -> None:
        tx, on_end = arg
        self.active.remove(tx)
        horizon = self.engine.now - 2 * self._max_air
        if len(self.history) > 64:
            self.history = [h for h in self.history if h.end >= horizon]
        frame: Frame = tx.payload
        overlap = [h for h in self.history if h is not tx and h.overlaps(tx)]
        if frame.dst == BROADCAST:
            receivers = np.flatnonzero(self.table[frame.src] >= self.listen_floor)
        else:
            receivers = [frame.dst]
        for r in receivers:
            r = int(r)
            if r == frame.src or r not in self.handlers:
                continue
            if any(h.sender == r for h in overlap):
                continue  # half duplex
            others = [h for h in overlap if h.sender != r]
            flags = phy.resolve_reception(
                r,
                [tx, *others],
                "capture",
                self.engine.rng("rx", r),
                self.profile,
                self.budget,
                self.params,
                interference_mw=self.interference_mw(tx.start),
            )
            if flags[0]:
                self.handlers[r](frame, r)
        on_end()


# -- CSMA-CA -----------------------------------------------------------------

class CsmaMac:
    """Unslotted CSMA-CA with one FIFO per next hop served round-robin from a
    shared buffer pool."""

    def __init__(self, node: int, engine: Engine, medium: Medium, params: CsmaParams) -> None:
        self.node = node
        self.engine = engine
        self.medium = medium
        self.params = params
        self.queues: dict[int, deque[tuple[Frame, Callable | None]]] = {}
        self._order: deque[int] = deque()
        self.queued = 0
        self.busy = False
        self.cca_attempts = 0
        self.failures = 0
        self.overflows = 0
        self._rng = engine.rng("backoff", node)
        self._current: tuple[Frame, Callable | None] | None = None
        self._nb = 0
        self._be = params.min_be

    def send(self, frame: Frame, on_done: Callable[[Sent | ChannelAccessFailure], None] | None = None) -> bool:
        """Queue a frame; returns False (frame dropped) when no buffer is free."""
        q = self.queues.get(frame.dst)
        if self.queued >= self.params.queue_len or (q is not None and len(q) >= self.params.per_neighbor_len):
            self.overflows += 1
            return False
        if q is None:
            q = self.queues[frame.dst] = deque()
        if not q:
            self._order.append(frame.dst)
        q.append((frame, on_done))
        self.queued += 1
        if not self.busy:
            self._next()
        return True

    def _next(self) -> None:
        if not self._order:
            self.busy = False
            self._current = None
            return
        dst = self._order.popleft()
        q = self.queues[dst]
        self._current = q.popleft()
        if q:
            self._order.append(dst)
        self.busy = True
        self._nb = 0
        self._be = self.params.min_be
        if self.params.processing_delay:
            self.engine.after(self.params.processing_delay, self._backoff, kind="csma-proc")
        else:
            self._backoff()

    def _backoff(self) -> None:
        slots = int(self._rng.integers(0, 2**self._be))
        self.engine.after(slots * self.params.unit_backoff, self._cca, kind="csma-cca")

    def _cca(self) -> None:
        self.cca_attempts += 1
        if self.medium.clear(self.node, self.params.cca_threshold):
            self.engine.after(self.params.turnaround, self._tx, kind="csma-tx")
            return
        self._nb += 1
        self._be = min(self._be + 1, self.params.max_be)
        if self._nb > self.params.max_backoffs:
            _, on_done = self._current
            self.failures += 1
            self._finish()
            if on_done:
                on_done(ChannelAccessFailure(self._nb))
            self._next()
            return
        self._backoff()

    def _tx(self) -> None:
        frame, on_done = self._current
        at = self.engine.now
        self.medium.transmit(frame, lambda: self._done(on_done, at))

    def _finish(self) -> None:
        self.queued -= 1

    def _done(self, on_done, at: int) -> None:
        self._finish()
        if on_done:
            on_done(Sent(at))
        self._next()


def csma_send(mac: CsmaMac, frame: Frame, on_done=None) -> bool:
    return mac.send(frame, on_done)


# -- RPL ---------------------------------------------------------------------

@dataclass(frozen=True)
class Trickle:
    i_min: int = ms(125)
    doublings: int = 8
    k: float = float("inf")

    @property
    def i_max(self) -> int:
        return self.i_min * 2**self.doublings


@dataclass
class RplState:
    rank: int | None = None
    parent: int | None = None
    variant: Variant = Variant.CLASSIC
    routing_table: dict[int, int] = field(default_factory=dict)
    joined_at: int | None = None
    dio_sent: int = 0


@dataclass(frozen=True)
class DioMessage:
    sender: int
    rank: int
    interval_index: int


class RplNetwork:
    def __init__(
        self,
        engine: Engine,
        topo: Topology,
        medium: Medium,
        macs: list[CsmaMac],
        variant: Variant,
        trickle: Trickle = Trickle(),
        lite_margin_db: float = 6.0,
        dio_bytes: int = 60,
    ) -> None:
        self.engine = engine
        self.topo = topo
        self.medium = medium
        self.macs = macs
        self.variant = Variant(variant)
        self.trickle = trickle
        self.lite_margin_db = lite_margin_db
        self.dio_bytes = dio_bytes
        self.root = topo.source.id
        self.states = [RplState(variant=self.variant) for _ in topo.nodes]
        self.children: list[set[int]] = [set() for _ in topo.nodes]
        self.threshold = phy.threshold(medium.profile, medium.budget)
        self.running = False
        self._interval = [0] * len(topo.nodes)
        self._index = [0] * len(topo.nodes)
        root = self.states[self.root]
        root.rank, root.joined_at = ROOT_RANK, 0

    # -- link metric -----------------------------------------------------
    def margin(self, a: int, b: int) -> float:
        return float(self.medium.table[a, b] - self.threshold)

    def admissible(self, parent: int, child: int) -> bool:
        need = self.lite_margin_db if self.variant is Variant.LITE else 0.0
        return self.margin(parent, child) >= need

    def rank_increase(self, parent: int, child: int) -> int:
        p = float(phy.success_prob(self.margin(parent, child), self.medium.params))
        etx = 1.0 / max(p, 1e-3)
        return MIN_HOP_RANK_INCREASE + round(256 * (etx - 1.0))

    # -- trickle ---------------------------------------------------------
    def start(self) -> None:
        self.running = True
        self._start_trickle(self.root)

    def stop(self) -> None:
        self.running = False

    def _start_trickle(self, node: int) -> None:
        self._interval[node] = self.trickle.i_min
        self._index[node] = 0
        self._begin_interval(node)

    def _begin_interval(self, node: int) -> None:
        i = self._interval[node]
        g = self.engine.rng("trickle", node)
        t = int(g.integers(i // 2, i))
        self.engine.after(t, self._fire, node, kind="dio-fire")
        self.engine.after(i, self._interval_end, node, kind="dio-interval")

    def _fire(self, node: int) -> None:
        if not self.running:
            return
        st = self.states[node]
        msg = DioMessage(node, st.rank, self._index[node])
        st.dio_sent += 1
        self.macs[node].send(Frame(node, BROADCAST, self.dio_bytes, "dio", msg))

    def _interval_end(self, node: int) -> None:
        if not self.running:
            return
        self._interval[node] = min(self._interval[node] * 2, self.trickle.i_max)
        self._index[node] += 1
        self._begin_interval(node)

    # -- DIO processing --------------------------------------------------
    def on_dio(self, msg: DioMessage, node: int) -> None:
        if node == self.root or not self.running:
            return
        s = msg.sender
        if not self.admissible(s, node):
            return
        st = self.states[node]
        cand = msg.rank + self.rank_increase(s, node)
        if st.rank is None:
            self._attach(node, s, cand)
            st.joined_at = self.engine.now
            self._start_trickle(node)
            return
        if s == st.parent or cand >= st.rank or self._in_subtree(s, node):
            return
        if cand == st.rank and self.medium.table[s, node] <= self.medium.table[st.parent, node]:
            return
        self._attach(node, s, cand)

    def _in_subtree(self, candidate: int, node: int) -> bool:
        cur = candidate
        while cur is not None:
            if cur == node:
                return True
            cur = self.states[cur].parent
        return False

    def _attach(self, node: int, parent: int, rank: int) -> None:
        st = self.states[node]
        if st.parent is not None:
            self.children[st.parent].discard(node)
        st.parent = parent
        self.children[parent].add(node)
        self._set_rank(node, rank)

    def _set_rank(self, node: int, rank: int) -> None:
        stack = [(node, rank)]
        while stack:
            n, r = stack.pop()
            self.states[n].rank = r
            for c in self.children[n]:
                stack.append((c, r + self.rank_increase(n, c)))

    # -- routes ------------------------------------------------------------
    def finalize_routes(self) -> None:
        """Populate storing-mode tables as DAO propagation would."""
        for st in self.states:
            st.routing_table = {}
        if self.variant is not Variant.CLASSIC:
            return
        for node in range(len(self.states)):
            if self.states[node].joined_at is None or node == self.root:
                continue
            child, cur = node, self.states[node].parent
            while cur is not None:
                self.states[cur].routing_table[node] = child
                child, cur = cur, self.states[cur].parent

    def joined(self) -> list[bool]:
        return [st.joined_at is not None for st in self.states]


class NoRouteError(LookupError):
    pass


SRH_BYTES_PER_HOP = 8


def downward_route(states: list[RplState], destination: int) -> list[int]:
    """Hop list from the root to ``destination`` along parent pointers."""
    st = states[destination]
    if st.joined_at is None:
        raise NoRouteError(f"node {destination} has not joined")
    path = [destination]
    cur = st.parent
    while cur is not None:
        path.append(cur)
        cur = states[cur].parent
        if len(path) > len(states):
            raise NoRouteError("parent pointers form a loop")
    return path[::-1]


def route_header_bytes(route: list[int], variant: Variant) -> int:
    return SRH_BYTES_PER_HOP * (len(route) - 1) if Variant(variant) is Variant.LITE else 0


def payload_budget(mtu: int, params: CsmaParams, route: list[int], variant: Variant) -> int:
    return mtu - params.mac_header_bytes - HEADER_BYTES - route_header_bytes(route, variant)


def check_dodag(states: list[RplState]) -> None:
    """Raise if any joined node's rank does not exceed its parent's or the
    parent pointers loop."""
    for i, st in enumerate(states):
        if st.joined_at is None or st.parent is None:
            continue
        if states[st.parent].rank is None or st.rank <= states[st.parent].rank:
            raise AssertionError(f"rank of {i} does not exceed its parent's")
        downward_route(states, i)


# -- dissemination -------------------------------------------------------------

class CsmaDissemination:
    """Source injects one packet per interval; every forwarding node sends one
    unicast copy per child as soon as it receives the packet."""

    def __init__(self, rpl: RplNetwork, payload_bytes: int, interval: int, params: CsmaParams) -> None:
        self.rpl = rpl
        self.engine = rpl.engine
        self.params = params
        self.interval = interval
        self.payload_bytes = payload_bytes
        self.states: dict[int, RolloutState] = {}
        self.packets: list[DataPacket] = []
        self.next_packet = 0
        self.frag_drops = 0
        self.copy_failures = 0
        self.rollout_start: int | None = None
        self.last_injection: int | None = None
        self._children = [sorted(c) for c in rpl.children]
        self._frame_bytes: dict[int, int | None] = {}
        mtu = rpl.medium.profile.mtu
        for node in range(len(rpl.states)):
            if rpl.states[node].joined_at is None or node == rpl.root:
                continue
            route = downward_route(rpl.states, node)
            size = payload_bytes + HEADER_BYTES + params.mac_header_bytes
            size += route_header_bytes(route, rpl.variant)
            self._frame_bytes[node] = size if size <= mtu else None

    def start(self, packets: list[DataPacket], consumers: list[int]) -> None:
        self.packets = packets
        for c in consumers:
            self.states[c] = RolloutState()
        self.rollout_start = self.engine.now
        self._inject()

    @property
    def done_injecting(self) -> bool:
        return self.next_packet >= len(self.packets)

    def idle(self) -> bool:
        return self.done_injecting and not any(m.busy for m in self.rpl.macs)

    def _inject(self) -> None:
        if self.done_injecting:
            return
        pkt = self.packets[self.next_packet]
        self.next_packet += 1
        self.last_injection = self.engine.now
        self._forward(self.rpl.root, pkt)
        if not self.done_injecting:
            self.engine.after(self.interval, self._inject, kind="inject")

    def _forward(self, node: int, pkt: DataPacket) -> None:
        mac = self.rpl.macs[node]
        for child in self._children[node]:
            size = self._frame_bytes.get(child)
            if size is None:
                self.frag_drops += 1
                continue
            frame = Frame(node, child, size, "data", pkt)
            mac.send(frame, self._on_sent)

    def _on_sent(self, result) -> None:
        if isinstance(result, ChannelAccessFailure):
            self.copy_failures += 1

    def on_data(self, frame: Frame, node: int) -> None:
        pkt: DataPacket = frame.payload
        state = self.states.get(node)
        if state is not None:
            if pkt.seq in state.received_ids:
                return
            state.on_receive(pkt, self.engine.now, True)
        self._forward(node, pkt)


class CsmaNode:
    """Receive dispatch for one node: DIOs go to RPL, data to dissemination."""

    def __init__(self, rpl: RplNetwork) -> None:
        self.rpl = rpl
        self.dissemination: CsmaDissemination | None = None

    def __call__(self, frame: Frame, node: int) -> None:
        if frame.kind == "dio":
            self.rpl.on_dio(frame.payload, node)
        elif frame.kind == "data" and self.dissemination is not None:
            self.dissemination.on_data(frame, node)


def build_stack(
    engine: Engine,
    topo: Topology,
    profile: PhyProfile,
    budget: LinkBudget,
    params: ReceptionParams,
    csma: CsmaParams,
    variant: Variant,
    trickle: Trickle = Trickle(),
    lite_margin_db: float = 6.0,
    channel: int = 26,
    interferers=(),
    table: np.ndarray | None = None,
) -> tuple[RplNetwork, CsmaNode]:
    if table is None:
        table = phy.link_table(topo, budget, engine.seed)
    medium = Medium(engine, table, profile, budget, params, channel, interferers)
    macs = [CsmaMac(i, engine, medium, csma) for i in range(len(topo))]
    rpl = RplNetwork(engine, topo, medium, macs, variant, trickle, lite_margin_db)
    dispatch = CsmaNode(rpl)
    for nd in topo.nodes:
        if not nd.indoor:
            medium.handlers[nd.id] = dispatch
    return rpl, dispatch
