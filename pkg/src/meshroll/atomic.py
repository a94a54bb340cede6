"""Synchronous-flooding stack.

Every period starts with a control flood in short control slots, followed by
the data flood in full-MTU slots. A node that first decodes in slot ``k``
relays in slots ``k+1 .. k+max_tx`` and the window closes after its slot
budget. Slots that would run past the period end are not executed, so short
periods cut floods short.

Slot-level work is vectorised over nodes with numpy; the engine sees one
event per period.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import phy
from .engine import Engine, counter_uniform, us
from .phy import LinkBudget, PhyProfile, ReceptionParams
from .rollout import DataPacket, RolloutState
from .topology import Topology

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FloodConfig:
    period: int
    profile: PhyProfile
    max_tx: int = 3
    max_slots: int = 7
    hop_channels: tuple[int, ...] = (26,)
    guard: int = us(200)
    sync_slots: int = 2
    desync_limit: int = 16
    control_bytes: int = 16
    drift_ppm: float = 40.0
    hopping: str = "period"

    def __post_init__(self) -> None:
        if self.max_tx < 1:
            raise ValueError("max_tx must be >= 1")
        if self.max_slots < 1:
            raise ValueError("max_slots must be >= 1")
        if not self.hop_channels:
            raise ValueError("hop_channels must not be empty")
        if self.hopping not in ("period", "slot"):
            raise ValueError(f"unknown hopping mode {self.hopping!r}")
        needed = control_window(self) + slot_len(self)
        if self.period < needed:
            raise ValueError(
                f"period {self.period / 1e6:.3f} ms cannot hold the control flood "
                f"and one data slot ({needed / 1e6:.3f} ms)"
            )


def slot_len(config: FloodConfig) -> int:
    return phy.airtime(config.profile, config.profile.mtu) + config.guard


def control_slot_len(config: FloodConfig) -> int:
    return phy.airtime(config.profile, config.control_bytes) + config.guard


def control_slots(config: FloodConfig) -> int:
    return config.sync_slots + config.max_slots


def control_window(config: FloodConfig) -> int:
    return control_slots(config) * control_slot_len(config)


def data_slots(config: FloodConfig) -> int:
    """Data slots that fit in one period after the control flood."""
    room = (config.period - control_window(config)) // slot_len(config)
    return int(min(config.max_slots, room))


def channel_for(period_index: int, slot_index: int, config: FloodConfig) -> int:
    chans = config.hop_channels
    if config.hopping == "slot":
        return chans[(period_index + slot_index) % len(chans)]
    return chans[period_index % len(chans)]


@dataclass
class FloodResult:
    initiator: int
    payload_id: object
    first_rx_slot: np.ndarray  # -1 where not reached; initiator holds -1
    tx_slots: np.ndarray
    tx_by_slot: list = field(default_factory=list)  # bool mask of senders per slot

    def reached(self) -> set[int]:
        return {int(i) for i in np.flatnonzero(self.first_rx_slot >= 0)}


@dataclass
class RxModel:
    """Everything a flood needs to decide receptions, precomputed per run."""

    gains_mw: np.ndarray  # linear mean power, [tx, rx]
    threshold: float
    noise_mw: float
    params: ReceptionParams
    seed: int = 0

    @classmethod
    def build(cls, table_dbm, profile, budget: LinkBudget, params, seed=0) -> RxModel:
        gains = np.where(np.isfinite(table_dbm), phy.dbm_to_mw(np.where(np.isfinite(table_dbm), table_dbm, 0.0)), 0.0)
        return cls(
            gains_mw=gains,
            threshold=phy.threshold(profile, budget),
            noise_mw=float(phy.dbm_to_mw(budget.noise_floor)),
            params=params,
            seed=seed,
        )


def run_flood(
    initiator: int,
    config: FloodConfig,
    rx: RxModel,
    n_slots: int,
    listening: np.ndarray | None = None,
    relaying: np.ndarray | None = None,
    counters: tuple = (0, 0),
    interference_mw: np.ndarray | float = 0.0,
    payload_id: object = None,
) -> FloodResult:
    """Unroll one flood over ``n_slots`` slots.

    ``listening`` marks nodes able to receive, ``relaying`` nodes allowed to
    retransmit after a decode. All transmitters in a slot send the same frame
    in lockstep, so their powers add at each receiver.
    """
    n = rx.gains_mw.shape[0]
    if listening is None:
        listening = np.ones(n, dtype=bool)
    if relaying is None:
        relaying = np.ones(n, dtype=bool)
    first = np.full(n, -1, dtype=np.int64)
    txc = np.zeros(n, dtype=np.int64)
    ids = np.arange(n, dtype=np.uint64)
    log = []
    thr_lin = 10.0 ** (rx.params.capture_threshold_db / 10.0)
    floor_mw = (rx.noise_mw + interference_mw) * thr_lin
    fading = rx.params.fading == "rayleigh"
    for s in range(n_slots):
        tx = (first >= 0) & relaying & (first < s) & (s <= first + config.max_tx)
        if s < config.max_tx:
            tx[initiator] = True
        if not tx.any():
            break
        txc += tx
        log.append(tx.copy())
        cand = listening & (first < 0) & ~tx
        cand[initiator] = False
        if not cand.any():
            continue
        power = tx.astype(float) @ rx.gains_mw
        u_fade = counter_uniform(rx.seed, "flood-fade", *counters, s, ids)
        u_loss = counter_uniform(rx.seed, "flood-loss", *counters, s, ids)
        if fading:
            inst = power * -np.log(np.maximum(u_fade, 1e-300))
        else:
            inst = power
        with np.errstate(divide="ignore"):
            ok = 10.0 * np.log10(inst) >= rx.threshold
        ok &= power >= floor_mw
        ok &= u_loss >= rx.params.fade_loss_prob
        ok &= cand
        first[ok] = s
    return FloodResult(initiator, payload_id, first, txc, log)


@dataclass
class AtomicNodeState:
    synced: bool = False
    drift_ppm: float = 0.0
    last_sync: int | None = None
    missed_control: int = 0
    joined_at: int | None = None
    dropped: bool = False
    drops: int = 0

    def clock_offset(self, now: int) -> float:
        if self.last_sync is None:
            return 0.0
        return self.drift_ppm * 1e-6 * (now - self.last_sync)


@dataclass
class AtomicStats:
    periods: int = 0
    control_reached: list[int] = field(default_factory=list)
    data_reached: list[int] = field(default_factory=list)


class AtomicNetwork:
    """Period-driven synchronous-flooding network on top of the engine."""

    def __init__(
        self,
        engine: Engine,
        topo: Topology,
        config: FloodConfig,
        budget: LinkBudget,
        params: ReceptionParams,
        table: np.ndarray | None = None,
        interferers=(),
    ) -> None:
        self.engine = engine
        self.topo = topo
        self.config = config
        self.n = len(topo)
        if table is None:
            table = phy.link_table(topo, budget, engine.seed)
        self.rx = RxModel.build(table, config.profile, budget, params, engine.seed)
        self.interferers = list(interferers)
        self.initiator = topo.source.id
        self.active = np.array([not nd.indoor for nd in topo.nodes])
        drift = counter_uniform(engine.seed, "drift", np.arange(self.n, dtype=np.uint64))
        self.nodes = [
            AtomicNodeState(drift_ppm=float((2 * d - 1) * config.drift_ppm)) for d in drift
        ]
        src = self.nodes[self.initiator]
        src.synced, src.joined_at, src.last_sync, src.drift_ppm = True, 0, 0, 0.0
        self.states: dict[int, RolloutState] = {}
        self.stats = AtomicStats()
        self.period_index = 0
        self._packets: list[DataPacket] = []
        self._next_packet = 0
        self._disseminating = False
        self._n_data_slots = data_slots(config)
        self._ctrl_slot = control_slot_len(config)
        self._data_slot = slot_len(config)
        self._ctrl_window = control_window(config)
        self.rollout_start: int | None = None
        self.rollout_end: int | None = None

    # -- lifecycle ----------------------------------------------------------
    def start(self) -> None:
        self.engine.schedule(0, self._period, kind="atomic-period")

    def begin_rollout(self, packets: list[DataPacket]) -> None:
        self._packets = packets
        self._next_packet = 0
        self._disseminating = True
        for nd in self.topo.consumers:
            self.states.setdefault(nd.id, RolloutState())

    @property
    def finished(self) -> bool:
        return self._disseminating and self._next_packet >= len(self._packets)

    def joined(self) -> np.ndarray:
        return np.array([st.joined_at is not None for st in self.nodes])

    # -- one period ---------------------------------------------------------
    def _period(self) -> None:
        payload = None
        if self._disseminating and self._next_packet < len(self._packets):
            payload = self._packets[self._next_packet]
            if self.rollout_start is None:
                self.rollout_start = self.engine.now
            self._next_packet += 1
        self.run_period(payload)
        if payload is not None and self._next_packet >= len(self._packets):
            self.rollout_end = self.engine.now
        self.engine.after(self.config.period, self._period, kind="atomic-period")

    def _interference(self, channel: int, t: int) -> float:
        return sum(i.power_mw(channel, t) for i in self.interferers)

    def run_period(self, payload: DataPacket | None = None) -> tuple[FloodResult, FloodResult | None]:
        cfg = self.config
        t0 = self.engine.now
        p = self.period_index
        self.period_index += 1
        self.stats.periods += 1
        channel = channel_for(p, 0, cfg)
        half_guard = cfg.guard / 2

        in_sync = np.zeros(self.n, dtype=bool)
        listening = np.zeros(self.n, dtype=bool)
        for i, st in enumerate(self.nodes):
            if not self.active[i]:
                continue
            if st.synced:
                ok = abs(st.clock_offset(t0)) <= half_guard
                in_sync[i] = ok
                listening[i] = ok
            else:
                # unsynchronised nodes scan one channel of the hop set
                listening[i] = cfg.hop_channels[i % len(cfg.hop_channels)] == channel
        in_sync[self.initiator] = listening[self.initiator] = True

        ctrl = run_flood(
            self.initiator,
            cfg,
            self.rx,
            control_slots(cfg),
            listening=listening,
            relaying=listening,
            counters=(p, 0),
            interference_mw=self._interference(channel, t0),
            payload_id=("ctrl", p),
        )
        got = ctrl.first_rx_slot >= 0
        for i, st in enumerate(self.nodes):
            if i == self.initiator or not self.active[i]:
                continue
            if got[i]:
                if st.joined_at is None:
                    st.joined_at = t0 + int(ctrl.first_rx_slot[i] + 1) * self._ctrl_slot
                st.synced, st.dropped = True, False
                st.last_sync, st.missed_control = t0, 0
            elif st.synced:
                st.missed_control += 1
                if st.missed_control > cfg.desync_limit:
                    st.synced, st.dropped = False, True
                    st.drops += 1
        self.stats.control_reached.append(int(got.sum()))

        data = None
        if payload is not None:
            t_data = t0 + self._ctrl_window
            # a fresh control decode re-anchors the clock for this period
            ready = (np.array([st.synced for st in self.nodes]) & in_sync) | got
            ready[self.initiator] = True
            data = run_flood(
                self.initiator,
                cfg,
                self.rx,
                self._n_data_slots,
                listening=ready,
                relaying=ready,
                counters=(p, 1),
                interference_mw=self._interference(channel, t_data),
                payload_id=payload.seq,
            )
            for i in np.flatnonzero(data.first_rx_slot >= 0):
                state = self.states.get(int(i))
                if state is not None:
                    t_rx = t_data + int(data.first_rx_slot[i] + 1) * self._data_slot
                    state.on_receive(payload, t_rx, True)
            self.stats.data_reached.append(int((data.first_rx_slot >= 0).sum()))
        return ctrl, data
