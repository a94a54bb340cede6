"""Scenario configuration, single runs, and parameter sweeps."""

from __future__ import annotations

import dataclasses
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

import yaml

from . import atomic, csma_rpl, phy, topology
from .engine import Engine, ms, seconds, to_seconds, us
from .phy import LinkBudget, ReceptionParams
from .rollout import ConsumerReport, FirmwareImage, finalize, packetize
from .topology import Topology

log = logging.getLogger(__name__)


class ScenarioError(ValueError):
    """Configuration problem detected before any simulation runs."""


class Stack(str, Enum):
    ATOMIC = "atomic"
    CLASSIC = "csma-rpl-classic"
    LITE = "csma-rpl-lite"

    @property
    def is_csma(self) -> bool:
        return self is not Stack.ATOMIC


@dataclass
class TopologyConfig:
    preset: str | None = "umbrella-east"
    file: str | None = None
    seed: int = 0
    params: dict = field(default_factory=dict)

    def build(self) -> Topology:
        if self.file:
            return topology.load_topology(self.file)
        return topology.preset(self.preset, seed=self.seed, **self.params)


@dataclass
class AtomicConfig:
    period_ms: float = 250.0
    max_tx: int = 12
    max_slots: int = 8
    hop_channels: list = field(default_factory=lambda: [26])
    guard_us: float = 200.0
    sync_slots: int = 2
    desync_limit: int = 16
    drift_ppm: float = 40.0
    control_bytes: int = 16
    hopping: str = "period"
    payload_bytes: int | None = None  # defaults to 230 (BLE) or 121 (802.15.4)

    def flood_config(self, profile) -> atomic.FloodConfig:
        return atomic.FloodConfig(
            period=ms(self.period_ms),
            profile=profile,
            max_tx=self.max_tx,
            max_slots=self.max_slots,
            hop_channels=tuple(self.hop_channels),
            guard=us(self.guard_us),
            sync_slots=self.sync_slots,
            desync_limit=self.desync_limit,
            control_bytes=self.control_bytes,
            drift_ppm=self.drift_ppm,
            hopping=self.hopping,
        )


@dataclass
class CsmaConfig:
    interval_ms: float | None = None  # None: calibrate on a 3-node chain
    payload_bytes: int = 50
    min_be: int = 3
    max_be: int = 5
    max_backoffs: int = 4
    unit_backoff_us: float = 320.0
    cca_threshold: float = -85.0
    queue_len: int = 16
    per_neighbor_len: int = 8
    processing_delay_us: float = 4500.0
    mac_header_bytes: int = 27
    lite_margin_db: float = 6.0
    trickle_i_min_ms: float = 125.0
    trickle_doublings: int = 8
    channel: int = 26

    def params(self) -> csma_rpl.CsmaParams:
        return csma_rpl.CsmaParams(
            min_be=self.min_be,
            max_be=self.max_be,
            max_backoffs=self.max_backoffs,
            unit_backoff=us(self.unit_backoff_us),
            cca_threshold=self.cca_threshold,
            queue_len=self.queue_len,
            per_neighbor_len=self.per_neighbor_len,
            processing_delay=us(self.processing_delay_us),
            mac_header_bytes=self.mac_header_bytes,
        )

    def trickle(self) -> csma_rpl.Trickle:
        return csma_rpl.Trickle(ms(self.trickle_i_min_ms), self.trickle_doublings)


@dataclass
class Scenario:
    name: str = "scenario"
    stack: Stack = Stack.ATOMIC
    phy: str = "ble500k"
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    atomic: AtomicConfig = field(default_factory=AtomicConfig)
    csma: CsmaConfig = field(default_factory=CsmaConfig)
    link: LinkBudget = field(default_factory=LinkBudget)
    reception: ReceptionParams = field(default_factory=ReceptionParams)
    firmware: FirmwareImage = field(default_factory=FirmwareImage)
    seeds: list = field(default_factory=lambda: [0])
    join_timeout_s: float = 120.0
    drain_timeout_s: float = 30.0
    ready_check_s: float = 1.0

    def __post_init__(self) -> None:
        self.stack = Stack(self.stack)

    @property
    def profile(self) -> phy.PhyProfile:
        return phy.get_profile(self.phy)

    def validate(self) -> None:
        try:
            profile = self.profile
        except (KeyError, ValueError) as exc:
            raise ScenarioError(str(exc)) from None
        if not self.seeds:
            raise ScenarioError("at least one seed is required")
        if self.join_timeout_s <= 0 or self.drain_timeout_s < 0:
            raise ScenarioError("timeouts must be positive")
        if self.topology.file is None and self.topology.preset not in topology.PRESETS:
            raise ScenarioError(f"unknown topology preset {self.topology.preset!r}")
        if self.stack.is_csma:
            if profile.name is not phy.PhyName.IEEE802154:
                raise ScenarioError("the CSMA/RPL stack runs on the 802.15.4 PHY only")
            try:
                self.csma.params()
            except ValueError as exc:
                raise ScenarioError(str(exc)) from None
            if self.csma.payload_bytes <= 0:
                raise ScenarioError("csma.payload_bytes must be positive")
            if self.csma.interval_ms is not None and self.csma.interval_ms <= 0:
                raise ScenarioError("csma.interval_ms must be positive")
            for ch in (self.csma.channel,):
                phy.Channel(ch)
        else:
            try:
                self.atomic.flood_config(profile)
                for ch in self.atomic.hop_channels:
                    phy.Channel(int(ch))
            except ValueError as exc:
                raise ScenarioError(str(exc)) from None
            if self.payload_bytes() <= 0:
                raise ScenarioError("atomic.payload_bytes must be positive")

    def payload_bytes(self) -> int:
        if self.stack.is_csma:
            return self.csma.payload_bytes
        if self.atomic.payload_bytes is not None:
            return self.atomic.payload_bytes
        return 121 if self.profile.family == "ieee802154" else 230

    # -- (de)serialisation ------------------------------------------------
    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stack"] = self.stack.value
        return d

    @classmethod
    def from_dict(cls, data: dict | None) -> Scenario:
        data = dict(data or {})
        sections = {
            "topology": TopologyConfig,
            "atomic": AtomicConfig,
            "csma": CsmaConfig,
            "link": LinkBudget,
            "reception": ReceptionParams,
            "firmware": FirmwareImage,
        }
        kwargs: dict[str, Any] = {}
        top = {f.name for f in dataclasses.fields(cls)}
        for key, value in data.items():
            if key not in top:
                raise ScenarioError(f"unknown config key {key!r}")
            if key in sections:
                kwargs[key] = _section(sections[key], key, value)
            else:
                kwargs[key] = value
        try:
            scn = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ScenarioError(str(exc)) from None
        if isinstance(scn.seeds, int):
            scn.seeds = [scn.seeds]
        scn.validate()
        return scn

    def with_overrides(self, overrides: dict) -> Scenario:
        """Copy with dotted-key overrides such as ``{"atomic.period_ms": 50}``."""
        d = self.to_dict()
        for key, value in overrides.items():
            node = d
            *path, last = key.split(".")
            for part in path:
                if part not in node or not isinstance(node[part], dict):
                    raise ScenarioError(f"unknown config key {key!r}")
                node = node[part]
            if last not in node and path[:1] != ["topology"]:
                raise ScenarioError(f"unknown config key {key!r}")
            node[last] = value
        return Scenario.from_dict(d)


def _section(kind, name: str, value) -> Any:
    if value is None:
        return kind()
    if not isinstance(value, dict):
        raise ScenarioError(f"section {name!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(kind)}
    extra = set(value) - known
    if extra:
        raise ScenarioError(f"unknown key(s) in {name!r}: {', '.join(sorted(extra))}")
    try:
        return kind(**value)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{name}: {exc}") from None


def load_scenario(path: str | Path) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if data is not None and not isinstance(data, dict):
        raise ScenarioError("config root must be a mapping")
    return Scenario.from_dict(data)


def dump_scenario(scn: Scenario, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(scn.to_dict(), fh, sort_keys=False)


# -- results -------------------------------------------------------------------

@dataclass
class KpiRecord:
    scenario: str
    stack: str
    phy: str
    seed: int
    period_ms: float | None
    mean_join_time: float | None  # seconds, over consumers that joined
    unreachable: int
    max_goodput: float | None  # bits/s
    mean_pdr: float
    reports: list[ConsumerReport] = field(default_factory=list)
    point: dict = field(default_factory=dict)
    error: str | None = None
    extra: dict = field(default_factory=dict)

    def consumers(self, side: str | None = None) -> list[ConsumerReport]:
        return [r for r in self.reports if side is None or r.side == side]


def aggregate(reports: list[ConsumerReport]) -> dict:
    """Summary KPIs as a pure fold over per-consumer reports."""
    joins = [r.joined_at for r in reports if r.joined_at is not None]
    goodputs = [r.goodput for r in reports if r.goodput is not None]
    return {
        "mean_join_time": math.fsum(joins) / len(joins) if joins else None,
        "unreachable": sum(1 for r in reports if r.joined_at is None),
        "max_goodput": max(goodputs) if goodputs else None,
        "mean_pdr": math.fsum(r.pdr for r in reports) / len(reports) if reports else 0.0,
    }


def side_summary(record: KpiRecord, side: str) -> dict:
    return aggregate(record.consumers(side))


def _record(scn: Scenario, seed: int, reports, period_ms, extra) -> KpiRecord:
    return KpiRecord(
        scenario=scn.name,
        stack=scn.stack.value,
        phy=scn.profile.name.value,
        seed=seed,
        period_ms=period_ms,
        reports=reports,
        extra=extra,
        **aggregate(reports),
    )


# -- runs ------------------------------------------------------------------------

def run_scenario(scn: Scenario, seed: int | None = None, trace: bool = False) -> KpiRecord:
    scn.validate()
    seed = scn.seeds[0] if seed is None else int(seed)
    topo = scn.topology.build()
    if scn.stack is Stack.ATOMIC:
        return _run_atomic(scn, topo, seed, trace)
    return _run_csma(scn, topo, seed, trace)


def _side(topo: Topology, node) -> str:
    return topo.side_of(node).value


def _run_atomic(scn: Scenario, topo: Topology, seed: int, trace: bool) -> KpiRecord:
    profile = scn.profile
    cfg = scn.atomic.flood_config(profile)
    engine = Engine(seed, trace=trace)
    net = atomic.AtomicNetwork(engine, topo, cfg, scn.link, scn.reception)
    packets = packetize(scn.firmware, scn.payload_bytes())
    consumers = [nd.id for nd in topo.consumers]
    joined_at_start: dict[int, bool] = {}

    def ready_check() -> None:
        if net._disseminating:
            return
        all_in = all(net.nodes[c].joined_at is not None for c in consumers)
        if all_in or engine.now >= seconds(scn.join_timeout_s):
            joined_at_start.update({c: net.nodes[c].joined_at is not None for c in consumers})
            net.begin_rollout(packets)
            return
        engine.after(seconds(scn.ready_check_s), ready_check, kind="ready-check")

    net.start()
    engine.schedule(seconds(scn.ready_check_s), ready_check, kind="ready-check")
    step = max(cfg.period, seconds(1))
    while not net.finished:
        engine.run_until(engine.now + step)
    # let the final period complete
    engine.run_until(engine.now + cfg.period)

    drops_before = {c: net.nodes[c].drops for c in consumers}
    reports = []
    for c in consumers:
        st = net.nodes[c]
        rep = finalize(net.states[c], len(packets), c)
        rep.joined_at = to_seconds(st.joined_at) if joined_at_start.get(c) else None
        rep.dropped = st.drops > 0 and rep.joined_at is not None
        rep.side = _side(topo, topo.nodes[c])
        reports.append(rep)
    extra = {
        "rollout_start_s": to_seconds(net.rollout_start or 0),
        "data_slots": atomic.data_slots(cfg),
        "drops": sum(drops_before.values()),
    }
    rec = _record(scn, seed, reports, scn.atomic.period_ms, extra)
    if trace:
        rec.extra["trace_hash"] = engine.trace_hash()
    return rec


def _run_csma(scn: Scenario, topo: Topology, seed: int, trace: bool) -> KpiRecord:
    profile = scn.profile
    params = scn.csma.params()
    interval_ms = scn.csma.interval_ms
    if interval_ms is None:
        interval_ms = calibrate_interval(scn, seed)
    engine = Engine(seed, trace=trace)
    variant = csma_rpl.Variant.LITE if scn.stack is Stack.LITE else csma_rpl.Variant.CLASSIC
    rpl, dispatch = csma_rpl.build_stack(
        engine,
        topo,
        profile,
        scn.link,
        scn.reception,
        params,
        variant,
        scn.csma.trickle(),
        scn.csma.lite_margin_db,
        scn.csma.channel,
    )
    packets = packetize(scn.firmware, scn.payload_bytes())
    consumers = [nd.id for nd in topo.consumers]
    diss: list[csma_rpl.CsmaDissemination] = []

    def ready_check() -> None:
        all_in = all(rpl.states[c].joined_at is not None for c in consumers)
        if all_in or engine.now >= seconds(scn.join_timeout_s):
            rpl.stop()
            csma_rpl.check_dodag(rpl.states)
            rpl.finalize_routes()
            d = csma_rpl.CsmaDissemination(rpl, scn.payload_bytes(), ms(interval_ms), params)
            dispatch.dissemination = d
            diss.append(d)
            d.start(packets, consumers)
            return
        engine.after(seconds(scn.ready_check_s), ready_check, kind="ready-check")

    rpl.start()
    engine.schedule(seconds(scn.ready_check_s), ready_check, kind="ready-check")
    while not diss or not diss[0].done_injecting:
        engine.run_until(engine.now + seconds(1))
    d = diss[0]
    drain_end = d.last_injection + seconds(scn.drain_timeout_s)
    while engine.now < drain_end and not d.idle():
        engine.run_until(min(engine.now + seconds(1), drain_end))

    reports = []
    for c in consumers:
        rep = finalize(d.states[c], len(packets), c)
        ja = rpl.states[c].joined_at
        rep.joined_at = to_seconds(ja) if ja is not None else None
        rep.side = _side(topo, topo.nodes[c])
        reports.append(rep)
    extra = {
        "interval_ms": interval_ms,
        "rollout_start_s": to_seconds(d.rollout_start),
        "frag_drops": d.frag_drops,
        "access_failures": d.copy_failures,
        "queue_overflows": sum(m.overflows for m in rpl.macs),
        "frames": rpl.medium.frames_sent,
    }
    rec = _record(scn, seed, reports, None, extra)
    rec.extra["rpl"] = [
        {"id": i, "rank": st.rank, "parent": st.parent, "joined_at": None if st.joined_at is None else to_seconds(st.joined_at)}
        for i, st in enumerate(rpl.states)
    ]
    if trace:
        rec.extra["trace_hash"] = engine.trace_hash()
    return rec


# -- CSMA interval calibration ------------------------------------------------------

def chain_pdr(scn: Scenario, interval_ms: float, seed: int = 0, n_packets: int = 100, spacing: float = 87.0) -> float:
    """Worst consumer PDR on a lossless 3-node chain at ``interval_ms``."""
    topo = topology.chain(3, spacing)
    sub = dataclasses.replace(
        scn,
        topology=TopologyConfig(preset=None),
        reception=phy.IDEAL,
        link=phy.CLEAR,
        firmware=FirmwareImage(size=n_packets * scn.payload_bytes(), content_seed=scn.firmware.content_seed),
        join_timeout_s=10.0,
        drain_timeout_s=2.0,
        csma=dataclasses.replace(scn.csma, interval_ms=interval_ms),
    )
    rec = _run_csma(sub, topo, seed, False)
    return min(r.pdr for r in rec.reports)


def calibrate_interval(
    scn: Scenario,
    seed: int = 0,
    lo_ms: float = 1.0,
    hi_ms: float = 200.0,
    resolution_ms: float = 0.5,
    n_packets: int = 100,
) -> float:
    """Smallest source interval with PDR 1 on a lossless 3-node chain,
    found by bisection."""
    if chain_pdr(scn, hi_ms, seed, n_packets) < 1.0:
        raise ScenarioError(f"no lossless interval found below {hi_ms} ms")
    while hi_ms - lo_ms > resolution_ms:
        mid = (lo_ms + hi_ms) / 2
        if chain_pdr(scn, mid, seed, n_packets) >= 1.0:
            hi_ms = mid
        else:
            lo_ms = mid
    return round(hi_ms, 3)


# -- sweeps ------------------------------------------------------------------------

@dataclass
class SweepGrid:
    axes: dict  # dotted key -> list of values
    repetitions: int = 1

    def __post_init__(self) -> None:
        if not self.axes or any(len(v) == 0 for v in self.axes.values()):
            raise ScenarioError("sweep axes must be non-empty")
        if self.repetitions < 1:
            raise ScenarioError("repetitions must be >= 1")

    def points(self) -> list[dict]:
        keys = list(self.axes)
        return [dict(zip(keys, combo)) for combo in itertools.product(*self.axes.values())]


def period_axis() -> list[float]:
    """Sweep of Atomic periods: 50..500 ms by 25, then 600..800 ms by 100."""
    return [float(p) for p in range(50, 501, 25)] + [600.0, 700.0, 800.0]


def _run_job(job) -> KpiRecord:
    index, point, seed, scn_dict = job
    try:
        scn = Scenario.from_dict(scn_dict)
        rec = run_scenario(scn, seed)
    except Exception as exc:  # recorded per point, the sweep carries on
        log.warning("run %s seed %s failed: %s", point, seed, exc)
        rec = KpiRecord(scn_dict.get("name", "scenario"), str(scn_dict.get("stack")), str(scn_dict.get("phy")), seed, None, None, 0, None, 0.0, error=f"{type(exc).__name__}: {exc}")
    rec.point = dict(point)
    rec.extra["point_index"] = index
    return rec


def run_sweep(template: Scenario, grid: SweepGrid, parallel: int = 1, order: list[int] | None = None) -> list[KpiRecord]:
    """Run every grid point for every seed. Results come back sorted by
    (point, seed) whatever the execution order."""
    jobs = []
    for index, point in enumerate(grid.points()):
        try:
            scn_dict = template.with_overrides(point).to_dict()
        except ScenarioError as exc:
            raise ScenarioError(f"grid point {point}: {exc}") from None
        seeds = list(template.seeds)
        if grid.repetitions > 1:
            seeds = [s + r * 1_000_003 for s in seeds for r in range(grid.repetitions)]
        for seed in seeds:
            jobs.append((index, point, seed, scn_dict))
    if order is not None:
        jobs = [jobs[i] for i in order]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]
    results.sort(key=lambda r: (r.extra["point_index"], r.seed))
    return results
