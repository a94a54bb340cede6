"""Radio layer: PHY profiles, airtime, link budget and reception resolution.

Powers are in dBm unless a name ends in ``_mw``. Reception works on mean
powers from the link table; an optional per-reception Rayleigh draw models
fast fading on top of the mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Sequence

import numpy as np

from .engine import S, stream
from .topology import Topology


class PhyName(str, Enum):
    BLE_2M = "ble2m"
    BLE_1M = "ble1m"
    BLE_500K = "ble500k"
    BLE_125K = "ble125k"
    IEEE802154 = "ieee802154"


class FragmentationError(ValueError):
    """Payload does not fit in a single frame."""


@dataclass(frozen=True)
class PhyProfile:
    name: PhyName
    bitrate: int
    mtu: int
    frame_overhead: int
    base_sensitivity: float
    symbol_time: int  # ns

    @property
    def family(self) -> str:
        return "ieee802154" if self.name is PhyName.IEEE802154 else "ble"

    def with_(self, **changes) -> PhyProfile:
        return PhyProfile(**{**self.__dict__, **changes})


PROFILES: dict[PhyName, PhyProfile] = {
    PhyName.BLE_2M: PhyProfile(PhyName.BLE_2M, 2_000_000, 256, 10, -93.0, 500),
    PhyName.BLE_1M: PhyProfile(PhyName.BLE_1M, 1_000_000, 256, 10, -96.0, 1_000),
    PhyName.BLE_500K: PhyProfile(PhyName.BLE_500K, 500_000, 256, 22, -101.0, 2_000),
    PhyName.BLE_125K: PhyProfile(PhyName.BLE_125K, 125_000, 256, 22, -103.0, 8_000),
    PhyName.IEEE802154: PhyProfile(PhyName.IEEE802154, 250_000, 127, 6, -100.0, 16_000),
}

_ALIASES = {
    "2m": PhyName.BLE_2M,
    "1m": PhyName.BLE_1M,
    "500k": PhyName.BLE_500K,
    "125k": PhyName.BLE_125K,
    "802.15.4": PhyName.IEEE802154,
    "802154": PhyName.IEEE802154,
    "250k": PhyName.IEEE802154,
}


def get_profile(name: str | PhyName) -> PhyProfile:
    if isinstance(name, PhyName):
        return PROFILES[name]
    key = name.lower().replace("_", "").replace("-", "")
    for phy in PhyName:
        if phy.value == key:
            return PROFILES[phy]
    if key in _ALIASES:
        return PROFILES[_ALIASES[key]]
    raise ValueError(f"unknown PHY {name!r}")


def airtime(profile: PhyProfile, nbytes: int) -> int:
    """On-air duration in ns of a frame carrying ``nbytes`` of MAC payload."""
    if nbytes <= 0:
        raise ValueError("frame must carry at least one byte")
    if nbytes > profile.mtu:
        raise FragmentationError(
            f"{nbytes} B exceeds the {profile.mtu} B MTU of {profile.name.value}"
        )
    return round((profile.frame_overhead + nbytes) * 8 * S / profile.bitrate)


# -- channels ----------------------------------------------------------------

@dataclass(frozen=True)
class Channel:
    index: int

    def __post_init__(self) -> None:
        if not 11 <= self.index <= 26:
            raise ValueError(f"channel {self.index} outside 11..26")

    @property
    def center_freq(self) -> float:
        return 2405.0 + 5.0 * (self.index - 11)


# -- link budget -------------------------------------------------------------

@dataclass(frozen=True)
class LinkBudget:
    tx_power: float = 0.0
    fem_tx_gain: float = 22.0
    fem_rx_gain: float = 6.0
    path_loss_exponent: float = 2.9
    pl0_at_1m: float = 40.0
    noise_floor: float = -120.0
    # static per-link log-normal shadowing (symmetric)
    shadowing_sigma_db: float = 0.0
    # per-node installation loss: a fraction of nodes is obstructed by
    # U(obstruction_min_db, obstruction_max_db) on every link they use
    obstruction_fraction: float = 0.10
    obstruction_min_db: float = 24.0
    obstruction_max_db: float = 38.0

    def __post_init__(self) -> None:
        if self.fem_tx_gain < 0 or self.fem_rx_gain < 0:
            raise ValueError("FEM gains must be non-negative")
        if not 1.6 <= self.path_loss_exponent <= 6.0:
            raise ValueError("path-loss exponent must lie in [1.6, 6]")
        if not 0.0 <= self.obstruction_fraction <= 1.0:
            raise ValueError("obstruction_fraction must lie in [0, 1]")
        if self.obstruction_max_db < self.obstruction_min_db:
            raise ValueError("obstruction_max_db < obstruction_min_db")


@dataclass(frozen=True)
class ReceptionParams:
    capture_threshold_db: float = 3.0
    sync_tolerance_symbols: float = 0.5
    fade_loss_prob: float = 0.02
    fading: str = "rayleigh"  # or "none"

    def __post_init__(self) -> None:
        if self.fading not in ("rayleigh", "none"):
            raise ValueError(f"unknown fading model {self.fading!r}")
        if not 0.0 <= self.fade_loss_prob < 1.0:
            raise ValueError("fade_loss_prob must lie in [0, 1)")

    def sync_tolerance(self, profile: PhyProfile) -> float:
        return self.sync_tolerance_symbols * profile.symbol_time


IDEAL = ReceptionParams(fade_loss_prob=0.0, fading="none")
CLEAR = LinkBudget(obstruction_fraction=0.0)  # free-space-like street, no obstructed posts


def path_loss(distance: float, budget: LinkBudget) -> float:
    d = max(float(distance), 1.0)
    return budget.pl0_at_1m + 10.0 * budget.path_loss_exponent * math.log10(d)


def rx_power(sender_pos, receiver_pos, budget: LinkBudget) -> float:
    d = math.dist(sender_pos, receiver_pos)
    return budget.tx_power + budget.fem_tx_gain - path_loss(d, budget)


def threshold(profile: PhyProfile, budget: LinkBudget) -> float:
    return profile.base_sensitivity - budget.fem_rx_gain


def decodable(power: float, profile: PhyProfile, budget: LinkBudget) -> bool:
    return power >= threshold(profile, budget)


def max_range(profile: PhyProfile, budget: LinkBudget) -> float:
    """Distance at which the mean received power meets the threshold."""
    margin = budget.tx_power + budget.fem_tx_gain - threshold(profile, budget)
    return 10 ** ((margin - budget.pl0_at_1m) / (10 * budget.path_loss_exponent))


def dbm_to_mw(p):
    return np.power(10.0, np.asarray(p) / 10.0)


def mw_to_dbm(p):
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(p)


def success_prob(margin_db, params: ReceptionParams):
    """Probability that one frame with the given mean margin is delivered."""
    margin_db = np.asarray(margin_db, dtype=float)
    keep = 1.0 - params.fade_loss_prob
    if params.fading == "none":
        return np.where(margin_db >= 0.0, keep, 0.0)
    return keep * np.exp(-np.power(10.0, -margin_db / 10.0))


def fade_db(rng: np.random.Generator, params: ReceptionParams, size=None):
    """Instantaneous power offset in dB (0 when fading is off)."""
    e = rng.exponential(1.0, size)
    if params.fading == "none":
        return np.zeros(size) if size is not None else 0.0
    return 10.0 * np.log10(np.maximum(e, 1e-300))


def link_table(topo: Topology, budget: LinkBudget, seed: int = 0) -> np.ndarray:
    """Mean received power in dBm for every ordered pair; diagonal is -inf.

    Shadowing and obstruction draws come from their own streams so changing
    one does not move the other.
    """
    pos = topo.positions()
    n = len(pos)
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.maximum(np.hypot(diff[..., 0], diff[..., 1]), 1.0)
    table = (
        budget.tx_power
        + budget.fem_tx_gain
        - (budget.pl0_at_1m + 10.0 * budget.path_loss_exponent * np.log10(dist))
    )
    if budget.shadowing_sigma_db > 0:
        g = stream(seed, "shadowing")
        sh = g.normal(0.0, budget.shadowing_sigma_db, size=(n, n))
        sh = np.triu(sh, 1)
        table = table - (sh + sh.T)
    loss = node_losses(topo, budget, seed)
    table = table - loss[:, None] - loss[None, :]
    indoor = np.array([nd.indoor for nd in topo.nodes])
    table[indoor, :] = -np.inf
    table[:, indoor] = -np.inf
    np.fill_diagonal(table, -np.inf)
    return table


def node_losses(topo: Topology, budget: LinkBudget, seed: int = 0) -> np.ndarray:
    loss = np.zeros(len(topo))
    if budget.obstruction_fraction <= 0 or budget.obstruction_max_db <= 0:
        return loss
    # a side subset keeps the ids of the layout it was cut from, so both see
    # the same obstructed lampposts
    origin = topo.params.get("parent_ids") or [nd.id for nd in topo.nodes]
    for i, nd in enumerate(topo.nodes):
        g = stream(seed, "obstruction", origin[i])
        hit, level = g.random(), g.uniform(budget.obstruction_min_db, budget.obstruction_max_db)
        if hit < budget.obstruction_fraction and nd.role.value != "source":
            loss[i] = level
    return loss


# -- transmissions and reception ---------------------------------------------

@dataclass(eq=False)
class Transmission:
    sender: int
    channel: int
    start: int
    airtime: int
    powers: Any  # row of the link table for ``sender`` (dBm per receiver)
    payload: Any = None
    flood_id: Any = None

    @property
    def end(self) -> int:
        return self.start + self.airtime

    def rx_power_at(self, receiver: int) -> float:
        return float(self.powers[receiver])

    def overlaps(self, other: Transmission) -> bool:
        return self.start < other.end and other.start < self.end


@dataclass(frozen=True)
class Interferer:
    """On/off interference on one channel, seen at the same power everywhere."""

    channel: int
    period: int
    duty: float
    power: float
    phase: int = 0

    def active(self, t: int) -> bool:
        if self.duty >= 1.0:
            return True
        if self.duty <= 0.0:
            return False
        return ((t - self.phase) % self.period) < self.duty * self.period

    def power_mw(self, channel: int, t: int) -> float:
        if channel != self.channel or not self.active(t):
            return 0.0
        return float(dbm_to_mw(self.power))


def _linear_sum(powers: Sequence[float]) -> float:
    return float(sum(10.0 ** (p / 10.0) for p in powers if p > -math.inf))


def resolve_reception(
    receiver: int,
    overlapping: Sequence[Transmission],
    mode: str,
    rng: np.random.Generator,
    profile: PhyProfile,
    budget: LinkBudget,
    params: ReceptionParams,
    interference_mw: float = 0.0,
) -> list[bool]:
    """Decide which of the overlapping frames the receiver decodes.

    Returns one flag per transmission. At most one payload is decoded. Two
    random values are always drawn (fast fade, then fade loss) so Capture and
    Constructive resolutions of the same input consume the stream identically.
    """
    n = len(overlapping)
    if n == 0:
        return []
    fade = float(fade_db(rng, params))
    lost_draw = float(rng.random())
    powers = [t.rx_power_at(receiver) for t in overlapping]
    noise_mw = float(dbm_to_mw(budget.noise_floor)) + interference_mw
    thr_lin = 10.0 ** (params.capture_threshold_db / 10.0)

    if mode == "capture":
        best = max(range(n), key=lambda i: powers[i])
        members = [best]
    elif mode == "constructive":
        members = _strongest_group(overlapping, powers, params.sync_tolerance(profile))
    else:
        raise ValueError(f"unknown reception mode {mode!r}")

    signal_mw = _linear_sum([powers[i] for i in members])
    others_mw = _linear_sum([p for i, p in enumerate(powers) if i not in members])
    out = [False] * n
    if signal_mw <= 0:
        return out
    signal_dbm = 10.0 * math.log10(signal_mw)
    ok = (
        decodable(signal_dbm + fade, profile, budget)
        and signal_mw >= (noise_mw + others_mw) * thr_lin
        and lost_draw >= params.fade_loss_prob
    )
    if ok:
        for i in members:
            out[i] = True
    return out


def _strongest_group(txs, powers, tolerance: float) -> list[int]:
    """Indices of the same-flood, time-aligned cluster with the largest
    combined power. Frames without a flood id form singleton groups."""
    groups: dict[Any, list[int]] = {}
    for i, t in enumerate(txs):
        key = ("solo", i) if t.flood_id is None else ("flood", t.flood_id)
        groups.setdefault(key, []).append(i)
    best: list[int] = []
    best_mw = -1.0
    for idx in groups.values():
        anchor = max(idx, key=lambda i: powers[i])
        t0 = txs[anchor].start
        cluster = [i for i in idx if abs(txs[i].start - t0) <= tolerance]
        mw = _linear_sum([powers[i] for i in cluster])
        if mw > best_mw:
            best, best_mw = cluster, mw
    return best


def channel_clear(
    sensed_mw: float,
    cca_threshold: float,
) -> bool:
    """Energy-detect CCA: clear iff the sensed in-band power is below threshold."""
    if sensed_mw <= 0:
        return True
    return 10.0 * math.log10(sensed_mw) < cca_threshold
