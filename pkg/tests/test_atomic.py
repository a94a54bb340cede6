from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from meshroll import phy, topology
from meshroll.atomic import (
    AtomicNetwork,
    FloodConfig,
    RxModel,
    channel_for,
    control_slots,
    data_slots,
    run_flood,
)
from meshroll.engine import Engine, ms, us
from meshroll.phy import CLEAR, IDEAL, ReceptionParams
from meshroll.rollout import FirmwareImage, packetize
from oracles import brute_force_flood

BLE2M = phy.get_profile("ble2m")


def _config(max_tx=3, max_slots=7, **kw) -> FloodConfig:
    return FloodConfig(period=ms(kw.pop("period_ms", 100)), profile=BLE2M, max_tx=max_tx, max_slots=max_slots, **kw)


def _rx_from_adjacency(adj: np.ndarray, params=IDEAL, seed=0) -> RxModel:
    table = np.where(adj, -60.0, -np.inf)
    return RxModel.build(table, BLE2M, CLEAR, params, seed)


def _chain_adj(n: int) -> np.ndarray:
    adj = np.zeros((n, n), dtype=bool)
    for i in range(n - 1):
        adj[i, i + 1] = adj[i + 1, i] = True
    return adj


@pytest.mark.parametrize("max_tx", [1, 2, 3])
@pytest.mark.parametrize("max_slots", range(3, 11))
def test_lossless_chain_matches_brute_force(max_tx, max_slots):
    n = 12
    adj = _chain_adj(n)
    cfg = _config(max_tx, max_slots)
    res = run_flood(0, cfg, _rx_from_adjacency(adj), max_slots)
    ones = [True] * n
    first, _ = brute_force_flood(adj, 0, max_tx, max_slots, ones, ones)
    assert res.first_rx_slot.tolist() == first
    # on a lossless chain hop k decodes in slot k - 1
    reached = [k for k in range(1, n) if first[k] >= 0]
    assert reached == list(range(1, min(n - 1, max_slots) + 1))


@st.composite
def random_graphs(draw):
    n = draw(st.integers(2, 10))
    bits = draw(st.lists(st.booleans(), min_size=n * n, max_size=n * n))
    adj = np.array(bits, dtype=bool).reshape(n, n)
    adj = adj | adj.T
    np.fill_diagonal(adj, False)
    listening = np.array(draw(st.lists(st.booleans(), min_size=n, max_size=n)))
    relaying = np.array(draw(st.lists(st.booleans(), min_size=n, max_size=n)))
    return adj, listening, relaying


@given(random_graphs(), st.integers(1, 4), st.integers(1, 10))
def test_random_graphs_match_brute_force(graph, max_tx, max_slots):
    adj, listening, relaying = graph
    cfg = _config(max_tx, max_slots)
    res = run_flood(0, cfg, _rx_from_adjacency(adj), max_slots, listening=listening.copy(), relaying=relaying.copy())
    first, sent = brute_force_flood(adj.tolist(), 0, max_tx, max_slots, listening.tolist(), relaying.tolist())
    assert res.first_rx_slot.tolist() == first
    assert res.tx_slots.tolist() == [len(s) for s in sent]


@given(random_graphs(), st.integers(1, 4), st.integers(1, 10))
def test_transmit_slots_stay_in_window(graph, max_tx, max_slots):
    adj, _, _ = graph
    res = run_flood(0, _config(max_tx, max_slots), _rx_from_adjacency(adj), max_slots)
    for s, mask in enumerate(res.tx_by_slot):
        for v in np.flatnonzero(mask):
            if v == 0:
                assert 0 <= s <= max_tx - 1
            else:
                assert 1 <= s <= max_slots - 1
                assert res.first_rx_slot[v] < s <= res.first_rx_slot[v] + max_tx
    assert res.tx_slots[1:].max(initial=0) <= max_tx


@given(random_graphs(), st.integers(1, 3), st.integers(1, 10))
def test_reach_is_monotone_in_max_tx(graph, max_tx, max_slots):
    adj, _, _ = graph
    rx = _rx_from_adjacency(adj)
    lo = run_flood(0, _config(max_tx, max_slots), rx, max_slots).reached()
    hi = run_flood(0, _config(max_tx + 1, max_slots), rx, max_slots).reached()
    assert lo <= hi


def test_ten_hop_chain_with_seven_slots():
    adj = _chain_adj(11)
    res = run_flood(0, _config(3, 7), _rx_from_adjacency(adj), 7)
    assert res.reached() == set(range(1, 8))


@pytest.mark.parametrize("max_tx", [1, 2, 3])
def test_single_lossy_link_reach_probability(max_tx):
    p = 0.3
    params = ReceptionParams(fade_loss_prob=p, fading="none")
    rx = _rx_from_adjacency(_chain_adj(2), params, seed=7)
    cfg = _config(max_tx, 8)
    trials = 4000
    hits = sum(1 in run_flood(0, cfg, rx, 8, counters=(t, 0)).reached() for t in range(trials))
    expect = 1 - p**max_tx
    sigma = math.sqrt(expect * (1 - expect) / trials)
    assert abs(hits / trials - expect) <= 4 * sigma + 1e-9


def drop_probability(p_decode: float, limit: int, periods: int) -> float:
    """P(at least one desync drop within ``periods`` control floods).

    States: unjoined, synced with r consecutive misses (0..limit), dropped.
    """
    unjoined = 1.0
    runs = np.zeros(limit + 1)
    dropped = 0.0
    for _ in range(periods):
        nxt = np.zeros_like(runs)
        nxt[0] = unjoined * p_decode + runs.sum() * p_decode
        nxt[1:] = runs[:-1] * (1 - p_decode)
        dropped += runs[-1] * (1 - p_decode)
        unjoined *= 1 - p_decode
        runs = nxt
    return dropped


def test_drop_probability_oracle_shape():
    # a node that never misses cannot drop; one that always misses after
    # joining drops as soon as the streak exceeds the limit
    assert drop_probability(1.0, 16, 100) == 0.0
    assert drop_probability(0.5, 16, 17) == 0.0
    # rare-event regime: about (periods - limit) * p * q**(limit + 1)
    approx = (446 - 17) * 0.5 * 0.5**17
    assert drop_probability(0.5, 16, 446) == pytest.approx(approx, rel=0.05)


def _two_node_net(seed: int, desync_limit: int) -> AtomicNetwork:
    topo = topology.chain(2, 10.0)
    cfg = FloodConfig(period=ms(50), profile=BLE2M, max_tx=1, max_slots=4, desync_limit=desync_limit, drift_ppm=0.0)
    table = np.array([[-np.inf, -60.0], [-60.0, -np.inf]])
    params = ReceptionParams(fade_loss_prob=0.5, fading="none")
    return AtomicNetwork(Engine(seed), topo, cfg, CLEAR, params, table=table)


def test_desync_drop_rate_matches_geometric_oracle():
    limit, periods, trials = 3, 20, 600
    drops = 0
    for seed in range(trials):
        net = _two_node_net(seed, limit)
        for _ in range(periods):
            net.run_period()
        drops += net.nodes[1].drops > 0
    expect = drop_probability(0.5, limit, periods)
    sigma = math.sqrt(expect * (1 - expect) / trials)
    assert abs(drops / trials - expect) <= 4 * sigma


def test_dropped_node_recovers_on_next_decode():
    for seed in range(200):
        net = _two_node_net(seed, 2)
        states = []
        for _ in range(40):
            ctrl, _ = net.run_period()
            states.append((net.nodes[1].dropped, bool(ctrl.first_rx_slot[1] >= 0)))
        for (was_dropped, _), (now_dropped, got) in zip(states, states[1:]):
            if was_dropped and got:
                assert not now_dropped
                return
    pytest.fail("no drop-and-recover sequence observed")


def test_lab_square_joins_in_first_period():
    eng = Engine(0)
    topo = topology.lab_square()
    cfg = FloodConfig(period=ms(50), profile=BLE2M)
    net = AtomicNetwork(eng, topo, cfg, CLEAR, IDEAL)
    net.run_period()
    assert net.joined().all()
    assert all(st.joined_at < ms(50) for st in net.nodes)


def test_disconnected_node_never_joins():
    topo = topology.Topology(
        [
            topology.NodeSpec(0, 0, 0, topology.Role.SOURCE),
            topology.NodeSpec(1, 20, 0),
            topology.NodeSpec(2, 1e6, 0),
        ]
    )
    net = AtomicNetwork(Engine(1), topo, FloodConfig(period=ms(50), profile=BLE2M), CLEAR, IDEAL)
    for _ in range(30):
        net.run_period()
    assert net.joined().tolist() == [True, True, False]


def test_lossless_lab_delivers_every_packet():
    topo = topology.lab_square()
    cfg = FloodConfig(period=ms(20), profile=BLE2M)
    eng = Engine(3)
    net = AtomicNetwork(eng, topo, cfg, CLEAR, IDEAL)
    pkts = packetize(FirmwareImage(size=5000), 230)
    net.begin_rollout(pkts)
    net.start()
    eng.run_until(ms(20) * (len(pkts) + 2))
    assert net.finished
    for st_ in net.states.values():
        assert len(st_.received_ids) == len(pkts)
        assert not st_.lost_ids


def test_channel_for():
    cfg = _config(hop_channels=(11, 15, 20))
    assert [channel_for(p, 0, cfg) for p in range(4)] == [11, 15, 20, 11]
    assert channel_for(1, 5, cfg) == 15
    slot = _config(hop_channels=(11, 15, 20), hopping="slot")
    assert [channel_for(0, s, slot) for s in range(4)] == [11, 15, 20, 11]
    assert channel_for(1, 1, slot) == 20


def test_config_validation():
    with pytest.raises(ValueError):
        _config(max_tx=0)
    with pytest.raises(ValueError):
        _config(max_slots=0)
    with pytest.raises(ValueError):
        _config(hop_channels=())
    with pytest.raises(ValueError):
        _config(hopping="random")
    with pytest.raises(ValueError, match="cannot hold"):
        FloodConfig(period=us(500), profile=BLE2M)


def test_data_slots_limited_by_period():
    big = _config(max_slots=8, period_ms=250)
    assert data_slots(big) == 8
    small = FloodConfig(period=ms(50), profile=phy.get_profile("ble125k"), max_tx=16, max_slots=8)
    assert 1 <= data_slots(small) < 8
    assert control_slots(small) == small.sync_slots + small.max_slots
