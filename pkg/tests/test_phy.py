from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from meshroll import phy
from meshroll.engine import stream
from meshroll.phy import IDEAL, FragmentationError, LinkBudget, ReceptionParams, Transmission

PURE = LinkBudget(obstruction_fraction=0.0)


def test_airtime_examples():
    assert phy.airtime(phy.get_profile("ieee802154"), 127) == 4_256_000
    assert phy.airtime(phy.get_profile("ble2m"), 256) == 1_064_000
    with pytest.raises(FragmentationError):
        phy.airtime(phy.get_profile("ble2m"), 300)


@pytest.mark.parametrize("name", [p.value for p in phy.PhyName])
def test_airtime_slope_is_8_over_bitrate(name):
    prof = phy.get_profile(name)
    d = phy.airtime(prof, 101) - phy.airtime(prof, 100)
    assert d == pytest.approx(8e9 / prof.bitrate, abs=1)


def test_profile_table():
    rates = {p.bitrate for p in phy.PROFILES.values()}
    assert rates == {2_000_000, 1_000_000, 500_000, 125_000, 250_000}
    assert all(p.mtu == (127 if p.family == "ieee802154" else 256) for p in phy.PROFILES.values())


def test_path_loss_reference_points():
    assert phy.path_loss(1.0, PURE) == 40.0
    assert phy.path_loss(0.0, PURE) == 40.0  # clamped
    # independent: 40 + 10 * 2.9 * log10(87)
    assert phy.path_loss(87, PURE) == pytest.approx(40 + 29 * math.log10(87))
    assert round(phy.path_loss(87, PURE), 1) == 96.2 or round(phy.path_loss(87, PURE), 1) == 96.3
    assert phy.path_loss(100, PURE) - phy.path_loss(10, PURE) == pytest.approx(29.0)


def test_rx_power_at_87m():
    assert phy.rx_power((0, 0), (87, 0), PURE) == pytest.approx(-74.3, abs=0.06)
    off = LinkBudget(fem_tx_gain=0, obstruction_fraction=0)
    assert phy.rx_power((0, 0), (1, 0), off) == -40.0


def test_fem_gain_shift_preserves_argmax():
    pts = [(50, 0), (120, 0), (80, 30)]
    a = [phy.rx_power((0, 0), p, PURE) for p in pts]
    b = [phy.rx_power((0, 0), p, LinkBudget(fem_tx_gain=44, obstruction_fraction=0)) for p in pts]
    assert np.argmax(a) == np.argmax(b)
    assert np.allclose(np.subtract(b, a), 22.0)


def test_decodable_threshold():
    ble1m = phy.get_profile("ble1m")
    assert phy.decodable(-99.0, ble1m, PURE)
    assert phy.decodable(-102.0, ble1m, PURE)
    assert not phy.decodable(-102.01, ble1m, PURE)
    assert phy.threshold(ble1m, LinkBudget(fem_rx_gain=0)) == -96.0


@given(st.floats(-130, -50), st.floats(0, 10))
def test_decodable_is_monotone(p, delta):
    prof = phy.get_profile("ble500k")
    if phy.decodable(p, prof, PURE):
        assert phy.decodable(p + delta, prof, PURE)


def test_fem_more_than_doubles_range():
    prof = phy.get_profile("ieee802154")
    off = LinkBudget(fem_tx_gain=0, fem_rx_gain=0)
    assert phy.max_range(prof, PURE) / phy.max_range(prof, off) > 2
    # 28 dB of budget over 29 dB/decade
    assert phy.max_range(prof, PURE) / phy.max_range(prof, off) == pytest.approx(10 ** (28 / 29))


def _tx(power, start=0, flood=None, sender=1):
    return Transmission(sender=sender, channel=26, start=start, airtime=1000, powers={0: power}, flood_id=flood)


def _resolve(txs, mode, params=IDEAL, profile="ble1m", seed=0):
    return phy.resolve_reception(0, txs, mode, stream(seed, "t"), phy.get_profile(profile), PURE, params)


def test_single_frame_above_sensitivity_decodes():
    assert _resolve([_tx(-80)], "capture") == [True]
    assert _resolve([], "capture") == []


def test_equal_power_different_payloads_both_lost():
    assert _resolve([_tx(-70, sender=1), _tx(-70, sender=2)], "capture") == [False, False]
    assert _resolve([_tx(-70, sender=1), _tx(-70, sender=2)], "constructive") == [False, False]


def test_constructive_sum_of_two_weak_copies():
    combined = 10 * math.log10(2 * 10 ** (-10.5))
    assert combined == pytest.approx(-101.99, abs=0.005)
    pair = [_tx(-105, flood="f", sender=1), _tx(-105, flood="f", sender=2)]
    assert _resolve(pair, "constructive") == [True, True]
    assert _resolve(pair, "capture") == [False, False]


def test_misaligned_copies_do_not_combine():
    tol = IDEAL.sync_tolerance(phy.get_profile("ble1m"))
    pair = [_tx(-105, 0, "f", 1), _tx(-105, int(tol) + 10, "f", 2)]
    assert _resolve(pair, "constructive") == [False, False]


def test_capture_threshold_boundary():
    strong, weak = _tx(-70, sender=1), _tx(-73.5, sender=2)
    assert _resolve([strong, weak], "capture") == [True, False]
    assert _resolve([strong, _tx(-72, sender=2)], "capture") == [False, False]


def test_fade_loss_rate_matches_probability():
    params = ReceptionParams(fade_loss_prob=0.2, fading="none")
    g = stream(1, "loss")
    prof = phy.get_profile("ble1m")
    hits = sum(phy.resolve_reception(0, [_tx(-60)], "capture", g, prof, PURE, params)[0] for _ in range(4000))
    assert hits / 4000 == pytest.approx(0.8, abs=0.02)


def test_success_prob_matches_monte_carlo():
    params = ReceptionParams()
    prof = phy.get_profile("ble1m")
    g = stream(2, "mc")
    margin = 3.0
    p = phy.threshold(prof, PURE) + margin
    hits = sum(phy.resolve_reception(0, [_tx(p)], "capture", g, prof, PURE, params)[0] for _ in range(6000))
    assert hits / 6000 == pytest.approx(float(phy.success_prob(margin, params)), abs=0.02)


def test_channel_clear():
    assert phy.channel_clear(0.0, -75)
    assert not phy.channel_clear(float(phy.dbm_to_mw(-60)), -75)


def test_interferer_duty_cycle():
    i = phy.Interferer(channel=26, period=1000, duty=0.25, power=-50)
    assert i.active(0) and not i.active(500)
    assert i.power_mw(25, 0) == 0.0
    assert phy.Interferer(26, 1000, 1.0, -50).active(999_999)


def test_link_table_properties():
    from meshroll import topology as tp

    topo = tp.generate_umbrella(n_east=20, n_west=20)
    t = phy.link_table(topo, LinkBudget(shadowing_sigma_db=4.0), seed=3)
    assert np.all(np.isneginf(np.diag(t)))
    assert np.allclose(t[np.isfinite(t)], t.T[np.isfinite(t)])
    clean = phy.link_table(topo, PURE)
    assert clean[0, 1] == pytest.approx(phy.rx_power(topo.nodes[0].position, topo.nodes[1].position, PURE))


def test_obstruction_is_shared_by_a_side_subset():
    from meshroll import topology as tp

    full = tp.generate_umbrella()
    east = tp.side_filter(full, "east")
    b = LinkBudget()
    lf, le = phy.node_losses(full, b, 5), phy.node_losses(east, b, 5)
    assert np.array_equal(lf[:76], le)
    assert lf[0] == 0.0
    frac = np.mean([np.mean(phy.node_losses(full, b, s)[1:] > 0) for s in range(20)])
    assert frac == pytest.approx(b.obstruction_fraction, abs=0.02)
