from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from meshroll.engine import Engine, SchedulingError, counter_uniform, ms, seconds, stream


def test_handler_sees_exact_fire_time():
    eng = Engine()
    seen = []
    eng.schedule(seconds(5), lambda: seen.append(eng.now))
    eng.run_until(seconds(10))
    assert seen == [5_000_000_000]


def test_equal_timestamps_dispatch_in_insertion_order():
    eng = Engine()
    order = []
    for tag in "abc":
        eng.schedule(100, order.append, tag)
    eng.run_until(100)
    assert order == ["a", "b", "c"]


def test_cancelled_event_never_fires():
    eng = Engine()
    fired = []
    h = eng.schedule(10, lambda: fired.append(1))
    eng.cancel(h)
    stats = eng.run_until(20)
    assert fired == [] and stats.dispatched == 0


def test_scheduling_in_the_past_is_an_error():
    eng = Engine()
    eng.run_until(50)
    with pytest.raises(SchedulingError):
        eng.schedule(49, lambda: None)


def test_empty_queue_advances_clock():
    stats = Engine().run_until(seconds(1))
    assert stats.dispatched == 0 and stats.clock == seconds(1)


def test_run_until_boundary_is_inclusive():
    eng = Engine()
    for s in (1, 2, 3):
        eng.schedule(seconds(s), lambda: None)
    assert eng.run_until(seconds(2)).dispatched == 2
    assert eng.pending == 1


def test_rng_lookup_is_idempotent_and_label_separated():
    eng = Engine(seed=7)
    assert eng.rng("backoff") is eng.rng("backoff")
    a = stream(7, "backoff").random(64)
    b = stream(7, "drift").random(64)
    c = stream(8, "backoff").random(64)
    assert not np.allclose(a, b) and not np.allclose(a, c)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.4


def test_stream_does_not_depend_on_other_streams():
    e1, e2 = Engine(3), Engine(3)
    e2.rng("other").random(1000)
    assert e1.rng("x", 4).random() == e2.rng("x", 4).random()


def test_counter_uniform_is_length_independent():
    a = counter_uniform(1, "fade", 3, np.arange(10, dtype=np.uint64))
    b = counter_uniform(1, "fade", 3, np.arange(4, dtype=np.uint64))
    assert np.array_equal(a[:4], b)
    assert ((a >= 0) & (a < 1)).all()


def test_counter_uniform_is_roughly_uniform():
    u = counter_uniform(9, "u", np.arange(20000, dtype=np.uint64))
    assert abs(u.mean() - 0.5) < 0.01
    assert abs(np.var(u) - 1 / 12) < 0.003


def _random_run(seed: int, times: list[int]) -> tuple[list, str]:
    eng = Engine(seed, trace=True)
    log = []

    def handler(tag):
        log.append((eng.now, tag))
        if tag % 3 == 0:
            eng.after(int(eng.rng("h").integers(0, 50)), handler, tag + 1000)

    for i, t in enumerate(times):
        eng.schedule(t, handler, i)
    eng.run_until(10_000)
    return log, eng.trace_hash()


@given(st.integers(0, 2**32), st.lists(st.integers(0, 5000), max_size=40))
def test_random_batches_replay_identically_and_clock_is_monotone(seed, times):
    log1, h1 = _random_run(seed, times)
    log2, h2 = _random_run(seed, times)
    assert log1 == log2 and h1 == h2
    stamps = [t for t, _ in log1]
    assert stamps == sorted(stamps)


def test_trace_dump_has_one_line_per_dispatch(tmp_path):
    eng = Engine(trace=True)
    eng.schedule(ms(1), lambda: None, kind="tick")
    eng.schedule(ms(2), lambda: None, kind="tock")
    eng.run_until(ms(3))
    path = tmp_path / "trace.txt"
    eng.dump_trace(path)
    lines = path.read_text().splitlines()
    assert len(lines) == 2 and lines[0].startswith("1000000 ") and lines[1].endswith("tock")
