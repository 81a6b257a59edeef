import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ivdrip import dripcount as dc
from helpers import reference_count


def obs(t, s, detected=True, cell=(4, 4)):
    return dc.DropObservation(float(t), detected, s, cell, 0.9 if detected else 0.1)


def run_counter(states, detected=None, m=2):
    detected = detected if detected is not None else [True] * len(states)
    state = dc.CounterState()
    events = []
    for k, (s, d) in enumerate(zip(states, detected)):
        _, ev = dc.update_counter(state, obs(k, s, d), m)
        if ev is not None:
            events.append(ev)
    return state, events


# ---------------------------------------------------------------- extract_observation

def test_extract_single_peak():
    g = np.zeros((8, 8, 2))
    g[5, 7, 1] = 0.9
    o = dc.extract_observation(g, 1.5, 0.3)
    assert o.detected and o.s_hat == 1 and o.cell == (5, 7) and o.confidence == pytest.approx(0.9)
    assert o.t == 1.5


def test_extract_two_adjacent_peaks_state_zero():
    g = np.full((26, 26, 2), 0.01)
    g[10, 10, 0] = 0.97
    g[10, 11, 0] = 0.98
    o = dc.extract_observation(g, 0.0)
    assert o.s_hat == 0 and o.cell in {(10, 10), (10, 11)}


def test_extract_uniform_low_not_detected():
    assert not dc.extract_observation(np.full((26, 26, 2), 0.1), 0.0, 0.3).detected


def test_extract_ties():
    g = np.zeros((4, 4, 2))
    g[3, 3, 0] = g[1, 2, 1] = g[2, 0, 0] = 0.8
    o = dc.extract_observation(g, 0.0)
    assert o.s_hat == 0 and o.cell == (2, 0)


@pytest.mark.parametrize("shape", [(4, 4), (4, 5, 2), (4, 4, 3)])
def test_extract_bad_grid(shape):
    with pytest.raises(ValueError):
        dc.extract_observation(np.zeros(shape), 0.0)


@pytest.mark.parametrize("tau", [0.0, 1.0, -0.1])
def test_extract_bad_tau(tau):
    with pytest.raises(ValueError):
        dc.extract_observation(np.zeros((4, 4, 2)), 0.0, tau)


@settings(max_examples=100)
@given(seed=st.integers(0, 2**31))
def test_extract_matches_brute_force(seed):
    r = np.random.default_rng(seed)
    g = r.integers(0, 5, (6, 6, 2)) / 4.0  # coarse values so ties are common
    o = dc.extract_observation(g, 0.0, 0.3)
    peak = g.max()
    best = min((k, i, j) for i in range(6) for j in range(6) for k in range(2) if g[i, j, k] == peak)
    assert o.detected == (peak >= 0.3)
    assert (o.s_hat, o.cell) == (best[0], best[1:])


# ---------------------------------------------------------------- update_counter

def test_counter_single_detach_stamped_at_first_zero():
    state, events = run_counter([0, 0, 1, 1, 1, 0, 0])
    assert len(events) == 1 and events[0].t == 5.0 and events[0].drop_count == 1
    assert state.detach_times == [5.0]


def test_counter_glitch_suppressed():
    _, events = run_counter([1, 1, 0, 1, 1])
    assert events == []


@pytest.mark.parametrize("s", [0, 1])
def test_counter_constant_state(s):
    state, events = run_counter([s] * 50)
    assert events == [] and state.drop_count == 0


def test_counter_undetected_frames_skipped():
    # the undetected frames neither break the pending run nor confirm anything
    _, events = run_counter([1, 1, 0, 0, 0], [True, True, True, False, True])
    assert [e.t for e in events] == [2.0]


def test_counter_time_regression():
    state = dc.CounterState()
    dc.update_counter(state, obs(2.0, 1))
    with pytest.raises(dc.TimeRegressionError):
        dc.update_counter(state, obs(1.0, 1))


def test_counter_bad_m():
    with pytest.raises(ValueError):
        dc.update_counter(dc.CounterState(), obs(0, 0), 0)


def random_sequence(r, n):
    states = r.integers(0, 2, n)
    detected = r.uniform(size=n) > 0.1
    return states.tolist(), detected.tolist()


@pytest.mark.parametrize("m", [1, 2, 3])
def test_counter_matches_reference_on_random_sequences(m):
    r = np.random.default_rng(m)
    for _ in range(10_000 // 3 + 1):
        states, detected = random_sequence(r, int(r.integers(1, 40)))
        state, events = run_counter(states, detected, m)
        expected = reference_count(states, detected, m)
        assert [e.t for e in events] == [float(k) for k in expected]
        assert state.drop_count == len(state.detach_times) == len(expected)
        assert [e.drop_count for e in events] == list(range(1, len(events) + 1))


@settings(max_examples=200)
@given(st.lists(st.integers(0, 1), max_size=60))
def test_counter_m1_equals_naive_transitions(states):
    _, events = run_counter(states, m=1)
    naive = [k for k in range(1, len(states)) if states[k - 1] == 1 and states[k] == 0]
    assert [e.t for e in events] == [float(k) for k in naive]


@settings(max_examples=200)
@given(st.lists(st.tuples(st.integers(0, 1), st.booleans()), max_size=60), st.integers(1, 4))
def test_counter_monotone_and_consistent(seq, m):
    state = dc.CounterState()
    last = 0
    for k, (s, d) in enumerate(seq):
        dc.update_counter(state, obs(k, s, d), m)
        assert state.drop_count >= last
        last = state.drop_count
    assert state.drop_count == len(state.detach_times)
    assert all(a < b for a, b in zip(state.detach_times, state.detach_times[1:]))


# ---------------------------------------------------------------- flow_rate

def test_flow_rate_examples():
    q = dc.flow_rate([0, 2, 4, 6], 3)
    assert q.t == 6 and q.q == pytest.approx(30.0) and q.window_n == 3
    assert dc.flow_rate([0, 3], 1).q == pytest.approx(20.0)
    assert dc.flow_rate([0, 3], 3) is None


def test_flow_rate_errors():
    with pytest.raises(ValueError):
        dc.flow_rate([0, 1], 0)
    with pytest.raises(ValueError):
        dc.flow_rate([0, 1, 1], 1)


@settings(max_examples=200)
@given(st.lists(st.floats(0.05, 10.0), min_size=1, max_size=20), st.integers(1, 6))
def test_flow_window_is_harmonic_mean_of_single_interval_rates(gaps, n):
    times = np.concatenate([[0.0], np.cumsum(gaps)]).tolist()
    for i in range(n, len(times)):
        q_n = dc.flow_rate(times[: i + 1], n).q
        singles = [dc.flow_rate(times[j - 1: j + 1], 1).q for j in range(i - n + 1, i + 1)]
        harmonic = n / sum(1.0 / q for q in singles)
        assert abs(q_n - harmonic) <= 1e-9 * q_n


# ---------------------------------------------------------------- framing

@pytest.mark.parametrize("cell,alarm", [((13, 13), False), ((1, 13), True), ((2, 13), False),
                                        ((13, 24), True), ((23, 23), False), ((0, 0), True)])
def test_framing_examples(cell, alarm):
    assert (dc.check_framing(obs(0, 1, cell=cell), 26, 2) is not None) is alarm


def test_framing_exhaustive_band():
    S, margin = 26, 2
    flagged = {c for c in itertools.product(range(S), repeat=2)
               if dc.check_framing(obs(0, 0, cell=c), S, margin) is not None}
    inner = set(itertools.product(range(margin, S - margin), repeat=2))
    assert flagged == set(itertools.product(range(S), repeat=2)) - inner
    assert len(flagged) == S * S - (S - 2 * margin) ** 2


def test_framing_undetected_no_alarm():
    assert dc.check_framing(obs(0, 0, detected=False, cell=(0, 0)), 26) is None


# ---------------------------------------------------------------- monitor

def grid_for(S, s, cell):
    g = np.full((S, S, 2), 0.01)
    g[cell[0], cell[1], s] = 0.95
    return g


def test_monitor_records():
    mon = dc.StreamMonitor("a", 8)
    recs = []
    for k, s in enumerate([1, 1, 0, 0] * 4):
        recs += mon.process(grid_for(8, s, (4, 4)), k * 0.5)
    detaches = [r for r in recs if r["kind"] == "detach"]
    flows = [r for r in recs if r["kind"] == "flow"]
    assert [r["t"] for r in detaches] == [1.0, 3.0, 5.0, 7.0]
    assert mon.drop_count == 4
    assert len(flows) == 1 and flows[0]["q_gtt_min"] == pytest.approx(30.0) and flows[0]["t"] == 7.0


def test_monitor_alarm_rising_edge():
    mon = dc.StreamMonitor("a", 8)
    cells = [(4, 4), (0, 4), (0, 5), (4, 4), (7, 7)]
    alarms = [k for k, c in enumerate(cells)
              for r in mon.process(grid_for(8, 1, c), float(k)) if r["kind"] == "alarm"]
    assert alarms == [1, 4]
