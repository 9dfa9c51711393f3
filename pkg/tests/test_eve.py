import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aftergate import _kernel as K
from aftergate.detector import DeadtimeMode, TrapLevel
from aftergate.eve import (
    AttackPlan,
    EveDetections,
    EveParams,
    Strategy,
    calibrate_chi,
    measure_from_uniforms,
    schedule_deadtime_exploit,
    schedule_deadtime_respected,
    simulate_intercept_resend,
)
from aftergate.protocol import ChannelConfig, FrameConfig
from aftergate.rng import generator, stream_key
from aftergate.simulation import alice_bob_bits, draw_frame, simulate_batch

FRAME = FrameConfig()


def detections(pattern):
    d = np.asarray(pattern, dtype=bool)
    return EveDetections(d, np.zeros(d.size, np.int8), np.zeros(d.size, np.int8))


def measure(n, mu, eve, seed=0):
    u = draw_frame(np.random.default_rng(seed), n)
    bit, basis, _ = alice_bob_bits(u)
    return measure_from_uniforms(u, bit, basis, mu, eve), bit, basis


def test_detection_rate_perfect_eve():
    det, _, _ = measure(200_000, 0.5, EveParams.perfect())
    p = 1 - math.exp(-0.5)
    assert p == pytest.approx(0.3935, abs=1e-4)
    assert det.detected.mean() == pytest.approx(p, abs=4 * math.sqrt(p * (1 - p) / 200_000))


def test_no_light_no_detections():
    det, _, _ = measure(10_000, 0.0, EveParams.perfect())
    assert len(det) == 0


def test_dark_floor():
    det, _, _ = measure(2_000_000, 1.0, EveParams(detector_efficiency=0.0, dark_prob=1e-5))
    assert det.detected.mean() == pytest.approx(1e-5, abs=4 * math.sqrt(1e-5 / 2_000_000))


def test_matched_basis_bits_are_correct():
    det, bit, basis = measure(50_000, 2.0, EveParams.perfect(), seed=3)
    ok = det.detected & (det.basis == basis)
    assert np.array_equal(det.bit[ok], bit[ok])


def test_eve_params_validate():
    with pytest.raises(ValueError):
        EveParams(memory_depth=4)
    with pytest.raises(ValueError):
        AttackPlan(-1, Strategy.DEADTIME_EXPLOIT)
    with pytest.raises(ValueError):
        AttackPlan(5, Strategy.BASELINE)


def test_respected_groups_consecutive_detections():
    pat = np.zeros(FRAME.gates_per_frame, bool)
    pat[1000:1003] = True
    s = schedule_deadtime_respected(detections(pat), 100, EveParams(memory_depth=3), FRAME)
    assert np.flatnonzero(s.pulse).tolist() == [1000, 1001, 1002]
    assert s.bursts == 1 and s.mean_burst_length == 3.0


def test_memoryless_sends_each_detection_alone():
    pat = np.zeros(FRAME.gates_per_frame, bool)
    pat[[1000, 1001]] = True
    s = schedule_deadtime_respected(detections(pat), 100, EveParams(memory_depth=0), FRAME)
    assert s.burst_len[1000] == 1
    assert s.pulse[1001] == 0


def test_short_runs_dropped_under_min_burst():
    pat = np.zeros(FRAME.gates_per_frame, bool)
    pat[[1000, 1010, 1011]] = True
    s = schedule_deadtime_respected(detections(pat), 100, EveParams(memory_depth=3), FRAME, min_burst=2)
    assert np.flatnonzero(s.pulse).tolist() == [1010, 1011]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.booleans(), min_size=1075, max_size=1075), st.integers(0, 1075), st.integers(0, 3), st.integers(1, 3))
def test_respected_bursts_are_a_dead_time_apart(pattern, chi, memory, min_burst):
    s = schedule_deadtime_respected(detections(pattern), chi, EveParams(memory_depth=memory), FRAME, min_burst=min_burst)
    pulses = np.flatnonzero(s.pulse)
    assert np.all(pulses >= FRAME.gates_per_frame - chi)
    assert np.all(np.asarray(pattern)[pulses])
    starts = np.flatnonzero(s.burst_len)
    ends = starts + s.burst_len[starts] - 1
    gaps_ns = (starts[1:] - ends[:-1]) * FRAME.gate_period_ns
    assert np.all(gaps_ns >= 10_000)
    assert np.all(s.burst_len[starts] <= max(memory, 1))


def test_exploit_sends_every_detection():
    rng = np.random.default_rng(8)
    pat = rng.random(FRAME.gates_per_frame) < 0.6
    s = schedule_deadtime_exploit(detections(pat), 400, EveParams(), FRAME)
    expect = pat.copy()
    expect[: FRAME.gates_per_frame - 400] = False
    assert np.array_equal(s.pulse.astype(bool), expect)
    gaps = np.diff(np.flatnonzero(s.pulse)) * FRAME.gate_period_ns
    assert gaps.min() == 200


def test_exploit_empty():
    s = schedule_deadtime_exploit(detections(np.zeros(1075, bool)), 1075, EveParams(), FRAME)
    assert s.bursts == 0 and not s.faked_states


def test_faked_states_carry_eve_bits():
    pat = np.zeros(1075, bool)
    pat[1070] = True
    det = EveDetections(pat, np.ones(1075, np.int8), np.ones(1075, np.int8))
    (fs,) = schedule_deadtime_exploit(det, 10, EveParams(), FRAME).faked_states
    assert (fs.peak_power, fs.basis, fs.bit_value, fs.target_gate) == (575.0, 1, 1, 1070)


def test_calibrate_zero_target():
    c = calibrate_chi(0.0, lambda chi: chi * 0.1, 1075)
    assert c.chi == 0 and c.feasible


def test_calibrate_linear_rate():
    c = calibrate_chi(30.0, lambda chi: chi * 0.07, 1075)
    assert abs(c.rate - 30.0) <= 0.035 + 1e-12
    assert c.within_tolerance


def test_calibrate_infeasible():
    c = calibrate_chi(100.0, lambda chi: chi * 0.05, 1075)
    assert not c.feasible and c.chi == 1075


@settings(max_examples=40, deadline=None)
@given(st.floats(0.5, 50.0), st.floats(0.05, 1.0))
def test_calibrate_picks_nearest(target, slope):
    n = 1075
    c = calibrate_chi(target, lambda chi: math.floor(chi * slope * 10) / 10, n)
    if target <= math.floor(n * slope * 10) / 10:
        rates = [math.floor(x * slope * 10) / 10 for x in range(n + 1)]
        assert abs(c.rate - target) == pytest.approx(min(abs(r - target) for r in rates))


def test_intercept_resend_quarter_error():
    est = simulate_intercept_resend(400_000, generator(1, "ir"), mu=5.0)
    assert est.qber == pytest.approx(0.25, abs=0.01)


def test_faked_states_add_no_errors_by_themselves(bob):
    clean = bob.with_detectors(dark_prob=0.0, traps=tuple(TrapLevel(0.0, t.lifetime_us) for t in bob.d0.traps))
    clean = clean.with_mode(DeadtimeMode.ACCEPT_AND_EXTEND)
    stats = simulate_batch(clean, FRAME, ChannelConfig(0.8), stream_key(2, "pure"), range(200),
                           EveParams.perfect(), AttackPlan(900, Strategy.DEADTIME_EXPLOIT))
    assert stats.sifted.sum() > 0
    assert stats.errors.sum() == 0


def test_rate_balance_relation(bob):
    # Eve detects 1 - e^-1 of gates, about half of her resends click at Bob
    acc = bob.with_mode(DeadtimeMode.ACCEPT_AND_EXTEND)
    eve = EveParams.perfect()
    chi = 300
    stats = simulate_batch(acc, FRAME, ChannelConfig(1.0), stream_key(6, "bal"), range(300), eve,
                           AttackPlan(chi, Strategy.DEADTIME_EXPLOIT))
    predicted = chi * (1 - math.exp(-1.0)) * 0.5
    assert stats.raw_rate == pytest.approx(predicted, rel=0.2)
