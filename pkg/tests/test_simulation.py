import dataclasses
import math

import numba
import numpy as np
import pytest

from aftergate import _kernel as K
from aftergate.detector import DeadtimeMode, TrapLevel
from aftergate.eve import AttackPlan, EveParams, Strategy, measure_from_uniforms
from aftergate.protocol import ChannelConfig, FrameConfig, sift_and_count
from aftergate.rng import frame_generator, stream_key
from aftergate.simulation import (
    KernelConfig,
    _schedule,
    alice_bob_bits,
    draw_frame,
    reference_frame,
    run_kernel,
    simulate_batch,
    simulate_frame,
)


def silent(bob, dark=0.0):
    zero = tuple(TrapLevel(0.0, t.lifetime_us) for t in bob.d0.traps)
    return bob.with_detectors(dark_prob=dark, traps=zero)


def kernel_and_reference(bob, frame, chan, seed, eve=None, plan=None):
    n = frame.gates_per_frame
    u = draw_frame(np.random.default_rng(seed), n)
    alice_bit, alice_basis, bob_basis = alice_bob_bits(u)
    if plan is None:
        mu = np.full(n, chan.mu * chan.transmittance * bob.optics_transmittance)
        pulse = pb = pbit = np.zeros(n, np.int8)
    else:
        det = measure_from_uniforms(u, alice_bit, alice_basis, chan.mu, eve)
        sched = _schedule(plan, det, eve, frame, bob.dead_time_ns)
        mu = np.zeros(n)
        pulse, pb, pbit = sched.pulse, det.basis, det.bit
    kc = KernelConfig.build(bob, frame, eve if plan else None)
    fast = run_kernel(kc, u[None], alice_bit[None], alice_basis[None], bob_basis[None], mu[None], pulse[None], pb[None], pbit[None])[0]
    slow = reference_frame(bob, frame, u, mu, pulse if plan else None, pb, pbit, eve)
    return fast, slow


@pytest.mark.parametrize("period, T", [(200, 1.0), (200, 0.1), (1000, 0.5), (10_000, 1.0)])
def test_kernel_matches_reference_baseline(bob, period, T):
    frame = FrameConfig(gates_per_frame=600, gate_period_ns=period)
    fast, slow = kernel_and_reference(bob, frame, ChannelConfig(T), seed=period + int(10 * T))
    np.testing.assert_array_equal(fast, slow)


@pytest.mark.parametrize("strategy, mode", [
    (Strategy.DEADTIME_RESPECTED, DeadtimeMode.REJECT),
    (Strategy.DEADTIME_EXPLOIT, DeadtimeMode.ACCEPT_AND_EXTEND),
    (Strategy.DEADTIME_EXPLOIT, DeadtimeMode.REJECT),
])
@pytest.mark.parametrize("chi", [100, 600])
def test_kernel_matches_reference_attack(bob, strategy, mode, chi):
    frame = FrameConfig(gates_per_frame=600, gate_period_ns=200)
    eve = EveParams.perfect()
    fast, slow = kernel_and_reference(bob.with_mode(mode), frame, ChannelConfig(0.8), chi, eve, AttackPlan(chi, strategy, 2))
    np.testing.assert_array_equal(fast, slow)
    assert np.any(fast & (K.F_PULSE_D0 | K.F_PULSE_D1))


def expected_clicks_dp(n, p, skip):
    """Expected click count when each live gate clicks with p and a click blanks ``skip`` gates."""
    e = np.zeros(n + skip + 2)
    for g in range(n - 1, -1, -1):
        e[g] = p * (1 + e[g + skip + 1]) + (1 - p) * e[g + 1]
    return e[0]


@pytest.mark.parametrize("period", [10_000, 200])
def test_mean_clicks_follow_dead_time_chain(bob, period):
    quiet = silent(bob)
    frame = FrameConfig(gates_per_frame=1075, gate_period_ns=period)
    chan = ChannelConfig(1.0)
    p = -math.expm1(-1.0 * 1.0 * 0.412 * 0.1)
    skip = math.ceil(10_000 / period) - 1
    stats = simulate_batch(quiet, frame, chan, stream_key(11, "dp"), range(400))
    oracle = expected_clicks_dp(1075, p, skip)
    if period >= 10_000:
        assert oracle == pytest.approx(1075 * p, rel=1e-12)
    sd = stats.raw.std(ddof=1) / math.sqrt(stats.n)
    assert abs(stats.raw_rate - oracle) < 3 * sd


def test_silent_detectors_never_click(bob):
    quiet = silent(bob)
    frame = FrameConfig(gates_per_frame=1075)
    # signal-free: switch off photons through the optics
    no_light = dataclasses.replace(quiet, optics_transmittance=0.0)
    stats = simulate_batch(no_light, frame, ChannelConfig(1.0), stream_key(1, "x"), range(50))
    assert stats.raw.sum() == 0


def dark_only_qber(mu_eff, eta, dark):
    p = -math.expm1(-mu_eff * eta)
    right = 1 - (1 - p) * (1 - dark)
    wrong = dark
    err = (1 - right) * wrong + 0.5 * right * wrong
    return err / (1 - (1 - right) * (1 - wrong))


def test_baseline_qber_dark_count_oracle(bob):
    dark = 3e-3
    noisy = silent(bob, dark=dark)
    frame = FrameConfig(gates_per_frame=1075, gate_period_ns=10_000)
    T = 0.05
    stats = simulate_batch(noisy, frame, ChannelConfig(T), stream_key(3, "dark"), range(2000))
    est = stats.estimate()
    q = dark_only_qber(T * T * 0.412, 0.1, dark)
    assert est.wilson_interval[0] < q < est.wilson_interval[1]


def test_batch_equals_single_frames(bob):
    frame = FrameConfig()
    chan = ChannelConfig(0.5)
    key = stream_key(5, "eq")
    stats = simulate_batch(bob, frame, chan, key, range(6))
    outs = [simulate_frame(bob, frame, chan, frame_generator(key, i), i) for i in range(6)]
    est = sift_and_count([o[0] for o in outs], [o[1] for o in outs])
    assert est.sifted_total == stats.sifted.sum()
    assert est.errors_total == stats.errors.sum()
    assert [o[0].click_gates for o in outs] == list(stats.raw)


def test_thread_count_does_not_change_results(bob):
    frame = FrameConfig()
    chan = ChannelConfig(0.7)
    eve = EveParams.perfect()
    plan = AttackPlan(500, Strategy.DEADTIME_EXPLOIT)
    acc = bob.with_mode(DeadtimeMode.ACCEPT_AND_EXTEND)
    key = stream_key(9, "threads")
    before = numba.get_num_threads()
    try:
        numba.set_num_threads(1)
        a = simulate_batch(acc, frame, chan, key, range(64), eve, plan, chunk=16)
        numba.set_num_threads(numba.config.NUMBA_NUM_THREADS)
        b = simulate_batch(acc, frame, chan, key, range(64), eve, plan, chunk=64)
    finally:
        numba.set_num_threads(before)
    for f in dataclasses.fields(a):
        np.testing.assert_array_equal(getattr(a, f.name), getattr(b, f.name))


def test_frames_are_independent_of_batch_position(bob):
    frame = FrameConfig()
    key = stream_key(2, "pos")
    whole = simulate_batch(bob, frame, ChannelConfig(0.4), key, range(10))
    tail = simulate_batch(bob, frame, ChannelConfig(0.4), key, range(5, 10))
    np.testing.assert_array_equal(whole.errors[5:], tail.errors)


def test_baseline_frames_have_no_spacing_anomalies(bob):
    stats = simulate_batch(bob, FrameConfig(), ChannelConfig(1.0), stream_key(4, "mon"), range(300))
    assert stats.anomalies.sum() == 0
