"""Frame-level simulation shared by the protocol, eve and harness layers.

Each frame starts with empty trap logs and live detectors; the inter-frame gap
is long enough for traps to drain and dead time to expire.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernel as K
from .detector import (
    CarrierSource,
    DeadtimeMode,
    DetectorState,
    process_bright_pulse,
    process_gate,
)
from .eve import AttackPlan, EveDetections, EveParams, Strategy, measure_from_uniforms
from .eve import schedule_deadtime_exploit, schedule_deadtime_respected
from .optics import FakedState, route_faked_state
from .protocol import (
    AliceRecord,
    BobReceiver,
    ChannelConfig,
    Click,
    DoubleClick,
    FrameConfig,
    FrameOutcome,
    QberEstimate,
    make_estimate,
)
from .rng import frame_generator


def draw_frame(rng, n_gates: int) -> np.ndarray:
    return rng.random((n_gates, K.N_SLOTS))


def alice_bob_bits(u):
    alice_bit = (u[..., K.U_ALICE_BIT] < 0.5).astype(np.int8)
    alice_basis = (u[..., K.U_ALICE_BASIS] < 0.5).astype(np.int8)
    bob_basis = (u[..., K.U_BOB_BASIS] < 0.5).astype(np.int8)
    return alice_bit, alice_basis, bob_basis


@dataclass(frozen=True)
class KernelConfig:
    period: int
    pulse_offset: int
    dead_time: int
    accept: bool
    dark: np.ndarray
    amp: np.ndarray
    tau: np.ndarray
    gamma_av: np.ndarray
    gamma_half: np.ndarray
    full_apps: np.ndarray
    eta: np.ndarray
    dt_prob: np.ndarray
    p_full: np.ndarray
    p_half: np.ndarray
    horizon: np.ndarray

    @classmethod
    def build(cls, bob: BobReceiver, frame: FrameConfig, eve: EveParams | None = None) -> KernelConfig:
        dets = bob.detectors
        if eve is not None and eve.full_power > 0:
            if any(d.threshold_curve is None for d in dets):
                raise ValueError("faked states need threshold curves on both detectors")
            p_full = [d.threshold_curve.click_probability(eve.full_power, eve.pulse_delay) for d in dets]
            p_half = [d.threshold_curve.click_probability(eve.half_power, eve.pulse_delay) for d in dets]
            offset = int(round(eve.pulse_delay))
        else:
            p_full, p_half, offset = [0.0, 0.0], [0.0, 0.0], 0
        return cls(
            period=int(frame.gate_period_ns),
            pulse_offset=offset,
            dead_time=int(bob.dead_time_ns),
            accept=bob.deadtime_mode is DeadtimeMode.ACCEPT_AND_EXTEND,
            dark=np.array([d.dark_prob for d in dets]),
            amp=np.array([[t.amplitude for t in d.traps] for d in dets]),
            tau=np.array([[t.lifetime_ns for t in d.traps] for d in dets]),
            gamma_av=np.array([d.gammas.avalanche for d in dets]),
            gamma_half=np.array([d.gammas.half_power for d in dets]),
            full_apps=np.array([d.gammas.full_power_applications for d in dets], dtype=np.int64),
            eta=np.array([d.quantum_efficiency for d in dets]),
            dt_prob=np.array([d.deadtime_detection_prob for d in dets]),
            p_full=np.array(p_full, dtype=float),
            p_half=np.array(p_half, dtype=float),
            horizon=np.array([d.prune_horizon_ns for d in dets], dtype=np.int64),
        )

    def scalars(self):
        return (
            np.int64(self.period), np.int64(self.pulse_offset), np.int64(self.dead_time), bool(self.accept),
            self.dark, self.amp, self.tau, self.gamma_av, self.gamma_half, self.full_apps, self.eta,
            self.dt_prob, self.p_full, self.p_half, self.horizon,
        )


def run_kernel(kc: KernelConfig, u, alice_bit, alice_basis, bob_basis, mu_bob, pulse, pulse_basis, pulse_bit):
    """Bob's per-gate flags for a stack of frames (leading axis = frame)."""
    flags = np.zeros(u.shape[:2], np.uint8)
    K.bob_frames(
        np.ascontiguousarray(u), alice_bit, alice_basis, bob_basis, np.ascontiguousarray(mu_bob, dtype=float),
        pulse, pulse_basis, pulse_bit, *kc.scalars(), flags,
    )
    return flags


class _Fixed:
    """Stands in for a generator and returns one pre-drawn uniform."""

    def __init__(self, value: float):
        self.value = float(value)

    def random(self) -> float:
        return self.value


def reference_frame(bob: BobReceiver, frame: FrameConfig, u, mu_bob, pulse=None, pulse_basis=None, pulse_bit=None, eve: EveParams | None = None):
    """Pure-Python twin of the compiled kernel built from the detector operations.

    Slow; used to cross-check the kernel on identical uniforms.
    """
    n = frame.gates_per_frame
    alice_bit, alice_basis, bob_basis = alice_bob_bits(u)
    dets = bob.detectors
    states = [DetectorState(), DetectorState()]
    dead_time = bob.dead_time_ns
    flags = np.zeros(n, np.uint8)
    for g in range(n):
        tg = g * frame.gate_period_ns
        for s, p in zip(states, dets):
            s.advance_to(tg, p)
        f = 0
        if not states[0].is_dead():
            f |= K.F_LIVE
            any_click = False
            for d in range(2):
                if alice_basis[g] == bob_basis[g]:
                    mu_d = mu_bob[g] if alice_bit[g] == d else 0.0
                else:
                    mu_d = 0.5 * mu_bob[g]
                if process_gate(states[d], dets[d], mu_d, _Fixed(u[g, K.U_GATE_D0 + d])):
                    f |= K.F_GATE_D0 << d
                    any_click = True
            if any_click:
                for s in states:
                    s.dead_until = tg + dead_time
        if pulse is not None and pulse[g]:
            tp = tg + int(round(eve.pulse_delay))
            if states[0].is_dead(tp):
                f |= K.F_PULSE_IN_DEAD
            fs = FakedState(eve.full_power, eve.pulse_delay, int(pulse_basis[g]), int(pulse_bit[g]), g)
            powers = route_faked_state(fs, int(bob_basis[g]))
            any_click = False
            for d in range(2):
                if powers[d] <= 0:
                    continue
                source = CarrierSource.FULL_POWER if powers[d] >= eve.full_power else CarrierSource.HALF_POWER
                if process_bright_pulse(states[d], dets[d], powers[d], eve.pulse_delay, _Fixed(u[g, K.U_PULSE_D0 + d]), source):
                    f |= K.F_PULSE_D0 << d
                    any_click = True
            if any_click:
                for s in states:
                    s.dead_until = tp + dead_time
        flags[g] = f
    return flags


@dataclass
class GateDecode:
    clicked: np.ndarray
    double: np.ndarray
    decoded: np.ndarray
    sifted: np.ndarray
    error: np.ndarray


def decode(flags, u, alice_bit, alice_basis, bob_basis, policy: DoubleClick) -> GateDecode:
    d0 = (flags & (K.F_GATE_D0 | K.F_PULSE_D0)) != 0
    d1 = (flags & (K.F_GATE_D1 | K.F_PULSE_D1)) != 0
    clicked = d0 | d1
    double = d0 & d1
    if policy is DoubleClick.RANDOM:
        resolved = (u[..., K.U_DOUBLE] < 0.5).astype(np.int8)
    else:
        resolved = np.full(flags.shape, -1, np.int8)
    decoded = np.where(double, resolved, np.where(d1, 1, np.where(d0, 0, -1))).astype(np.int8)
    sifted = (decoded >= 0) & (bob_basis == alice_basis)
    error = sifted & (decoded != alice_bit)
    return GateDecode(clicked, double, decoded, sifted, error)


def _detector_code(bits: int) -> int:
    return {1: 0, 2: 1, 3: 2}[bits]


def outcome_from_flags(frame_index: int, flags, u, frame: FrameConfig, bob: BobReceiver, pulse_offset: int, pulse=None) -> tuple[FrameOutcome, AliceRecord]:
    alice_bit, alice_basis, bob_basis = alice_bob_bits(u)
    dec = decode(flags, u, alice_bit, alice_basis, bob_basis, bob.double_click)
    t0 = frame_index * frame.frame_duration_ns
    clicks = []
    for g in np.flatnonzero(flags & (K.F_GATE_D0 | K.F_GATE_D1 | K.F_PULSE_D0 | K.F_PULSE_D1)):
        f = int(flags[g])
        tg = t0 + int(g) * frame.gate_period_ns
        if f & 3:
            clicks.append(Click(int(g), tg, _detector_code(f & 3), int(bob_basis[g]), int(dec.decoded[g]), "gate"))
        if f & 12:
            clicks.append(Click(int(g), tg + pulse_offset, _detector_code((f >> 2) & 3), int(bob_basis[g]), int(dec.decoded[g]), "pulse"))
    intervals: list[tuple[int, int]] = []
    for c in clicks:
        end = c.time_ns + bob.dead_time_ns
        if intervals and c.time_ns < intervals[-1][1]:
            intervals[-1] = (intervals[-1][0], max(intervals[-1][1], end))
        else:
            intervals.append((c.time_ns, end))
    outcome = FrameOutcome(
        frame=frame_index,
        clicks=clicks,
        sifted_bits=int(dec.sifted.sum()),
        errors=int(dec.error.sum()),
        deadtime_intervals=intervals,
        faked_pulses=int(np.count_nonzero(pulse)) if pulse is not None else 0,
    )
    return outcome, AliceRecord(alice_bit, alice_basis)


def _schedule(plan: AttackPlan, det: EveDetections, eve: EveParams, frame: FrameConfig, dead_time_ns: int):
    if plan.strategy is Strategy.DEADTIME_RESPECTED:
        return schedule_deadtime_respected(det, plan.chi, eve, frame, dead_time_ns, plan.min_burst)
    return schedule_deadtime_exploit(det, plan.chi, eve, frame)


def simulate_frame(bob: BobReceiver, frame: FrameConfig, chan: ChannelConfig, rng, frame_index: int = 0,
                   eve: EveParams | None = None, plan: AttackPlan | None = None):
    """One frame, baseline when ``plan`` is None.

    Returns ``(outcome, alice_record, detections, schedule, flags)``; the last
    three are None/unused for baseline frames except ``flags``.
    """
    n = frame.gates_per_frame
    u = draw_frame(rng, n)
    alice_bit, alice_basis, bob_basis = alice_bob_bits(u)
    det = sched = None
    if plan is None:
        mu_bob = np.full(n, chan.mu * chan.transmittance * bob.optics_transmittance)
        pulse = np.zeros(n, np.int8)
        pb = pbit = np.zeros(n, np.int8)
        kc = KernelConfig.build(bob, frame, None)
    else:
        det = measure_from_uniforms(u, alice_bit, alice_basis, chan.mu, eve)
        sched = _schedule(plan, det, eve, frame, bob.dead_time_ns)
        mu_bob = np.zeros(n)
        pulse, pb, pbit = sched.pulse, det.basis, det.bit
        kc = KernelConfig.build(bob, frame, eve)
    flags = run_kernel(kc, u[None], alice_bit[None], alice_basis[None], bob_basis[None], mu_bob[None], pulse[None], pb[None], pbit[None])[0]
    outcome, alice = outcome_from_flags(frame_index, flags, u, frame, bob, kc.pulse_offset, pulse)
    return outcome, alice, det, sched, flags


def attack_outcome(plan: AttackPlan, detections: EveDetections, bob: BobReceiver, frame: FrameConfig, alice: AliceRecord,
                   eve: EveParams, rng, frame_index: int = 0) -> FrameOutcome:
    n = frame.gates_per_frame
    u = draw_frame(rng, n)
    u[:, K.U_ALICE_BIT] = np.where(alice.bits == 1, 0.25, 0.75)
    u[:, K.U_ALICE_BASIS] = np.where(alice.bases == 1, 0.25, 0.75)
    _, _, bob_basis = alice_bob_bits(u)
    sched = _schedule(plan, detections, eve, frame, bob.dead_time_ns)
    kc = KernelConfig.build(bob, frame, eve)
    flags = run_kernel(
        kc, u[None], alice.bits.astype(np.int8)[None], alice.bases.astype(np.int8)[None], bob_basis[None],
        np.zeros((1, n)), sched.pulse[None], detections.basis.astype(np.int8)[None], detections.bit.astype(np.int8)[None],
    )[0]
    return outcome_from_flags(frame_index, flags, u, frame, bob, kc.pulse_offset, sched.pulse)[0]


@dataclass
class FrameStats:
    """Per-frame tallies of a batch, indexed like ``frames``."""

    frames: np.ndarray
    raw: np.ndarray
    sifted: np.ndarray
    errors: np.ndarray
    anomalies: np.ndarray
    pulses: np.ndarray
    pulses_in_dead: np.ndarray
    bursts: np.ndarray
    eve_detections: np.ndarray

    @property
    def n(self) -> int:
        return len(self.frames)

    @property
    def raw_rate(self) -> float:
        return float(self.raw.sum()) / self.n if self.n else 0.0

    def estimate(self) -> QberEstimate:
        return make_estimate(int(self.errors.sum()), int(self.sifted.sum()), float(self.raw.sum()), self.n)

    @property
    def mean_burst_length(self) -> float:
        b = int(self.bursts.sum())
        return float(self.pulses.sum()) / b if b else 0.0

    @classmethod
    def concat(cls, parts: Sequence[FrameStats]) -> FrameStats:
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in cls.__dataclass_fields__))


def simulate_batch(bob: BobReceiver, frame: FrameConfig, chan: ChannelConfig, key: int, frames: Sequence[int],
                   eve: EveParams | None = None, plan: AttackPlan | None = None, chunk: int = 256) -> FrameStats:
    """Simulate frames whose randomness comes from ``frame_generator(key, i)``.

    Frame ``i`` is bit-identical to ``simulate_frame`` with that generator.
    """
    frames = np.asarray(frames, dtype=np.int64)
    n = frame.gates_per_frame
    kc = KernelConfig.build(bob, frame, eve if plan is not None else None)
    parts = []
    for lo in range(0, len(frames), chunk):
        idx = frames[lo:lo + chunk]
        u = np.stack([draw_frame(frame_generator(key, int(i)), n) for i in idx]) if len(idx) else np.zeros((0, n, K.N_SLOTS))
        alice_bit, alice_basis, bob_basis = alice_bob_bits(u)
        m = len(idx)
        bursts = np.zeros(m, np.int64)
        eve_count = np.zeros(m, np.int64)
        if plan is None:
            mu_bob = np.full((m, n), chan.mu * chan.transmittance * bob.optics_transmittance)
            pulse = np.zeros((m, n), np.int8)
            pb = pbit = pulse
        else:
            det = measure_from_uniforms(u, alice_bit, alice_basis, chan.mu, eve)
            mu_bob = np.zeros((m, n))
            pulse = np.zeros((m, n), np.int8)
            for j in range(m):
                s = _schedule(plan, EveDetections(det.detected[j], det.basis[j], det.bit[j]), eve, frame, bob.dead_time_ns)
                pulse[j] = s.pulse
                bursts[j] = s.bursts
            pb, pbit = det.basis, det.bit
            eve_count = det.detected.sum(axis=1)
        flags = run_kernel(kc, u, alice_bit, alice_basis, bob_basis, mu_bob, pulse, pb, pbit)
        dec = decode(flags, u, alice_bit, alice_basis, bob_basis, bob.double_click)
        parts.append(FrameStats(
            frames=idx,
            raw=dec.clicked.sum(axis=1),
            sifted=dec.sifted.sum(axis=1),
            errors=dec.error.sum(axis=1),
            anomalies=K.spacing_anomalies(flags, np.int64(kc.period), np.int64(kc.pulse_offset), np.int64(kc.dead_time)),
            pulses=pulse.sum(axis=1, dtype=np.int64),
            pulses_in_dead=((flags & K.F_PULSE_IN_DEAD) != 0).sum(axis=1),
            bursts=bursts,
            eve_detections=np.asarray(eve_count, dtype=np.int64),
        ))
    if not parts:
        z = np.zeros(0, np.int64)
        return FrameStats(z, z, z, z, z, z, z, z, z)
    return FrameStats.concat(parts)


def expected_photon_click_rate(chan: ChannelConfig, bob: BobReceiver) -> float:
    """Per-gate click probability from signal alone (no dead time, no noise)."""
    return -math.expm1(-chan.mu * chan.transmittance * bob.optics_transmittance * bob.d0.quantum_efficiency)
