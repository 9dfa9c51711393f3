"""The eavesdropper: measurement next to Alice, faked-state scheduling, chi search."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import _kernel as K
from .optics import ALICE_PHASES, BOB_PHASES, FakedState, quantum_detect
from .protocol import ChannelConfig, FrameConfig, make_estimate


class Strategy(enum.Enum):
    BASELINE = "BASELINE"
    DEADTIME_RESPECTED = "DEADTIME_RESPECTED"
    DEADTIME_EXPLOIT = "DEADTIME_EXPLOIT"


@dataclass(frozen=True)
class EveParams:
    detector_efficiency: float = 1.0
    dark_prob: float = 0.0
    memory_depth: int = 3
    full_power: float = 575.0
    pulse_delay: float = 7.75

    def __post_init__(self):
        if not 0 <= self.detector_efficiency <= 1:
            raise ValueError("detector_efficiency must be in [0, 1]")
        if not 0 <= self.dark_prob <= 1:
            raise ValueError("dark_prob must be in [0, 1]")
        if self.memory_depth not in (0, 1, 2, 3):
            raise ValueError("memory_depth must be one of 0, 1, 2, 3")
        if self.full_power < 0:
            raise ValueError("full_power must be >= 0")

    @property
    def half_power(self) -> float:
        return self.full_power / 2

    @classmethod
    def perfect(cls, **kw) -> EveParams:
        return cls(detector_efficiency=1.0, dark_prob=0.0, **kw)

    @classmethod
    def realistic(cls, **kw) -> EveParams:
        return cls(detector_efficiency=0.5, dark_prob=1e-5, **kw)

    def check_powers(self, curve_d0, curve_d1) -> None:
        """Full power must always click and half power never, on both detectors."""
        for curve in (curve_d0, curve_d1):
            p0, p100 = curve.at(self.pulse_delay)
            if not (self.half_power <= p0 and self.full_power >= p100):
                raise ValueError(
                    f"powers {self.half_power}/{self.full_power} uW do not bracket thresholds "
                    f"{float(p0):.1f}/{float(p100):.1f} uW at {self.pulse_delay} ns"
                )


@dataclass(frozen=True)
class AttackPlan:
    chi: int
    strategy: Strategy
    min_burst: int = 1

    def __post_init__(self):
        if self.chi < 0:
            raise ValueError("chi must be >= 0")
        if self.strategy is Strategy.BASELINE:
            raise ValueError("an attack plan needs an attack strategy")

    def window_start(self, frame: FrameConfig) -> int:
        if self.chi > frame.gates_per_frame:
            raise ValueError(f"chi={self.chi} exceeds {frame.gates_per_frame} gates")
        return frame.gates_per_frame - self.chi


@dataclass
class EveDetections:
    detected: np.ndarray
    basis: np.ndarray
    bit: np.ndarray

    def __iter__(self) -> Iterator[tuple[int, int, int]]:
        for g in np.flatnonzero(self.detected):
            yield int(g), int(self.basis[g]), int(self.bit[g])

    def __len__(self) -> int:
        return int(np.count_nonzero(self.detected))


def measure_from_uniforms(u, alice_bit, alice_basis, mu: float, eve: EveParams) -> EveDetections:
    """Eve's ideal Bob module at Alice's output, driven by pre-drawn uniforms.

    Works on any leading shape; the last axis of ``u`` holds the slots.
    """
    p_signal = -math.expm1(-mu * eve.detector_efficiency)
    signal = u[..., K.U_EVE_SIGNAL] < p_signal
    dark = u[..., K.U_EVE_DARK] < eve.dark_prob
    basis = (u[..., K.U_EVE_BASIS] < 0.5).astype(np.int8)
    random_bit = (u[..., K.U_EVE_BIT] < 0.5).astype(np.int8)
    # wrong-basis bits are kept: Eve cannot know Alice's basis
    bit = np.where(signal & (basis == alice_basis), alice_bit, random_bit).astype(np.int8)
    return EveDetections(signal | dark, basis, bit)


def eve_measure_frame(chan: ChannelConfig, eve: EveParams, frame: FrameConfig, rng) -> EveDetections:
    from .simulation import draw_frame, alice_bob_bits

    u = draw_frame(rng, frame.gates_per_frame)
    alice_bit, alice_basis, _ = alice_bob_bits(u)
    return measure_from_uniforms(u, alice_bit, alice_basis, chan.mu, eve)


@dataclass
class BurstSchedule:
    pulse: np.ndarray
    burst_len: np.ndarray
    basis: np.ndarray
    bit: np.ndarray
    eve: EveParams = field(default_factory=EveParams)

    @property
    def bursts(self) -> int:
        return int(np.count_nonzero(self.burst_len))

    @property
    def mean_burst_length(self) -> float:
        b = self.burst_len[self.burst_len > 0]
        return float(b.mean()) if b.size else 0.0

    @property
    def faked_states(self) -> list[FakedState]:
        return [
            FakedState(self.eve.full_power, self.eve.pulse_delay, int(self.basis[g]), int(self.bit[g]), int(g))
            for g in np.flatnonzero(self.pulse)
        ]


def pause_gates(dead_time_ns: int, frame: FrameConfig) -> int:
    return max(1, math.ceil(dead_time_ns / frame.gate_period_ns))


def schedule_deadtime_respected(
    detections: EveDetections, chi: int, eve: EveParams, frame: FrameConfig, dead_time_ns: int = 10_000, min_burst: int = 1
) -> BurstSchedule:
    """Bursts of up to ``memory_depth`` consecutive detections, then a dead-time pause.

    A run of detections shorter than ``min_burst`` is dropped. With no memory
    every detection is its own burst.
    """
    start = AttackPlan(chi, Strategy.DEADTIME_RESPECTED).window_start(frame)
    pulse = np.zeros(frame.gates_per_frame, np.int8)
    burst_len = np.zeros(frame.gates_per_frame, np.int64)
    K.schedule_respected(
        detections.detected.astype(np.bool_), start, eve.memory_depth, max(1, min_burst),
        pause_gates(dead_time_ns, frame), pulse, burst_len,
    )
    return BurstSchedule(pulse, burst_len, detections.basis, detections.bit, eve)


def schedule_deadtime_exploit(detections: EveDetections, chi: int, eve: EveParams, frame: FrameConfig) -> BurstSchedule:
    """Every detection in the attacked window is resent at once, with no pauses."""
    start = AttackPlan(chi, Strategy.DEADTIME_EXPLOIT).window_start(frame)
    pulse = np.zeros(frame.gates_per_frame, np.int8)
    burst_len = np.zeros(frame.gates_per_frame, np.int64)
    K.schedule_exploit(detections.detected.astype(np.bool_), start, pulse, burst_len)
    return BurstSchedule(pulse, burst_len, detections.basis, detections.bit, eve)


def apply_attack_frame(plan: AttackPlan, detections: EveDetections, bob, frame: FrameConfig, alice, eve: EveParams, rng, frame_index: int = 0):
    """Send the scheduled faked states to Bob for one frame.

    ``alice`` is the frame's :class:`~aftergate.protocol.AliceRecord`; Bob's
    basis choices and detector noise are drawn from ``rng``.
    """
    from .simulation import attack_outcome

    return attack_outcome(plan, detections, bob, frame, alice, eve, rng, frame_index)


@dataclass(frozen=True)
class ChiCalibration:
    chi: int
    rate: float
    target_rate: float
    feasible: bool
    within_tolerance: bool
    evaluations: int


def calibrate_chi(target_rate: float, rate_fn: Callable[[int], float], n_gates: int, tolerance: float = 0.05) -> ChiCalibration:
    """Number of attacked gates whose mean Bob click rate best matches the target.

    ``rate_fn(chi)`` must use common random numbers so the rate is
    non-decreasing in chi; the search bisects for the first chi reaching the
    target and then keeps whichever of it and its predecessor lies closer.
    A cell is infeasible when even ``chi = n_gates`` stays below the tolerance band.
    """
    cache: dict[int, float] = {}

    def rate(chi: int) -> float:
        if chi not in cache:
            cache[chi] = float(rate_fn(chi))
        return cache[chi]

    lower = (1 - tolerance) * target_rate
    upper = (1 + tolerance) * target_rate

    def result(chi, feasible):
        r = rate(chi)
        return ChiCalibration(chi, r, target_rate, feasible, feasible and lower <= r <= upper, len(cache))

    if target_rate <= 0:
        return ChiCalibration(0, 0.0, target_rate, True, True, 0)
    if rate(0) >= target_rate:
        return result(0, True)
    if rate(n_gates) < target_rate:
        return result(n_gates, rate(n_gates) >= lower)
    lo, hi = 0, n_gates
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if rate(mid) >= target_rate:
            hi = mid
        else:
            lo = mid
    best = lo if target_rate - rate(lo) < rate(hi) - target_rate else hi
    return result(best, True)


def simulate_intercept_resend(
    n_gates: int,
    rng,
    mu: float = 1.0,
    eve_efficiency: float = 1.0,
    bob_optics: float = 0.412,
    bob_efficiency: float = 0.1,
):
    """Textbook intercept-resend with quantum (not faked) resent states.

    Eve measures at Alice's output in a random basis and resends a weak
    coherent state with her result. Returns the sifted QBER estimate.
    """
    alice_bit = rng.integers(0, 2, n_gates)
    alice_basis = rng.integers(0, 2, n_gates)
    eve_basis = rng.integers(0, 2, n_gates)
    bob_basis = rng.integers(0, 2, n_gates)
    phases = np.asarray(ALICE_PHASES)
    bob_phases = np.asarray(BOB_PHASES)

    eve_out = quantum_detect(mu, phases[alice_basis + 2 * alice_bit] - bob_phases[eve_basis], eve_efficiency, 1.0, rng)
    eve_ok = eve_out >= 0
    eve_bit = np.where(eve_ok, eve_out, 0)

    resent_phase = phases[eve_basis + 2 * eve_bit]
    bob_out = quantum_detect(np.where(eve_ok, mu, 0.0), resent_phase - bob_phases[bob_basis], bob_efficiency, bob_optics, rng)
    clicked = bob_out >= 0
    sift = clicked & (bob_basis == alice_basis)
    errors = int(np.count_nonzero(sift & (bob_out != alice_bit)))
    return make_estimate(errors, int(np.count_nonzero(sift)), int(np.count_nonzero(clicked)), 1)

