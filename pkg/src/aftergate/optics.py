"""Bob's receiving interferometer, reduced to power routing and threshold logic."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FEASIBILITY_RATIO = 0.5
ALICE_PHASES = (0.0, math.pi / 2, math.pi, 3 * math.pi / 2)
BOB_PHASES = (0.0, math.pi / 2)


class Outcome(enum.IntEnum):
    NONE = -1
    D0 = 0
    D1 = 1
    DOUBLE = 2


@dataclass(frozen=True)
class ThresholdCurve:
    """Sampled linear-mode click thresholds of one detector.

    ``p0`` is the largest power that never clicks, ``p100`` the smallest power
    that always clicks, both in microwatts, at each delay after the gate (ns).
    """

    delays: np.ndarray
    p0: np.ndarray
    p100: np.ndarray

    def __post_init__(self):
        delays = np.asarray(self.delays, dtype=float)
        p0 = np.asarray(self.p0, dtype=float)
        p100 = np.asarray(self.p100, dtype=float)
        if not (delays.shape == p0.shape == p100.shape) or delays.ndim != 1 or delays.size < 2:
            raise ValueError("threshold curve needs >= 2 aligned samples")
        if np.any(np.diff(delays) <= 0):
            raise ValueError("threshold delays must be strictly increasing")
        if np.any(p0 <= 0) or np.any(p0 > p100):
            raise ValueError("threshold samples must satisfy 0 < p0 <= p100")
        object.__setattr__(self, "delays", delays)
        object.__setattr__(self, "p0", p0)
        object.__setattr__(self, "p100", p100)

    @property
    def span(self) -> tuple[float, float]:
        return float(self.delays[0]), float(self.delays[-1])

    def _check(self, t) -> None:
        lo, hi = self.span
        if np.any(np.asarray(t) < lo) or np.any(np.asarray(t) > hi):
            raise ValueError(f"delay {t} ns outside sampled range [{lo}, {hi}] ns")

    def at(self, t):
        """Interpolated ``(p0, p100)`` at delay ``t``."""
        self._check(t)
        return np.interp(t, self.delays, self.p0), np.interp(t, self.delays, self.p100)

    def click_probability(self, power: float, t: float) -> float:
        p0, p100 = self.at(t)
        if power <= p0:
            return 0.0
        if power >= p100:
            return 1.0
        return float((power - p0) / (p100 - p0))

    def scaled(self, factor: float) -> ThresholdCurve:
        return ThresholdCurve(self.delays, self.p0 * factor, self.p100 * factor)


def load_threshold_curves(path: str | Path) -> tuple[ThresholdCurve, ThresholdCurve]:
    """Read ``delay_ns p0_d0 p100_d0 p0_d1 p100_d1`` rows; ``#`` starts a comment."""
    path = Path(path)
    try:
        data = np.loadtxt(path, comments="#", ndmin=2)
    except OSError as exc:
        raise FileNotFoundError(f"threshold file not found: {path}") from exc
    if data.shape[1] != 5:
        raise ValueError(f"{path}: expected 5 columns, found {data.shape[1]}")
    return (
        ThresholdCurve(data[:, 0], data[:, 1], data[:, 2]),
        ThresholdCurve(data[:, 0], data[:, 3], data[:, 4]),
    )


def theta(curve_d0: ThresholdCurve, curve_d1: ThresholdCurve, t):
    """Ratio of the smaller never-click power to the larger always-click power."""
    p0_a, p100_a = curve_d0.at(t)
    p0_b, p100_b = curve_d1.at(t)
    return np.minimum(p0_a, p0_b) / np.maximum(p100_a, p100_b)


def attack_feasible(curve_d0: ThresholdCurve, curve_d1: ThresholdCurve, t) -> bool:
    return bool(theta(curve_d0, curve_d1, t) > FEASIBILITY_RATIO)


@dataclass(frozen=True)
class FeasibilityReport:
    window: tuple[float, float] | None
    best_delay: float
    best_theta: float


def feasible_window(curve_d0: ThresholdCurve, curve_d1: ThresholdCurve, resolution: float = 0.001) -> FeasibilityReport:
    """Widest contiguous delay interval around the maximum of theta where it exceeds 0.5.

    Edges are located on a fine grid over the linearly interpolated curves.
    """
    lo = max(curve_d0.span[0], curve_d1.span[0])
    hi = min(curve_d0.span[1], curve_d1.span[1])
    grid = np.linspace(lo, hi, int(round((hi - lo) / resolution)) + 1)
    th = theta(curve_d0, curve_d1, grid)
    k = int(np.argmax(th))
    if th[k] <= FEASIBILITY_RATIO:
        return FeasibilityReport(None, float(grid[k]), float(th[k]))
    ok = th > FEASIBILITY_RATIO
    a = k
    while a > 0 and ok[a - 1]:
        a -= 1
    b = k
    while b < len(grid) - 1 and ok[b + 1]:
        b += 1
    return FeasibilityReport((float(grid[a]), float(grid[b])), float(grid[k]), float(th[k]))


@dataclass(frozen=True)
class PhaseSetting:
    alice_phase: float
    bob_phase: float

    def __post_init__(self):
        if not any(math.isclose(self.alice_phase, p) for p in ALICE_PHASES):
            raise ValueError(f"alice phase {self.alice_phase} not in {ALICE_PHASES}")
        if not any(math.isclose(self.bob_phase, p) for p in BOB_PHASES):
            raise ValueError(f"bob phase {self.bob_phase} not in {BOB_PHASES}")

    @classmethod
    def from_bits(cls, alice_bit: int, alice_basis: int, bob_basis: int) -> PhaseSetting:
        # basis selects the quarter offset, the bit adds pi
        return cls(ALICE_PHASES[alice_basis + 2 * alice_bit], BOB_PHASES[bob_basis])

    @property
    def difference(self) -> float:
        return (self.alice_phase - self.bob_phase) % (2 * math.pi)


@dataclass(frozen=True)
class FakedState:
    peak_power: float
    delay_after_gate: float
    basis: int
    bit_value: int
    target_gate: int = 0

    def __post_init__(self):
        if self.peak_power < 0:
            raise ValueError("peak power must be >= 0")


def route_faked_state(fs: FakedState, bob_basis: int) -> tuple[float, float]:
    """Power reaching ``(D0, D1)`` in microwatts."""
    if fs.basis == bob_basis:
        return (fs.peak_power, 0.0) if fs.bit_value == 0 else (0.0, fs.peak_power)
    half = fs.peak_power / 2
    return half, half


def quantum_detect(mu, phase_difference, eta, t_optics, rng):
    """Sample the detector outcome for a weak coherent signal.

    ``phase_difference`` is Alice's phase minus Bob's phase (radians); 0 routes
    every photon to D0 and pi to D1, quarter phases pick a detector at random.
    Accepts scalars or arrays and returns an :class:`Outcome` (scalar input) or
    an int array of outcome codes.
    """
    mu = np.asarray(mu, dtype=float)
    if np.any(mu < 0):
        raise ValueError("mean photon number must be >= 0")
    dphi = np.mod(np.asarray(phase_difference, dtype=float), 2 * np.pi)
    shape = np.broadcast(mu, dphi).shape
    p_detect = -np.expm1(-mu * t_optics * eta)
    detected = rng.random(shape) < p_detect
    quarter = np.isclose(np.sin(dphi) ** 2, 1.0)
    conclusive_det = np.where(np.isclose(np.cos(dphi), -1.0), 1, 0)
    random_det = (rng.random(shape) < 0.5).astype(int)
    det = np.where(quarter, random_det, conclusive_det)
    out = np.where(detected, det, int(Outcome.NONE))
    if out.ndim == 0:
        return Outcome(int(out))
    return out
