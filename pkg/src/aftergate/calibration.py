"""Cumulative afterpulse curves and least-squares recovery of trap parameters.

A single sub-threshold pulse populates the traps of both detectors; the
observable is the probability that either detector has clicked within the
first ``k`` gates that follow. The forward model is Monte Carlo, so the fit
reuses one fixed block of uniforms for every objective evaluation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numba as nb
import numpy as np
from scipy.optimize import minimize

from .detector import CarrierSource, DetectorParams, DetectorState, TrapLevel, afterpulse_probability, register_carriers
from .rng import generator

TRIAL_CHUNK = 100_000


@dataclass(frozen=True)
class CumulativeCurve:
    gates: np.ndarray
    probability: np.ndarray
    trials: int = 0

    def __post_init__(self):
        g = np.asarray(self.gates, dtype=np.int64)
        p = np.asarray(self.probability, dtype=float)
        if g.shape != p.shape or g.ndim != 1:
            raise ValueError("gates and probabilities must be aligned 1-d arrays")
        if np.any(p < 0) or np.any(p > 1):
            raise ValueError("cumulative probabilities must lie in [0, 1]")
        if np.any(np.diff(p) < 0):
            raise ValueError("cumulative probabilities must be non-decreasing")
        object.__setattr__(self, "gates", g)
        object.__setattr__(self, "probability", p)

    def save(self, path: str | Path) -> None:
        header = f"gate_index  cumulative_probability  (trials={self.trials})"
        np.savetxt(path, np.column_stack([self.gates, self.probability]), fmt=["%d", "%.17g"], header=header)


def load_curve(path: str | Path) -> CumulativeCurve:
    try:
        data = np.loadtxt(path, comments="#", ndmin=2)
    except OSError as exc:
        raise FileNotFoundError(f"curve file not found: {path}") from exc
    if data.shape[1] != 2:
        raise ValueError(f"{path}: expected 2 columns, found {data.shape[1]}")
    return CumulativeCurve(data[:, 0].astype(np.int64), data[:, 1])


def gate_probabilities(detectors, gates: int, gate_period_ns: int, pulse_delay_ns: float) -> np.ndarray:
    """Per-gate click probability of each detector after one half-power pulse, shape ``(2, gates)``."""
    t = np.arange(1, gates + 1) * int(gate_period_ns) - int(round(pulse_delay_ns))
    out = np.empty((2, gates))
    for d, p in enumerate(detectors):
        c = p.gammas.half_power * sum(tr.amplitude * np.exp(-t / tr.lifetime_ns) for tr in p.traps)
        out[d] = 1.0 - (1.0 - p.dark_prob) * (1.0 - np.clip(c, 0.0, 1.0))
    return out


def gate_probabilities_reference(detectors, gates: int, gate_period_ns: int, pulse_delay_ns: float) -> np.ndarray:
    """Same as :func:`gate_probabilities` but through the detector state operations."""
    out = np.empty((2, gates))
    t_pulse = int(round(pulse_delay_ns))
    for d, p in enumerate(detectors):
        state = register_carriers(DetectorState(now=t_pulse), p, t_pulse, CarrierSource.HALF_POWER)
        for j in range(gates):
            out[d, j] = afterpulse_probability(state, p, (j + 1) * int(gate_period_ns))
    return out


@nb.njit(cache=True)
def _first_click_counts(u, p, counts):
    n, k = u.shape[0], u.shape[1]
    for i in range(n):
        first = k
        for j in range(k):
            if u[i, j, 0] < p[0, j] or u[i, j, 1] < p[1, j]:
                first = j
                break
        counts[first] += 1


class _UniformBank:
    """Fixed uniforms for common-random-number evaluation, drawn in chunks."""

    def __init__(self, seed: int, trials: int, gates: int):
        rng = generator(seed, "cumulative")
        self.chunks = []
        left = trials
        while left > 0:
            m = min(left, TRIAL_CHUNK)
            self.chunks.append(rng.random((m, gates, 2)))
            left -= m
        self.trials = trials
        self.gates = gates

    def curve(self, p: np.ndarray) -> np.ndarray:
        counts = np.zeros(self.gates + 1, np.int64)
        for u in self.chunks:
            _first_click_counts(u, p, counts)
        return np.cumsum(counts[: self.gates]) / self.trials


def _check_sub_threshold(detectors, pulse_power: float, pulse_delay_ns: float) -> None:
    for p in detectors:
        if p.threshold_curve is None:
            continue
        p0, _ = p.threshold_curve.at(pulse_delay_ns)
        if pulse_power > p0:
            raise ValueError(f"{pulse_power} uW exceeds the no-click threshold {float(p0):.1f} uW of {p.name or 'detector'}")


def simulate_cumulative(
    detectors,
    pulse_power: float = 287.5,
    gates: int = 50,
    gate_period_ns: int = 200,
    trials: int = 100_000,
    seed: int = 0,
    pulse_delay_ns: float = 7.75,
) -> CumulativeCurve:
    """Monte Carlo probability of at least one click in either detector within each gate count."""
    _check_sub_threshold(detectors, pulse_power, pulse_delay_ns)
    rng = generator(seed, "cumulative")
    p = gate_probabilities(detectors, gates, gate_period_ns, pulse_delay_ns)
    counts = np.zeros(gates + 1, np.int64)
    left = trials
    while left > 0:
        m = min(left, TRIAL_CHUNK)
        _first_click_counts(rng.random((m, gates, 2)), p, counts)
        left -= m
    return CumulativeCurve(np.arange(1, gates + 1), np.cumsum(counts[:gates]) / trials, trials)


def exact_cumulative(detectors, gates: int = 50, gate_period_ns: int = 200, pulse_delay_ns: float = 7.75) -> np.ndarray:
    """Closed-form expectation of :func:`simulate_cumulative`."""
    p = gate_probabilities(detectors, gates, gate_period_ns, pulse_delay_ns)
    return 1.0 - np.cumprod((1.0 - p[0]) * (1.0 - p[1]))


PARAM_NAMES = ("dark_prob", "a1", "a2", "tau1_us", "tau2_us")


def _pack(detectors) -> np.ndarray:
    rows = [[p.dark_prob, p.traps[0].amplitude, p.traps[1].amplitude, p.traps[0].lifetime_us, p.traps[1].lifetime_us] for p in detectors]
    return np.log(np.asarray(rows, dtype=float).ravel())


def _unpack(x, templates) -> tuple[DetectorParams, DetectorParams] | None:
    v = np.exp(np.asarray(x).reshape(2, 5))
    if np.any(v[:, :3] > 1.0) or not np.all(np.isfinite(v)):
        return None
    out = []
    for row, tpl in zip(v, templates):
        traps = sorted([TrapLevel(float(row[1]), float(row[3])), TrapLevel(float(row[2]), float(row[4]))], key=lambda t: t.lifetime_us)
        out.append(tpl.with_changes(dark_prob=float(row[0]), traps=tuple(traps)))
    return out[0], out[1]


@dataclass
class FitResult:
    params: tuple[DetectorParams, DetectorParams]
    residual: float
    initial_residual: float
    iterations: int
    evaluations: int
    converged: bool
    seed: int = 0
    trials: int = 0
    best_curve: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def status(self) -> str:
        return "CONVERGED" if self.converged else "NOT_CONVERGED"

    def table(self) -> dict:
        return {
            p.name or f"D{i}": {
                "dark_prob": p.dark_prob,
                "a1": p.traps[0].amplitude,
                "a2": p.traps[1].amplitude,
                "tau1_us": p.traps[0].lifetime_us,
                "tau2_us": p.traps[1].lifetime_us,
            }
            for i, p in enumerate(self.params)
        }

    def to_json(self) -> str:
        return json.dumps(
            {
                "status": self.status,
                "residual": self.residual,
                "initial_residual": self.initial_residual,
                "iterations": self.iterations,
                "evaluations": self.evaluations,
                "seed": self.seed,
                "trials": self.trials,
                "params": self.table(),
            },
            indent=2,
        )


def fit_decay_params(
    measured: CumulativeCurve,
    initial_guess,
    budget: int = 2000,
    seed: int = 0,
    trials: int = 100_000,
    gate_period_ns: int = 200,
    pulse_delay_ns: float = 7.75,
    simplex_step: float = 0.3,
) -> FitResult:
    """Least-squares fit of dark probabilities, trap amplitudes and lifetimes of both detectors.

    Nelder-Mead runs on log-parameters from a simplex of edge ``simplex_step``
    (0.3 spans roughly +/-30% in every parameter). Every evaluation simulates
    ``trials`` histories on the same uniforms, so the objective is
    deterministic given ``seed``. Lifetimes are returned sorted ascending
    within each detector.
    """
    if len(measured.gates) < 10:
        raise ValueError("need at least 10 measured points")
    gates = int(measured.gates.max())
    idx = measured.gates - 1
    bank = _UniformBank(seed, trials, gates)
    templates = tuple(initial_guess)

    def objective(x) -> float:
        dets = _unpack(x, templates)
        if dets is None:
            return 1e6
        sim = bank.curve(gate_probabilities(dets, gates, gate_period_ns, pulse_delay_ns))
        return float(np.sum((sim[idx] - measured.probability) ** 2))

    x0 = _pack(templates)
    f0 = objective(x0)
    x_best, f_best = x0, f0
    used = iterations = 0
    converged = False
    # restart from the best vertex with a fresh simplex while budget remains
    while used < budget:
        res = minimize(
            objective,
            x_best,
            method="Nelder-Mead",
            options={
                "maxfev": budget - used,
                "initial_simplex": np.vstack([x_best, x_best + simplex_step * np.eye(x_best.size)]),
                "xatol": 1e-6,
                "fatol": 1e-14,
                "adaptive": True,
            },
        )
        used += int(res.nfev)
        iterations += int(res.nit)
        converged = bool(res.success)
        moved = not np.allclose(res.x, x_best, atol=1e-5)
        if res.fun <= f_best:
            x_best, f_best = res.x, float(res.fun)
        if not (converged and moved):
            break
    best = _unpack(x_best, templates)
    curve = bank.curve(gate_probabilities(best, gates, gate_period_ns, pulse_delay_ns))
    return FitResult(
        params=best,
        residual=f_best,
        initial_residual=f0,
        iterations=iterations,
        evaluations=used,
        converged=converged,
        seed=seed,
        trials=trials,
        best_curve=curve,
    )


def perturb(detectors, fraction: float, seed: int) -> tuple[DetectorParams, DetectorParams]:
    """Multiply every fitted quantity by an independent factor in ``[1-fraction, 1+fraction]``."""
    rng = generator(seed, "perturb")
    factors = rng.uniform(1 - fraction, 1 + fraction, 10)
    out = _unpack(_pack(detectors) + np.log(factors), tuple(detectors))
    if out is None:
        raise ValueError("perturbation pushed a probability above 1")
    return out
