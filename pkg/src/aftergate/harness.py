"""Parameter sweeps over gate frequency and transmittance, with export and replay."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import importlib.resources
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .detector import DeadtimeMode, DetectorParams, GammaTable, TrapLevel, load_detector_config
from .eve import AttackPlan, EveParams, Strategy, calibrate_chi
from .optics import ThresholdCurve, load_threshold_curves
from .protocol import BobReceiver, ChannelConfig, DoubleClick, FrameConfig, QberEstimate, Verdict, compare_to_bounds
from .rng import cell_seed, stream_key
from .simulation import simulate_batch

DEFAULT_FREQUENCIES = (0.2e6, 0.5e6, 1e6, 2e6, 5e6, 10e6)
DEFAULT_TRANSMITTANCES = tuple(round(0.05 * k, 2) for k in range(1, 21))
FAST_FRAMES = 1000

RESULT_COLUMNS = (
    "f_hz", "T", "chi", "burst_len", "qber", "ci_low", "ci_high", "verdict", "seed",
    "min_burst", "sifted", "errors", "baseline_rate", "attack_rate", "anomalies_per_frame", "wall_time_s",
)


class ConfigError(ValueError):
    """Raised for unreadable or inconsistent sweep configuration."""


@dataclass(frozen=True)
class SweepSpec:
    frequencies: tuple[float, ...] = DEFAULT_FREQUENCIES
    transmittances: tuple[float, ...] = DEFAULT_TRANSMITTANCES
    frames_per_cell: int = 10_000
    strategy: Strategy = Strategy.DEADTIME_RESPECTED
    base_seed: int = 20110101
    calibration_frames: int = 1000
    chi_tolerance: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "frequencies", tuple(float(f) for f in self.frequencies))
        object.__setattr__(self, "transmittances", tuple(float(t) for t in self.transmittances))
        if not self.frequencies or not self.transmittances:
            raise ConfigError("sweep axes must be non-empty")
        if any(f <= 0 for f in self.frequencies):
            raise ConfigError("frequencies must be positive")
        if self.frames_per_cell < 1 or self.calibration_frames < 1:
            raise ConfigError("frame counts must be >= 1")
        if not 0 <= self.base_seed < 2**64:
            raise ConfigError("base_seed must fit in 64 bits")

    @property
    def cells(self) -> list[tuple[float, float]]:
        return [(f, t) for f in self.frequencies for t in self.transmittances]

    def fast(self) -> SweepSpec:
        return dataclasses.replace(
            self, frames_per_cell=min(self.frames_per_cell, FAST_FRAMES), calibration_frames=min(self.calibration_frames, FAST_FRAMES)
        )


@dataclass(frozen=True)
class SystemConfig:
    bob: BobReceiver
    eve: EveParams = field(default_factory=EveParams)
    gates_per_frame: int = 1075
    interframe_gap_ns: int = 50_000

    def frame(self, frequency_hz: float) -> FrameConfig:
        return FrameConfig.from_frequency(frequency_hz, gates_per_frame=self.gates_per_frame, interframe_gap_ns=self.interframe_gap_ns)


@dataclass
class SweepCell:
    frequency: float
    transmittance: float
    chi: int
    mean_burst_length: float
    qber: QberEstimate | None
    verdict: Verdict | None
    wall_time: float
    seed: int
    feasible: bool = True
    min_burst: int = 0
    baseline_rate: float = 0.0
    attack_rate: float = 0.0
    anomalies_per_frame: float = 0.0


@dataclass
class SweepGrid:
    spec: SweepSpec
    system: SystemConfig
    cells: list[SweepCell]

    def cell(self, frequency: float, transmittance: float) -> SweepCell:
        for c in self.cells:
            if math.isclose(c.frequency, frequency) and math.isclose(c.transmittance, transmittance):
                return c
        raise KeyError((frequency, transmittance))

    @property
    def all_infeasible(self) -> bool:
        return bool(self.cells) and not any(c.feasible for c in self.cells)


def bundled_path(name: str) -> Path:
    return Path(str(importlib.resources.files("aftergate") / "data" / name))


def default_system(eve: EveParams | None = None) -> SystemConfig:
    c0, c1 = load_threshold_curves(bundled_path("thresholds.dat"))
    d0 = load_detector_config(bundled_path("clavis2_d0.cfg"), c0)
    d1 = load_detector_config(bundled_path("clavis2_d1.cfg"), c1)
    return SystemConfig(BobReceiver(d0, d1), eve or EveParams.perfect())


def _resolve(base: Path, name: str) -> Path:
    p = Path(name)
    if not p.is_absolute():
        p = base / p
    if not p.exists() and bundled_path(name).exists():
        return bundled_path(name)
    return p


def _floats(text: str) -> tuple[float, ...]:
    text = text.strip()
    if ":" in text and "," not in text:
        lo, hi, step = (float(x) for x in text.split(":"))
        n = int(round((hi - lo) / step))
        return tuple(round(lo + k * step, 12) for k in range(n + 1))
    return tuple(float(x) for x in text.replace(",", " ").split())


def load_sweep_config(path: str | Path) -> tuple[SweepSpec, SystemConfig]:
    """Read a sweep definition from an INI file.

    Sections: ``[sweep]``, ``[frame]``, ``[bob]`` and ``[eve]``. Detector and
    threshold files are resolved relative to the config file, falling back to
    the bundled data of the same name.
    """
    path = Path(path)
    cp = configparser.ConfigParser()
    try:
        if not cp.read(path):
            raise ConfigError(f"config not found: {path}")
        sw = cp["sweep"] if cp.has_section("sweep") else {}
        spec = SweepSpec(
            frequencies=tuple(f * 1e6 for f in _floats(sw.get("frequencies_mhz", "0.2, 0.5, 1, 2, 5, 10"))),
            transmittances=_floats(sw.get("transmittances", "0.05:1.0:0.05")),
            frames_per_cell=int(sw.get("frames_per_cell", 10_000)),
            strategy=Strategy(sw.get("strategy", "DEADTIME_RESPECTED").upper()),
            base_seed=int(sw.get("base_seed", 20110101)),
            calibration_frames=int(sw.get("calibration_frames", 1000)),
            chi_tolerance=float(sw.get("chi_tolerance", 0.05)),
        )
        fr = cp["frame"] if cp.has_section("frame") else {}
        bob_sec = cp["bob"] if cp.has_section("bob") else {}
        curves = load_threshold_curves(_resolve(path.parent, bob_sec.get("thresholds", "thresholds.dat")))
        d0 = load_detector_config(_resolve(path.parent, bob_sec.get("detector_d0", "clavis2_d0.cfg")), curves[0])
        d1 = load_detector_config(_resolve(path.parent, bob_sec.get("detector_d1", "clavis2_d1.cfg")), curves[1])
        bob = BobReceiver(
            d0, d1,
            optics_transmittance=float(bob_sec.get("optics_transmittance", 0.412)),
            double_click=DoubleClick(bob_sec.get("double_click", "random").lower()),
        )
        ev = cp["eve"] if cp.has_section("eve") else {}
        eve = EveParams(
            detector_efficiency=float(ev.get("detector_efficiency", 1.0)),
            dark_prob=float(ev.get("dark_prob", 0.0)),
            memory_depth=int(ev.get("memory_depth", 3)),
            full_power=float(ev.get("full_power_uw", 575.0)),
            pulse_delay=float(ev.get("pulse_delay_ns", 7.75)),
        )
        system = SystemConfig(bob, eve, int(fr.get("gates_per_frame", 1075)), int(fr.get("interframe_gap_ns", 50_000)))
    except ConfigError:
        raise
    except (configparser.Error, KeyError, ValueError, FileNotFoundError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if spec.strategy is not Strategy.BASELINE:
        try:
            eve.check_powers(d0.threshold_curve, d1.threshold_curve)
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return spec, system


def receiver_for(strategy: Strategy, bob: BobReceiver) -> BobReceiver:
    """Dead-time behaviour each strategy is designed against."""
    if strategy is Strategy.DEADTIME_EXPLOIT:
        return bob.with_mode(DeadtimeMode.ACCEPT_AND_EXTEND)
    return bob.with_mode(DeadtimeMode.REJECT)


def burst_candidates(strategy: Strategy, eve: EveParams) -> tuple[int, ...]:
    if strategy is Strategy.DEADTIME_RESPECTED:
        return tuple(range(max(eve.memory_depth, 1), 0, -1))
    return (1,)


def run_cell(spec: SweepSpec, system: SystemConfig, frequency: float, transmittance: float) -> SweepCell:
    t0 = time.perf_counter()
    frame = system.frame(frequency)
    chan = ChannelConfig(transmittance)
    seed = cell_seed(spec.base_seed, frequency, transmittance)
    bob = receiver_for(spec.strategy, system.bob)
    eve = system.eve

    if spec.strategy is Strategy.BASELINE:
        stats = simulate_batch(bob, frame, chan, stream_key(seed, "baseline"), range(spec.frames_per_cell))
        est = stats.estimate()
        return SweepCell(
            frequency, transmittance, 0, 0.0, est, compare_to_bounds(est) if est.sifted_total else None,
            time.perf_counter() - t0, seed, True, 0, stats.raw_rate, stats.raw_rate, float(stats.anomalies.mean()),
        )

    base = simulate_batch(bob, frame, chan, stream_key(seed, "baseline"), range(spec.calibration_frames))
    target = base.raw_rate
    cal_key = stream_key(seed, "calibrate")
    cal = None
    plan = None
    # longest feasible burst first: longer bursts suppress more afterpulses
    for min_burst in burst_candidates(spec.strategy, eve):
        def rate(chi: int, _l=min_burst) -> float:
            p = AttackPlan(chi, spec.strategy, _l)
            return simulate_batch(bob, frame, chan, cal_key, range(spec.calibration_frames), eve, p).raw_rate

        cal = calibrate_chi(target, rate, frame.gates_per_frame, spec.chi_tolerance)
        if cal.feasible:
            plan = AttackPlan(cal.chi, spec.strategy, min_burst)
            break

    if plan is None:
        return SweepCell(
            frequency, transmittance, cal.chi, 0.0, None, None, time.perf_counter() - t0, seed,
            feasible=False, baseline_rate=target, attack_rate=cal.rate,
        )

    stats = simulate_batch(bob, frame, chan, stream_key(seed, "attack"), range(spec.frames_per_cell), eve, plan)
    est = stats.estimate()
    return SweepCell(
        frequency, transmittance, plan.chi, stats.mean_burst_length, est,
        compare_to_bounds(est) if est.sifted_total else None,
        time.perf_counter() - t0, seed, True, plan.min_burst, target, stats.raw_rate, float(stats.anomalies.mean()),
    )


def run_sweep(
    spec: SweepSpec,
    system: SystemConfig | None = None,
    threads: int | None = None,
    progress: Callable[[SweepCell], None] | None = None,
) -> SweepGrid:
    """Evaluate every (frequency, transmittance) cell in row-major order.

    Each cell draws from its own seed, so any cell can be rerun on its own.
    Frames run in parallel inside the compiled kernel; results do not depend
    on the thread count.
    """
    system = system or default_system()
    if threads:
        import numba

        numba.set_num_threads(max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS)))
    cells = []
    for f, t in spec.cells:
        cell = run_cell(spec, system, f, t)
        cells.append(cell)
        if progress:
            progress(cell)
    return SweepGrid(spec, system, cells)


# export and replay


def _row(c: SweepCell) -> dict:
    q = c.qber
    nan = float("nan")
    return {
        "f_hz": repr(c.frequency),
        "T": repr(c.transmittance),
        "chi": c.chi,
        "burst_len": repr(c.mean_burst_length),
        "qber": repr(q.qber if q else nan),
        "ci_low": repr(q.wilson_interval[0] if q else nan),
        "ci_high": repr(q.wilson_interval[1] if q else nan),
        "verdict": c.verdict.value if c.verdict else "INFEASIBLE",
        "seed": c.seed,
        "min_burst": c.min_burst,
        "sifted": q.sifted_total if q else 0,
        "errors": q.errors_total if q else 0,
        "baseline_rate": repr(c.baseline_rate),
        "attack_rate": repr(c.attack_rate),
        "anomalies_per_frame": repr(c.anomalies_per_frame),
        "wall_time_s": f"{c.wall_time:.3f}",
    }


def _detector_dict(p: DetectorParams) -> dict:
    d = dataclasses.asdict(p)
    d["deadtime_mode"] = p.deadtime_mode.value
    tc = p.threshold_curve
    d["threshold_curve"] = None if tc is None else {k: np.asarray(getattr(tc, k)).tolist() for k in ("delays", "p0", "p100")}
    return d


def _detector_from(d: dict) -> DetectorParams:
    tc = d.get("threshold_curve")
    g = d["gammas"]
    return DetectorParams(
        dark_prob=d["dark_prob"],
        traps=tuple(TrapLevel(t["amplitude"], t["lifetime_us"]) for t in d["traps"]),
        gammas=GammaTable(g["half_power"], g["full_power_applications"], g["avalanche"]),
        quantum_efficiency=d["quantum_efficiency"],
        dead_time_us=d["dead_time_us"],
        threshold_curve=None if tc is None else ThresholdCurve(np.array(tc["delays"]), np.array(tc["p0"]), np.array(tc["p100"])),
        deadtime_mode=DeadtimeMode(d["deadtime_mode"]),
        deadtime_detection_prob=d["deadtime_detection_prob"],
        name=d.get("name", ""),
    )


def manifest(grid: SweepGrid) -> dict:
    s, sysc = grid.spec, grid.system
    return {
        "code_version": __version__,
        "spec": {
            "frequencies": list(s.frequencies),
            "transmittances": list(s.transmittances),
            "frames_per_cell": s.frames_per_cell,
            "strategy": s.strategy.value,
            "base_seed": s.base_seed,
            "calibration_frames": s.calibration_frames,
            "chi_tolerance": s.chi_tolerance,
        },
        "system": {
            "gates_per_frame": sysc.gates_per_frame,
            "interframe_gap_ns": sysc.interframe_gap_ns,
            "optics_transmittance": sysc.bob.optics_transmittance,
            "double_click": sysc.bob.double_click.value,
            "d0": _detector_dict(sysc.bob.d0),
            "d1": _detector_dict(sysc.bob.d1),
            "eve": dataclasses.asdict(sysc.eve),
        },
        "cells": [{"f_hz": c.frequency, "T": c.transmittance, "seed": c.seed, "qber": _row(c)["qber"]} for c in grid.cells],
    }


def export_results(grid: SweepGrid, path: str | Path) -> tuple[Path, Path]:
    """Write ``results.csv`` and ``manifest.json`` into directory ``path``."""
    out = Path(path)
    table, man = out / "results.csv", out / "manifest.json"
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(table, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
            w.writeheader()
            for c in grid.cells:
                w.writerow(_row(c))
        man.write_text(json.dumps(manifest(grid), indent=2), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write results to {out}: {exc}") from exc
    return table, man


def read_results(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def load_manifest(path: str | Path) -> tuple[SweepSpec, SystemConfig]:
    try:
        m = json.loads(Path(path).read_text(encoding="utf-8"))
        s, sysc = m["spec"], m["system"]
        spec = SweepSpec(
            frequencies=tuple(s["frequencies"]),
            transmittances=tuple(s["transmittances"]),
            frames_per_cell=s["frames_per_cell"],
            strategy=Strategy(s["strategy"]),
            base_seed=s["base_seed"],
            calibration_frames=s["calibration_frames"],
            chi_tolerance=s["chi_tolerance"],
        )
        bob = BobReceiver(
            _detector_from(sysc["d0"]), _detector_from(sysc["d1"]),
            optics_transmittance=sysc["optics_transmittance"], double_click=DoubleClick(sysc["double_click"]),
        )
        system = SystemConfig(bob, EveParams(**sysc["eve"]), sysc["gates_per_frame"], sysc["interframe_gap_ns"])
    except OSError as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid manifest {path}: {exc}") from exc
    return spec, system


def qber_values(cells: Sequence[SweepCell]) -> list[float]:
    return [c.qber.qber if c.qber else float("nan") for c in cells]
