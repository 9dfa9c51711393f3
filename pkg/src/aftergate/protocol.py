"""BB84 session mechanics: frames, sifting, QBER accounting and monitors."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .detector import DeadtimeMode, DetectorParams

SHOR_PRESKILL_BOUND = 0.11
TOLERANT_BOUND = 0.20
WILSON_Z = 1.959963984540054


@dataclass(frozen=True)
class FrameConfig:
    gates_per_frame: int = 1075
    gate_period_ns: int = 200
    interframe_gap_ns: int = 50_000

    def __post_init__(self):
        if self.gates_per_frame < 1:
            raise ValueError("gates_per_frame must be >= 1")
        if self.gate_period_ns <= 0:
            raise ValueError("gate_period_ns must be > 0")
        object.__setattr__(self, "gate_period_ns", int(self.gate_period_ns))

    @classmethod
    def from_frequency(cls, frequency_hz: float, **kw) -> FrameConfig:
        return cls(gate_period_ns=int(round(1e9 / frequency_hz)), **kw)

    @property
    def gate_frequency(self) -> float:
        return 1e9 / self.gate_period_ns

    @property
    def frame_duration_ns(self) -> int:
        return self.gates_per_frame * self.gate_period_ns + self.interframe_gap_ns


@dataclass(frozen=True)
class ChannelConfig:
    transmittance: float
    alice_mean_photons: float | None = None

    def __post_init__(self):
        if not 0.0 < self.transmittance <= 1.0:
            raise ValueError("transmittance must be in (0, 1]")
        if self.alice_mean_photons is None:
            object.__setattr__(self, "alice_mean_photons", self.transmittance)
        if not self.alice_mean_photons > 0:
            raise ValueError("alice_mean_photons must be > 0")

    @property
    def mu(self) -> float:
        return self.alice_mean_photons


class DoubleClick(enum.Enum):
    RANDOM = "random"
    DISCARD = "discard"


@dataclass(frozen=True)
class BobReceiver:
    d0: DetectorParams
    d1: DetectorParams
    optics_transmittance: float = 0.412
    double_click: DoubleClick = DoubleClick.RANDOM

    @property
    def detectors(self) -> tuple[DetectorParams, DetectorParams]:
        return self.d0, self.d1

    @property
    def deadtime_mode(self) -> DeadtimeMode:
        if self.d0.deadtime_mode is not self.d1.deadtime_mode:
            raise ValueError("both detectors must share one dead-time mode")
        return self.d0.deadtime_mode

    @property
    def dead_time_ns(self) -> int:
        return max(self.d0.dead_time_ns, self.d1.dead_time_ns)

    def with_mode(self, mode: DeadtimeMode) -> BobReceiver:
        return replace(self, d0=replace(self.d0, deadtime_mode=mode), d1=replace(self.d1, deadtime_mode=mode))

    def with_detectors(self, **changes) -> BobReceiver:
        return replace(self, d0=replace(self.d0, **changes), d1=replace(self.d1, **changes))


class Click(NamedTuple):
    gate: int
    time_ns: int
    detector: int  # 0, 1, or 2 for both
    bob_basis: int
    decoded_bit: int  # -1 when a double click is discarded
    kind: str = "gate"  # "pulse" for linear-mode clicks after the gate


@dataclass
class AliceRecord:
    bits: np.ndarray
    bases: np.ndarray


@dataclass
class FrameOutcome:
    frame: int
    clicks: list[Click]
    sifted_bits: int
    errors: int
    deadtime_intervals: list[tuple[int, int]] = field(default_factory=list)
    faked_pulses: int = 0

    @property
    def click_gates(self) -> int:
        return len({c.gate for c in self.clicks})


@dataclass(frozen=True)
class QberEstimate:
    qber: float
    sifted_total: int
    errors_total: int
    wilson_interval: tuple[float, float]
    raw_rate_per_frame: float
    eve_disagreements: int | None = None


class Verdict(enum.Enum):
    SECURE_VIOLATED_11 = "SECURE_VIOLATED_11"
    SECURE_VIOLATED_20 = "SECURE_VIOLATED_20"
    ATTACK_DETECTED = "ATTACK_DETECTED"


def wilson_interval(errors: int, n: int, z: float = WILSON_Z) -> tuple[float, float]:
    if n <= 0:
        return 0.0, 1.0
    p = errors / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    # exact endpoints at k = 0 and k = n; the formula leaves rounding residue there
    lo = 0.0 if errors == 0 else max(0.0, centre - half)
    hi = 1.0 if errors == n else min(1.0, centre + half)
    return lo, hi


def make_estimate(errors: int, sifted: int, raw_clicks: float, frames: int, eve_disagreements=None) -> QberEstimate:
    qber = errors / sifted if sifted else float("nan")
    return QberEstimate(
        qber=qber,
        sifted_total=int(sifted),
        errors_total=int(errors),
        wilson_interval=wilson_interval(errors, sifted),
        raw_rate_per_frame=raw_clicks / frames if frames else 0.0,
        eve_disagreements=eve_disagreements,
    )


def sift_and_count(
    outcomes: Sequence[FrameOutcome],
    alice_records: Sequence[AliceRecord],
    eve_records: Sequence | None = None,
) -> QberEstimate:
    """Keep clicks where Bob's basis equals Alice's and count bit errors.

    ``eve_records`` are optional ``(bases, bits)`` array pairs per frame; when
    given, sifted bits where Eve's bit differs from Bob's are tallied too.
    """
    if len(outcomes) != len(alice_records):
        raise ValueError(f"{len(outcomes)} outcomes but {len(alice_records)} Alice records")
    if eve_records is not None and len(eve_records) != len(outcomes):
        raise ValueError("Eve records are not aligned with outcomes")
    sifted = errors = raw = eve_diff = 0
    for k, (out, rec) in enumerate(zip(outcomes, alice_records)):
        n_gates = len(rec.bits)
        seen = set()
        for c in out.clicks:
            if not 0 <= c.gate < n_gates:
                raise ValueError(f"click at gate {c.gate} outside Alice record of {n_gates} gates")
            if c.gate in seen:
                continue
            seen.add(c.gate)
            raw += 1
            if c.decoded_bit < 0 or c.bob_basis != rec.bases[c.gate]:
                continue
            sifted += 1
            errors += int(c.decoded_bit != rec.bits[c.gate])
            if eve_records is not None:
                eve_bases, eve_bits = eve_records[k]
                eve_diff += int(eve_bits[c.gate] != c.decoded_bit)
    return make_estimate(errors, sifted, raw, len(outcomes), eve_diff if eve_records is not None else None)


def compare_to_bounds(q: QberEstimate | float) -> Verdict:
    """Which security proofs the observed QBER would fail to flag."""
    value = q.qber if isinstance(q, QberEstimate) else float(q)
    if isinstance(q, QberEstimate) and q.sifted_total <= 0:
        raise ValueError("no sifted bits")
    if value < SHOR_PRESKILL_BOUND:
        return Verdict.SECURE_VIOLATED_11
    if value < TOLERANT_BOUND:
        return Verdict.SECURE_VIOLATED_20
    return Verdict.ATTACK_DETECTED


@dataclass(frozen=True)
class SpacingAnomaly:
    frame: int
    first_ns: int
    second_ns: int

    @property
    def spacing_ns(self) -> int:
        return self.second_ns - self.first_ns


def monitor_click_spacing(outcome: FrameOutcome, dead_time_us: float) -> list[SpacingAnomaly]:
    """Flag consecutive detection events closer together than the dead time."""
    limit = dead_time_us * 1000.0
    times = sorted({c.time_ns for c in outcome.clicks})
    return [SpacingAnomaly(outcome.frame, a, b) for a, b in zip(times, times[1:]) if b - a < limit]


def run_baseline_frame(frame: FrameConfig, chan: ChannelConfig, detectors: BobReceiver, rng, frame_index: int = 0) -> FrameOutcome:
    """One frame of the honest protocol without an eavesdropper."""
    from .simulation import simulate_frame

    return simulate_frame(detectors, frame, chan, rng, frame_index=frame_index)[0]


# trace files: one JSON object per line

TRACE_FIELDS = ("frame", "gate", "time_ns", "detector", "bob_basis", "alice_basis", "alice_bit", "decoded_bit", "flags")


def trace_records(outcome: FrameOutcome, alice: AliceRecord, flags: Sequence[str] = ()) -> Iterable[dict]:
    for c in outcome.clicks:
        yield {
            "frame": outcome.frame,
            "gate": int(c.gate),
            "time_ns": int(c.time_ns),
            "detector": int(c.detector),
            "bob_basis": int(c.bob_basis),
            "alice_basis": int(alice.bases[c.gate]),
            "alice_bit": int(alice.bits[c.gate]),
            "decoded_bit": int(c.decoded_bit),
            "flags": [c.kind, *flags],
        }


def write_trace(path: str | Path, frames: Iterable[tuple[FrameOutcome, AliceRecord]]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for outcome, alice in frames:
            for rec in trace_records(outcome, alice):
                fh.write(json.dumps(rec) + "\n")
                n += 1
    return n


def read_trace(path: str | Path) -> list[FrameOutcome]:
    """Rebuild per-frame outcomes (clicks only) from a trace file."""
    by_frame: dict[int, list[Click]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                kind = "pulse" if "pulse" in r.get("flags", ()) else "gate"
                click = Click(int(r["gate"]), int(r["time_ns"]), int(r["detector"]), int(r["bob_basis"]), int(r["decoded_bit"]), kind)
                by_frame.setdefault(int(r["frame"]), []).append(click)
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad trace record ({exc})") from exc
    return [FrameOutcome(frame=k, clicks=sorted(v, key=lambda c: c.time_ns), sifted_bits=0, errors=0) for k, v in sorted(by_frame.items())]
