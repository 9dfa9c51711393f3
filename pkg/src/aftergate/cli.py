"""Command-line entry point: ``aftergate <command> [options]``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3


def _common(default) -> argparse.ArgumentParser:
    # subcommand copies use SUPPRESS so they do not reset flags given before the command
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=default, help="base seed (default depends on the command)")
    p.add_argument("--threads", type=int, default=default, help="worker threads for the compiled kernels")
    p.add_argument("--out", type=Path, default=default, help="output directory or file")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common(argparse.SUPPRESS)
    ap = argparse.ArgumentParser(prog="aftergate", description=__doc__, parents=[_common(None)])
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sweep", parents=[common], help="QBER grid over gate frequency and transmittance")
    src = s.add_mutually_exclusive_group()
    src.add_argument("--config", type=Path, help="INI sweep definition")
    src.add_argument("--manifest", type=Path, help="replay a previous run from its manifest")
    s.add_argument("--strategy", choices=["BASELINE", "DEADTIME_RESPECTED", "DEADTIME_EXPLOIT"])
    s.add_argument("--frames", type=int, help="frames per cell")
    s.add_argument("--fast", action="store_true", help="cap frames per cell at 1000")

    f = sub.add_parser("fit", parents=[common], help="fit trap parameters to a cumulative afterpulse curve")
    f.add_argument("--data", type=Path, required=True, help="two-column file: gate index, cumulative probability")
    f.add_argument("--budget", type=int, default=2000, help="objective evaluations")
    f.add_argument("--trials", type=int, default=100_000, help="Monte Carlo histories per evaluation")
    f.add_argument("--perturb", type=float, default=0.0, help="scatter the bundled starting point by this fraction")

    c = sub.add_parser("curve", parents=[common], help="simulate a cumulative afterpulse curve")
    c.add_argument("--trials", type=int, default=1_000_000)
    c.add_argument("--gates", type=int, default=50)
    c.add_argument("--power", type=float, default=287.5, help="pulse power in uW")

    t = sub.add_parser("theta", parents=[common], help="feasibility window of the faked-state powers")
    t.add_argument("--curves", type=Path, required=True, help="threshold file: delay, P0 and P100 of both detectors")

    b = sub.add_parser("baseline", parents=[common], help="honest-protocol QBER at one operating point")
    b.add_argument("--frequency-mhz", type=float, default=5.0)
    b.add_argument("--transmittance", type=float, default=1.0)
    b.add_argument("--frames", type=int, default=1000)
    b.add_argument("--trace", type=Path, help="also write a click trace of the frames")

    m = sub.add_parser("monitor", parents=[common], help="scan a click trace for too closely spaced detections")
    m.add_argument("trace", type=Path)
    m.add_argument("--dead-time-us", type=float, default=10.0)
    return ap


def _set_threads(n):
    if n:
        import numba

        numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


def cmd_sweep(args) -> int:
    from .eve import Strategy
    from .harness import default_system, export_results, load_manifest, load_sweep_config, run_sweep, SweepSpec
    import dataclasses

    if args.manifest:
        spec, system = load_manifest(args.manifest)
    elif args.config:
        spec, system = load_sweep_config(args.config)
    else:
        spec, system = SweepSpec(), default_system()
    changes = {}
    if args.seed is not None:
        changes["base_seed"] = args.seed
    if args.strategy:
        changes["strategy"] = Strategy(args.strategy)
    if args.frames:
        changes["frames_per_cell"] = args.frames
    spec = dataclasses.replace(spec, **changes)
    if args.fast:
        spec = spec.fast()

    def show(cell):
        q = f"{cell.qber.qber:.4f}" if cell.qber else "  nan "
        v = cell.verdict.value if cell.verdict else "INFEASIBLE"
        print(f"f={cell.frequency / 1e6:6.3f} MHz  T={cell.transmittance:.3f}  chi={cell.chi:5d}  "
              f"burst={cell.mean_burst_length:5.2f}  qber={q}  {v}", flush=True)

    grid = run_sweep(spec, system, threads=args.threads, progress=show)
    table, man = export_results(grid, args.out or Path("sweep_out"))
    print(f"wrote {table} and {man}")
    return EXIT_INFEASIBLE if grid.all_infeasible else EXIT_OK


def cmd_fit(args) -> int:
    from .calibration import fit_decay_params, load_curve, perturb
    from .harness import default_system

    measured = load_curve(args.data)
    seed = 0 if args.seed is None else args.seed
    start = default_system().bob.detectors
    if args.perturb:
        start = perturb(start, args.perturb, seed)
    _set_threads(args.threads)
    res = fit_decay_params(measured, start, budget=args.budget, seed=seed, trials=args.trials)
    print(res.to_json())
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "fit.json").write_text(res.to_json(), encoding="utf-8")
        from .calibration import CumulativeCurve

        CumulativeCurve(measured.gates, res.best_curve[measured.gates - 1], res.trials).save(args.out / "fit_curve.dat")
    return EXIT_OK


def cmd_curve(args) -> int:
    from .calibration import simulate_cumulative
    from .harness import default_system

    cur = simulate_cumulative(default_system().bob.detectors, args.power, args.gates, trials=args.trials,
                              seed=0 if args.seed is None else args.seed)
    if args.out:
        cur.save(args.out)
    else:
        for g, p in zip(cur.gates, cur.probability):
            print(g, repr(float(p)))
    return EXIT_OK


def cmd_theta(args) -> int:
    from .optics import feasible_window, load_threshold_curves

    c0, c1 = load_threshold_curves(args.curves)
    rep = feasible_window(c0, c1)
    if rep.window is None:
        print(f"no feasible delay; max theta {rep.best_theta:.4f} at {rep.best_delay:.3f} ns")
        return EXIT_OK
    print(f"feasible window: [{rep.window[0]:.3f}, {rep.window[1]:.3f}] ns")
    print(f"max theta {rep.best_theta:.4f} at {rep.best_delay:.3f} ns")
    return EXIT_OK


def cmd_baseline(args) -> int:
    from .harness import default_system, receiver_for
    from .eve import Strategy
    from .protocol import ChannelConfig, write_trace
    from .rng import cell_seed, frame_generator, stream_key
    from .simulation import simulate_batch, simulate_frame

    system = default_system()
    bob = receiver_for(Strategy.BASELINE, system.bob)
    f_hz = args.frequency_mhz * 1e6
    frame = system.frame(f_hz)
    chan = ChannelConfig(args.transmittance)
    key = stream_key(cell_seed(0 if args.seed is None else args.seed, f_hz, args.transmittance), "baseline")
    _set_threads(args.threads)
    stats = simulate_batch(bob, frame, chan, key, range(args.frames))
    est = stats.estimate()
    print(json.dumps({
        "frequency_hz": f_hz,
        "transmittance": args.transmittance,
        "frames": args.frames,
        "raw_clicks_per_frame": est.raw_rate_per_frame,
        "sifted": est.sifted_total,
        "errors": est.errors_total,
        "qber": est.qber,
        "wilson_interval": list(est.wilson_interval),
    }, indent=2))
    if args.trace:
        rows = (simulate_frame(bob, frame, chan, frame_generator(key, i), i)[:2] for i in range(args.frames))
        n = write_trace(args.trace, rows)
        print(f"wrote {n} clicks to {args.trace}")
    return EXIT_OK


def cmd_monitor(args) -> int:
    from .protocol import monitor_click_spacing, read_trace

    frames = read_trace(args.trace)
    flagged = 0
    total = 0
    for out in frames:
        hits = monitor_click_spacing(out, args.dead_time_us)
        total += len(hits)
        flagged += bool(hits)
        for h in hits:
            print(f"frame {h.frame}: clicks at {h.first_ns} and {h.second_ns} ns ({h.spacing_ns} ns apart)")
    print(f"{total} anomalies in {flagged} of {len(frames)} frames with clicks")
    return EXIT_OK


COMMANDS = {
    "sweep": cmd_sweep,
    "fit": cmd_fit,
    "curve": cmd_curve,
    "theta": cmd_theta,
    "baseline": cmd_baseline,
    "monitor": cmd_monitor,
}


def main(argv=None) -> int:
    from .harness import ConfigError

    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"aftergate: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
