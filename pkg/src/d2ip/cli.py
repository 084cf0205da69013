"""Experiment harness: simulate, reconstruct, evaluate, report.

Every command writes a ``manifest.json`` next to its outputs so a run
directory is self-describing and exactly re-executable. All randomness
flows from the seeds recorded there. Exit codes: 0 success, 2 configuration
error, 3 I/O error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from . import __version__
from .baselines import TikhonovConfig, TVConfig, tikhonov, tv_reconstruct
from .errors import FormatError, NumericalError
from .forward import (
    assemble_sensitivity,
    load_matrix,
    load_voltages,
    normalize_sensitivity,
    save_matrix,
    save_voltages,
)
from .geometry import (
    Extent,
    THORAX_BOX,
    build_grid,
    generate_protocol,
    load_geometry,
    place_electrodes,
    default_layer_heights,
    save_geometry,
)
from .metrics import MetricsReport, evaluate_sequence
from .phantom import (
    ConductivitySequence,
    load_sequence,
    make_case1,
    make_case2,
    save_sequence,
    synthesize_measurements,
)
from .pipeline import (
    RunConfig,
    ablation_mode,
    load_run_config,
    read_timing_csv,
    read_traces_csv,
    reconstruct_sequence,
    save_run_config,
    write_timing_csv,
    write_traces_csv,
)
from .priornet import save_checkpoint

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4


def _out_dir(path: str) -> Path:
    root = os.environ.get("D2IP_OUTPUT_ROOT")
    out = Path(root) / path if root and not Path(path).is_absolute() else Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, doc: dict) -> None:
    doc = {"package_version": __version__, **doc}
    with open(out / "manifest.json", "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)


def _parse_snr(text: str) -> float | None:
    if text.lower() in ("none", "inf"):
        return None
    return float(text)


def cmd_simulate(args) -> int:
    out = _out_dir(args.out)
    extent = (
        THORAX_BOX
        if args.extent is None
        else Extent.centered(*args.extent)
    )
    grid = build_grid(args.grid[0], args.grid[1], args.grid[2], extent)
    array = place_electrodes(
        grid, args.electrodes_per_layer, args.layers, default_layer_heights(grid, args.layers)
    )
    protocol = generate_protocol(array, args.scheme)
    matrix = normalize_sensitivity(assemble_sensitivity(grid, array, protocol))
    snr = _parse_snr(args.snr_db)
    if args.case == "case1":
        truth = make_case1(grid, args.frames)
    else:
        truth = make_case2(grid, args.frames)
    voltages = synthesize_measurements(truth, matrix, snr, args.seed)

    save_geometry(out / "geometry.json", grid, array, protocol)
    save_matrix(matrix, out / "sensitivity.f64")
    save_sequence(truth, out / "truth.f64")
    save_voltages(voltages, out / "voltages.f64")
    _write_manifest(
        out,
        {
            "command": "simulate",
            "case": args.case,
            "grid": {"R": grid.rows, "C": grid.cols, "P": grid.planes, "extent": extent.to_json()},
            "frames": args.frames,
            "snr_db": snr,
            "seed": args.seed,
            "scheme": args.scheme,
            "electrodes_per_layer": args.electrodes_per_layer,
            "layers": args.layers,
            "M": protocol.count,
            "T_voltages": voltages.n_frames,
            "grid_ref": grid.ref_id,
            "protocol_ref": protocol.ref_id,
            "files": ["geometry.json", "sensitivity.f64", "truth.f64", "voltages.f64"],
        },
    )
    print(f"simulated {args.case}: M={protocol.count}, T={voltages.n_frames} -> {out}")
    return EXIT_OK


def _scenario_output_map(truth: ConductivitySequence) -> tuple[float, float]:
    cond = truth.conductivities or {}
    if "lung_end_s" in cond and "background_s" in cond:
        return (cond["lung_end_s"] - cond["background_s"], 0.0)
    lo = float(truth.values.min())
    hi = float(truth.values.max())
    return (lo, hi) if lo < hi else (lo - 1e-3, lo + 1e-3)


def _reconstruct_d2ip(args, run_dir: Path, out: Path) -> dict:
    grid, _, _ = load_geometry(run_dir / "geometry.json")
    matrix = load_matrix(run_dir / "sensitivity.f64")
    voltages = load_voltages(run_dir / "voltages.f64")
    if args.config:
        cfg = load_run_config(args.config)
    else:
        cfg = RunConfig(seed=args.seed if args.seed is not None else 0)
        truth_path = run_dir / "truth.f64"
        if truth_path.exists():
            cfg = replace(cfg, output_map=_scenario_output_map(load_sequence(truth_path)))
    overrides = {}
    for name in ("iters_warm", "iters_first", "iters_next", "learning_rate", "record_every"):
        value = getattr(args, name)
        if value is not None:
            overrides[name] = value
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        cfg = replace(cfg, **overrides)
    if args.disable:
        cfg = ablation_mode(cfg, set(args.disable.split(",")))

    warm_voltage = None
    if args.warm_voltage:
        warm_voltage = load_voltages(args.warm_voltage).frames[0].values
    elif args.warm_frame is not None:
        cfg = replace(cfg, warm_frame=args.warm_frame)

    result = reconstruct_sequence(matrix, voltages, cfg, grid, warm_voltage=warm_voltage)
    result.sequence.method = "d2ip"
    save_sequence(result.sequence, out / "recon_d2ip.f64")
    write_traces_csv(out / "traces.csv", result.traces)
    write_timing_csv(out / "timing.csv", result.timing)
    save_run_config(cfg, out / "run_config.json")
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    for stage, state in result.states.items():
        save_checkpoint(ckpt_dir / f"{stage}.pt", state, cfg.network, result.noise_sha256)
    with open(out / "stages.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "provenance", "iteration_counter", "checksum", "noise_sha256"])
        for s in result.provenance_chain:
            writer.writerow([s.name, s.provenance, s.iteration_counter, s.checksum, s.noise_sha256])
    return {
        "method": "d2ip",
        "run_config": cfg.to_json(),
        "outputs": ["recon_d2ip.f64", "traces.csv", "timing.csv", "stages.csv", "run_config.json"],
    }


def _reconstruct_tikhonov(args, run_dir: Path, out: Path) -> dict:
    matrix = load_matrix(run_dir / "sensitivity.f64")
    voltages = load_voltages(run_dir / "voltages.f64")
    mus = args.mu or [0.005]
    outputs = []
    import time as _time

    for mu in mus:
        cfg = TikhonovConfig(mu)
        t0 = _time.perf_counter()
        cols = [tikhonov(matrix, fr.values, cfg) for fr in voltages.frames]
        seconds = _time.perf_counter() - t0
        seq = ConductivitySequence(
            np.stack(cols, axis=1),
            grid_ref=matrix.grid_ref,
            is_ground_truth=False,
            reference_mode=voltages.reference_mode,
            method=f"tikhonov(mu={mu})",
        )
        name = f"recon_tikhonov_mu{mu}.f64"
        save_sequence(seq, out / name)
        outputs.append(name)
        per_frame = seconds / voltages.n_frames
        write_timing_csv(
            out / f"timing_mu{mu}.csv",
            {f"frame_{i}": per_frame for i in range(1, voltages.n_frames + 1)},
        )
    return {"method": "tikhonov", "mu": mus, "outputs": outputs}


def _reconstruct_tv(args, run_dir: Path, out: Path) -> dict:
    grid, _, _ = load_geometry(run_dir / "geometry.json")
    matrix = load_matrix(run_dir / "sensitivity.f64")
    voltages = load_voltages(run_dir / "voltages.f64")
    cfg = TVConfig(
        lambda_tv=args.lambda_tv,
        iterations=args.tv_iterations,
        step_size=args.tv_step,
    )
    import time as _time

    cols, timing = [], {}
    for fr in voltages.frames:
        t0 = _time.perf_counter()
        x, _ = tv_reconstruct(matrix, fr.values, cfg, grid)
        timing[f"frame_{fr.frame_index}"] = _time.perf_counter() - t0
        cols.append(x)
    seq = ConductivitySequence(
        np.stack(cols, axis=1),
        grid_ref=matrix.grid_ref,
        is_ground_truth=False,
        reference_mode=voltages.reference_mode,
        method=f"tv(lambda={cfg.lambda_tv})",
    )
    save_sequence(seq, out / "recon_tv.f64")
    write_timing_csv(out / "timing.csv", timing)
    return {
        "method": "tv",
        "tv_config": {
            "lambda_tv": cfg.lambda_tv,
            "iterations": cfg.iterations,
            "step_size": cfg.step_size,
        },
        "outputs": ["recon_tv.f64", "timing.csv"],
    }


def cmd_reconstruct(args) -> int:
    run_dir = Path(args.run)
    for required in ("geometry.json", "sensitivity.f64", "voltages.f64"):
        if not (run_dir / required).exists():
            raise FileNotFoundError(f"missing input {run_dir / required}; run simulate first")
    out = _out_dir(args.out or str(run_dir / f"recon_{args.method}"))
    handler = {
        "d2ip": _reconstruct_d2ip,
        "tikhonov": _reconstruct_tikhonov,
        "tv": _reconstruct_tv,
    }[args.method]
    doc = handler(args, run_dir, out)
    _write_manifest(out, {"command": "reconstruct", "inputs": str(run_dir), **doc})
    print(f"reconstructed with {args.method} -> {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    out = _out_dir(args.out)
    recon = load_sequence(args.recon)
    truth_path = Path(args.truth)
    if not truth_path.exists():
        marker = out / "no_ground_truth"
        marker.write_text(
            f"metrics skipped: no ground truth available at {truth_path}\n"
        )
        _write_manifest(
            out,
            {"command": "evaluate", "recon": args.recon, "truth": args.truth, "skipped": "no ground truth"},
        )
        print(f"no ground truth at {truth_path}; wrote marker -> {marker}")
        return EXIT_OK
    truth = load_sequence(truth_path)
    grid, _, _ = load_geometry(args.geometry)
    report = evaluate_sequence(recon, truth, grid, peak=args.peak)
    report.to_csv(out / "metrics.csv")
    _plot_metrics(report, out / "metrics.png")
    _write_manifest(
        out,
        {
            "command": "evaluate",
            "recon": args.recon,
            "truth": args.truth,
            "geometry": args.geometry,
            "means": report.means,
            "outputs": ["metrics.csv", "metrics.png"],
        },
    )
    print(
        "means: "
        + ", ".join(f"{k}={v:.4f}" for k, v in report.means.items())
        + f" -> {out / 'metrics.csv'}"
    )
    return EXIT_OK


def _plot_metrics(report: MetricsReport, path: Path) -> None:
    fig, axes = plt.subplots(2, 2, figsize=(9, 6))
    frames = [row["frame"] for row in report.per_frame]
    for ax, key in zip(axes.ravel(), ("cc", "psnr", "mssim", "err")):
        ax.plot(frames, [row[key] for row in report.per_frame], marker="o", ms=3)
        ax.set_xlabel("frame")
        ax.set_ylabel(key.upper())
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _run_label(run_dir: Path) -> str:
    manifest = run_dir / "manifest.json"
    if manifest.exists():
        doc = json.loads(manifest.read_text())
        method = doc.get("method", run_dir.name)
        if method == "d2ip":
            cfg = doc.get("run_config", {})
            disabled = [k for k in ("upws", "tpp") if cfg.get(f"disable_{k}")]
            if disabled:
                method += " w/o " + "+".join(disabled)
        return method
    return run_dir.name


def cmd_report(args) -> int:
    out = _out_dir(args.out)
    runs = [Path(r) for r in args.runs]
    summary_rows = []
    fig, ax = plt.subplots(figsize=(8, 5))
    for run_dir in runs:
        label = _run_label(run_dir)
        timing_files = sorted(run_dir.glob("timing*.csv"))
        for tf in timing_files:
            rows = read_timing_csv(tf)
            frame_rows = [(s, sec, acc) for s, sec, acc in rows]
            if not frame_rows:
                continue
            xs = list(range(1, len(frame_rows) + 1))
            ys = [acc for _, _, acc in frame_rows]
            suffix = tf.stem.replace("timing", "")
            ax.step(xs, ys, where="post", label=label + suffix)
            summary_rows.append(
                {
                    "run": str(run_dir),
                    "label": label + suffix,
                    "stages": len(frame_rows),
                    "total_seconds": ys[-1],
                }
            )
        traces_file = run_dir / "traces.csv"
        if traces_file.exists():
            traces = read_traces_csv(traces_file)
            cfig, cax = plt.subplots(figsize=(8, 5))
            for frame_label in sorted(traces):
                trace = traces[frame_label]
                name = "warm" if frame_label == 0 else f"frame {frame_label}"
                cax.semilogy([r.iteration for r in trace.records], trace.totals(), label=name)
            cax.set_xlabel("iteration")
            cax.set_ylabel("loss")
            cax.legend(fontsize=7, ncol=2)
            cax.grid(True, alpha=0.3)
            cfig.tight_layout()
            cfig.savefig(out / f"convergence_{run_dir.name}.png", dpi=120)
            plt.close(cfig)
    ax.set_xlabel("stage")
    ax.set_ylabel("accumulated seconds")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out / "accumulated_time.png", dpi=120)
    plt.close(fig)

    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["run", "label", "stages", "total_seconds"])
        writer.writeheader()
        writer.writerows(summary_rows)

    speedup_rows = _ablation_speedup(runs)
    if speedup_rows:
        with open(out / "ablation_speedup.csv", "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["run", "label", "frame2_iterations_to_threshold", "speedup_vs_cold"]
            )
            writer.writeheader()
            writer.writerows(speedup_rows)

    _write_manifest(out, {"command": "report", "runs": [str(r) for r in runs]})
    print(f"report -> {out}")
    return EXIT_OK


def _ablation_speedup(runs: list[Path]) -> list[dict]:
    """Iterations for frame 2's data term to reach 1.05x the converged
    cold-start level, relative to the cold-start run in the set."""
    parsed = []
    for run_dir in runs:
        manifest = run_dir / "manifest.json"
        traces_file = run_dir / "traces.csv"
        if not (manifest.exists() and traces_file.exists()):
            continue
        doc = json.loads(manifest.read_text())
        cfg = doc.get("run_config", {})
        parsed.append((run_dir, cfg, read_traces_csv(traces_file)))
    cold = [
        traces
        for _, cfg, traces in parsed
        if cfg.get("disable_upws") and cfg.get("disable_tpp") and 2 in traces
    ]
    if not cold:
        return []
    cold_trace = cold[0][2]
    threshold = 1.05 * cold_trace.data_terms()[-1]
    rows = []
    cold_iters = cold_trace.iterations_to(threshold)
    for run_dir, cfg, traces in parsed:
        if 2 not in traces:
            continue
        reached = traces[2].iterations_to(threshold)
        rows.append(
            {
                "run": str(run_dir),
                "label": _run_label(run_dir),
                "frame2_iterations_to_threshold": reached,
                "speedup_vs_cold": (cold_iters / reached) if reached else None,
            }
        )
    return rows


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="d2ip",
        description="Time-sequence EIT reconstruction with a dynamic untrained-network prior",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a synthetic scenario")
    sim.add_argument("--case", choices=("case1", "case2"), required=True)
    sim.add_argument("--grid", type=int, nargs=3, default=(16, 16, 8), metavar=("R", "C", "P"))
    sim.add_argument(
        "--extent",
        type=float,
        nargs=3,
        default=None,
        metavar=("SX", "SY", "SZ"),
        help="physical spans in meters (default: 0.30 0.20 0.10 thorax box)",
    )
    sim.add_argument("--frames", type=int, default=20)
    sim.add_argument("--snr-db", default="none", help="SNR in dB, or 'none' for noise-free")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--electrodes-per-layer", type=int, default=16)
    sim.add_argument("--layers", type=int, default=2)
    sim.add_argument("--scheme", choices=("adjacent_in_layer", "cross_layer"), default="adjacent_in_layer")
    sim.add_argument("--out", required=True)
    sim.set_defaults(func=cmd_simulate)

    rec = sub.add_parser("reconstruct", help="reconstruct a simulated (or external) scenario")
    rec.add_argument("--run", required=True, help="directory produced by simulate")
    rec.add_argument("--method", choices=("d2ip", "tikhonov", "tv"), required=True)
    rec.add_argument("--out", default=None)
    rec.add_argument("--seed", type=int, default=None)
    rec.add_argument("--config", default=None, help="run-config JSON overriding defaults")
    rec.add_argument("--iters-warm", type=int, default=None)
    rec.add_argument("--iters-first", type=int, default=None)
    rec.add_argument("--iters-next", type=int, default=None)
    rec.add_argument("--learning-rate", type=float, default=None)
    rec.add_argument("--record-every", type=int, default=None)
    rec.add_argument("--disable", default=None, help="comma-separated: upws,tpp")
    rec.add_argument("--warm-frame", type=int, default=None)
    rec.add_argument("--warm-voltage", default=None, help="external voltage file for the warm start")
    rec.add_argument("--mu", type=float, action="append", default=None, help="Tikhonov weight (repeatable)")
    rec.add_argument("--lambda-tv", type=float, default=0.002)
    rec.add_argument("--tv-iterations", type=int, default=800)
    rec.add_argument("--tv-step", type=float, default=2e-3)
    rec.set_defaults(func=cmd_reconstruct)

    ev = sub.add_parser("evaluate", help="metrics of a reconstruction against ground truth")
    ev.add_argument("--recon", required=True)
    ev.add_argument("--truth", required=True)
    ev.add_argument("--geometry", required=True)
    ev.add_argument("--peak", type=float, default=None)
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_evaluate)

    rep = sub.add_parser("report", help="cross-run timing and convergence report")
    rep.add_argument("runs", nargs="+")
    rep.add_argument("--out", required=True)
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except (ValueError, FormatError, KeyError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FileNotFoundError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
