"""Command-line interface: calibrate, localize, track, simulate, bench, evaluate.

Exit codes: 0 success, 1 input error (bad file, mismatched config, malformed
records), 2 numerical degeneracy (unreachable calibration threshold,
singular tracker state).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .array import ArrayConfig, build_masks, load_array_config, load_preset
from .bench import CACHE_ENV, cache_dir, cache_path, cached_tables, sweep_config, time_modes
from .evaluation import AlignmentError, check_alignment, rmse_against_truth, tracking_metrics
from .frontend import FrameSpec, frame_and_window
from .geometry import build_sphere_grid
from .pipeline import scan_coverage
from .records import (
    RecordError,
    potential_line,
    read_potentials,
    read_tracked,
    read_truth,
    save_truth,
    tracked_line,
    write_lines,
)
from .scene import load_scene, synthesize_scene
from .ssl import Localizer
from .sst import DegeneracyError, Tracker, TrackerParams
from .tdoa import CacheError, CalibrationError, TdoaTables, build_tables, load_cache, save_cache
from .wavio import WavError, read_wav, write_wav

log = logging.getLogger("ssltrack")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2


class InputError(ValueError):
    pass


# ------------------------------------------------------------- manifest

@dataclass
class RunManifest:
    command: str
    config_hash: str = ""
    ssl_params: dict = field(default_factory=dict)
    sst_params: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    seed: int | None = None
    timing: dict = field(default_factory=dict)
    version: str = __version__

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def manifest_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".manifest.json")


def timing_stats(ms: np.ndarray) -> dict:
    ms = np.asarray(ms, dtype=np.float64)
    if ms.size == 0:
        return {"frames": 0, "mean_ms": 0.0, "p95_ms": 0.0}
    return {"frames": int(ms.size), "mean_ms": float(ms.mean()), "p95_ms": float(np.percentile(ms, 95))}


def ssl_snapshot(config: ArrayConfig, tables: TdoaTables | None = None, n_sources: int | None = None,
                 hop: int | None = None) -> dict:
    mics = config.microphones
    snap = {
        "array": config.name,
        "n_mics": config.n_mics,
        "sample_rate": config.sample_rate,
        "sound_speed_mean": config.sound_speed_mean,
        "sound_speed_std": config.sound_speed_std,
        "mic_alpha": sorted({m.alpha for m in mics}),
        "mic_beta": sorted({m.beta for m in mics}),
        "mic_position_variance": sorted({float(v) for m in mics for v in np.diag(m.position_cov)}),
        "min_gain": config.min_gain,
        "scan_orientation": [float(v) for v in config.scan_orientation],
        "scan_alpha": config.scan_alpha,
        "scan_beta": config.scan_beta,
    }
    if tables is not None:
        snap.update(tables.params)
        snap["coarse_half_widths"] = [int(v) for v in np.bincount(tables.coarse.half_width)]
        snap["fine_half_widths"] = [int(v) for v in np.bincount(tables.fine.half_width)]
    if n_sources is not None:
        snap["n_sources"] = n_sources
    if hop is not None:
        snap["hop"] = hop
    return snap


# --------------------------------------------------------------- helpers

def resolve_array(spec: str) -> ArrayConfig:
    path = Path(spec)
    if path.suffix == ".json" or path.exists():
        if not path.exists():
            raise InputError(f"array config {spec} not found")
        return load_array_config(path)
    try:
        return load_preset(spec)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def table_params(args) -> dict:
    return dict(coarse_level=args.coarse_level, fine_level=args.fine_level, threshold=args.threshold,
                octagon_depth=args.depth, links=args.links, frame_size=args.frame_size)


def resolve_tables(args, config: ArrayConfig) -> TdoaTables:
    if getattr(args, "cache", None):
        return load_cache(args.cache, config)
    return cached_tables(config, **table_params(args))


def load_signal(path, config: ArrayConfig) -> np.ndarray:
    signal, rate = read_wav(path, channels=config.n_mics)
    if rate != int(config.sample_rate):
        raise InputError(f"{path}: sample rate {rate} does not match the array ({config.sample_rate:g})")
    return signal


def _localize_chunk(payload):
    tables, n_sources, mode, frames, pairs, start = payload
    loc = Localizer(tables, n_sources, mode)
    out, times = [], []
    for i, f in enumerate(frames):
        t0 = time.perf_counter()
        out.append(loc.process_frame(f, pairs, start + i))
        times.append((time.perf_counter() - t0) * 1e3)
    return out, times, loc.visited


def localize_frames(frames, tables, config, n_sources, mode, jobs=1):
    """Potentials for each frame; frames are independent so ``jobs`` > 1
    splits them into contiguous chunks and keeps the output order."""
    pairs = config.pairs
    if jobs <= 1 or len(frames) < 2 * jobs:
        return _localize_chunk((tables, n_sources, mode, frames, pairs, 0))
    bounds = np.linspace(0, len(frames), jobs + 1).astype(int)
    chunks = [(tables, n_sources, mode, frames[a:b], pairs, int(a)) for a, b in zip(bounds, bounds[1:])]
    pots, times, visited = [], [], []
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        for p, t, v in pool.map(_localize_chunk, chunks):
            pots += p
            times += t
            visited += v
    return pots, times, visited


def parse_overrides(items) -> dict:
    out = {}
    defaults = TrackerParams()
    for item in items or []:
        if "=" not in item:
            raise InputError(f"tracker override {item!r} is not NAME=VALUE")
        name, value = item.split("=", 1)
        if name not in TrackerParams.__dataclass_fields__:
            raise InputError(f"unknown tracker parameter {name!r}")
        out[name] = type(getattr(defaults, name))(value)
    return out


# -------------------------------------------------------------- commands

def cmd_calibrate(args) -> int:
    config = resolve_array(args.array)
    params = table_params(args)
    t0 = time.perf_counter()
    tables = build_tables(config, **params)
    elapsed = time.perf_counter() - t0
    out = Path(args.out) if args.out else cache_path(config, **params)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_cache(tables, out)
    coarse, fine = tables.calibration
    skipped = [tuple(int(v) for v in config.pairs[i]) for i in np.nonzero(~tables.fine.masks.per_pair)[0]]
    print(f"array {config.name or args.array}: {config.n_mics} mics, {len(config.pairs)} pairs")
    for label, side, cal in (("coarse", tables.coarse, coarse), ("fine", tables.fine, fine)):
        hist = np.bincount(side.half_width)
        print(f"{label} L={side.grid.level} K={side.size}: min capture {cal.min_probability:.4f} "
              f"after {cal.iterations} increments; half-width counts "
              + ", ".join(f"{w}:{c}" for w, c in enumerate(hist)))
    print(f"pairs skipped by directivity: {len(skipped)}" + (f" {skipped}" if skipped else ""))
    print(f"cache written to {out}")
    RunManifest(
        command="calibrate",
        config_hash=config.content_hash(),
        ssl_params=ssl_snapshot(config, tables),
        inputs={"array": args.array},
        outputs={"cache": str(out)},
        timing={"calibrate_s": elapsed,
                "min_capture": {"coarse": coarse.min_probability, "fine": fine.min_probability}},
    ).write(manifest_path(out))
    return EXIT_OK


def cmd_localize(args) -> int:
    config = resolve_array(args.array)
    tables = resolve_tables(args, config)
    signal = load_signal(args.wav, config)
    spec = FrameSpec(tables.frame_size, args.hop, config.sample_rate)
    frames = frame_and_window(signal, spec)
    pots, times, visited = localize_frames(frames, tables, config, args.sources, args.mode, args.jobs)
    out = Path(args.out)
    write_lines(out, (potential_line(l, l * spec.frame_period, p) for l, p in enumerate(pots)))
    RunManifest(
        command="localize",
        config_hash=config.content_hash(),
        ssl_params=ssl_snapshot(config, tables, args.sources, args.hop) | {"mode": args.mode},
        inputs={"wav": str(args.wav), "cache": str(args.cache or "")},
        outputs={"potentials": str(out)},
        timing={"localize": timing_stats(times), "visited_mean": float(np.mean(visited)) if visited else 0.0},
    ).write(manifest_path(out))
    log.info("%d frames localized, %.3f ms/frame", len(pots), np.mean(times) if times else 0.0)
    return EXIT_OK


def cmd_track(args) -> int:
    config = resolve_array(args.array)
    inputs = {"input": str(args.input)}
    timing = {}
    tables = None
    if str(args.input).lower().endswith(".wav"):
        tables = resolve_tables(args, config)
        signal = load_signal(args.input, config)
        spec = FrameSpec(tables.frame_size, args.hop, config.sample_rate)
        pots, times, _ = localize_frames(frame_and_window(signal, spec), tables, config, args.sources,
                                         args.mode, args.jobs)
        frames = list(range(len(pots)))
        stamps = [l * spec.frame_period for l in frames]
        timing["localize"] = timing_stats(times)
        coverage = scan_coverage(tables)
    else:
        frames, stamps, pots = read_potentials(args.input)
        spec = FrameSpec(args.frame_size, args.hop, config.sample_rate)
        grid = build_sphere_grid(args.fine_level)
        coverage = float(np.mean(build_masks(config, grid).per_direction))
    overrides = {"delta_t": spec.frame_period, "scan_coverage": coverage}
    overrides.update(parse_overrides(args.param))
    params = TrackerParams(**overrides)
    tracker = Tracker(params)
    lines, times = [], []
    for l, t, p in zip(frames, stamps, pots):
        t0 = time.perf_counter()
        tracks = tracker.step(p)
        times.append((time.perf_counter() - t0) * 1e3)
        lines.append(tracked_line(l, t, tracks))
    timing["track"] = timing_stats(times)
    out = Path(args.out)
    write_lines(out, lines)
    RunManifest(
        command="track",
        config_hash=config.content_hash(),
        ssl_params=ssl_snapshot(config, tables, args.sources, args.hop),
        sst_params=params.to_dict(),
        inputs=inputs,
        outputs={"tracked": str(out)},
        timing=timing,
    ).write(manifest_path(out))
    return EXIT_OK


def cmd_simulate(args) -> int:
    config = resolve_array(args.array)
    try:
        scene = load_scene(args.scene)
    except (TypeError, KeyError, json.JSONDecodeError) as exc:
        raise InputError(f"{args.scene}: invalid scene spec ({exc})") from None
    if args.seed is not None:
        scene.seed = args.seed
    spec = FrameSpec(args.frame_size, args.hop, config.sample_rate)
    t0 = time.perf_counter()
    signal, truth = synthesize_scene(scene, config, spec)
    elapsed = time.perf_counter() - t0
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    wav = prefix.with_name(prefix.name + ".wav")
    truth_path = prefix.with_name(prefix.name + ".truth.jsonl")
    write_wav(wav, signal, int(config.sample_rate), args.format)
    save_truth(truth, truth_path)
    RunManifest(
        command="simulate",
        config_hash=config.content_hash(),
        ssl_params=ssl_snapshot(config, hop=args.hop),
        inputs={"scene": str(args.scene), "array": args.array, "scene_spec": scene.to_dict()},
        outputs={"wav": str(wav), "truth": str(truth_path)},
        seed=scene.seed,
        timing={"render_s": elapsed},
    ).write(manifest_path(prefix))
    print(f"wrote {wav} ({signal.shape[0]} channels, {signal.shape[1]} samples) and {truth_path}")
    return EXIT_OK


def cmd_bench(args) -> int:
    modes = ("hsda", "single") if args.mode == "both" else (args.mode,)
    rows = []
    print(f"{'M':>3} {'N':>5} {'mode':>6} {'mean ms':>9} {'p95 ms':>9} {'visited':>9}")
    speedups = {}
    for m in args.mics:
        config = sweep_config(m)
        for n in args.frame_sizes:
            params = dict(coarse_level=args.coarse_level, fine_level=args.fine_level, threshold=args.threshold,
                          octagon_depth=args.depth, links=args.links, frame_size=n)
            if args.cache and m == 16 and n == 256:
                tables = load_cache(args.cache, config)
            else:
                tables = cached_tables(config, **params)
            res = time_modes(tables, config, args.frames, modes, args.sources, args.seed)
            for mode in modes:
                r = res[mode]
                rows.append(r.to_dict())
                print(f"{m:>3} {n:>5} {mode:>6} {r.mean_ms:>9.3f} {r.p95_ms:>9.3f} {r.visited:>9.1f}")
            if len(modes) == 2:
                speedups[f"M={m},N={n}"] = res["single"].mean_ms / res["hsda"].mean_ms
    for key, value in speedups.items():
        print(f"speedup hsda vs single {key}: {value:.2f}x")
    report = {"rows": rows, "speedup": speedups}
    if args.out:
        out = Path(args.out)
        out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        RunManifest(
            command="bench",
            ssl_params={"mics": args.mics, "frame_sizes": args.frame_sizes, "sources": args.sources,
                        "coarse_level": args.coarse_level, "fine_level": args.fine_level},
            outputs={"report": str(out)},
            seed=args.seed,
            timing=report,
        ).write(manifest_path(out))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    truth = read_truth(args.truth)
    report = {}
    if args.potentials:
        frames, _, pots = read_potentials(args.potentials)
        check_alignment(frames, truth)
        report["localization"] = rmse_against_truth(pots, truth)
    if args.tracked:
        frames, _, tracks = read_tracked(args.tracked)
        check_alignment(frames, truth)
        report["tracking"] = tracking_metrics(tracks, truth, args.gate, args.separation).to_dict()
    if not report:
        raise InputError("evaluate needs --potentials and/or --tracked")
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        out = Path(args.out)
        out.write_text(text + "\n")
        RunManifest(
            command="evaluate",
            inputs={"truth": str(args.truth), "potentials": str(args.potentials or ""),
                    "tracked": str(args.tracked or "")},
            outputs={"report": str(out)},
        ).write(manifest_path(out))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _table_args(p, with_cache: bool = True) -> None:
    if with_cache:
        p.add_argument("--cache", help="calibration cache file (default: build or reuse one in the cache directory)")
    p.add_argument("--coarse-level", type=int, default=2)
    p.add_argument("--fine-level", type=int, default=4)
    p.add_argument("--threshold", type=float, default=0.3, help="minimum capture probability C_min")
    p.add_argument("--depth", type=int, default=1, help="octagon depth")
    p.add_argument("--links", type=int, default=10, help="fine-to-coarse links U")
    p.add_argument("--frame-size", type=int, default=256)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssltrack",
        description="Hierarchical SRP-PHAT localization and Kalman multi-source tracking.",
        epilog=f"Calibration caches live in ${CACHE_ENV} (default {cache_dir()}). "
               "Exit codes: 0 ok, 1 input error, 2 numerical degeneracy.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="calibrate MSW widths and build scan tables")
    p.add_argument("--array", default="oma", help="preset name (oma, oma8, cma, cma8) or JSON config")
    _table_args(p, with_cache=False)
    p.add_argument("--out", help="cache file to write")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("localize", help="potential sources per frame from a WAV file")
    p.add_argument("wav")
    p.add_argument("--array", default="oma")
    _table_args(p)
    p.add_argument("--hop", type=int, default=128)
    p.add_argument("--sources", type=int, default=4, help="potential sources per frame V")
    p.add_argument("--mode", choices=("hsda", "single"), default="hsda")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (frames are independent)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("track", help="track sources from potential records or a WAV file")
    p.add_argument("input", help="potentials .jsonl or multichannel .wav")
    p.add_argument("--array", default="oma")
    _table_args(p)
    p.add_argument("--hop", type=int, default=128)
    p.add_argument("--sources", type=int, default=4)
    p.add_argument("--mode", choices=("hsda", "single"), default="hsda")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--param", action="append", metavar="NAME=VALUE", help="override a tracker parameter")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("simulate", help="render a synthetic scene to WAV plus ground truth")
    p.add_argument("scene", help="scene spec JSON")
    p.add_argument("--array", default="oma")
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--seed", type=int)
    p.add_argument("--format", choices=("float32", "pcm16"), default="float32")
    p.add_argument("--frame-size", type=int, default=256)
    p.add_argument("--hop", type=int, default=128)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bench", help="per-frame localization timing, hsda vs single grid")
    p.add_argument("--cache", help="tables for the 16-mic, N=256 entry")
    p.add_argument("--mics", type=int, nargs="+", default=[8, 16])
    p.add_argument("--frame-sizes", type=int, nargs="+", default=[256])
    p.add_argument("--frames", type=int, default=1000)
    p.add_argument("--mode", choices=("both", "hsda", "single"), default="both")
    p.add_argument("--sources", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coarse-level", type=int, default=2)
    p.add_argument("--fine-level", type=int, default=4)
    p.add_argument("--threshold", type=float, default=0.3)
    p.add_argument("--depth", type=int, default=1)
    p.add_argument("--links", type=int, default=10)
    p.add_argument("--out", help="JSON report")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("evaluate", help="score records against ground truth")
    p.add_argument("--truth", required=True)
    p.add_argument("--potentials")
    p.add_argument("--tracked")
    p.add_argument("--gate", type=float, default=20.0, help="matching gate in degrees")
    p.add_argument("--separation", type=float, default=10.0,
                   help="minimum source separation (degrees) for a frame to count toward separated switches")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CalibrationError, DegeneracyError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, WavError, RecordError, CacheError, AlignmentError, FileNotFoundError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
