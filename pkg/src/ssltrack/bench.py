"""Per-frame localization timing and the on-disk table cache."""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .array import ArrayConfig, circular_array, load_preset
from .frontend import FrameSpec, frame_and_window
from .ssl import Localizer
from .tdoa import TdoaTables, build_tables, load_cache, save_cache

CACHE_ENV = "SSLTRACK_CACHE_DIR"


def cache_dir() -> Path:
    """Directory for calibration caches: ``$SSLTRACK_CACHE_DIR`` or ``~/.cache/ssltrack``."""
    env = os.environ.get(CACHE_ENV)
    return Path(env) if env else Path.home() / ".cache" / "ssltrack"


def cache_path(config: ArrayConfig, **params) -> Path:
    key = json.dumps(params, sort_keys=True)
    tag = hashlib.sha256(key.encode()).hexdigest()[:12]
    return cache_dir() / f"{config.content_hash()[:16]}-{tag}.ssltc"


def cached_tables(config: ArrayConfig, **params) -> TdoaTables:
    """Load tables for ``config`` from the cache directory, building them on a miss."""
    path = cache_path(config, **params)
    if path.exists():
        return load_cache(path, config)
    tables = build_tables(config, **params)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    save_cache(tables, tmp)
    tmp.replace(path)
    return tables


def sweep_config(n_mics: int) -> ArrayConfig:
    """OMA-style circular array with ``n_mics`` microphones (the presets for 8 and 16)."""
    if n_mics == 16:
        return load_preset("oma")
    if n_mics == 8:
        return load_preset("oma8")
    return circular_array(n_mics=n_mics)


@dataclass
class Timing:
    mode: str
    n_mics: int
    frame_size: int
    frames: int
    mean_ms: float
    p95_ms: float
    visited: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def time_modes(tables: TdoaTables, config: ArrayConfig, n_frames: int = 1000, modes=("hsda", "single"),
               n_sources: int = 4, seed: int = 0, block: int = 50) -> dict:
    """Time full per-frame localization (STFT to potentials) on white noise.

    Modes alternate in blocks of ``block`` frames so slow drifts of the
    machine affect them equally.
    """
    spec = FrameSpec(frame_size=tables.frame_size, hop=tables.frame_size // 2, sample_rate=config.sample_rate)
    rng = np.random.default_rng(seed)
    n_samples = spec.hop * (n_frames - 1) + spec.frame_size
    frames = frame_and_window(rng.standard_normal((config.n_mics, n_samples)), spec)
    locs = {m: Localizer(tables, n_sources, m) for m in modes}
    times = {m: np.empty(len(frames)) for m in modes}
    pairs = config.pairs
    clock = time.perf_counter
    for start in range(0, len(frames), block):
        for m, loc in locs.items():
            for l in range(start, min(start + block, len(frames))):
                t0 = clock()
                loc.process_frame(frames[l], pairs, l)
                times[m][l] = clock() - t0
    out = {}
    for m, loc in locs.items():
        ms = times[m] * 1e3
        out[m] = Timing(m, config.n_mics, tables.frame_size, len(frames), float(ms.mean()),
                        float(np.percentile(ms, 95)), float(np.mean(loc.visited)))
    return out
