"""Free-field multichannel scene synthesis with ground truth."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .array import ArrayConfig, directivity_gain
from .frontend import FrameSpec
from .wavio import read_wav

TAPS = 31


@dataclass
class Waypoint:
    time: float
    azimuth: float
    elevation: float


@dataclass
class SourceSpec:
    """One sound source.

    ``trajectory`` is a list of waypoints (seconds, degrees); a single
    waypoint means a static source. ``elevation`` of ``None`` in
    :func:`static_source` is derived from the scene's range and height.
    """

    trajectory: list
    signal: str = "white"
    gain_db: float = 0.0
    onset: float = 0.0
    offset: float | None = None
    frequency: float = 1000.0
    path: str | None = None
    id: int | None = None

    def __post_init__(self):
        self.trajectory = [w if isinstance(w, Waypoint) else Waypoint(*w) if isinstance(w, (list, tuple)) else Waypoint(**w)
                           for w in self.trajectory]
        if not self.trajectory:
            raise ValueError("a source needs at least one waypoint")
        times = [w.time for w in self.trajectory]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("waypoint times must be strictly increasing")
        if self.signal not in ("white", "tone", "file"):
            raise ValueError(f"unknown source signal {self.signal!r}")


@dataclass
class SceneSpec:
    sources: list
    duration: float
    range: float = 3.0
    height: float = 1.15
    noise_floor_db: float = -60.0
    seed: int = 0

    def __post_init__(self):
        self.sources = [s if isinstance(s, SourceSpec) else SourceSpec(**s) for s in self.sources]
        if self.duration <= 0:
            raise ValueError("scene duration must be positive")
        if self.range <= 0:
            raise ValueError("scene range must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        return cls(**data)


def load_scene(path) -> SceneSpec:
    return SceneSpec.from_dict(json.loads(Path(path).read_text()))


def save_scene(spec: SceneSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2) + "\n")


def static_source(azimuth: float, elevation: float | None = None, r: float = 3.0, h: float = 1.15, **kwargs) -> SourceSpec:
    if elevation is None:
        elevation = float(np.degrees(np.arctan2(h, r)))
    return SourceSpec(trajectory=[Waypoint(0.0, azimuth, elevation)], **kwargs)


@dataclass
class GroundTruth:
    """Per-frame true directions; ``doa`` is (L, S, 3), ``active`` (L, S)."""

    timestamps: np.ndarray
    ids: list
    doa: np.ndarray
    active: np.ndarray
    seed: int = 0
    meta: dict = field(default_factory=dict)


def spherical_to_unit(azimuth_deg, elevation_deg) -> np.ndarray:
    az = np.radians(azimuth_deg)
    el = np.radians(elevation_deg)
    return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)


def slerp(a: np.ndarray, b: np.ndarray, t) -> np.ndarray:
    """Spherical linear interpolation between unit vectors, t in [0, 1]."""
    t = np.asarray(t, dtype=np.float64)[..., None]
    dot = np.clip(a @ b, -1.0, 1.0)
    omega = np.arccos(dot)
    if omega < 1e-9:
        out = (1 - t) * a + t * b
    else:
        out = (np.sin((1 - t) * omega) * a + np.sin(t * omega) * b) / np.sin(omega)
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def trajectory_directions(source: SourceSpec, times: np.ndarray) -> np.ndarray:
    """Unit DoA of ``source`` at each time; held constant outside the waypoints."""
    times = np.asarray(times, dtype=np.float64)
    wp = source.trajectory
    units = spherical_to_unit(np.array([w.azimuth for w in wp]), np.array([w.elevation for w in wp]))
    if len(wp) == 1:
        return np.broadcast_to(units[0], times.shape + (3,)).copy()
    knots = np.array([w.time for w in wp])
    out = np.empty(times.shape + (3,))
    seg = np.clip(np.searchsorted(knots, times, side="right") - 1, 0, len(wp) - 2)
    for s in np.unique(seg):
        sel = seg == s
        t = np.clip((times[sel] - knots[s]) / (knots[s + 1] - knots[s]), 0.0, 1.0)
        out[sel] = slerp(units[s], units[s + 1], t)
    return out


def _kernel(frac: np.ndarray) -> np.ndarray:
    """Blackman-windowed sinc taps for fractional positions, shape (..., TAPS)."""
    half = TAPS // 2
    x = np.arange(-half, half + 1) - np.asarray(frac)[..., None]
    w = 0.42 + 0.5 * np.cos(np.pi * x / (half + 1)) + 0.08 * np.cos(2 * np.pi * x / (half + 1))
    return np.sinc(x) * w


def fractional_shift(signal: np.ndarray, shift, pad: int) -> np.ndarray:
    """Sample ``signal`` at positions n + shift[n] for n in [0, len - 2*pad).

    ``signal`` carries ``pad`` extra samples at both ends; ``shift`` is a
    scalar or one value per output sample.
    """
    n_out = len(signal) - 2 * pad
    half = TAPS // 2
    shift = np.asarray(shift, dtype=np.float64)
    if shift.ndim == 0:
        base = int(np.floor(shift))
        frac = float(shift - base)
        taps = _kernel(np.array(frac))
        start = pad + base - half
        seg = signal[start : start + n_out + TAPS - 1]
        return np.convolve(seg, taps[::-1], mode="valid")
    pos = np.arange(n_out) + pad + shift
    base = np.floor(pos).astype(np.int64)
    frac = pos - base
    out = np.empty(n_out)
    chunk = 8192
    offs = np.arange(-half, half + 1)
    for i in range(0, n_out, chunk):
        sl = slice(i, min(i + chunk, n_out))
        idx = base[sl, None] + offs[None, :]
        out[sl] = np.einsum("nk,nk->n", signal[idx], _kernel(frac[sl]))
    return out


def _source_signal(src: SourceSpec, n: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    amp = 10.0 ** (src.gain_db / 20.0)
    if src.signal == "white":
        x = rng.standard_normal(n)
    elif src.signal == "tone":
        x = np.sqrt(2.0) * np.sin(2 * np.pi * src.frequency * np.arange(n) / rate)
    else:
        data, file_rate = read_wav(src.path)
        if file_rate != int(rate):
            raise ValueError(f"{src.path}: sample rate {file_rate} does not match array rate {rate}")
        mono = data[0]
        x = np.resize(mono, n)
    return amp * x


def render_source(src: SourceSpec, config: ArrayConfig, duration: float, rng: np.random.Generator) -> np.ndarray:
    """Render one source at every microphone, shape (M, T)."""
    rate = config.sample_rate
    n = int(round(duration * rate))
    a = rate / config.sound_speed_mean
    pos = config.positions
    max_shift = a * np.linalg.norm(pos, axis=1).max()
    pad = int(np.ceil(max_shift)) + TAPS
    s = _source_signal(src, n + 2 * pad, rate, rng)
    t = np.arange(n + 2 * pad) / rate - pad / rate
    onset = src.onset
    offset = duration if src.offset is None else src.offset
    s = s * ((t >= onset) & (t < offset))
    out = np.empty((config.n_mics, n))
    static = len(src.trajectory) == 1
    if static:
        u = trajectory_directions(src, np.zeros(1))[0]
        for m, mic in enumerate(config.microphones):
            gain = directivity_gain(u, mic.orientation, mic.alpha, mic.beta)
            # advance by a * m.u: closer microphones hear the wave earlier
            out[m] = gain * fractional_shift(s, a * (mic.position_mean @ u), pad)
    else:
        u = trajectory_directions(src, np.arange(n) / rate)
        for m, mic in enumerate(config.microphones):
            gain = directivity_gain(u, mic.orientation, mic.alpha, mic.beta)
            out[m] = gain * fractional_shift(s, a * (u @ mic.position_mean), pad)
    return out


def synthesize_scene(spec: SceneSpec, config: ArrayConfig, frame_spec: FrameSpec | None = None):
    """Render a scene: returns the (M, T) signal and per-frame ground truth."""
    frame_spec = frame_spec or FrameSpec(sample_rate=config.sample_rate)
    rate = config.sample_rate
    n = int(round(spec.duration * rate))
    seeds = np.random.SeedSequence(spec.seed).spawn(len(spec.sources) + 1)
    out = np.zeros((config.n_mics, n))
    for src, ss in zip(spec.sources, seeds[:-1]):
        out += render_source(src, config, spec.duration, np.random.default_rng(ss))
    if spec.noise_floor_db is not None and spec.noise_floor_db > -200:
        noise = np.random.default_rng(seeds[-1]).standard_normal(out.shape)
        out += 10.0 ** (spec.noise_floor_db / 20.0) * noise
    truth = ground_truth(spec, frame_spec, n)
    return out, truth


def ground_truth(spec: SceneSpec, frame_spec: FrameSpec, n_samples: int) -> GroundTruth:
    n_frames = frame_spec.n_frames(n_samples)
    frames = np.arange(n_frames)
    stamps = frames * frame_spec.hop / frame_spec.sample_rate
    centers = (frames * frame_spec.hop + frame_spec.frame_size / 2) / frame_spec.sample_rate
    ids = [s.id if s.id is not None else i for i, s in enumerate(spec.sources)]
    doa = np.zeros((n_frames, len(spec.sources), 3))
    active = np.zeros((n_frames, len(spec.sources)), dtype=bool)
    for j, src in enumerate(spec.sources):
        doa[:, j] = trajectory_directions(src, centers)
        offset = spec.duration if src.offset is None else src.offset
        active[:, j] = (centers >= src.onset) & (centers < offset)
    return GroundTruth(timestamps=stamps, ids=ids, doa=doa, active=active, seed=spec.seed)
