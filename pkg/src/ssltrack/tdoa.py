"""TDOA model, MSW auto-calibration and coarse/fine matching tables.

Everything here runs once at startup: the resulting :class:`TdoaTables`
are immutable and can be persisted with :func:`save_cache`.
"""

from __future__ import annotations

import hashlib
import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .array import ArrayConfig, DirectivityMasks, build_masks
from .geometry import ScanGrid, build_sphere_grid, octagon_offsets_batch

log = logging.getLogger(__name__)


class CalibrationError(RuntimeError):
    """Raised when MSW calibration cannot reach the requested threshold."""


class CacheError(ValueError):
    """Raised for unreadable or mismatched calibration cache files."""


# ----------------------------------------------------------- scalar model

def _pair_index(config: ArrayConfig, p: int, q: int) -> tuple[int, int]:
    m = config.n_mics
    if p == q:
        raise ValueError("TDOA needs two distinct microphones")
    if not (0 <= p < m and 0 <= q < m):
        raise ValueError(f"microphone index out of range for {m} microphones")
    return p, q


def tdoa(direction, p: int, q: int, config: ArrayConfig) -> float:
    """Far-field TDOA in samples between microphones ``p`` and ``q``."""
    p, q = _pair_index(config, p, q)
    u = np.asarray(direction, dtype=np.float64)
    mics = config.microphones
    diff = mics[p].position_mean - mics[q].position_mean
    return float(config.sample_rate / config.sound_speed_mean * diff @ u)


@dataclass(frozen=True)
class TdoaDistribution:
    mean: float
    std: float


def tdoa_distribution(direction, p: int, q: int, config: ArrayConfig) -> TdoaDistribution:
    """Normal approximation of the TDOA under position and sound-speed noise."""
    p, q = _pair_index(config, p, q)
    mu_c, sigma_c = config.sound_speed_mean, config.sound_speed_std
    if sigma_c > 0 and mu_c / sigma_c < 10.0:
        raise ValueError("linearized TDOA model requires mu_c / sigma_c >= 10")
    u = np.asarray(direction, dtype=np.float64)
    mp, mq = config.microphones[p], config.microphones[q]
    a = config.sample_rate / mu_c
    proj = (mp.position_mean - mq.position_mean) @ u
    var = u @ (mp.position_cov + mq.position_cov) @ u + proj**2 * sigma_c**2 / mu_c**2
    return TdoaDistribution(mean=float(a * proj), std=float(a * np.sqrt(max(var, 0.0))))


def round_half_away(x):
    """Round to nearest integer, ties away from zero."""
    x = np.asarray(x, dtype=np.float64)
    out = np.sign(x) * np.floor(np.abs(x) + 0.5)
    return out.astype(np.int64) if out.ndim else int(out)


def quantized_tdoa(direction, p: int, q: int, config: ArrayConfig) -> int:
    return round_half_away(tdoa(direction, p, q, config))


def window_capture_probability(dist: TdoaDistribution, center: int, half_width: int) -> float:
    """Probability mass of ``dist`` falling in the MSW window around ``center``."""
    if half_width < 0:
        raise ValueError("half_width must be non-negative")
    lo = center - half_width - 0.5
    hi = center + half_width + 0.5
    if dist.std == 0.0:
        return 1.0 if lo <= dist.mean <= hi else 0.0
    return float(ndtr((hi - dist.mean) / dist.std) - ndtr((lo - dist.mean) / dist.std))


# ------------------------------------------------------------ vectorized

def tdoa_matrix(config: ArrayConfig, directions: np.ndarray) -> np.ndarray:
    """Real TDOAs (samples) for all pairs and directions, shape (n_pairs, K)."""
    pos = config.positions
    pairs = config.pairs
    diff = pos[pairs[:, 0]] - pos[pairs[:, 1]]
    return (config.sample_rate / config.sound_speed_mean) * diff @ np.asarray(directions).T


def _pair_moments(config: ArrayConfig, pair: int, directions: np.ndarray):
    """Mean and std of the TDOA for one pair over many directions (any leading shape)."""
    p, q = config.pairs[pair]
    mics = config.microphones
    a = config.sample_rate / config.sound_speed_mean
    diff = mics[p].position_mean - mics[q].position_mean
    cov = mics[p].position_cov + mics[q].position_cov
    proj = directions @ diff
    quad = np.einsum("...i,ij,...j->...", directions, cov, directions)
    ratio = (config.sound_speed_std / config.sound_speed_mean) ** 2
    std = a * np.sqrt(np.maximum(quad + proj**2 * ratio, 0.0))
    return a * proj, std


def _capture(mean: np.ndarray, std: np.ndarray, center: np.ndarray, half_width: int) -> np.ndarray:
    lo = np.broadcast_to(center - half_width - 0.5, mean.shape)
    hi = np.broadcast_to(center + half_width + 0.5, mean.shape)
    out = np.empty_like(mean)
    pos = std > 0
    out[pos] = ndtr((hi[pos] - mean[pos]) / std[pos]) - ndtr((lo[pos] - mean[pos]) / std[pos])
    z = ~pos
    out[z] = ((mean[z] >= lo[z]) & (mean[z] <= hi[z])).astype(np.float64)
    return out


# ----------------------------------------------------------- calibration

@dataclass
class CalibrationResult:
    half_widths: np.ndarray
    min_probability: float
    history: list = field(default_factory=list)
    pair_probability: np.ndarray | None = None

    @property
    def iterations(self) -> int:
        return len(self.history) - 1


def calibrate_msw(
    config: ArrayConfig,
    grid: ScanGrid,
    octagon_depth: int = 1,
    threshold: float = 0.3,
    frame_size: int = 256,
) -> CalibrationResult:
    """Grow per-pair MSW half-widths until every neighborhood is covered.

    Starting from zero, the half-width of the pair with the lowest average
    capture probability is incremented until the worst grid neighborhood
    point reaches ``threshold``. The per-point aggregate sums over all
    M(M-1)/2 pairs and divides by M(M-1).
    """
    if not 0.0 <= threshold < 1.0:
        raise ValueError("threshold must lie in [0, 1)")
    cap = frame_size // 2
    pairs = config.pairs
    n_pairs = len(pairs)
    m = config.n_mics
    points = grid.points
    cloud = octagon_offsets_batch(points, grid.nearest_gap, octagon_depth)  # (K, E, 3)
    center_tau = round_half_away(tdoa_matrix(config, points))  # (n_pairs, K)

    widths = np.zeros(n_pairs, dtype=np.int64)
    moments = [_pair_moments(config, i, cloud) for i in range(n_pairs)]

    def pair_capture(i: int, width: int) -> np.ndarray:
        mean, std = moments[i]
        return _capture(mean, std, center_tau[i][:, None], width)

    per_point = np.zeros(cloud.shape[:2])
    pair_prob = np.empty(n_pairs)
    for i in range(n_pairs):
        c = pair_capture(i, 0)
        pair_prob[i] = c.mean()
        per_point += c
    per_point /= m * (m - 1)

    history = [float(per_point.min())]
    while history[-1] < threshold:
        best = int(np.argmin(pair_prob))
        if widths[best] + 1 > cap:
            raise CalibrationError(
                f"MSW half-width for pair {tuple(pairs[best])} would exceed N/2 = {cap} "
                f"with minimum capture {history[-1]:.4f} < {threshold}"
            )
        old = pair_capture(best, int(widths[best]))
        widths[best] += 1
        new = pair_capture(best, int(widths[best]))
        pair_prob[best] = new.mean()
        per_point += (new - old) / (m * (m - 1))
        history.append(float(per_point.min()))
    log.debug("calibration on level %d: %d iterations", grid.level, len(history) - 1)
    return CalibrationResult(
        half_widths=widths, min_probability=history[-1], history=history, pair_probability=pair_prob
    )


# --------------------------------------------------------------- tables

@dataclass(frozen=True)
class GridTables:
    """Per-grid lookup tables: quantized TDOAs, half-widths and masks."""

    grid: ScanGrid
    tau: np.ndarray  # (n_pairs, K) int
    half_width: np.ndarray  # (n_pairs,) int
    masks: DirectivityMasks

    @property
    def size(self) -> int:
        return len(self.grid.points)


def build_grid_tables(config: ArrayConfig, grid: ScanGrid, half_width) -> GridTables:
    tau = round_half_away(tdoa_matrix(config, grid.points))
    hw = np.broadcast_to(np.asarray(half_width, dtype=np.int64), (len(config.pairs),)).copy()
    return GridTables(grid=grid, tau=tau, half_width=hw, masks=build_masks(config, grid))


def _window_overlap(tau_a, hw_a, tau_b, hw_b):
    lo = np.maximum(tau_a - hw_a - 0.5, tau_b - hw_b - 0.5)
    hi = np.minimum(tau_a + hw_a + 0.5, tau_b + hw_b + 0.5)
    return np.maximum(hi - lo, 0.0)


def matching_scores(coarse: GridTables, fine: GridTables, f: int) -> np.ndarray:
    """Similarity of every coarse direction with fine direction ``f``."""
    both = coarse.masks.per_direction_pair & fine.masks.per_direction_pair[:, f : f + 1]
    hw_c = coarse.half_width[:, None]
    hw_f = fine.half_width[:, None]
    overlap = _window_overlap(coarse.tau, hw_c, fine.tau[:, f : f + 1], hw_f)
    return np.where(both, overlap, 0.0).sum(axis=0)


def build_matching_matrix(coarse: GridTables, fine: GridTables, links: int) -> np.ndarray:
    """Boolean (K', K'') matrix linking each fine direction to ``links`` coarse ones.

    Coarse candidates are ranked by summed window overlap over pairs active
    in both directions; ties go to the lowest coarse index.
    """
    k_coarse = coarse.size
    if not 1 <= links <= k_coarse:
        raise ValueError(f"links must lie in [1, {k_coarse}], got {links}")
    out = np.zeros((k_coarse, fine.size), dtype=bool)
    for f in range(fine.size):
        score = matching_scores(coarse, fine, f)
        chosen = np.argsort(-score, kind="stable")[:links]
        out[chosen, f] = True
    return out


@dataclass(frozen=True)
class TdoaTables:
    config_hash: str
    frame_size: int
    coarse: GridTables
    fine: GridTables
    matching: np.ndarray
    params: dict = field(default_factory=dict)
    # (coarse, fine) CalibrationResult when built here; not stored in the cache
    calibration: tuple | None = field(default=None, compare=False)

    @property
    def links(self) -> int:
        return int(self.matching[:, 0].sum())


def build_tables(
    config: ArrayConfig,
    coarse_level: int = 2,
    fine_level: int = 4,
    threshold: float = 0.3,
    octagon_depth: int = 1,
    links: int = 10,
    frame_size: int = 256,
    half_widths: tuple | None = None,
) -> TdoaTables:
    """Build grids, masks, calibrated half-widths and the matching matrix.

    ``half_widths`` may fix (coarse, fine) half-widths instead of running
    the calibration.
    """
    coarse_grid = build_sphere_grid(coarse_level)
    fine_grid = build_sphere_grid(fine_level)
    calibration = None
    if half_widths is None:
        calibration = (
            calibrate_msw(config, coarse_grid, octagon_depth, threshold, frame_size),
            calibrate_msw(config, fine_grid, octagon_depth, threshold, frame_size),
        )
        hw_c, hw_f = (c.half_widths for c in calibration)
    else:
        hw_c, hw_f = half_widths
    coarse = build_grid_tables(config, coarse_grid, hw_c)
    fine = build_grid_tables(config, fine_grid, hw_f)
    matching = build_matching_matrix(coarse, fine, links)
    params = {
        "coarse_level": coarse_level,
        "fine_level": fine_level,
        "threshold": threshold,
        "octagon_depth": octagon_depth,
        "links": links,
        "frame_size": frame_size,
        "fixed_half_widths": half_widths is not None,
    }
    return TdoaTables(
        config_hash=config.content_hash(),
        frame_size=frame_size,
        coarse=coarse,
        fine=fine,
        matching=matching,
        params=params,
        calibration=calibration,
    )


# ---------------------------------------------------------------- cache
#
# Layout (all little-endian):
#   8s   magic b"SSLTCACH"
#   u32  format version
#   32s  sha256 of the array config (raw digest)
#   u32  frame size
#   u32  number of named arrays, then for each:
#        u16 name length, name (utf-8), 1s dtype code (b/i/f/?),
#        u8 itemsize, u8 ndim, ndim x u64 shape, raw data

CACHE_MAGIC = b"SSLTCACH"
CACHE_VERSION = 1
_DTYPES = {"i": "<i", "f": "<f", "b": "|b", "u": "<u"}


def _write_array(buf, name: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype == bool:
        code, size, arr = b"b", 1, arr.astype(np.int8)
    else:
        code, size = arr.dtype.kind.encode(), arr.dtype.itemsize
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    raw = name.encode()
    buf.write(struct.pack("<H", len(raw)) + raw)
    buf.write(struct.pack("<cBB", code, size, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(np.ascontiguousarray(arr).tobytes())


def _read_exact(buf, n: int, what: str) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise CacheError(f"cache file truncated while reading {what}")
    return data


def _read_array(buf) -> tuple[str, np.ndarray]:
    (nlen,) = struct.unpack("<H", _read_exact(buf, 2, "array name length"))
    name = _read_exact(buf, nlen, "array name").decode()
    code, size, ndim = struct.unpack("<cBB", _read_exact(buf, 3, f"header of {name}"))
    shape = struct.unpack(f"<{ndim}Q", _read_exact(buf, 8 * ndim, f"shape of {name}"))
    code = code.decode()
    if code == "b":
        dtype = np.dtype(np.int8)
    elif code in _DTYPES:
        dtype = np.dtype(f"{_DTYPES[code]}{size}")
    else:
        raise CacheError(f"unknown dtype code {code!r} for {name}")
    count = int(np.prod(shape)) if ndim else 1
    raw = _read_exact(buf, count * dtype.itemsize, f"data of {name}")
    arr = np.frombuffer(raw, dtype=dtype).reshape(shape)
    if code == "b":
        arr = arr.astype(bool)
    return name, arr.astype(arr.dtype.newbyteorder("="))


def _side_arrays(prefix: str, side: GridTables) -> dict:
    m = side.masks
    return {
        f"{prefix}.level": np.array([side.grid.level], dtype=np.int64),
        f"{prefix}.points": side.grid.points,
        f"{prefix}.triangles": side.grid.triangles,
        f"{prefix}.nearest_gap": side.grid.nearest_gap,
        f"{prefix}.tau": side.tau,
        f"{prefix}.half_width": side.half_width,
        f"{prefix}.mask_pair_dir": m.per_direction_pair,
        f"{prefix}.mask_dir": m.per_direction,
        f"{prefix}.mask_pair": m.per_pair,
    }


def cache_bytes(tables: TdoaTables) -> bytes:
    buf = io.BytesIO()
    buf.write(CACHE_MAGIC)
    buf.write(struct.pack("<I", CACHE_VERSION))
    buf.write(bytes.fromhex(tables.config_hash))
    buf.write(struct.pack("<I", tables.frame_size))
    arrays = {}
    arrays.update(_side_arrays("coarse", tables.coarse))
    arrays.update(_side_arrays("fine", tables.fine))
    arrays["matching"] = tables.matching
    p = tables.params
    arrays["params"] = np.array(
        [p.get("coarse_level", -1), p.get("fine_level", -1), p.get("octagon_depth", -1),
         p.get("links", -1), int(p.get("fixed_half_widths", False))],
        dtype=np.int64,
    )
    arrays["threshold"] = np.array([p.get("threshold", -1.0)], dtype=np.float64)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        _write_array(buf, name, arr)
    return buf.getvalue()


def save_cache(tables: TdoaTables, path) -> None:
    Path(path).write_bytes(cache_bytes(tables))


def _side_from(arrays: dict, prefix: str) -> GridTables:
    pts = arrays[f"{prefix}.points"]
    grid = ScanGrid(
        level=int(arrays[f"{prefix}.level"][0]),
        points=pts,
        triangles=arrays[f"{prefix}.triangles"],
        nearest_gap=arrays[f"{prefix}.nearest_gap"],
    )
    masks = DirectivityMasks(
        per_direction_pair=arrays[f"{prefix}.mask_pair_dir"],
        per_direction=arrays[f"{prefix}.mask_dir"],
        per_pair=arrays[f"{prefix}.mask_pair"],
    )
    return GridTables(
        grid=grid, tau=arrays[f"{prefix}.tau"], half_width=arrays[f"{prefix}.half_width"], masks=masks
    )


def load_cache(path, config: ArrayConfig | None = None) -> TdoaTables:
    """Read a cache file; reject it if ``config`` hashes differently."""
    data = Path(path).read_bytes()
    buf = io.BytesIO(data)
    if _read_exact(buf, 8, "magic") != CACHE_MAGIC:
        raise CacheError(f"{path}: not a calibration cache file")
    (version,) = struct.unpack("<I", _read_exact(buf, 4, "version"))
    if version != CACHE_VERSION:
        raise CacheError(f"{path}: unsupported cache version {version}")
    config_hash = _read_exact(buf, 32, "config hash").hex()
    if config is not None and config.content_hash() != config_hash:
        raise CacheError(f"{path}: cache was built for a different array config")
    (frame_size,) = struct.unpack("<I", _read_exact(buf, 4, "frame size"))
    (count,) = struct.unpack("<I", _read_exact(buf, 4, "array count"))
    arrays = dict(_read_array(buf) for _ in range(count))
    try:
        cl, fl, depth, links, fixed = (int(x) for x in arrays["params"])
        params = {
            "coarse_level": cl,
            "fine_level": fl,
            "threshold": float(arrays["threshold"][0]),
            "octagon_depth": depth,
            "links": links,
            "frame_size": frame_size,
            "fixed_half_widths": bool(fixed),
        }
        return TdoaTables(
            config_hash=config_hash,
            frame_size=frame_size,
            coarse=_side_from(arrays, "coarse"),
            fine=_side_from(arrays, "fine"),
            matching=arrays["matching"],
            params=params,
        )
    except KeyError as exc:
        raise CacheError(f"{path}: cache is missing array {exc}") from None


def tables_digest(tables: TdoaTables) -> str:
    return hashlib.sha256(cache_bytes(tables)).hexdigest()
