"""Microphone array geometry, directivity gains and direction/pair masks."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .geometry import ScanGrid

CONFIG_FORMAT = "ssltrack-array/1"


def _unit(v, name: str, tol: float = 1e-6) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError(f"{name} must be a non-zero vector")
    if abs(n - 1.0) > tol:
        raise ValueError(f"{name} must be unit norm (got norm {n:.6g})")
    return v


@dataclass(frozen=True)
class MicrophoneModel:
    """One microphone: position distribution, orientation and directivity.

    Angles ``alpha`` (full gain) and ``beta`` (null gain) are in degrees.
    """

    position_mean: np.ndarray
    position_cov: np.ndarray
    orientation: np.ndarray
    alpha: float = 80.0
    beta: float = 100.0

    def __post_init__(self):
        mu = np.asarray(self.position_mean, dtype=np.float64).reshape(3)
        cov = np.asarray(self.position_cov, dtype=np.float64).reshape(3, 3)
        if not np.allclose(cov, cov.T, atol=1e-15):
            raise ValueError("position covariance must be symmetric")
        if np.linalg.eigvalsh(cov).min() < -1e-15:
            raise ValueError("position covariance must be positive semi-definite")
        d = np.asarray(self.orientation, dtype=np.float64).reshape(3)
        d = d / np.linalg.norm(d) if np.linalg.norm(d) > 0 else d
        _unit(d, "microphone orientation")
        if not 0.0 <= self.alpha < self.beta <= 180.0:
            raise ValueError(f"need 0 <= alpha < beta <= 180, got {self.alpha}, {self.beta}")
        object.__setattr__(self, "position_mean", mu)
        object.__setattr__(self, "position_cov", cov)
        object.__setattr__(self, "orientation", d)


@dataclass(frozen=True)
class ArrayConfig:
    microphones: tuple
    scan_orientation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    scan_alpha: float = 80.0
    scan_beta: float = 90.0
    min_gain: float = 0.1
    sample_rate: float = 16000.0
    sound_speed_mean: float = 343.0
    sound_speed_std: float = 5.0
    name: str = ""

    def __post_init__(self):
        mics = tuple(self.microphones)
        if len(mics) < 2:
            raise ValueError("an array needs at least two microphones")
        object.__setattr__(self, "microphones", mics)
        d0 = np.asarray(self.scan_orientation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "scan_orientation", _unit(d0, "scan orientation"))
        if not 0.0 <= self.scan_alpha < self.scan_beta <= 180.0:
            raise ValueError("scan space needs 0 <= alpha_0 < beta_0 <= 180")
        if not 0.0 <= self.min_gain < 1.0:
            raise ValueError(f"min_gain must lie in [0, 1), got {self.min_gain}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.sound_speed_mean <= 0 or self.sound_speed_std < 0:
            raise ValueError("invalid speed of sound distribution")
        if self.sound_speed_std > 0 and self.sound_speed_mean / self.sound_speed_std < 10.0:
            raise ValueError("speed of sound std too large for the linearized TDOA model (need mu_c/sigma_c >= 10)")

    @property
    def n_mics(self) -> int:
        return len(self.microphones)

    @property
    def positions(self) -> np.ndarray:
        return np.stack([m.position_mean for m in self.microphones])

    @property
    def covariances(self) -> np.ndarray:
        return np.stack([m.position_cov for m in self.microphones])

    @property
    def orientations(self) -> np.ndarray:
        return np.stack([m.orientation for m in self.microphones])

    @property
    def pairs(self) -> np.ndarray:
        """All (p, q) index pairs with p < q, in row-major order."""
        p, q = np.triu_indices(self.n_mics, k=1)
        return np.stack([p, q], axis=1)

    def to_dict(self) -> dict:
        return {
            "format": CONFIG_FORMAT,
            "name": self.name,
            "sample_rate": float(self.sample_rate),
            "sound_speed_mean": float(self.sound_speed_mean),
            "sound_speed_std": float(self.sound_speed_std),
            "min_gain": float(self.min_gain),
            "scan": {
                "orientation": [float(x) for x in self.scan_orientation],
                "alpha": float(self.scan_alpha),
                "beta": float(self.scan_beta),
            },
            "microphones": [
                {
                    "position": [float(x) for x in m.position_mean],
                    "covariance": [[float(x) for x in row] for row in m.position_cov],
                    "orientation": [float(x) for x in m.orientation],
                    "alpha": float(m.alpha),
                    "beta": float(m.beta),
                }
                for m in self.microphones
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ArrayConfig":
        fmt = data.get("format", CONFIG_FORMAT)
        if fmt != CONFIG_FORMAT:
            raise ValueError(f"unsupported array config format {fmt!r}")
        try:
            mics = [
                MicrophoneModel(
                    position_mean=m["position"],
                    position_cov=m.get("covariance", np.zeros((3, 3))),
                    orientation=m["orientation"],
                    alpha=m.get("alpha", 80.0),
                    beta=m.get("beta", 100.0),
                )
                for m in data["microphones"]
            ]
            scan = data.get("scan", {})
            return cls(
                microphones=mics,
                scan_orientation=scan.get("orientation", [0.0, 0.0, 1.0]),
                scan_alpha=scan.get("alpha", 80.0),
                scan_beta=scan.get("beta", 90.0),
                min_gain=data.get("min_gain", 0.1),
                sample_rate=data["sample_rate"],
                sound_speed_mean=data.get("sound_speed_mean", 343.0),
                sound_speed_std=data.get("sound_speed_std", 5.0),
                name=data.get("name", ""),
            )
        except KeyError as exc:
            raise ValueError(f"array config is missing field {exc}") from None

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def save_array_config(config: ArrayConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n")


def load_array_config(path) -> ArrayConfig:
    return ArrayConfig.from_dict(json.loads(Path(path).read_text()))


def load_preset(name: str) -> ArrayConfig:
    """Load a shipped array preset: ``oma``, ``oma8``, ``cma`` or ``cma8``."""
    fname = f"{name.lower()}.json"
    ref = resources.files("ssltrack") / "presets" / fname
    if not ref.is_file():
        raise ValueError(f"unknown array preset {name!r}")
    return ArrayConfig.from_dict(json.loads(ref.read_text()))


# ---------------------------------------------------------------- directivity

def directivity_angle(direction, orientation) -> np.ndarray:
    """Angle in degrees between source direction(s) and a microphone axis."""
    u = np.asarray(direction, dtype=np.float64)
    d = np.asarray(orientation, dtype=np.float64)
    nu = np.linalg.norm(u, axis=-1)
    nd = np.linalg.norm(d)
    if np.any(nu == 0.0) or nd == 0.0:
        raise ValueError("directivity angle undefined for zero-length vectors")
    cos = (u @ d) / (nu * nd)
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


def logistic_gain(theta, alpha: float, beta: float):
    if alpha >= beta:
        raise ValueError(f"gain model needs alpha < beta, got {alpha} >= {beta}")
    z = (20.0 / (beta - alpha)) * (np.asarray(theta, dtype=np.float64) - 0.5 * (alpha + beta))
    # exp overflow -> inf -> gain 0, which is the correct limit
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(z))


def directivity_gain(direction, orientation, alpha: float, beta: float):
    """Logistic gain of a microphone (or scan space) toward ``direction``."""
    return logistic_gain(directivity_angle(direction, orientation), alpha, beta)


@dataclass(frozen=True)
class DirectivityMasks:
    """Binary masks over (pair, direction).

    ``per_direction_pair`` has shape (n_pairs, K); ``per_direction`` (K,);
    ``per_pair`` (n_pairs,). Pair order follows ``ArrayConfig.pairs``.
    """

    per_direction_pair: np.ndarray
    per_direction: np.ndarray
    per_pair: np.ndarray

    @property
    def active_pair_count(self) -> np.ndarray:
        return self.per_direction_pair.sum(axis=0)


def mic_gains(config: ArrayConfig, directions: np.ndarray) -> np.ndarray:
    """Gains of every microphone toward every direction, shape (M, K)."""
    return np.stack(
        [directivity_gain(directions, m.orientation, m.alpha, m.beta) for m in config.microphones]
    )


def scan_gains(config: ArrayConfig, directions: np.ndarray) -> np.ndarray:
    return directivity_gain(directions, config.scan_orientation, config.scan_alpha, config.scan_beta)


def build_masks(config: ArrayConfig, grid) -> DirectivityMasks:
    points = grid.points if isinstance(grid, ScanGrid) else np.asarray(grid, dtype=np.float64)
    g = mic_gains(config, points)
    g0 = scan_gains(config, points)
    pairs = config.pairs
    product = g0[None, :] * g[pairs[:, 0]] * g[pairs[:, 1]]
    pq = product >= config.min_gain
    return DirectivityMasks(
        per_direction_pair=pq,
        per_direction=pq.any(axis=0),
        per_pair=pq.any(axis=1),
    )


# ------------------------------------------------------------------- presets

def circular_array(
    n_mics: int = 16,
    diameter: float = 0.254,
    sigma_mic2: float = 1e-6,
    name: str = "",
    **kwargs,
) -> ArrayConfig:
    """Planar circular array in z = 0 with all microphones pointing up."""
    radius = diameter / 2.0
    angles = 2.0 * np.pi * np.arange(n_mics) / n_mics
    cov = np.diag([sigma_mic2, sigma_mic2, 0.0])
    mics = [
        MicrophoneModel(
            position_mean=[radius * np.cos(a), radius * np.sin(a), 0.0],
            position_cov=cov,
            orientation=[0.0, 0.0, 1.0],
        )
        for a in angles
    ]
    return ArrayConfig(microphones=mics, name=name or f"circular{n_mics}", **kwargs)


def cube_array(
    edge: float = 0.250,
    square: float = 0.145,
    mics_per_face: int = 4,
    sigma_mic2: float = 1e-6,
    name: str = "",
    **kwargs,
) -> ArrayConfig:
    """Closed cube with microphone squares on the four side faces.

    Each face carries ``mics_per_face`` microphones on the corners of a
    square of side ``square`` centred on the face (4 -> all corners, 2 ->
    one diagonal), pointing along the outward face normal.
    """
    half, s = edge / 2.0, square / 2.0
    corners = [(-s, -s), (s, -s), (s, s), (-s, s)]
    if mics_per_face == 2:
        corners = [corners[0], corners[2]]
    elif mics_per_face != 4:
        raise ValueError("mics_per_face must be 2 or 4")
    mics = []
    for axis, sign in ((0, 1.0), (1, 1.0), (0, -1.0), (1, -1.0)):
        normal = np.zeros(3)
        normal[axis] = sign
        other = 1 - axis
        var = np.zeros(3)
        var[other] = sigma_mic2
        var[2] = sigma_mic2
        for a, b in corners:
            pos = np.zeros(3)
            pos[axis] = sign * half
            pos[other] = a
            pos[2] = b
            mics.append(MicrophoneModel(pos, np.diag(var), normal))
    return ArrayConfig(microphones=mics, name=name or f"cube{len(mics)}", **kwargs)
