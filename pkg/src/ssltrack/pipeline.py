"""Glue between the localizer, tracker and the record streams."""

from __future__ import annotations

import numpy as np

from .frontend import FrameSpec, iter_frames
from .ssl import Localizer, PotentialSource
from .sst import Tracker, TrackerParams
from .tdoa import TdoaTables


def scan_coverage(tables: TdoaTables) -> float:
    """Fraction of fine-grid directions that can be scanned at all."""
    return float(np.mean(tables.fine.masks.per_direction))


def tracker_params_for(tables: TdoaTables, frame_spec: FrameSpec | None = None, **overrides) -> TrackerParams:
    frame_spec = frame_spec or FrameSpec(frame_size=tables.frame_size)
    values = dict(delta_t=frame_spec.frame_period, scan_coverage=scan_coverage(tables))
    values.update(overrides)
    return TrackerParams(**values)


def localize_signal(signal: np.ndarray, localizer: Localizer, pairs: np.ndarray,
                    frame_spec: FrameSpec | None = None) -> list[list[PotentialSource]]:
    """Potential sources for every complete frame of a (M, T) signal."""
    frame_spec = frame_spec or FrameSpec(frame_size=localizer.n)
    if frame_spec.frame_size != localizer.n:
        raise ValueError(f"frame size {frame_spec.frame_size} does not match the tables ({localizer.n})")
    return [localizer.process_frame(f, pairs, l) for l, f in enumerate(iter_frames(signal, frame_spec))]


def track_potentials(potentials, params: TrackerParams) -> list[list[tuple]]:
    """Tracked ``(id, direction, activity)`` tuples for each frame of potentials."""
    tracker = Tracker(params)
    return [tracker.step(frame) for frame in potentials]
