"""Line-delimited JSON record streams for potentials, tracks and ground truth.

Every line is one frame::

    potentials  {"frame": l, "t": s, "sources": [[x, y, z, E], ...]}
    tracked     {"frame": l, "t": s, "tracks": [{"id": i, "x": .., "y": .., "z": .., "activity": p}]}
    truth       {"frame": l, "t": s, "sources": [{"id": i, "x": .., "y": .., "z": .., "active": b}]}

Floats are written with 6 significant digits so streams are byte-stable
across platforms.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .scene import GroundTruth
from .ssl import PotentialSource


class RecordError(ValueError):
    """Malformed record stream; the message names the offending line."""


def sig6(x: float) -> float:
    return float(f"{float(x):.6g}")


def _dump(obj) -> str:
    return json.dumps(obj, separators=(",", ":"))


def potential_line(frame: int, t: float, sources) -> str:
    rows = [[sig6(v) for v in (*np.asarray(p.doa), p.energy)] for p in sources]
    return _dump({"frame": int(frame), "t": sig6(t), "sources": rows})


def tracked_line(frame: int, t: float, tracks) -> str:
    rows = [
        {"id": int(i), "x": sig6(d[0]), "y": sig6(d[1]), "z": sig6(d[2]), "activity": sig6(a)}
        for i, d, a in tracks
    ]
    return _dump({"frame": int(frame), "t": sig6(t), "tracks": rows})


def truth_lines(truth: GroundTruth):
    for l, t in enumerate(truth.timestamps):
        rows = [
            {"id": int(sid), "x": sig6(d[0]), "y": sig6(d[1]), "z": sig6(d[2]), "active": bool(a)}
            for sid, d, a in zip(truth.ids, truth.doa[l], truth.active[l])
        ]
        yield _dump({"frame": l, "t": sig6(t), "sources": rows})


def write_lines(path, lines) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")


def _iter_json(path):
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordError(f"{path}:{n}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict) or "frame" not in rec or "t" not in rec:
                raise RecordError(f"{path}:{n}: record needs 'frame' and 't' fields")
            yield n, rec


def read_potentials(path) -> tuple[list[int], list[float], list[list[PotentialSource]]]:
    frames, stamps, out = [], [], []
    for n, rec in _iter_json(path):
        rows = rec.get("sources")
        if not isinstance(rows, list) or any(not isinstance(r, list) or len(r) != 4 for r in rows):
            raise RecordError(f"{path}:{n}: 'sources' must be a list of [x, y, z, E]")
        try:
            pots = [PotentialSource(np.array(r[:3], dtype=np.float64), float(r[3]), int(rec["frame"]))
                    for r in rows]
        except (TypeError, ValueError):
            raise RecordError(f"{path}:{n}: non-numeric potential source") from None
        frames.append(int(rec["frame"]))
        stamps.append(float(rec["t"]))
        out.append(pots)
    return frames, stamps, out


def read_tracked(path) -> tuple[list[int], list[float], list[list[tuple]]]:
    frames, stamps, out = [], [], []
    for n, rec in _iter_json(path):
        rows = rec.get("tracks")
        if not isinstance(rows, list):
            raise RecordError(f"{path}:{n}: 'tracks' must be a list")
        try:
            tracks = [(int(r["id"]), np.array([r["x"], r["y"], r["z"]], dtype=np.float64), float(r["activity"]))
                      for r in rows]
        except (KeyError, TypeError, ValueError):
            raise RecordError(f"{path}:{n}: track needs numeric id, x, y, z and activity") from None
        frames.append(int(rec["frame"]))
        stamps.append(float(rec["t"]))
        out.append(tracks)
    return frames, stamps, out


def read_truth(path) -> GroundTruth:
    stamps, doa, active, ids = [], [], [], None
    for n, rec in _iter_json(path):
        rows = rec.get("sources")
        if not isinstance(rows, list):
            raise RecordError(f"{path}:{n}: 'sources' must be a list")
        try:
            these = [int(r["id"]) for r in rows]
            doa.append([[r["x"], r["y"], r["z"]] for r in rows])
            active.append([bool(r["active"]) for r in rows])
        except (KeyError, TypeError, ValueError):
            raise RecordError(f"{path}:{n}: source needs id, x, y, z and active") from None
        if ids is None:
            ids = these
        elif these != ids:
            raise RecordError(f"{path}:{n}: source ids differ from the first frame")
        if int(rec["frame"]) != len(stamps):
            raise RecordError(f"{path}:{n}: expected frame {len(stamps)}, got {rec['frame']}")
        stamps.append(float(rec["t"]))
    ids = ids or []
    return GroundTruth(
        timestamps=np.array(stamps),
        ids=ids,
        doa=np.array(doa, dtype=np.float64).reshape(len(stamps), len(ids), 3),
        active=np.array(active, dtype=bool).reshape(len(stamps), len(ids)),
    )


def save_truth(truth: GroundTruth, path) -> None:
    write_lines(path, truth_lines(truth))


def ensure_parent(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path
