"""Minimal RIFF/WAVE reader and writer for PCM16 and float32 multichannel audio."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

PCM = 1
IEEE_FLOAT = 3
EXTENSIBLE = 0xFFFE


class WavError(ValueError):
    pass


def write_wav(path, signal: np.ndarray, sample_rate: int, fmt: str = "float32") -> None:
    """Write a (channels, samples) array as interleaved PCM16 or float32."""
    x = np.atleast_2d(np.asarray(signal))
    channels, _ = x.shape
    if fmt == "float32":
        data = x.T.astype("<f4").tobytes()
        tag, bits = IEEE_FLOAT, 32
    elif fmt == "pcm16":
        q = np.clip(np.round(np.asarray(x, dtype=np.float64) * 32768.0), -32768, 32767)
        data = q.T.astype("<i2").tobytes()
        tag, bits = PCM, 16
    else:
        raise ValueError(f"unsupported sample format {fmt!r}")
    block = channels * bits // 8
    fmt_chunk = struct.pack(
        "<HHIIHH", tag, channels, int(sample_rate), int(sample_rate) * block, block, bits
    )
    chunks = [b"fmt ", struct.pack("<I", len(fmt_chunk)), fmt_chunk]
    if tag == IEEE_FLOAT:
        # non-PCM formats carry a fact chunk with the frame count
        chunks += [b"fact", struct.pack("<II", 4, x.shape[1])]
    chunks += [b"data", struct.pack("<I", len(data)), data]
    if len(data) % 2:
        chunks.append(b"\x00")
    body = b"WAVE" + b"".join(chunks)
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


def read_wav(path, channels: int | None = None) -> tuple[np.ndarray, int]:
    """Read a WAV file into a float64 (channels, samples) array and its rate.

    PCM16 is scaled to [-1, 1). Raises :class:`WavError` for malformed or
    compressed files, or when ``channels`` is given and does not match.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise WavError(f"{path}: truncated RIFF header")
    if raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        cid = raw[pos : pos + 4]
        (size,) = struct.unpack("<I", raw[pos + 4 : pos + 8])
        body = raw[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise WavError(f"{path}: truncated {cid.decode(errors='replace').strip()!r} chunk")
        if cid == b"fmt ":
            if size < 16:
                raise WavError(f"{path}: fmt chunk too short")
            fmt = struct.unpack("<HHIIHH", body[:16])
            if fmt[0] == EXTENSIBLE and size >= 40:
                fmt = (struct.unpack("<H", body[24:26])[0],) + fmt[1:]
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise WavError(f"{path}: missing 'fmt ' chunk")
    if data is None:
        raise WavError(f"{path}: missing 'data' chunk")
    tag, nch, rate, _, block, bits = fmt
    if tag == PCM and bits == 16:
        x = np.frombuffer(data[: len(data) // block * block], dtype="<i2").astype(np.float64) / 32768.0
    elif tag == IEEE_FLOAT and bits == 32:
        x = np.frombuffer(data[: len(data) // block * block], dtype="<f4").astype(np.float64)
    else:
        raise WavError(f"{path}: unsupported codec (format tag {tag}, {bits} bits)")
    if channels is not None and nch != channels:
        raise WavError(f"{path}: file has {nch} channels, expected {channels}")
    return x.reshape(-1, nch).T.copy(), int(rate)
