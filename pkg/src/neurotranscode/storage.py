"""File formats.

Tensor payloads use a small binary container: magic "TNSR", a version byte,
a rank byte, little-endian u64 extents, then float32 values row-major.
Everything else (schedules, channel mappings, manifests, metadata, configs)
is line-oriented text so files stay inspectable.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TNSR"
VERSION = 1


class FormatError(ValueError):
    pass


def save_tensor(path, array):
    array = np.asarray(array)
    if array.ndim < 1:
        array = array.reshape(1)
    payload = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BB", VERSION, array.ndim))
        fh.write(struct.pack(f"<{array.ndim}Q", *array.shape))
        fh.write(payload.tobytes())


def load_tensor(path):
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 6:
        raise FormatError(f"{path}: file too short ({len(raw)} bytes) at byte 0")
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r} at byte 0")
    version, rank = struct.unpack_from("<BB", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    header_end = 6 + 8 * rank
    if len(raw) < header_end:
        raise FormatError(
            f"{path}: truncated extents, expected {header_end} bytes, "
            f"got {len(raw)} at byte 6"
        )
    shape = struct.unpack_from(f"<{rank}Q", raw, 6)
    count = int(np.prod(shape)) if rank else 1
    expected = header_end + 4 * count
    if len(raw) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes for shape {tuple(shape)}, "
            f"got {len(raw)} at byte {header_end}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=header_end, count=count)
    return data.reshape(shape).astype(np.float32)


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# line-oriented text formats
# ---------------------------------------------------------------------------


def save_kv(path, pairs):
    """Flat key = value text, one decision per line."""
    lines = [f"{k} = {v}" for k, v in pairs.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_kv(path):
    path = Path(path)
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise FormatError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if not key:
            raise FormatError(f"{path}:{lineno}: empty key")
        if key in out:
            raise FormatError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def save_schedule(path, events, duration_seconds):
    lines = [f"# duration_seconds = {float(duration_seconds)!r}"]
    lines += [f"{float(onset)!r},{kind}" for onset, kind in events]
    Path(path).write_text("\n".join(lines) + "\n")


def load_schedule(path):
    path = Path(path)
    duration = None
    events = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            if "duration_seconds" in stripped and "=" in stripped:
                duration = float(stripped.partition("=")[2])
            continue
        parts = stripped.split(",")
        if len(parts) != 2:
            raise FormatError(
                f"{path}:{lineno}: expected 'onset_seconds,kind', got {line!r}"
            )
        try:
            onset = float(parts[0])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: bad onset {parts[0]!r}") from None
        kind = parts[1].strip()
        if kind not in ("standard", "oddball"):
            raise FormatError(f"{path}:{lineno}: unknown event kind {kind!r}")
        events.append((onset, kind))
    if duration is None:
        duration = events[-1][0] + 1.0 if events else 0.0
    return events, duration


def save_mapping(path, mapping):
    """Channel layout rows "channel,x,y,z", one per channel."""
    lines = [f"{c},{x},{y},{z}" for c, (x, y, z) in sorted(mapping.items())]
    Path(path).write_text("\n".join(lines) + "\n")


def load_mapping(path):
    path = Path(path)
    mapping = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = stripped.split(",")
        if len(parts) != 4:
            raise FormatError(f"{path}:{lineno}: expected 'channel,x,y,z'")
        try:
            c, x, y, z = (int(p) for p in parts)
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-integer field in {line!r}") from None
        if c in mapping:
            raise FormatError(f"{path}:{lineno}: duplicate channel {c}")
        mapping[c] = (x, y, z)
    if not mapping:
        raise FormatError(f"{path}: empty mapping")
    return mapping


def save_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")
