"""Binary event files.

Layout (little-endian)::

    magic      8 bytes   b"TRKEVT01"
    version    u32
    config     u32 length + UTF-8 JSON of the SimConfig
    n_events   u32
    per event:
      n_tracks u32, then n_tracks * n_stations * (row u32, col u32)
      n_fakes  u32, then n_fakes * (station u32, row u32, col u32)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from .simulator import Event, SimConfig, generate_event

DATASET_MAGIC = b"TRKEVT01"
DATASET_VERSION = 1


class DatasetError(ValueError):
    """Malformed or unsupported event file."""


def dataset_bytes(config: SimConfig, events: Iterable[Event]) -> bytes:
    events = list(events)
    header = json.dumps(config.to_dict(), sort_keys=True).encode()
    parts = [DATASET_MAGIC, struct.pack("<II", DATASET_VERSION, len(header)), header,
             struct.pack("<I", len(events))]
    for e in events:
        if (e.n_stations, e.width, e.height) != (config.n_stations, config.width, config.height):
            raise DatasetError("event geometry differs from the file configuration")
        parts += [struct.pack("<I", e.n_tracks), e.tracks.astype("<u4").tobytes(),
                  struct.pack("<I", len(e.fakes)), e.fakes.astype("<u4").tobytes()]
    return b"".join(parts)


def write_dataset(path, config: SimConfig, events: Iterable[Event]) -> None:
    Path(path).write_bytes(dataset_bytes(config, events))


def read_dataset(path) -> tuple[SimConfig, list[Event]]:
    buf = Path(path).read_bytes()
    if buf[:8] != DATASET_MAGIC:
        raise DatasetError("not an event file (bad magic)")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise DatasetError("truncated event file")
        out = struct.unpack_from(fmt, buf, pos)
        pos += size
        return out

    def take_array(count, width):
        nonlocal pos
        size = 4 * count * width
        if pos + size > len(buf):
            raise DatasetError("truncated event file")
        arr = np.frombuffer(buf, dtype="<u4", count=count * width, offset=pos).astype(np.int64)
        pos += size
        return arr

    version, header_len = take("<II")
    if version != DATASET_VERSION:
        raise DatasetError(f"unsupported event file version {version}")
    if pos + header_len > len(buf):
        raise DatasetError("truncated event file")
    config = SimConfig.from_dict(json.loads(buf[pos : pos + header_len].decode()))
    pos += header_len
    (n_events,) = take("<I")
    d = config.n_stations
    events = []
    for _ in range(n_events):
        (n_tracks,) = take("<I")
        tracks = take_array(n_tracks, 2 * d).reshape(n_tracks, d, 2)
        (n_fakes,) = take("<I")
        fakes = take_array(n_fakes, 3).reshape(n_fakes, 3)
        events.append(Event(d, config.width, config.height, tracks, fakes))
    if pos != len(buf):
        raise DatasetError("trailing bytes in event file")
    return config, events


def generate_dataset(config: SimConfig, n_events: int, path, seed: int | None = None) -> list[Event]:
    """Simulate ``n_events`` events and write them to ``path``."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    events = [generate_event(config, rng) for _ in range(n_events)]
    write_dataset(path, config, events)
    return events
