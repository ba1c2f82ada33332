"""Straight-track event generator with uniformly distributed fake hits.

Tracks start at a vertex in the coordinate origin and cross ``n_stations``
planes perpendicular to the z axis.  Every plane spans the same physical
window ``[-half_x, half_x] x [-half_y, half_y]`` which is divided into a
``height x width`` pixel grid (rows follow y, columns follow x).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

FAKE = -1


class SimulationError(RuntimeError):
    """The configuration is too dense to place the requested tracks."""


@dataclass(frozen=True)
class SimConfig:
    """Detector geometry and event composition.

    The default planes sit about a thousand units from the vertex, one unit
    apart, and the cone just fills the last plane.  A track then drifts by
    a few hundredths of a cell per station and almost always stays in the
    cell of its first hit, which is what a network of per-cell (1x1)
    convolutions needs to tell tracks from noise.
    """

    n_stations: int = 5
    width: int = 64
    height: int = 64
    min_tracks: int = 5
    max_tracks: int = 15
    fake_factor: float = 2.0
    cone_half_angle: float = math.atan(31.5 / 1004.0)
    station_z: tuple = (1000.0, 1001.0, 1002.0, 1003.0, 1004.0)
    half_x: float = 32.0
    half_y: float = 32.0
    max_retries: int = 1000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "station_z", tuple(float(z) for z in self.station_z))
        if self.n_stations < 1:
            raise ValueError("n_stations must be positive")
        if len(self.station_z) != self.n_stations:
            raise ValueError("station_z must list one z position per station")
        if any(b <= a for a, b in zip(self.station_z, self.station_z[1:])) or self.station_z[0] <= 0:
            raise ValueError("station_z must be positive and strictly increasing")
        if self.width < 1 or self.height < 1:
            raise ValueError("grid resolution must be positive")
        if self.min_tracks < 1 or self.max_tracks < self.min_tracks:
            raise ValueError("track range must satisfy 1 <= min_tracks <= max_tracks")
        if self.fake_factor < 0:
            raise ValueError("fake_factor must be non-negative")
        reach = math.tan(self.cone_half_angle) * self.station_z[-1]
        if not 0 <= self.cone_half_angle < math.pi / 2 or reach > min(self.half_x, self.half_y):
            raise ValueError("cone too wide: tracks would leave the last station")

    @property
    def cell_size(self) -> tuple[float, float]:
        return 2.0 * self.half_y / self.height, 2.0 * self.half_x / self.width

    def to_dict(self) -> dict:
        d = asdict(self)
        d["station_z"] = list(self.station_z)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown SimConfig keys: {sorted(unknown)}")
        return cls(**data)

    def cell_centers(self, rows, cols) -> tuple[np.ndarray, np.ndarray]:
        """Physical (x, y) of the centers of the given cells."""
        ch, cw = self.cell_size
        x = (np.asarray(cols) + 0.5) * cw - self.half_x
        y = (np.asarray(rows) + 0.5) * ch - self.half_y
        return x, y


@dataclass(frozen=True)
class Hit:
    station: int
    row: int
    col: int
    track_id: int | None = None

    @property
    def is_fake(self) -> bool:
        return self.track_id is None


@dataclass
class Event:
    """One simulated event.

    ``tracks`` has shape (n_tracks, n_stations, 2) holding the (row, col)
    cell of every track on every station; the track id is the first index.
    ``fakes`` has shape (n_fakes, 3) holding (station, row, col).
    """

    n_stations: int
    width: int
    height: int
    tracks: np.ndarray = field(default=None)
    fakes: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.tracks is None:
            self.tracks = np.zeros((0, self.n_stations, 2), dtype=np.int64)
        if self.fakes is None:
            self.fakes = np.zeros((0, 3), dtype=np.int64)
        self.tracks = np.asarray(self.tracks, dtype=np.int64).reshape(-1, self.n_stations, 2)
        self.fakes = np.asarray(self.fakes, dtype=np.int64).reshape(-1, 3)

    @property
    def n_tracks(self) -> int:
        return len(self.tracks)

    @property
    def n_true_hits(self) -> int:
        return self.n_tracks * self.n_stations

    def station_hits(self, station: int) -> tuple[np.ndarray, np.ndarray]:
        """Cells (m, 2) and track ids (m,) on one station, true hits first.

        The position in this list is the hit index used for tie-breaking;
        fakes carry track id ``FAKE``.
        """
        true_cells = self.tracks[:, station, :]
        fake_cells = self.fakes[self.fakes[:, 0] == station, 1:]
        cells = np.concatenate([true_cells, fake_cells], axis=0)
        ids = np.concatenate([np.arange(self.n_tracks), np.full(len(fake_cells), FAKE)])
        return cells, ids

    def hits(self) -> list[Hit]:
        out = [Hit(k, int(r), int(c), t) for t, track in enumerate(self.tracks)
               for k, (r, c) in enumerate(track)]
        out += [Hit(int(s), int(r), int(c)) for s, r, c in self.fakes]
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, Event):
            return NotImplemented
        return (
            (self.n_stations, self.width, self.height) == (other.n_stations, other.width, other.height)
            and np.array_equal(self.tracks, other.tracks)
            and np.array_equal(self.fakes, other.fakes)
        )


def _sample_direction(config: SimConfig, rng: np.random.Generator) -> tuple[float, float]:
    # uniform in solid angle inside the cone
    cos_t = rng.uniform(math.cos(config.cone_half_angle), 1.0)
    phi = rng.uniform(0.0, 2.0 * math.pi)
    tan_t = math.sqrt(max(0.0, 1.0 - cos_t * cos_t)) / cos_t
    return tan_t * math.cos(phi), tan_t * math.sin(phi)


def _discretize(config: SimConfig, tx: float, ty: float) -> np.ndarray | None:
    z = np.asarray(config.station_z)
    ch, cw = config.cell_size
    cols = np.floor((tx * z + config.half_x) / cw).astype(np.int64)
    rows = np.floor((ty * z + config.half_y) / ch).astype(np.int64)
    if cols.min() < 0 or rows.min() < 0 or cols.max() >= config.width or rows.max() >= config.height:
        return None
    return np.stack([rows, cols], axis=1)


def add_fake_hits(event: Event, fake_factor: float, rng: np.random.Generator) -> Event:
    """Return a copy of ``event`` with uniformly placed fakes appended.

    The total is ``floor(fake_factor * true hits)``, split as evenly as
    possible across stations (lower stations take the remainder).
    """
    if fake_factor < 0:
        raise ValueError("fake_factor must be non-negative")
    total = int(math.floor(fake_factor * event.n_true_hits))
    d = event.n_stations
    per_station = [total // d + (1 if k < total % d else 0) for k in range(d)]
    chunks = [event.fakes]
    for k, n in enumerate(per_station):
        if n == 0:
            continue
        rows = rng.integers(0, event.height, size=n)
        cols = rng.integers(0, event.width, size=n)
        chunks.append(np.stack([np.full(n, k), rows, cols], axis=1))
    return Event(d, event.width, event.height, event.tracks.copy(), np.concatenate(chunks, axis=0))


def generate_event(config: SimConfig, rng: np.random.Generator, n_tracks: int | None = None) -> Event:
    """Simulate one event; ``n_tracks`` overrides the configured range."""
    if n_tracks is None:
        n_tracks = int(rng.integers(config.min_tracks, config.max_tracks + 1))
    tracks = np.zeros((n_tracks, config.n_stations, 2), dtype=np.int64)
    taken: set[tuple[int, int]] = set()
    for t in range(n_tracks):
        for _ in range(config.max_retries):
            cells = _discretize(config, *_sample_direction(config, rng))
            if cells is None:
                continue
            anchor = (int(cells[0, 0]), int(cells[0, 1]))
            if anchor in taken:
                continue
            taken.add(anchor)
            tracks[t] = cells
            break
        else:
            raise SimulationError(
                f"could not place track {t} after {config.max_retries} attempts; "
                "configuration too dense"
            )
    event = Event(config.n_stations, config.width, config.height, tracks)
    return add_fake_hits(event, config.fake_factor, rng)


def generate_events(config: SimConfig, n_events: int, seed: int | None = None) -> list[Event]:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    return [generate_event(config, rng) for _ in range(n_events)]


# -- seed candidates for the sequential tracker ---------------------------------
@dataclass
class SeedCandidate:
    """A vertex-first sequence of (x, y, z) points with its truth label.

    ``next_point`` is the (x, y) of the true continuation on the following
    station when the candidate is a true track prefix that can be extended.
    """

    points: np.ndarray
    label: int
    next_point: np.ndarray | None = None
    track_id: int | None = None

    @property
    def length(self) -> int:
        return len(self.points)


def generate_seed_candidates(
    event: Event,
    config: SimConfig,
    corridor: tuple[float, float] = (2.0, 2.0),
    rng: np.random.Generator | None = None,
    max_branch: int | None = None,
) -> list[SeedCandidate]:
    """Grow candidates station by station inside a corridor.

    Each candidate is extrapolated along the line through its last two
    points; every hit on the next station within ``corridor`` (dy, dx, in
    physical units) extends it.  All prefixes from length 2 (vertex plus a
    station-0 hit) to ``n_stations + 1`` are emitted.  ``max_branch`` caps
    the number of extensions per candidate, chosen at random with ``rng``.
    """
    dy, dx = corridor
    z = np.asarray(config.station_z)
    station_xy = []
    station_ids = []
    for k in range(event.n_stations):
        cells, ids = event.station_hits(k)
        x, y = config.cell_centers(cells[:, 0], cells[:, 1])
        station_xy.append(np.stack([x, y], axis=1))
        station_ids.append(ids)
    track_xy = [config.cell_centers(event.tracks[:, k, 0], event.tracks[:, k, 1]) for k in range(event.n_stations)]

    def true_next(track_id: int, station: int):
        if station >= event.n_stations:
            return None
        return np.array([track_xy[station][0][track_id], track_xy[station][1][track_id]])

    out: list[SeedCandidate] = []
    # partial candidate: (points list, track id or FAKE if ghost)
    frontier = []
    for i, (xy, tid) in enumerate(zip(station_xy[0], station_ids[0])):
        pts = np.array([[0.0, 0.0, 0.0], [xy[0], xy[1], z[0]]])
        frontier.append((pts, int(tid)))
    for k in range(event.n_stations):
        for pts, tid in frontier:
            label = int(tid != FAKE)
            nxt = true_next(tid, k + 1) if label else None
            out.append(SeedCandidate(pts, label, nxt, tid if label else None))
        if k + 1 == event.n_stations:
            break
        new_frontier = []
        xy_next, ids_next = station_xy[k + 1], station_ids[k + 1]
        for pts, tid in frontier:
            a, b = pts[-2], pts[-1]
            scale = (z[k + 1] - b[2]) / (b[2] - a[2])
            px = b[0] + (b[0] - a[0]) * scale
            py = b[1] + (b[1] - a[1]) * scale
            ok = np.flatnonzero((np.abs(xy_next[:, 0] - px) <= dx) & (np.abs(xy_next[:, 1] - py) <= dy))
            if max_branch is not None and len(ok) > max_branch:
                if rng is None:
                    raise ValueError("max_branch requires an rng")
                ok = np.sort(rng.choice(ok, size=max_branch, replace=False))
            for j in ok:
                ext = np.vstack([pts, [xy_next[j, 0], xy_next[j, 1], z[k + 1]]])
                new_tid = tid if (tid != FAKE and ids_next[j] == tid) else FAKE
                new_frontier.append((ext, new_tid))
        frontier = new_frontier
    n_true = sum(s.label for s in out)
    log.debug("seed candidates: %d true, %d ghost", n_true, len(out) - n_true)
    return out


def label_ratio(seeds: Sequence[SeedCandidate]) -> tuple[int, int]:
    """(true, ghost) counts."""
    n_true = sum(s.label for s in seeds)
    return n_true, len(seeds) - n_true


def rebalance(seeds: Sequence[SeedCandidate], ghosts_per_true: int, rng: np.random.Generator) -> list[SeedCandidate]:
    """Subsample to exactly ``ghosts_per_true`` ghosts per true candidate, per length."""
    out: list[SeedCandidate] = []
    for length in sorted({s.length for s in seeds}):
        group = [s for s in seeds if s.length == length]
        trues = [s for s in group if s.label == 1]
        ghosts = [s for s in group if s.label == 0]
        n_true = min(len(trues), len(ghosts) // ghosts_per_true)
        pick_t = rng.choice(len(trues), size=n_true, replace=False) if n_true else []
        pick_g = rng.choice(len(ghosts), size=n_true * ghosts_per_true, replace=False) if n_true else []
        out += [trues[i] for i in sorted(pick_t)] + [ghosts[i] for i in sorted(pick_g)]
    return out
