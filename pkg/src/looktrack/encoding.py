"""Grid encoding of events and decoding of grid predictions into tracks.

Grids are laid out ``(height, width, channels)`` so that ``grid[row, col]``
addresses one cell.  A prediction or target tensor has ``2 * (d - 1) + 1``
channels: the confidence first, then ``d - 1`` X (column) shifts, then
``d - 1`` Y (row) shifts, all measured from the station-0 anchor cell.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .simulator import Event

MISSING = -1


class EncodingError(ValueError):
    """The event cannot be represented on the grid."""


def n_output_channels(n_stations: int) -> int:
    return 2 * (n_stations - 1) + 1


def encode_occupancy(event: Event) -> np.ndarray:
    """Binary (h, w, d) occupancy; true hits and fakes look the same."""
    grid = np.zeros((event.height, event.width, event.n_stations))
    cells = np.concatenate(
        [
            np.column_stack([np.repeat(np.arange(event.n_stations)[None], event.n_tracks, 0).ravel(),
                             event.tracks.reshape(-1, 2)]),
            event.fakes,
        ]
    )
    if len(cells) == 0:
        return grid
    st, rows, cols = cells.T
    if (rows < 0).any() or (cols < 0).any() or (rows >= event.height).any() or (cols >= event.width).any():
        raise EncodingError("hit outside the grid")
    grid[rows, cols, st] = 1.0
    return grid


def build_target(event: Event) -> np.ndarray:
    """Target tensor (h, w, 2(d-1)+1) for the grid network."""
    d = event.n_stations
    target = np.zeros((event.height, event.width, n_output_channels(d)))
    if event.n_tracks == 0:
        return target
    anchors = event.tracks[:, 0, :]
    if len({(int(r), int(c)) for r, c in anchors}) != len(anchors):
        raise EncodingError("two tracks anchored in the same cell")
    rel = event.tracks[:, 1:, :] - anchors[:, None, :]  # (T, d-1, [row, col])
    r0, c0 = anchors.T
    target[r0, c0, 0] = 1.0
    target[r0, c0, 1:d] = rel[:, :, 1]
    target[r0, c0, d:] = rel[:, :, 0]
    return target


def split_channels(tensor: np.ndarray, n_stations: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(confidence, x_shifts, y_shifts) views of a packed tensor."""
    d = n_stations
    if tensor.shape[-1] != n_output_channels(d):
        raise EncodingError(f"expected {n_output_channels(d)} channels, got {tensor.shape[-1]}")
    return tensor[..., 0], tensor[..., 1:d], tensor[..., d:]


def round_half_away(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.int64)


def snap_to_nearest_hit(raw: tuple[int, int], station_cells: np.ndarray) -> int:
    """Index of the hit closest to ``raw`` (lowest index on ties)."""
    if len(station_cells) == 0:
        raise EncodingError("no hits on station")
    diff = station_cells - np.asarray(raw)
    return int(np.argmin((diff * diff).sum(axis=1)))


def _snap_many(raw: np.ndarray, station_cells: np.ndarray) -> np.ndarray:
    diff = raw[:, None, :] - station_cells[None, :, :]
    return np.argmin((diff * diff).sum(axis=2), axis=1)


def decode_predictions(pred: np.ndarray, event: Event, threshold: float = 0.5) -> np.ndarray:
    """Reconstruct one track per anchor cell whose confidence is >= threshold.

    Returns an int array (n_anchors, d, 2) of snapped (row, col) cells in
    row-major anchor order; stations without any hit are filled with
    ``MISSING``.
    """
    d = event.n_stations
    conf, xs, ys = split_channels(pred, d)
    rows, cols = np.nonzero(conf >= threshold)
    out = np.full((len(rows), d, 2), MISSING, dtype=np.int64)
    if len(rows) == 0:
        return out
    for k in range(d):
        if k == 0:
            raw = np.stack([rows, cols], axis=1)
        else:
            raw = np.stack([round_half_away(rows + ys[rows, cols, k - 1]),
                            round_half_away(cols + xs[rows, cols, k - 1])], axis=1)
        cells, _ = event.station_hits(k)
        if len(cells) == 0:
            continue
        out[:, k, :] = cells[_snap_many(raw, cells)]
    return out


@dataclass
class MatchResult:
    """Outcome of matching reconstructed tracks to simulated ones in one event."""

    n_simulated: int
    n_reconstructed: int
    n_found: int
    n_predicted_hits: int
    n_true_predicted_hits: int
    matches: list  # (reco index, mc index) pairs


def match_tracks(reconstructed: np.ndarray, mc_tracks: np.ndarray, ratio: float = 0.7) -> MatchResult:
    """Match reconstructed to Monte-Carlo tracks by shared hits.

    A reconstructed track matches a simulated one when at least ``ratio``
    of the d station hits coincide.  Each simulated track is found at most
    once; reconstructed tracks are processed in order and take the unfound
    simulated track with the largest overlap.
    """
    reconstructed = np.asarray(reconstructed, dtype=np.int64)
    mc_tracks = np.asarray(mc_tracks, dtype=np.int64)
    n_mc = len(mc_tracks)
    d = mc_tracks.shape[1] if n_mc else (reconstructed.shape[1] if len(reconstructed) else 0)
    present = (reconstructed[..., 0] != MISSING) if len(reconstructed) else np.zeros((0, d), bool)
    n_pred_hits = int(present.sum())
    n_true_hits = 0
    matches = []
    if len(reconstructed) and n_mc:
        # same[r, t, k]: reco r and mc t share the cell on station k
        same = (reconstructed[:, None, :, :] == mc_tracks[None, :, :, :]).all(axis=3) & present[:, None, :]
        n_true_hits = int(same.any(axis=1).sum())
        overlap = same.sum(axis=2)
        found = np.zeros(n_mc, dtype=bool)
        for r in range(len(reconstructed)):
            ok = (overlap[r] / d >= ratio - 1e-12) & ~found
            if ok.any():
                t = int(np.argmax(np.where(ok, overlap[r], -1)))
                found[t] = True
                matches.append((r, t))
    return MatchResult(
        n_simulated=n_mc,
        n_reconstructed=len(reconstructed),
        n_found=len(matches),
        n_predicted_hits=n_pred_hits,
        n_true_predicted_hits=n_true_hits,
        matches=matches,
    )
