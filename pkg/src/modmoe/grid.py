"""Delay pattern for 1 text + S audio token streams.

Row 0 is text, row k (1..S) is audio codebook k, shifted right by k steps.
A logical length-T grid becomes T + S columns wide, PAD-filled.
"""

from __future__ import annotations

import numpy as np

PAD = -1


class GridError(ValueError):
    pass


def apply_delay(grid) -> np.ndarray:
    """(..., 1+S, T) -> (..., 1+S, T+S); row k gets k leading and S-k trailing PADs."""
    try:
        g = np.asarray(grid)
    except ValueError as exc:  # ragged nested lists
        raise GridError(f"apply_delay: ragged input ({exc})") from None
    if g.dtype == object or g.ndim < 2:
        raise GridError("apply_delay: expected a rectangular (1+S) x T integer grid")
    if (g == PAD).any():
        raise GridError("apply_delay: undelayed grid must not contain PAD")
    rows, t = g.shape[-2], g.shape[-1]
    s = rows - 1
    out = np.full(g.shape[:-1] + (t + s,), PAD, dtype=np.int64)
    for k in range(rows):
        out[..., k, k : k + t] = g[..., k, :]
    return out


def check_delayed(grid: np.ndarray) -> None:
    """Raise GridError unless every row k has exactly k leading and S-k trailing PADs."""
    g = np.asarray(grid)
    rows, width = g.shape[-2], g.shape[-1]
    s = rows - 1
    t = width - s
    if t < 0:
        raise GridError(f"delayed grid too narrow: width {width} < S={s}")
    for k in range(rows):
        row = g[..., k, :]
        lead = row[..., :k]
        body = row[..., k : k + t]
        tail = row[..., k + t :]
        if (lead != PAD).any() or (tail != PAD).any() or (body == PAD).any():
            raise GridError(f"malformed delay structure in row {k}")


def undo_delay(grid) -> np.ndarray:
    """Exact inverse of apply_delay."""
    g = np.asarray(grid)
    check_delayed(g)
    rows, width = g.shape[-2], g.shape[-1]
    t = width - (rows - 1)
    out = np.empty(g.shape[:-1] + (t,), dtype=np.int64)
    for k in range(rows):
        out[..., k, :] = g[..., k, k : k + t]
    return out


def delayed_cell_is_live(stream: int, column: int, length: int) -> bool:
    """Whether cell (stream, column) holds a token for a logical length ``length``."""
    return stream <= column < stream + length
