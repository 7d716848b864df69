"""Hybrid action sampling: global draws from P plus one draw per grid cell.

All draws use inverse-CDF lookup on a cumulative array (first index whose
cumulative mass is >= u, with u drawn from (0, total]) so results depend only
on the random stream. Every sample carries its log-probability under the
global distribution, whatever sampler produced it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GLOBAL = -1


@dataclass(frozen=True)
class SampledKeypoint:
    xy: tuple
    global_log_prob: float
    source: int  # GLOBAL or the grid cell index

    @property
    def is_global(self):
        return self.source == GLOBAL


@dataclass(eq=False)
class ActionSet:
    xy: np.ndarray  # (N, 2) integer (x, y)
    log_prob: np.ndarray  # (N,)
    source: np.ndarray  # (N,) GLOBAL or cell index

    def __len__(self):
        return len(self.xy)

    def __getitem__(self, i):
        return SampledKeypoint((int(self.xy[i, 0]), int(self.xy[i, 1])),
                               float(self.log_prob[i]), int(self.source[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def __eq__(self, other):
        return (
            isinstance(other, ActionSet)
            and np.array_equal(self.xy, other.xy)
            and np.array_equal(self.log_prob, other.log_prob)
            and np.array_equal(self.source, other.source)
        )

    @classmethod
    def concat(cls, *sets):
        return cls(
            np.concatenate([s.xy for s in sets]).reshape(-1, 2).astype(np.int64),
            np.concatenate([s.log_prob for s in sets]),
            np.concatenate([s.source for s in sets]).astype(np.int64),
        )


def categorical(prob, n, rng):
    """``n`` flat indices drawn with replacement from the (unnormalised) ``prob``."""
    cdf = np.cumsum(np.asarray(prob, dtype=np.float64).ravel())
    u = (1.0 - rng.random(n)) * cdf[-1]
    return np.minimum(np.searchsorted(cdf, u, side="left"), cdf.size - 1)


def _log_global(prob, xy):
    with np.errstate(divide="ignore"):
        return np.log(prob[xy[:, 1], xy[:, 0]])


def sample_global(prob, n_global, rng):
    prob = np.asarray(prob, dtype=np.float64)
    h, w = prob.shape
    if n_global < 0:
        raise ValueError("n_global must be >= 0")
    flat = categorical(prob, n_global, rng) if n_global else np.zeros(0, dtype=np.int64)
    xy = np.stack([flat % w, flat // w], axis=1).astype(np.int64)
    return ActionSet(xy, _log_global(prob, xy), np.full(len(xy), GLOBAL, dtype=np.int64))


def grid_cells(shape, grid):
    """Row and column bounds of the ``grid`` x ``grid`` cells; the last cells absorb remainders."""
    h, w = shape
    if grid < 1 or h < grid or w < grid:
        raise ValueError(f"cannot split a {h}x{w} image into a {grid}x{grid} grid")
    rows = [i * (h // grid) for i in range(grid)] + [h]
    cols = [j * (w // grid) for j in range(grid)] + [w]
    return rows, cols


def sample_grid(logits, prob, grid, rng):
    logits = np.asarray(logits, dtype=np.float64)
    prob = np.asarray(prob, dtype=np.float64)
    rows, cols = grid_cells(logits.shape, grid)
    xy = np.zeros((grid * grid, 2), dtype=np.int64)
    u = 1.0 - rng.random(grid * grid)
    for ci in range(grid):
        for cj in range(grid):
            cell = ci * grid + cj
            sub = logits[rows[ci]:rows[ci + 1], cols[cj]:cols[cj + 1]]
            local = np.exp(sub - sub.max()).ravel()
            cdf = np.cumsum(local)
            k = min(int(np.searchsorted(cdf, u[cell] * cdf[-1], side="left")), cdf.size - 1)
            sw = sub.shape[1]
            xy[cell] = cols[cj] + k % sw, rows[ci] + k // sw
    return ActionSet(xy, _log_global(prob, xy), np.arange(grid * grid, dtype=np.int64))


def hybrid_sample(logits, prob, n_global, grid, rng):
    """``n_global`` global draws followed by ``grid**2`` per-cell draws."""
    return ActionSet.concat(sample_global(prob, n_global, rng), sample_grid(logits, prob, grid, rng))
