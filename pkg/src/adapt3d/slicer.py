"""Factorize a cubic volume into three ordered 2D slice sequences.

Views are fixed as x/y/z = sagittal/coronal/axial. Slice positions use
"important sampling": equidistant indices inside a central window that is
[52, 172] at extent 224 and scales proportionally for other extents.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

VIEW_NAMES = ("sagittal", "coronal", "axial")

# central window endpoints at the reference extent
_WINDOW_LO, _WINDOW_HI, _WINDOW_EXTENT = 52, 172, 224


class AllocationError(ValueError):
    """Slice allocation violating its feasibility invariants."""


@dataclass(frozen=True)
class SliceAllocation:
    """Per-view slice budget: counts must sum to n_total within [n_min, n_max]."""

    counts: tuple[int, int, int]
    n_total: int
    n_min: int
    n_max: int

    def __post_init__(self):
        c = tuple(int(x) for x in self.counts)
        object.__setattr__(self, "counts", c)
        if len(c) != 3 or any(x < 0 for x in c):
            raise AllocationError(f"counts must be 3 nonnegative ints, got {c}")
        if not 3 * self.n_min <= self.n_total <= 3 * self.n_max:
            raise AllocationError(
                f"infeasible bounds: 3*{self.n_min} <= {self.n_total} <= 3*{self.n_max} fails"
            )
        if sum(c) != self.n_total:
            raise AllocationError(f"counts {c} do not sum to n_total={self.n_total}")
        if any(not self.n_min <= x <= self.n_max for x in c):
            raise AllocationError(
                f"counts {c} outside bounds [{self.n_min}, {self.n_max}]"
            )


def default_bounds(n_total):
    """Desk defaults: n_min = ceil(n_total/12), n_max = n_total - 2*n_min."""
    n_min = -(-n_total // 12)
    return n_min, n_total - 2 * n_min


@dataclass(frozen=True)
class SliceStack:
    """Ordered 2D slices grouped sagittal -> coronal -> axial.

    ``slices`` is (n_total, E, E); ``provenance[i]`` is (view, source index)
    for slice i.
    """

    slices: np.ndarray
    provenance: tuple[tuple[int, int], ...]
    allocation: SliceAllocation

    def __post_init__(self):
        s = np.asarray(self.slices, dtype=np.float32)
        object.__setattr__(self, "slices", s)
        if s.ndim != 3 or s.shape[1] != s.shape[2]:
            raise ValueError(f"slices must be (n, E, E), got {s.shape}")
        if s.shape[0] != self.allocation.n_total or len(self.provenance) != s.shape[0]:
            raise ValueError("slice count does not match the allocation")
        views = [v for v, _ in self.provenance]
        counts = tuple(views.count(t) for t in range(3))
        if counts != self.allocation.counts:
            raise ValueError(
                f"group sizes {counts} disagree with allocation {self.allocation.counts}"
            )

    @property
    def extent(self):
        return self.slices.shape[1]

    def view_members(self, view):
        """Positions (into the stack) of the given view's slices, in order."""
        return [i for i, (v, _) in enumerate(self.provenance) if v == view]


def default_window(extent):
    """Central index window, scaled proportionally from the 224 reference."""
    lo = int(np.floor(_WINDOW_LO / _WINDOW_EXTENT * extent + 0.5))
    hi = int(np.floor(_WINDOW_HI / _WINDOW_EXTENT * extent + 0.5))
    return lo, hi


def important_indices(extent, n, lo, hi):
    """n sorted, distinct, equidistant indices spanning [lo, hi].

    n == 1 returns the rounded midpoint; n >= 2 includes both endpoints
    with interior points rounded to the nearest integer. The rare rounding
    collision is resolved by shifting to the nearest unused index inside
    the window (preferring the larger candidate).
    """
    if not 0 <= lo <= hi < extent:
        raise ValueError(f"window [{lo}, {hi}] invalid for extent {extent}")
    if not 1 <= n <= hi - lo + 1:
        raise ValueError(f"cannot place {n} distinct indices in [{lo}, {hi}]")
    if n == 1:
        return [int(np.floor((lo + hi) / 2 + 0.5))]
    step = (hi - lo) / (n - 1)
    used = set()
    out = []
    for k in range(n):
        cand = int(np.floor(lo + k * step + 0.5))
        if cand in used:
            for d in range(1, hi - lo + 1):
                if cand + d <= hi and cand + d not in used:
                    cand = cand + d
                    break
                if cand - d >= lo and cand - d not in used:
                    cand = cand - d
                    break
        used.add(cand)
        out.append(cand)
    return sorted(out)


def extract_slices(vol, alloc):
    """Cut a cubic volume into the allocation's per-view slice groups.

    Sagittal slices are fixed-x planes, coronal fixed-y, axial fixed-z,
    taken at the important indices of each view in ascending order.
    """
    x, y, z = vol.extents
    if not x == y == z:
        raise ValueError(f"volume must be cubic after preprocessing, got {vol.extents}")
    lo, hi = default_window(x)
    planes = []
    provenance = []
    for view in range(3):
        for idx in important_indices(x, alloc.counts[view], lo, hi):
            if view == 0:
                planes.append(vol.voxels[idx, :, :])
            elif view == 1:
                planes.append(vol.voxels[:, idx, :])
            else:
                planes.append(vol.voxels[:, :, idx])
            provenance.append((view, idx))
    return SliceStack(np.stack(planes), tuple(provenance), alloc)
