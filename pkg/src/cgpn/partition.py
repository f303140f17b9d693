"""Strip-window geometry for part-level feature pooling.

A feature map is cut into N equal-height horizontal strips; a window is a
contiguous run of those strips. The coarse-grained rule keeps only windows
covering at least half the map height but less than the whole map (whole-map
pooling is the global part's job). Everything here is pure tensor geometry
with no learned parameters.
"""

from dataclasses import dataclass
from fractions import Fraction

import torch

__all__ = [
    "StripWindow",
    "BranchSpec",
    "enumerate_windows",
    "uniform_windows",
    "slice_window",
    "pool_window",
    "branch_local_features",
]


@dataclass(frozen=True)
class StripWindow:
    """A contiguous run of strips: strips [start, start + length) out of `total`.

    Construction enforces the geometric bounds only; the coarse-grained
    constraints (at least half height, not full height) are guaranteed by
    ``enumerate_windows``, so that the same type can describe the uniform
    fine-grained splits of the ablation model.
    """

    start: int
    length: int
    total: int

    def __post_init__(self):
        if self.total < 1:
            raise ValueError(f"total strips must be >= 1, got {self.total}")
        if self.length < 1:
            raise ValueError(f"window length must be >= 1, got {self.length}")
        if self.start < 0 or self.start + self.length > self.total:
            raise ValueError(
                f"window [{self.start}, {self.start + self.length}) out of "
                f"range for {self.total} strips"
            )

    @property
    def height_fraction(self) -> Fraction:
        return Fraction(self.length, self.total)


@dataclass(frozen=True)
class BranchSpec:
    """Strip count for one branch (canonical model uses 2, 3, 4 strips)."""

    branch_index: int
    num_strips: int

    def __post_init__(self):
        if self.branch_index < 1:
            raise ValueError(f"branch_index must be >= 1, got {self.branch_index}")
        if self.num_strips < 1:
            raise ValueError(f"num_strips must be >= 1, got {self.num_strips}")


def enumerate_windows(num_strips, min_fraction=Fraction(1, 2), include_full=False):
    """List every coarse-grained window over `num_strips` strips.

    A window qualifies when length/num_strips >= min_fraction and (unless
    `include_full`) it is strictly shorter than the full map. Ordering is
    descending length, then ascending start; ties in size are broken by
    start index. The fraction test uses exact rational arithmetic so that
    a half-height window at exactly the boundary is always kept.

    Canonical counts: 2 strips -> 2 windows, 3 -> 2, 4 -> 5.
    """
    if num_strips < 1:
        raise ValueError(f"num_strips must be >= 1, got {num_strips}")
    min_fraction = Fraction(min_fraction)
    if not (0 < min_fraction <= 1):
        raise ValueError(f"min_fraction must be in (0, 1], got {min_fraction}")

    max_length = num_strips if include_full else num_strips - 1
    windows = []
    for length in range(max_length, 0, -1):
        if Fraction(length, num_strips) < min_fraction:
            break
        for start in range(num_strips - length + 1):
            windows.append(StripWindow(start, length, num_strips))
    return windows


def uniform_windows(num_strips):
    """The plain N-way split: one single-strip window per strip, top to bottom."""
    if num_strips < 1:
        raise ValueError(f"num_strips must be >= 1, got {num_strips}")
    return [StripWindow(i, 1, num_strips) for i in range(num_strips)]


def slice_window(fmap: torch.Tensor, window: StripWindow) -> torch.Tensor:
    """Extract the rows a window covers; channels and width are untouched.

    `fmap` is (..., c, h, w); h must be divisible by window.total.
    """
    if fmap.dim() < 3:
        raise ValueError(f"feature map must have rank >= 3, got {fmap.dim()}")
    h = fmap.shape[-2]
    if h % window.total != 0:
        raise ValueError(f"height {h} not divisible by {window.total}")
    rows_per_strip = h // window.total
    lo = window.start * rows_per_strip
    hi = (window.start + window.length) * rows_per_strip
    return fmap[..., lo:hi, :]


def pool_window(fmap: torch.Tensor) -> torch.Tensor:
    """Global max pooling: per-channel maximum over all spatial positions."""
    if fmap.dim() < 3:
        raise ValueError(f"feature map must have rank >= 3, got {fmap.dim()}")
    if fmap.shape[-2] == 0 or fmap.shape[-1] == 0:
        raise ValueError(f"cannot pool over empty spatial extent {tuple(fmap.shape)}")
    return fmap.amax(dim=(-2, -1))


def branch_local_features(fmap, spec: BranchSpec, min_fraction=Fraction(1, 2),
                          mode="coarse"):
    """Pooled local features for one branch: enumerate, slice, max-pool.

    Returns an ordered list of (window, vector) pairs; vectors are
    per-channel maxima over the window, shaped like fmap without its two
    spatial dims. `mode` is "coarse" (adjacent multi-strip windows) or
    "fine" (plain N-way split).
    """
    if mode == "coarse":
        windows = enumerate_windows(spec.num_strips, min_fraction)
    elif mode == "fine":
        windows = uniform_windows(spec.num_strips)
    else:
        raise ValueError(f"unknown partition mode {mode!r}")
    return [(w, pool_window(slice_window(fmap, w))) for w in windows]
