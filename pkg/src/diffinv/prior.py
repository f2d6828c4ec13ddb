"""Block-inclusion prior: one or two square blocks in the lower half."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DomainError
from .sampler import SampleSet


@dataclass(frozen=True)
class BlockPriorSpec:
    grid: tuple = (16, 16)  # (rows, cols)
    background: float = 1.0
    block: float = 5.0
    p_two: float = 0.5
    p_left: float = 0.25
    p_right: float = 0.25
    size_min: int = 3
    size_max: int = 6
    top_row: int | None = None  # first row blocks may occupy; default: half way down

    def __post_init__(self):
        H, W = self.grid
        if abs(self.p_two + self.p_left + self.p_right - 1.0) > 1e-12:
            raise ConfigError("block-count probabilities must sum to 1")
        if min(self.p_two, self.p_left, self.p_right) < 0:
            raise ConfigError("block-count probabilities must be non-negative")
        if self.block == self.background:
            raise ConfigError("block value must differ from the background")
        if not 1 <= self.size_min <= self.size_max:
            raise ConfigError("need 1 <= size_min <= size_max")
        if self.size_max > min(H - self.row0, W // 2):
            raise ConfigError(f"blocks of side {self.size_max} do not fit the lower half-domains of a {H}x{W} grid")

    @property
    def row0(self):
        return self.grid[0] // 2 if self.top_row is None else self.top_row

    @property
    def threshold(self):
        return 0.5 * (self.background + self.block)

    @property
    def value_range(self):
        return abs(self.block - self.background)

    def to_dict(self):
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d


def _place(field, rng, spec, side):
    H, W = spec.grid
    s = int(rng.integers(spec.size_min, spec.size_max + 1))
    r = int(rng.integers(spec.row0, H - s + 1))
    half = W // 2
    c_lo, c_hi = (0, half - s) if side == "left" else (half, W - s)
    c = int(rng.integers(c_lo, c_hi + 1))
    field[r:r + s, c:c + s] = spec.block


def sample_prior(spec: BlockPriorSpec, n: int, rng) -> SampleSet:
    """``n`` fields; the block count and side are drawn first, then sizes and positions."""
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    H, W = spec.grid
    out = np.full((n, H, W), spec.background, dtype=float)
    kinds = rng.uniform(0.0, 1.0, n)
    for k in range(n):
        if kinds[k] < spec.p_two:
            sides = ("left", "right")
        elif kinds[k] < spec.p_two + spec.p_left:
            sides = ("left",)
        else:
            sides = ("right",)
        for side in sides:
            _place(out[k], rng, spec, side)
    return SampleSet(out.reshape(n, -1), (H, W), {"prior": spec.to_dict()})


def block_count(field, spec: BlockPriorSpec):
    """Number of occupied half-domains (0, 1 or 2) in a thresholded field."""
    img = np.asarray(field, dtype=float).reshape(spec.grid) > spec.threshold
    half = spec.grid[1] // 2
    return int(img[:, :half].any()) + int(img[:, half:].any())
