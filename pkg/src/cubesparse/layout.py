"""Cube partition of a T x H x W vision token grid.

Tokens are laid out cube-major: cubes are contiguous in the flattened
sequence and ordered block-raster by (frame block, row block, column block),
so every token of an earlier cube precedes every token of a later one.
Inside a cube tokens run frame-major, then row, then column.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigError

_TRIPLE = re.compile(r"^\s*(\d+)\s*[xX*,]\s*(\d+)\s*[xX*,]\s*(\d+)\s*$")


def _parse_triple(text: str, what: str) -> tuple[int, int, int]:
    m = _TRIPLE.match(text)
    if not m:
        raise ConfigError(f"cannot parse {what} {text!r}; expected AxBxC")
    return int(m[1]), int(m[2]), int(m[3])


@dataclass(frozen=True)
class GridShape:
    frames: int
    height: int
    width: int

    def __post_init__(self):
        for name in ("frames", "height", "width"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"grid {name} must be >= 1, got {getattr(self, name)}")

    @classmethod
    def parse(cls, text: str) -> "GridShape":
        """Parse ``TxHxW``."""
        return cls(*_parse_triple(text, "grid"))

    @property
    def num_tokens(self) -> int:
        return self.frames * self.height * self.width

    def __str__(self) -> str:
        return f"{self.frames}x{self.height}x{self.width}"


@dataclass(frozen=True)
class CubeShape:
    h: int
    w: int
    t: int

    def __post_init__(self):
        for name in ("h", "w", "t"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"cube {name} must be >= 1, got {getattr(self, name)}")

    @classmethod
    def parse(cls, text: str) -> "CubeShape":
        """Parse ``HxWxT``."""
        return cls(*_parse_triple(text, "cube"))

    @property
    def size(self) -> int:
        return self.h * self.w * self.t

    def __str__(self) -> str:
        return f"{self.h}x{self.w}x{self.t}"


@dataclass(frozen=True)
class CubeLayout:
    grid: GridShape
    cube: CubeShape
    # raster index (f*H*W + r*W + c) of the token at each cube-major position
    raster_of_position: np.ndarray

    @property
    def tokens_per_cube(self) -> int:
        return self.cube.size

    @property
    def num_cubes(self) -> int:
        return self.grid.num_tokens // self.cube.size

    @property
    def num_tokens(self) -> int:
        return self.grid.num_tokens

    @property
    def blocks(self) -> tuple[int, int, int]:
        """Number of cubes along the frame, row and column axes."""
        return (self.grid.frames // self.cube.t, self.grid.height // self.cube.h,
                self.grid.width // self.cube.w)

    @property
    def cube_token_ranges(self) -> list[range]:
        c = self.tokens_per_cube
        return [range(i * c, (i + 1) * c) for i in range(self.num_cubes)]

    @cached_property
    def position_of_raster(self) -> np.ndarray:
        inv = np.empty_like(self.raster_of_position)
        inv[self.raster_of_position] = np.arange(self.num_tokens)
        return inv

    @cached_property
    def cube_grid_coords(self) -> np.ndarray:
        """(S, 3) array of (frame, row, col) for each cube-major position."""
        hw = self.grid.height * self.grid.width
        r = self.raster_of_position
        return np.stack([r // hw, (r % hw) // self.grid.width, r % self.grid.width], axis=1)

    def cube_of(self, position: int) -> int:
        if not 0 <= position < self.num_tokens:
            raise IndexError(f"position {position} outside [0, {self.num_tokens})")
        return position // self.tokens_per_cube

    def coords(self, position: int) -> tuple[int, int, int]:
        f, r, c = self.cube_grid_coords[position]
        return int(f), int(r), int(c)

    def to_cube_major(self, raster_tokens: np.ndarray) -> np.ndarray:
        """Reorder a raster-ordered ``(T*H*W, ...)`` array into cube-major order."""
        return np.asarray(raster_tokens)[self.raster_of_position]


def partition(grid: GridShape, cube: CubeShape) -> CubeLayout:
    for axis, n, k in (("frame", grid.frames, cube.t), ("height", grid.height, cube.h),
                       ("width", grid.width, cube.w)):
        if n % k:
            raise ConfigError(f"{axis} axis: grid extent {n} is not divisible by cube extent {k}")
    T, H, W = grid.frames, grid.height, grid.width
    raster = np.arange(T * H * W).reshape(T // cube.t, cube.t, H // cube.h, cube.h, W // cube.w, cube.w)
    order = raster.transpose(0, 2, 4, 1, 3, 5).reshape(-1)
    return CubeLayout(grid, cube, order)


def token_index(layout: CubeLayout, frame: int, row: int, col: int) -> int:
    """Cube-major position of grid coordinate ``(frame, row, col)``."""
    g = layout.grid
    if not (0 <= frame < g.frames and 0 <= row < g.height and 0 <= col < g.width):
        raise IndexError(f"coordinate {(frame, row, col)} outside grid {g}")
    return int(layout.position_of_raster[(frame * g.height + row) * g.width + col])
