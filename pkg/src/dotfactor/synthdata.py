"""Procedural ground-truth-factored image datasets.

Two desk-scale generators:

* ``dsprites-mini``: binary sprites (square, ellipse, triangle) over scale,
  x and y position, optionally orientation.
* ``shapes3d-mini``: flat-shaded scene with floor, wall and an object, over
  floor/wall/object hue, object scale and object shape.

Every dataset holds the full Cartesian product of its factor grid in
row-major order, so ``images[i]`` renders ``index_to_factors(i)``.
"""

import colorsys
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import CounterRNG

IMAGES_MAGIC = b"DOTD"
FORMAT_VERSION = 1
DSPRITES_SHAPES = ("square", "ellipse", "triangle")
SHAPES3D_SHAPES = ("cube", "cylinder", "sphere")


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class Factor:
    name: str
    values: tuple
    ordinal: bool = True

    @property
    def cardinality(self):
        return len(self.values)


@dataclass(frozen=True)
class FactorGrid:
    factors: tuple
    resolution: int
    channels: int = 1
    kind: str = "custom"

    def __post_init__(self):
        for f in self.factors:
            if f.cardinality < 2:
                raise GridError(f"factor {f.name!r} needs at least 2 levels")
            if f.ordinal and any(b <= a for a, b in zip(f.values, f.values[1:])):
                raise GridError(f"ordinal factor {f.name!r} values must be strictly increasing")

    @property
    def names(self):
        return tuple(f.name for f in self.factors)

    @property
    def cardinalities(self):
        return tuple(f.cardinality for f in self.factors)

    @property
    def size(self):
        return int(np.prod(self.cardinalities))

    @property
    def image_shape(self):
        r = self.resolution
        return (r, r) if self.channels == 1 else (r, r, self.channels)

    def factors_to_index(self, levels):
        levels = np.asarray(levels, dtype=np.int64)
        card = np.asarray(self.cardinalities)
        if levels.shape[-1] != len(card):
            raise GridError(f"expected {len(card)} levels, got {levels.shape[-1]}")
        if (levels < 0).any() or (levels >= card).any():
            raise GridError(f"levels {levels.tolist()} out of range for {tuple(card)}")
        idx = np.ravel_multi_index(tuple(np.moveaxis(levels, -1, 0)), tuple(card))
        return int(idx) if np.ndim(idx) == 0 else np.asarray(idx, dtype=np.int64)

    def index_to_factors(self, index):
        index = np.asarray(index, dtype=np.int64)
        if (index < 0).any() or (index >= self.size).any():
            raise GridError(f"index out of range [0, {self.size})")
        out = np.stack(np.unravel_index(index, self.cardinalities), axis=-1)
        return out.astype(np.int64)

    def all_levels(self):
        return self.index_to_factors(np.arange(self.size))

    def to_json(self):
        return {
            "kind": self.kind,
            "resolution": self.resolution,
            "channels": self.channels,
            "factors": [
                {"name": f.name, "cardinality": f.cardinality,
                 "values": list(f.values), "ordinal": f.ordinal}
                for f in self.factors
            ],
        }

    @classmethod
    def from_json(cls, obj):
        factors = tuple(
            Factor(f["name"], tuple(f["values"]), f.get("ordinal", True)) for f in obj["factors"]
        )
        for f, spec in zip(factors, obj["factors"]):
            if f.cardinality != spec["cardinality"]:
                raise GridError(f"factor {f.name!r}: cardinality does not match its values")
        return cls(factors, int(obj["resolution"]), int(obj.get("channels", 1)),
                   obj.get("kind", "custom"))


@dataclass
class FactoredDataset:
    grid: FactorGrid
    images: np.ndarray
    factor_indices: np.ndarray = field(repr=False)

    def __post_init__(self):
        n = self.grid.size
        if self.images.shape != (n, *self.grid.image_shape):
            raise GridError(f"images shape {self.images.shape} != {(n, *self.grid.image_shape)}")
        if self.factor_indices.shape != (n, len(self.grid.factors)):
            raise GridError("factor_indices shape does not match the grid")

    def __len__(self):
        return self.images.shape[0]

    @property
    def n_pixels(self):
        return int(np.prod(self.grid.image_shape))

    def flat_images(self):
        return self.images.reshape(len(self), -1)

    def save(self, path):
        save_dataset(self, path)


# ---- index helpers ----

def factors_to_index(grid, levels):
    return grid.factors_to_index(levels)


def index_to_factors(grid, index):
    return grid.index_to_factors(index)


def _as_rng(seed):
    return seed if isinstance(seed, CounterRNG) else CounterRNG(int(seed))


def sample_fixed_factor_indices(grid, k, L, rng, level=None):
    """Dataset indices of ``L`` items sharing factor ``k``'s level.

    The shared level is drawn uniformly unless given; every other factor is
    drawn i.i.d. uniformly over its grid.
    """
    if not 0 <= k < len(grid.factors):
        raise GridError(f"factor id {k} out of range")
    if L < 2:
        raise GridError("batch size L must be >= 2")
    card = grid.cardinalities
    if level is None:
        level = rng.integers(card[k])
    levels = np.stack([rng.integers(c, L) for c in card], axis=1)
    levels[:, k] = level
    return grid.factors_to_index(levels), int(level)


def sample_fixed_factor_batch(dataset, k, L, seed):
    idx, level = sample_fixed_factor_indices(dataset.grid, k, L, _as_rng(seed))
    return dataset.images[idx], level


# ---- dsprites-mini ----

def _pixel_grid(resolution):
    c = np.arange(resolution) + 0.5
    return np.meshgrid(c, c, indexing="xy")  # (x, y) of pixel centres, row = y


def _sprite_mask(shape, h, cx, cy, theta, px, py):
    dx, dy = px - cx, py - cy
    if theta:
        ct, st = np.cos(theta), np.sin(theta)
        dx, dy = ct * dx + st * dy, -st * dx + ct * dy
    if shape == "square":
        return (np.abs(dx) <= h) & (np.abs(dy) <= h)
    if shape == "ellipse":
        return (dx / h) ** 2 + (dy / (0.5 * h)) ** 2 <= 1.0
    if shape == "triangle":
        # apex (0, -h), base corners (+-h, h); y grows downward
        return (dy <= h) & (2 * dx - dy <= h) & (-2 * dx - dy <= h)
    raise GridError(f"unknown sprite shape {shape!r}")


def _sprite_extent(shape, h, oriented):
    if not oriented:
        return h
    return h if shape == "ellipse" else h * np.sqrt(2.0)


def dsprites_grid(resolution=32, cardinalities=(3, 4, 8, 8), scales=None, positions=None):
    """Factor grid for dsprites-mini.

    ``cardinalities`` is ``(shape, scale, x, y)`` or ``(shape, scale,
    orientation, x, y)``. ``scales`` are half-extents and ``positions`` are
    centre coordinates, both in pixels; defaults keep every sprite inside
    the frame.
    """
    if not 16 <= resolution <= 64:
        raise GridError("resolution must be in [16, 64]")
    oriented = len(cardinalities) == 5
    if len(cardinalities) not in (4, 5):
        raise GridError("cardinalities must be (shape, scale, [orientation,] x, y)")
    n_shape, n_scale = cardinalities[:2]
    n_x, n_y = cardinalities[-2:]
    if not 2 <= n_shape <= len(DSPRITES_SHAPES):
        raise GridError(f"shape cardinality must be in [2, {len(DSPRITES_SHAPES)}]")
    if n_scale < 3 or n_x < 6 or n_y < 6:
        raise GridError("need >= 3 scale levels and >= 6 levels per position")
    if scales is None:
        top = 0.2 * resolution
        scales = np.linspace(0.5 * top, top, n_scale)
    scales = tuple(float(s) for s in scales)
    if len(scales) != n_scale:
        raise GridError("scales length does not match its cardinality")
    shapes = DSPRITES_SHAPES[:n_shape]
    ext = max(_sprite_extent(s, max(scales), oriented) for s in shapes)
    if positions is None:
        lo, hi = ext + 1.0, resolution - ext - 1.0  # one blank pixel of margin
        positions = (np.linspace(lo, hi, n_x), np.linspace(lo, hi, n_y))
    xs, ys = (tuple(float(v) for v in p) for p in positions)
    if len(xs) != n_x or len(ys) != n_y:
        raise GridError("positions length does not match the cardinalities")
    for axis_vals in (xs, ys):
        if min(axis_vals) - ext < 0 or max(axis_vals) + ext > resolution:
            raise GridError("a sprite would clip the frame at some factor combination")
        if np.min(np.diff(axis_vals)) < 1.0:
            raise GridError("position levels closer than one pixel")
    factors = [Factor("shape", shapes, ordinal=False), Factor("scale", scales)]
    if oriented:
        n_or = cardinalities[2]
        factors.append(Factor("orientation", tuple(float(a) for a in np.arange(n_or) * (np.pi / 2) / n_or)))
    factors += [Factor("pos_x", xs), Factor("pos_y", ys)]
    return FactorGrid(tuple(factors), resolution, 1, "dsprites-mini")


def render_dsprites(grid, levels):
    """Binary render of one factor tuple (or a batch) of a dsprites grid."""
    levels = np.atleast_2d(np.asarray(levels, dtype=np.int64))
    px, py = _pixel_grid(grid.resolution)
    named = {f.name: f for f in grid.factors}
    out = np.zeros((len(levels), grid.resolution, grid.resolution), dtype=np.float32)
    for i, lv in enumerate(levels):
        v = {f.name: f.values[l] for f, l in zip(grid.factors, lv)}
        theta = v.get("orientation", 0.0) if "orientation" in named else 0.0
        out[i] = _sprite_mask(v["shape"], v["scale"], v["pos_x"], v["pos_y"], theta, px, py)
    return out


def generate_dsprites_mini(resolution=32, cardinalities=(3, 4, 8, 8), **kw):
    grid = dsprites_grid(resolution, cardinalities, **kw)
    levels = grid.all_levels()
    return FactoredDataset(grid, render_dsprites(grid, levels), levels)


# ---- shapes3d-mini ----

HORIZON = 0.55  # fraction of the frame height where the floor begins
_REGION_VALUE = {"floor": 0.5, "wall": 0.75, "object": 1.0}
_GRAY_RANGE = {"floor": (0.05, 0.3), "wall": (0.38, 0.62), "object": (0.7, 1.0)}


def horizon_row(resolution):
    return int(round(HORIZON * resolution))


def _shade(region, hue, channels, face=1.0):
    if channels == 1:
        lo, hi = _GRAY_RANGE[region]
        return np.array([face * (lo + (hi - lo) * hue)], dtype=np.float32)
    rgb = colorsys.hsv_to_rgb(hue, 0.8, _REGION_VALUE[region] * face)
    return np.array(rgb, dtype=np.float32)


def shapes3d_grid(resolution=32, cardinalities=(4, 4, 4, 3, 3), channels=1):
    """Factor grid ``(floor_hue, wall_hue, object_hue, scale, shape)``."""
    if not 16 <= resolution <= 64:
        raise GridError("resolution must be in [16, 64]")
    if channels not in (1, 3):
        raise GridError("channels must be 1 or 3")
    if len(cardinalities) != 5:
        raise GridError("cardinalities must be (floor_hue, wall_hue, object_hue, scale, shape)")
    nf, nw, no, ns, nsh = cardinalities
    if min(nf, nw, no) < 4:
        raise GridError("hue factors need >= 4 levels")
    if ns < 2 or not 2 <= nsh <= len(SHAPES3D_SHAPES):
        raise GridError("scale needs >= 2 levels; shape between 2 and 3 levels")
    hue = lambda n: tuple(float(h) for h in np.linspace(0.0, 0.9, n))  # noqa: E731
    scales = tuple(float(s) for s in np.linspace(0.22, 0.4, ns) * resolution)
    if np.min(np.diff(scales)) < 1.0:
        raise GridError("scale levels closer than one pixel")
    base = 0.88 * resolution
    if base - 1.25 * scales[-1] < 0:
        raise GridError("object would clip the frame")
    return FactorGrid(
        (Factor("floor_hue", hue(nf)), Factor("wall_hue", hue(nw)), Factor("object_hue", hue(no)),
         Factor("scale", scales), Factor("shape", SHAPES3D_SHAPES[:nsh], ordinal=False)),
        resolution, channels, "shapes3d-mini")


def _object_masks(shape, s, resolution, px, py):
    """(front-face mask, top-face mask) of the object standing on the floor."""
    cx, base = resolution / 2.0, 0.88 * resolution
    dx, dy = px - cx, py - base
    half = s / 2.0
    if shape == "cube":
        front = (np.abs(dx) <= half) & (dy <= 0) & (dy >= -s)
        # parallelogram receding up-right
        u = dy + s
        top = (u < 0) & (u >= -0.25 * s) & (dx + u >= -half) & (dx + u <= half)
        return front, top
    if shape == "cylinder":
        body = (np.abs(dx) <= half) & (dy <= 0) & (dy >= -s)
        cap = (dx / half) ** 2 + ((dy + s) / (0.2 * s)) ** 2 <= 1.0
        return body & ~cap, cap
    if shape == "sphere":
        body = dx ** 2 + (dy + half) ** 2 <= half ** 2
        highlight = body & ((dx + 0.25 * s) ** 2 + (dy + 0.75 * s) ** 2 <= (0.15 * s) ** 2)
        return body & ~highlight, highlight
    raise GridError(f"unknown object shape {shape!r}")


def render_shapes3d(grid, levels):
    levels = np.atleast_2d(np.asarray(levels, dtype=np.int64))
    r, ch = grid.resolution, grid.channels
    px, py = _pixel_grid(r)
    floor_rows = py >= horizon_row(r)
    out = np.empty((len(levels), r, r, ch), dtype=np.float32)
    for i, lv in enumerate(levels):
        v = {f.name: f.values[l] for f, l in zip(grid.factors, lv)}
        img = out[i]
        img[:] = _shade("wall", v["wall_hue"], ch)
        img[floor_rows] = _shade("floor", v["floor_hue"], ch)
        front, top = _object_masks(v["shape"], v["scale"], r, px, py)
        img[front] = _shade("object", v["object_hue"], ch)
        img[top] = _shade("object", v["object_hue"], ch, face=0.85)
    return out[..., 0] if ch == 1 else out


def generate_shapes3d_mini(resolution=32, cardinalities=(4, 4, 4, 3, 3), channels=1):
    grid = shapes3d_grid(resolution, cardinalities, channels)
    levels = grid.all_levels()
    return FactoredDataset(grid, render_shapes3d(grid, levels), levels)


GENERATORS = {
    "dsprites-mini": generate_dsprites_mini,
    "shapes3d-mini": generate_shapes3d_mini,
}


# ---- files ----

def save_dataset(dataset, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n = len(dataset)
    per_item = dataset.n_pixels
    header = IMAGES_MAGIC + struct.pack("<III", FORMAT_VERSION, n, per_item)
    body = np.ascontiguousarray(dataset.images, dtype="<f4").tobytes()
    _atomic_write(path / "images.bin", header + body)
    _atomic_write(path / "factors.bin",
                  np.ascontiguousarray(dataset.factor_indices, dtype="<u2").tobytes())
    _atomic_write(path / "grid.json",
                  (json.dumps(dataset.grid.to_json(), indent=2) + "\n").encode())


def load_dataset(path):
    path = Path(path)
    grid = FactorGrid.from_json(json.loads((path / "grid.json").read_text()))
    raw = (path / "images.bin").read_bytes()
    if raw[:4] != IMAGES_MAGIC:
        raise GridError("images.bin: bad magic")
    version, n, per_item = struct.unpack("<III", raw[4:16])
    if version != FORMAT_VERSION:
        raise GridError(f"images.bin: unsupported version {version}")
    if n != grid.size or per_item != int(np.prod(grid.image_shape)):
        raise GridError("images.bin header does not match grid.json")
    images = np.frombuffer(raw, dtype="<f4", offset=16).reshape(n, *grid.image_shape)
    factors = np.frombuffer((path / "factors.bin").read_bytes(), dtype="<u2")
    factors = factors.reshape(n, len(grid.factors)).astype(np.int64)
    return FactoredDataset(grid, images.astype(np.float32), factors)


def _atomic_write(target, data):
    tmp = target.with_name(target.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, target)
