"""Occupancy-grid worlds: generation, perturbation, and geodesic distances.

A world is a 2D boolean occupancy grid (True = wall) with a per-wall-cell
style value in [0, 1]. The "sim" world is generated procedurally; the "real"
world is a perturbed clone of it (jittered walls, remapped styles, stored
sensor noise) used to build the replayed-observation database.

Geodesic distances are shortest 8-connected grid paths with diagonal cost
sqrt(2) * resolution. Edge weights are scaled integers (straight = 2**26,
diagonal = round(sqrt(2) * 2**26)) so that Dijkstra accumulates exact
integers in float64; the scaled optimum is then decomposed back into
(straight, diagonal) step counts and converted to meters. The scale is fine
enough that no step composition can flip relative to the true sqrt(2)
metric, so distances are exact, deterministic, and symmetric.
"""
from __future__ import annotations

import json
import math
import threading
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra as _csgraph_dijkstra

from .geometry import Pose

SQRT2 = math.sqrt(2.0)

# Integer edge weights: straight = 2**26, diagonal = round(sqrt(2) * 2**26).
# Sums stay far below 2**53, so float64 Dijkstra is exact integer arithmetic.
W_STRAIGHT = 1 << 26
W_DIAG = 94906266
_DIAG_ODD = W_DIAG >> 1  # 47453133, odd, invertible mod 2**25
_DIAG_INV = pow(_DIAG_ODD, -1, 1 << 25)

_NEIGHBOR_OFFSETS = (
    (-1, 0, W_STRAIGHT), (1, 0, W_STRAIGHT), (0, -1, W_STRAIGHT), (0, 1, W_STRAIGHT),
    (-1, -1, W_DIAG), (-1, 1, W_DIAG), (1, -1, W_DIAG), (1, 1, W_DIAG),
)

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)

UNREACHABLE = math.inf


class WorldGenerationError(RuntimeError):
    pass


class DisconnectedWorldError(RuntimeError):
    pass


@dataclass(frozen=True)
class WorldParams:
    """Layout knobs for procedural world generation."""

    width_m: float = 10.0
    height_m: float = 10.0
    rooms: int = 4
    obstacle_density: float = 0.10
    resolution: float = 0.05
    door_width_m: float = 0.9
    min_room_m: float = 2.0

    def validate(self):
        if min(self.width_m, self.height_m, self.resolution, self.door_width_m) <= 0:
            raise ValueError("world dimensions and resolution must be positive")
        if self.rooms < 1:
            raise ValueError("rooms must be >= 1")
        if not 0.0 <= self.obstacle_density <= 0.5:
            raise ValueError("obstacle_density must be in [0, 0.5]")


@dataclass(frozen=True)
class PerturbationGap:
    """Sim-to-real discrepancy knobs applied by perturb_world."""

    wall_jitter_m: float = 0.05
    style_strength: float = 0.5
    noise_sigma: float = 0.01

    def validate(self):
        if self.wall_jitter_m < 0 or self.noise_sigma < 0:
            raise ValueError("jitter amplitude and noise sigma must be >= 0")
        if not 0.0 <= self.style_strength <= 1.0:
            raise ValueError("style_strength must be in [0, 1]")


@dataclass
class OccupancyWorld:
    """2D world: occupancy grid, wall styles, domain tag, and sensor noise.

    Immutable after construction; geodesic machinery caches are internal and
    lock-protected, so instances are safe to share across threads.
    """

    grid: np.ndarray              # bool [H, W], True = wall
    resolution: float = 0.05     # meters per cell
    origin: tuple[float, float] = (0.0, 0.0)   # world (x, z) of cell (0, 0) corner
    style_field: np.ndarray | None = None       # float [H, W], meaningful on wall cells
    domain_tag: str = "sim"      # "sim" | "real"
    seed: int = 0
    noise_sigma: float = 0.0     # per-channel render noise, in channel-range units

    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)
    _graph_cache: dict = field(default_factory=dict, repr=False, compare=False)
    _field_cache: "OrderedDict" = field(default_factory=OrderedDict, repr=False, compare=False)
    _field_cache_max: int = field(default=256, repr=False, compare=False)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=bool)
        if self.grid.ndim != 2:
            raise ValueError("grid must be 2D")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if not (~self.grid).any():
            raise ValueError("grid has no free cell")
        if self.style_field is None:
            self.style_field = np.zeros_like(self.grid, dtype=np.float64)
        self.style_field = np.asarray(self.style_field, dtype=np.float64)
        if self.style_field.shape != self.grid.shape:
            raise ValueError("style_field shape must match grid")
        if self.domain_tag not in ("sim", "real"):
            raise ValueError("domain_tag must be 'sim' or 'real'")
        self.grid.setflags(write=False)
        self.style_field.setflags(write=False)

    # -- coordinate helpers -------------------------------------------------

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """(x_min, x_max, z_min, z_max) of the grid in world coordinates."""
        h, w = self.grid.shape
        ox, oz = self.origin
        return (ox, ox + w * self.resolution, oz, oz + h * self.resolution)

    @property
    def diagonal_m(self) -> float:
        h, w = self.grid.shape
        return math.hypot(w * self.resolution, h * self.resolution)

    def cell_of(self, x: float, z: float) -> tuple[int, int]:
        ox, oz = self.origin
        return (int(math.floor((z - oz) / self.resolution)),
                int(math.floor((x - ox) / self.resolution)))

    def cell_center(self, cell: tuple[int, int]) -> tuple[float, float]:
        i, j = cell
        ox, oz = self.origin
        return (ox + (j + 0.5) * self.resolution, oz + (i + 0.5) * self.resolution)

    def in_bounds_cell(self, cell: tuple[int, int]) -> bool:
        i, j = cell
        h, w = self.grid.shape
        return 0 <= i < h and 0 <= j < w

    def is_free(self, x: float, z: float) -> bool:
        """A point is free iff its containing cell is in bounds and not a wall."""
        cell = self.cell_of(x, z)
        return self.in_bounds_cell(cell) and not self.grid[cell]

    def free_cells(self) -> np.ndarray:
        """(N, 2) array of (i, j) indices of free cells."""
        return np.argwhere(~self.grid)

    # -- geodesic machinery -------------------------------------------------

    def _free_graph(self):
        with self._lock:
            cached = self._graph_cache.get("graph")
        if cached is not None:
            return cached
        free = ~self.grid
        h, w = free.shape
        node_id = np.full((h, w), -1, dtype=np.int64)
        n_free = int(free.sum())
        node_id[free] = np.arange(n_free)
        rows, cols, weights = [], [], []
        for di, dj, wgt in _NEIGHBOR_OFFSETS:
            a = free[max(0, -di):h - max(0, di), max(0, -dj):w - max(0, dj)]
            b = free[max(0, di):h - max(0, -di), max(0, dj):w - max(0, -dj)]
            both = a & b
            ii, jj = np.nonzero(both)
            src_idx = node_id[ii + max(0, -di), jj + max(0, -dj)]
            dst_idx = node_id[ii + max(0, di), jj + max(0, dj)]
            rows.append(src_idx)
            cols.append(dst_idx)
            weights.append(np.full(src_idx.shape, float(wgt)))
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        weights = np.concatenate(weights)
        graph = csr_matrix((weights, (rows, cols)), shape=(n_free, n_free))
        result = (graph, node_id)
        with self._lock:
            self._graph_cache["graph"] = result
        return result

    def distance_field(self, cell: tuple[int, int]) -> np.ndarray:
        """Exact geodesic distance (meters) from every cell to `cell`.

        Wall and unreachable cells hold +inf. Fields are LRU-cached per goal
        cell; lookups after the first are O(1).
        """
        if not self.in_bounds_cell(cell) or self.grid[cell]:
            raise ValueError(f"cell {cell} is not free")
        key = (int(cell[0]), int(cell[1]))
        with self._lock:
            hit = self._field_cache.get(key)
            if hit is not None:
                self._field_cache.move_to_end(key)
                return hit
        graph, node_id = self._free_graph()
        src = int(node_id[key])
        scaled = _csgraph_dijkstra(graph, directed=False, indices=src)
        meters = np.full(self.grid.shape, np.inf)
        reach = np.isfinite(scaled)
        straight, diag = _decompose_scaled(np.rint(scaled[reach]).astype(np.int64))
        free_idx = np.argwhere(~self.grid)
        ri, rj = free_idx[reach, 0], free_idx[reach, 1]
        meters[ri, rj] = (straight + diag * SQRT2) * self.resolution
        meters.setflags(write=False)
        with self._lock:
            self._field_cache[key] = meters
            if len(self._field_cache) > self._field_cache_max:
                self._field_cache.popitem(last=False)
        return meters


def _decompose_scaled(scaled: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Invert D = s * 2**26 + d * W_DIAG into step counts (s, d)."""
    d = ((scaled >> 1) * _DIAG_INV) & ((1 << 25) - 1)
    s = (scaled - d * W_DIAG) >> 26
    return s, d


def geodesic_distance(world: OccupancyWorld, a: Pose, b: Pose) -> float:
    """Shortest 8-connected grid path length between the containing cells.

    Returns math.inf (the distinguished Unreachable value) for cells in
    different free components.
    """
    ca, cb = world.cell_of(a.x, a.z), world.cell_of(b.x, b.z)
    for name, c in (("a", ca), ("b", cb)):
        if not world.in_bounds_cell(c) or world.grid[c]:
            raise ValueError(f"pose {name} is not in free space")
    if ca == cb:
        return 0.0
    return float(world.distance_field(cb)[ca])


# -- generation --------------------------------------------------------------


def _styled(grid: np.ndarray, resolution: float, rng: np.random.Generator) -> np.ndarray:
    """Blocky wall texture: one uniform value per 0.4 m block plus jitter."""
    h, w = grid.shape
    block = max(1, int(round(0.4 / resolution)))
    bh, bw = h // block + 1, w // block + 1
    base = rng.uniform(0.0, 1.0, size=(bh, bw))
    ii, jj = np.indices(grid.shape)
    style = base[ii // block, jj // block] + rng.normal(0.0, 0.03, size=grid.shape)
    style = np.clip(style, 0.0, 1.0)
    style[~grid] = 0.0
    return style


def _connected_after_fill(grid: np.ndarray, pocket_frac: float = 0.05):
    """Label free space 4-connected; fill pockets below pocket_frac of free area.

    Returns (grid, ok). ok is False when the secondary components are too
    large to write off as pockets.
    """
    free = ~grid
    labels, n = ndimage.label(free, structure=_FOUR_CONN)
    if n <= 1:
        return grid, True
    sizes = ndimage.sum_labels(free, labels, index=np.arange(1, n + 1))
    main = int(np.argmax(sizes)) + 1
    minor = free.sum() - sizes[main - 1]
    if minor > pocket_frac * free.sum():
        return grid, False
    out = grid.copy()
    out[(labels != 0) & (labels != main)] = True
    return out, True


def generate_world(seed: int, params: WorldParams | None = None) -> OccupancyWorld:
    """Generate a connected multi-room world, deterministic per (seed, params).

    obstacle_density == 0 degenerates to a single empty room (border walls
    only) with every interior cell free.
    """
    params = params or WorldParams()
    params.validate()
    res = params.resolution
    h = int(round(params.height_m / res))
    w = int(round(params.width_m / res))
    if h < 8 or w < 8:
        raise ValueError("world too small for its resolution")

    for attempt in range(20):
        rng = np.random.default_rng(np.random.SeedSequence((seed, attempt)))
        grid = np.zeros((h, w), dtype=bool)
        grid[0, :] = grid[-1, :] = True
        grid[:, 0] = grid[:, -1] = True

        if params.obstacle_density > 0.0:
            _partition_rooms(grid, params, rng)
            _scatter_obstacles(grid, params, rng)

        grid, ok = _connected_after_fill(grid)
        if not ok:
            continue
        style = _styled(grid, res, rng)
        return OccupancyWorld(grid=grid, resolution=res, origin=(0.0, 0.0),
                              style_field=style, domain_tag="sim", seed=int(seed))
    raise WorldGenerationError(
        f"could not generate a connected world for seed={seed} after 20 attempts")


def _partition_rooms(grid: np.ndarray, params: WorldParams, rng: np.random.Generator):
    """Recursive axis-aligned splits with door gaps; one wall per split."""
    res = params.resolution
    min_cells = max(4, int(round(params.min_room_m / res)))
    door = max(2, int(round(params.door_width_m / res)))
    h, w = grid.shape
    regions = [(1, 1, h - 1, w - 1)]   # half-open (i0, j0, i1, j1) interior
    while len(regions) < params.rooms:
        # split the largest splittable region
        regions.sort(key=lambda r: (r[2] - r[0]) * (r[3] - r[1]), reverse=True)
        for idx, (i0, j0, i1, j1) in enumerate(regions):
            tall = (i1 - i0) >= 2 * min_cells + 1
            wide = (j1 - j0) >= 2 * min_cells + 1
            if not (tall or wide):
                continue
            if tall and (not wide or rng.random() < 0.5):
                s = int(rng.integers(i0 + min_cells, i1 - min_cells))
                gap = int(rng.integers(j0, max(j0 + 1, j1 - door)))
                grid[s, j0:j1] = True
                grid[s, gap:min(j1, gap + door)] = False
                regions[idx:idx + 1] = [(i0, j0, s, j1), (s + 1, j0, i1, j1)]
            else:
                s = int(rng.integers(j0 + min_cells, j1 - min_cells))
                gap = int(rng.integers(i0, max(i0 + 1, i1 - door)))
                grid[i0:i1, s] = True
                grid[gap:min(i1, gap + door), s] = False
                regions[idx:idx + 1] = [(i0, j0, i1, s), (i0, s + 1, i1, j1)]
            break
        else:
            break   # nothing splittable left


def _scatter_obstacles(grid: np.ndarray, params: WorldParams, rng: np.random.Generator):
    """Random rectangular blocks until the target interior fill is reached."""
    res = params.resolution
    h, w = grid.shape
    interior = (h - 2) * (w - 2)
    target = params.obstacle_density * 0.25 * interior  # density 0.5 ~ 12.5% fill
    placed = 0
    min_side = max(2, int(round(0.2 / res)))
    max_side = max(min_side + 1, int(round(0.6 / res)))
    for _ in range(10_000):
        if placed >= target:
            break
        bh = int(rng.integers(min_side, max_side + 1))
        bw = int(rng.integers(min_side, max_side + 1))
        i = int(rng.integers(1, max(2, h - 1 - bh)))
        j = int(rng.integers(1, max(2, w - 1 - bw)))
        grid[i:i + bh, j:j + bw] = True
        placed += bh * bw


# -- perturbation ------------------------------------------------------------


def _roughen_pass(grid: np.ndarray, border: np.ndarray, p: float,
                  rng: np.random.Generator, parity: int) -> np.ndarray:
    """One single-cell boundary roughening pass (grow then shrink)."""
    free = ~grid
    has_free_nb = ndimage.binary_dilation(free, structure=_FOUR_CONN) & grid
    has_wall_nb = ndimage.binary_dilation(grid, structure=_FOUR_CONN) & free

    out = grid.copy()
    grow = has_wall_nb & (rng.random(grid.shape) < p)
    out[grow] = True

    # Shrink only one checkerboard parity per pass: a removed cell's 4-adjacent
    # wall support has opposite parity, so it survives the pass.
    nb_walls = (np.roll(out, 1, 0) | np.roll(out, -1, 0)
                | np.roll(out, 1, 1) | np.roll(out, -1, 1))
    ii, jj = np.indices(grid.shape)
    checker = ((ii + jj) & 1) == parity
    shrink = (has_free_nb & out & nb_walls & ~border & checker
              & (rng.random(grid.shape) < p))
    out[shrink] = False
    return out


def _hausdorff_cells(a: np.ndarray, b: np.ndarray, res: float) -> float:
    """Symmetric Hausdorff distance between two wall-cell sets, in meters."""
    if not a.any() or not b.any():
        return math.inf
    da = ndimage.distance_transform_edt(~a) * res
    db = ndimage.distance_transform_edt(~b) * res
    return max(float(da[b].max()), float(db[a].max()))


def perturb_world(world: OccupancyWorld, gap: PerturbationGap, seed: int) -> OccupancyWorld:
    """Clone a sim world into its "real" counterpart.

    Wall positions are roughened by at most gap.wall_jitter_m, wall styles
    are remapped with per-cell shifts up to gap.style_strength, and
    gap.noise_sigma is stored on the world for database rendering. The
    geometric channels stay near-invariant under the default gap while the
    style channel does not.
    """
    gap.validate()
    res = world.resolution
    passes = int(round(gap.wall_jitter_m / res))
    border = np.zeros_like(world.grid)
    border[0, :] = border[-1, :] = True
    border[:, 0] = border[:, -1] = True

    for attempt in range(10):
        rng = np.random.default_rng(np.random.SeedSequence((world.seed, seed, attempt)))
        grid = world.grid.copy()
        for k in range(passes):
            grid = _roughen_pass(grid, border, 0.3, rng, parity=k & 1)
        if passes > 0:
            # growth can orphan 1-2 cell free pockets; fill them as wall
            grid, ok = _connected_after_fill(grid, pocket_frac=0.01)
            if not ok:
                continue
            if _hausdorff_cells(world.grid, grid, res) > gap.wall_jitter_m + res:
                continue

        style = world.style_field.copy()
        if gap.style_strength > 0.0:
            delta = rng.uniform(-gap.style_strength, gap.style_strength, size=style.shape)
            style = np.clip(style + delta, 0.0, 1.0)
        new_walls = grid & ~world.grid
        if new_walls.any():
            # styles exist only on old wall cells; spread them onto grown cells
            _, (fi, fj) = ndimage.distance_transform_edt(
                ~world.grid, return_indices=True)
            style[new_walls] = style[fi[new_walls], fj[new_walls]]
        style[~grid] = 0.0

        return OccupancyWorld(grid=grid, resolution=res, origin=world.origin,
                              style_field=style, domain_tag="real",
                              seed=world.seed, noise_sigma=gap.noise_sigma)
    raise DisconnectedWorldError(
        f"wall jitter of {gap.wall_jitter_m} m kept disconnecting the free space")


# -- file format ---------------------------------------------------------------

WORLD_FORMAT = "world.json/1"


def _rle_encode(flat: np.ndarray) -> list[int]:
    """Row-major RLE: [first_value, run_1, run_2, ...]."""
    if flat.size == 0:
        return [0]
    change = np.nonzero(np.diff(flat.astype(np.int8)))[0] + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    return [int(flat[0])] + [int(r) for r in runs]


def _rle_decode(rle: list[int], size: int) -> np.ndarray:
    value = bool(rle[0])
    out = np.empty(size, dtype=bool)
    pos = 0
    for run in rle[1:]:
        out[pos:pos + run] = value
        pos += run
        value = not value
    if pos != size:
        raise ValueError("RLE payload does not match grid size")
    return out


def save_world(world: OccupancyWorld, path: str):
    doc = {
        "format": WORLD_FORMAT,
        "resolution": world.resolution,
        "origin": list(world.origin),
        "seed": world.seed,
        "domain_tag": world.domain_tag,
        "noise_sigma": world.noise_sigma,
        "dims": list(world.grid.shape),
        "grid_rle": _rle_encode(world.grid.ravel()),
        "style_field": [round(float(v), 6) for v in world.style_field.ravel()],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_world(path: str) -> OccupancyWorld:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != WORLD_FORMAT:
        raise ValueError(f"not a {WORLD_FORMAT} file: {path}")
    h, w = doc["dims"]
    grid = _rle_decode(doc["grid_rle"], h * w).reshape(h, w)
    style = np.asarray(doc["style_field"], dtype=np.float64).reshape(h, w)
    return OccupancyWorld(grid=grid, resolution=float(doc["resolution"]),
                          origin=tuple(doc["origin"]), style_field=style,
                          domain_tag=doc["domain_tag"], seed=int(doc["seed"]),
                          noise_sigma=float(doc["noise_sigma"]))


def empty_room(width_m: float = 10.0, height_m: float = 10.0,
               resolution: float = 0.05, seed: int = 0) -> OccupancyWorld:
    """Border-walled empty room; the degenerate density-0 world."""
    return generate_world(seed, WorldParams(width_m=width_m, height_m=height_m,
                                            rooms=1, obstacle_density=0.0,
                                            resolution=resolution))
