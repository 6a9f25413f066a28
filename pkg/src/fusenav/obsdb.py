"""Pose-indexed observation database with heading-filtered nearest retrieval.

Records pair a pose with a rendered observation stack. Retrieval follows a
two-stage filter: keep records whose heading unit vector (cos theta,
sin theta) has cosine similarity >= threshold with the query heading, then
return the one nearest in the XZ plane (ties to the lowest id). When no
record passes the heading filter the single best-heading record is returned
and flagged `relaxed`.

The indexed path expands a k-d tree candidate ring until a passing record is
found, which returns the same record as an exhaustive scan; `retrieve_brute`
is that scan and doubles as the test oracle.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .align import SimilarityTransform2D
from .geometry import Pose
from .sensing import (DEFAULT_FOV, DEFAULT_MAX_RANGE, DEFAULT_WIDTH,
                      GEOMETRIC_CHANNELS, MidLevelStack, render)
from .world import OccupancyWorld

DEFAULT_HEADING_THRESHOLD = 0.96

OBSDB_FORMAT = "obsdb/1"


class EmptyDatabaseError(ValueError):
    pass


@dataclass(frozen=True)
class ObservationRecord:
    id: int
    pose: Pose
    stack: MidLevelStack
    domain_tag: str


@dataclass(frozen=True)
class GridSampling:
    """Poses on a regular grid of spacing multiples, several headings each."""

    spacing: float = 0.5
    headings: int = 8

    def validate(self):
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")
        if self.headings < 1:
            raise ValueError("need at least one heading per point")


@dataclass(frozen=True)
class TrajectorySampling:
    """Poses along a bouncing straight-line exploration walk."""

    spacing: float = 0.25
    count: int = 2000

    def validate(self):
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")
        if self.count < 1:
            raise ValueError("count must be >= 1")


class RetrievalResult(NamedTuple):
    record: ObservationRecord
    relaxed: bool
    similarity: float
    distance: float


@dataclass
class ObservationDB:
    records: list[ObservationRecord]
    metadata: dict = field(default_factory=dict)
    alignment: SimilarityTransform2D | None = None
    alignment_set: list[tuple[Pose, Pose]] = field(default_factory=list)

    positions: np.ndarray = field(init=False)        # [N, 2] (x, z)
    heading_vectors: np.ndarray = field(init=False)  # [N, 2] (cos t, sin t)
    _tree: cKDTree = field(init=False, repr=False)

    def __post_init__(self):
        if not self.records:
            raise EmptyDatabaseError("observation database has no records")
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("record ids must be unique")
        self.positions = np.array([[r.pose.x, r.pose.z] for r in self.records])
        thetas = np.array([r.pose.theta for r in self.records])
        self.heading_vectors = np.column_stack([np.cos(thetas), np.sin(thetas)])
        self._tree = cKDTree(self.positions)

    def __len__(self):
        return len(self.records)


def build_db(world: OccupancyWorld,
             sampling: GridSampling | TrajectorySampling | None = None,
             channel_names: tuple[str, ...] = GEOMETRIC_CHANNELS,
             seed: int = 0,
             width: int = DEFAULT_WIDTH, fov: float = DEFAULT_FOV,
             max_range: float = DEFAULT_MAX_RANGE,
             frame_offset: SimilarityTransform2D | None = None,
             alignment_pairs: int = 0) -> ObservationDB:
    """Render and index observations covering the world's free space.

    Renders use the world's stored noise sigma with a per-record seed, so a
    fixed seed gives byte-identical databases. With `frame_offset`, record
    poses are stored in the offset frame (emulating a separately built
    acquisition frame) and `alignment_pairs` correspondences between the two
    frames are kept for the alignment procedure.
    """
    sampling = sampling or GridSampling()
    sampling.validate()
    poses = (_grid_poses(world, sampling) if isinstance(sampling, GridSampling)
             else _trajectory_poses(world, sampling, seed))
    if not poses:
        # degenerate spacing: fall back to the freest central pose
        poses = [_central_pose(world)]

    records = []
    for idx, true_pose in enumerate(poses):
        stack = render(world, true_pose, channel_names, width, fov, max_range,
                       rng_seed=np.random.SeedSequence((seed, idx)))
        stored = frame_offset.apply(true_pose) if frame_offset else true_pose
        records.append(ObservationRecord(id=idx, pose=stored, stack=stack,
                                         domain_tag=world.domain_tag))

    alignment_set = []
    if alignment_pairs > 0:
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0xA11)))
        pick = rng.choice(len(records), size=min(alignment_pairs, len(records)),
                          replace=False)
        for idx in sorted(int(i) for i in pick):
            alignment_set.append((records[idx].pose, poses[idx]))

    metadata = {"world_seed": world.seed, "domain_tag": world.domain_tag,
                "noise_sigma": world.noise_sigma, "seed": seed,
                "sampling": _sampling_doc(sampling)}
    return ObservationDB(records=records, metadata=metadata,
                         alignment_set=alignment_set)


def _central_pose(world: OccupancyWorld) -> Pose:
    free = world.free_cells()
    center = free.mean(axis=0)
    best = free[np.argmin(((free - center) ** 2).sum(axis=1))]
    x, z = world.cell_center((int(best[0]), int(best[1])))
    return Pose(x, z, 0.0)


def _grid_poses(world: OccupancyWorld, sampling: GridSampling) -> list[Pose]:
    x_min, x_max, z_min, z_max = world.extent
    poses = []
    thetas = [2 * math.pi * m / sampling.headings for m in range(sampling.headings)]
    z = z_min + sampling.spacing
    while z < z_max:
        x = x_min + sampling.spacing
        while x < x_max:
            if world.is_free(x, z):
                poses.extend(Pose(x, z, t) for t in thetas)
            x += sampling.spacing
        z += sampling.spacing
    return poses


def _trajectory_poses(world: OccupancyWorld, sampling: TrajectorySampling,
                      seed: int) -> list[Pose]:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x7247)))
    free = world.free_cells()
    start = free[rng.integers(len(free))]
    x, z = world.cell_center((int(start[0]), int(start[1])))
    theta = float(rng.uniform(0, 2 * math.pi))
    step = world.resolution / 2
    poses = [Pose(x, z, theta)]
    travelled = 0.0
    guard = 0
    while len(poses) < sampling.count and guard < sampling.count * 10_000:
        guard += 1
        nx, nz = x + step * math.cos(theta), z + step * math.sin(theta)
        if not world.is_free(nx, nz):
            theta = float(rng.uniform(0, 2 * math.pi))
            continue
        x, z = nx, nz
        travelled += step
        if travelled >= sampling.spacing:
            travelled = 0.0
            poses.append(Pose(x, z, theta))
    return poses


def _sampling_doc(sampling) -> dict:
    if isinstance(sampling, GridSampling):
        return {"kind": "grid", "spacing": sampling.spacing,
                "headings": sampling.headings}
    return {"kind": "trajectory", "spacing": sampling.spacing,
            "count": sampling.count}


# -- retrieval -----------------------------------------------------------------


def _query_heading(query: Pose) -> tuple[float, float]:
    return math.cos(query.theta), math.sin(query.theta)


def _result(db: ObservationDB, idx: int, relaxed: bool, sims: np.ndarray,
            qx: float, qz: float) -> RetrievalResult:
    rec = db.records[idx]
    dist = math.hypot(rec.pose.x - qx, rec.pose.z - qz)
    return RetrievalResult(rec, relaxed, float(sims[idx]), dist)


def retrieve_brute(db: ObservationDB, query: Pose,
                   threshold: float = DEFAULT_HEADING_THRESHOLD) -> RetrievalResult:
    """Exhaustive-scan retrieval; contract-identical to `retrieve`."""
    if len(db) == 0:
        raise EmptyDatabaseError("empty database")
    u, v = _query_heading(query)
    sims = db.heading_vectors[:, 0] * u + db.heading_vectors[:, 1] * v
    dists = np.hypot(db.positions[:, 0] - query.x, db.positions[:, 1] - query.z)
    passing = np.nonzero(sims >= threshold)[0]
    if passing.size > 0:
        cand = dists[passing]
        best = passing[cand == cand.min()].min()
        return _result(db, int(best), False, sims, query.x, query.z)
    best = np.nonzero(sims == sims.max())[0].min()
    return _result(db, int(best), True, sims, query.x, query.z)


def retrieve(db: ObservationDB, query: Pose,
             threshold: float = DEFAULT_HEADING_THRESHOLD) -> RetrievalResult:
    """Heading-filtered nearest-XZ retrieval via the spatial index.

    Expands the candidate ring until a heading-passing record appears; the
    first passing record in distance order is the exhaustive-scan answer.
    """
    if len(db) == 0:
        raise EmptyDatabaseError("empty database")
    n = len(db)
    u, v = _query_heading(query)
    qpt = np.array([query.x, query.z])

    k = min(32, n)
    while True:
        _, ii = db._tree.query(qpt, k=k)
        ii = np.atleast_1d(ii)
        ii = ii[ii < n]   # cKDTree pads with index n when k exceeds matches
        sims = (db.heading_vectors[ii, 0] * u + db.heading_vectors[ii, 1] * v)
        passing = sims >= threshold
        if passing.any():
            # recompute distances with the same formula as the brute path;
            # unseen records are at least as far as every candidate, so the
            # nearest passing candidate is globally nearest (up to exact ties,
            # which the ball query below resolves by lowest id)
            dists = np.hypot(db.positions[ii, 0] - query.x,
                             db.positions[ii, 1] - query.z)
            d0 = dists[passing].min()
            ball = np.asarray(sorted(
                db._tree.query_ball_point(qpt, r=d0 * (1 + 1e-12) + 1e-12)))
            bsims = (db.heading_vectors[ball, 0] * u
                     + db.heading_vectors[ball, 1] * v)
            bdists = np.hypot(db.positions[ball, 0] - query.x,
                              db.positions[ball, 1] - query.z)
            ok = (bsims >= threshold) & (bdists == d0)
            all_sims = np.full(n, np.nan)
            all_sims[ball] = bsims
            best = int(ball[ok].min())
            return _result(db, best, False, all_sims, query.x, query.z)
        if len(ii) >= n:
            break
        k = min(k * 4, n)

    sims = db.heading_vectors[:, 0] * u + db.heading_vectors[:, 1] * v
    best = int(np.nonzero(sims == sims.max())[0].min())
    return _result(db, best, True, sims, query.x, query.z)


# -- file format -----------------------------------------------------------------


def save_db(db: ObservationDB, path: str):
    first = db.records[0].stack
    header = {
        "format": OBSDB_FORMAT,
        "count": len(db.records),
        "channels": list(first.channel_names),
        "width": first.width,
        "fov": first.fov,
        "max_range": first.max_range,
        "domain_tag": db.records[0].domain_tag,
        "metadata": db.metadata,
        "alignment": db.alignment.to_dict() if db.alignment else None,
        "alignment_set": [[s.x, s.z, s.theta, t.x, t.z, t.theta]
                          for s, t in db.alignment_set],
    }
    blob = io.BytesIO()
    stride = 3 + len(first.channel_names) * first.width
    for rec in db.records:
        row = np.empty(stride, dtype="<f4")
        row[0:3] = (rec.pose.x, rec.pose.z, rec.pose.theta)
        row[3:] = rec.stack.values.ravel()
        blob.write(row.tobytes())
    with open(path, "wb") as fh:
        head = json.dumps(header, sort_keys=True).encode("utf-8")
        fh.write(len(head).to_bytes(8, "little"))
        fh.write(head)
        fh.write(blob.getvalue())


def load_db(path: str,
            alignment: SimilarityTransform2D | None = None) -> ObservationDB:
    """Load a database, applying an alignment transform to record poses.

    The transform priority is: explicit argument, then the transform stored
    in the file, then identity.
    """
    with open(path, "rb") as fh:
        head_len = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(head_len).decode("utf-8"))
        if header.get("format") != OBSDB_FORMAT:
            raise ValueError(f"not an {OBSDB_FORMAT} file: {path}")
        channels = tuple(header["channels"])
        width = int(header["width"])
        stride = 3 + len(channels) * width
        payload = np.frombuffer(fh.read(), dtype="<f4").reshape(
            header["count"], stride)

    stored = (SimilarityTransform2D.from_dict(header["alignment"])
              if header.get("alignment") else None)
    transform = alignment or stored

    records = []
    for idx in range(header["count"]):
        x, z, theta = (float(payload[idx, 0]), float(payload[idx, 1]),
                       float(payload[idx, 2]))
        pose = Pose(x, z, theta)
        if transform is not None:
            pose = transform.apply(pose)
        stack = MidLevelStack(
            channel_names=channels,
            values=payload[idx, 3:].astype(np.float64).reshape(len(channels), width),
            width=width, fov=float(header["fov"]),
            max_range=float(header["max_range"]))
        records.append(ObservationRecord(id=idx, pose=pose, stack=stack,
                                         domain_tag=header["domain_tag"]))
    alignment_set = [(Pose(s[0], s[1], s[2]), Pose(s[3], s[4], s[5]))
                     for s in header.get("alignment_set", [])]
    return ObservationDB(records=records, metadata=header.get("metadata", {}),
                         alignment=transform, alignment_set=alignment_set)
