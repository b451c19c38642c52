"""Decision regions on planes through training triplets.

A plane is spanned by one forget example and two retain examples. Points
are sampled on a regular grid over the plane and split into those within
``delta`` of some forget example (prox) and the rest (far). Comparing the
predictions of two models on each part gives the similarity score (far
agreement) and the change score (prox disagreement).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LabeledDataset
from .nn import ParamVector, predict

DEFAULT_RESOLUTION = 75
DEFAULT_MARGIN = 0.1
DEFAULT_PLANES = 300


class CollinearAnchorsError(ValueError):
    pass


@dataclass(frozen=True)
class PlaneGrid:
    anchors: np.ndarray  # (3, d): forget example, then two retain examples
    origin: np.ndarray
    basis: np.ndarray  # (2, d), orthonormal rows
    bounds: tuple[float, float, float, float]  # u_min, u_max, v_min, v_max
    resolution: int
    plane_id: int = 0
    anchor_indices: tuple[int, int, int] | None = None

    @property
    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        u0, u1, v0, v1 = self.bounds
        return np.linspace(u0, u1, self.resolution), np.linspace(v0, v1, self.resolution)

    @property
    def coords(self) -> np.ndarray:
        """Grid coordinates, u-major: sample ``i * resolution + j`` is ``(u_i, v_j)``."""
        us, vs = self.axes
        U, V = np.meshgrid(us, vs, indexing="ij")
        return np.column_stack([U.ravel(), V.ravel()])

    @property
    def samples(self) -> np.ndarray:
        return self.origin + self.coords @ self.basis

    def project(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x) - self.origin) @ self.basis.T

    def __len__(self) -> int:
        return self.resolution * self.resolution


@dataclass(frozen=True)
class RegionPartition:
    far: np.ndarray
    prox: np.ndarray
    delta: float


@dataclass
class RegionReport:
    similarity: float
    change: float
    planes_used: int
    planes_skipped_far: int
    planes_skipped_prox: int
    delta: float
    per_plane_similarity: list[float] = field(default_factory=list)
    per_plane_change: list[float] = field(default_factory=list)

    def as_dict(self, with_planes: bool = False) -> dict:
        d = {
            "similarity": self.similarity,
            "change": self.change,
            "planes_used": self.planes_used,
            "planes_skipped_far": self.planes_skipped_far,
            "planes_skipped_prox": self.planes_skipped_prox,
            "delta": self.delta,
        }
        if with_planes:
            d["per_plane_similarity"] = self.per_plane_similarity
            d["per_plane_change"] = self.per_plane_change
        return d


def build_plane(
    x_f,
    x_r1,
    x_r2,
    margin_fraction: float = DEFAULT_MARGIN,
    resolution: int = DEFAULT_RESOLUTION,
    plane_id: int = 0,
    anchor_indices: tuple[int, int, int] | None = None,
) -> PlaneGrid:
    """Plane through three points with origin at ``x_f`` (Gram-Schmidt basis).

    The sampled rectangle is the bounding box of the projected anchors,
    widened by ``margin_fraction`` of its extent on every side.
    """
    x_f, x_r1, x_r2 = (np.asarray(a, dtype=np.float64) for a in (x_f, x_r1, x_r2))
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    v1 = x_r1 - x_f
    v2 = x_r2 - x_f
    n1 = np.linalg.norm(v1)
    scale = max(1.0, n1, np.linalg.norm(v2))
    if n1 <= 1e-9 * scale:
        raise CollinearAnchorsError("first retain anchor coincides with the forget anchor")
    e1 = v1 / n1
    u = v2 - (v2 @ e1) * e1
    nu = np.linalg.norm(u)
    if nu <= 1e-9 * scale:
        raise CollinearAnchorsError("anchors are collinear")
    e2 = u / nu
    # one re-orthogonalization pass keeps the basis orthonormal to ~1e-16
    e2 = e2 - (e2 @ e1) * e1
    e2 /= np.linalg.norm(e2)
    basis = np.vstack([e1, e2])
    pts = np.array([[0.0, 0.0], [n1, 0.0], [v2 @ e1, v2 @ e2]])
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    pad = margin_fraction * (hi - lo)
    lo, hi = lo - pad, hi + pad
    return PlaneGrid(
        anchors=np.vstack([x_f, x_r1, x_r2]),
        origin=x_f,
        basis=basis,
        bounds=(float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1])),
        resolution=resolution,
        plane_id=plane_id,
        anchor_indices=anchor_indices,
    )


def sample_planes(
    dataset: LabeledDataset,
    forget: np.ndarray,
    m: int = DEFAULT_PLANES,
    seed: int = 0,
    resolution: int = DEFAULT_RESOLUTION,
    margin_fraction: float = DEFAULT_MARGIN,
    max_redraws: int | None = None,
) -> tuple[list[PlaneGrid], int]:
    """Draw ``m`` planes, each through one forget and two distinct retain examples.

    Collinear triplets are redrawn. Returns the planes and the redraw count.
    """
    forget = np.asarray(forget, dtype=np.int64)
    retain = np.setdiff1d(dataset.indices("train"), forget)
    if m < 1:
        raise ValueError("need at least one plane")
    if len(forget) == 0 or len(retain) < 2:
        raise ValueError("need a nonempty forget set and at least two retain examples")
    rng = np.random.default_rng(seed)
    limit = max_redraws if max_redraws is not None else 100 * m
    planes: list[PlaneGrid] = []
    redraws = 0
    while len(planes) < m:
        i_f = int(rng.choice(forget))
        i_r1, i_r2 = (int(i) for i in rng.choice(retain, size=2, replace=False))
        try:
            plane = build_plane(
                dataset.inputs[i_f],
                dataset.inputs[i_r1],
                dataset.inputs[i_r2],
                margin_fraction,
                resolution,
                plane_id=len(planes),
                anchor_indices=(i_f, i_r1, i_r2),
            )
        except CollinearAnchorsError:
            redraws += 1
            if redraws > limit:
                raise ValueError(f"could not form {m} planes after {redraws} redraws") from None
            continue
        planes.append(plane)
    return planes, redraws


def min_sq_distance(plane: PlaneGrid, forget_inputs: np.ndarray) -> np.ndarray:
    """Squared distance from every grid sample to its nearest forget example."""
    F = np.asarray(forget_inputs, dtype=np.float64).reshape(-1, plane.origin.size)
    coords = plane.coords
    if len(F) == 0:
        return np.full(len(coords), np.inf)
    # |o + P - f|^2 = |o - f|^2 + |P|^2 + 2 (o - f) . P, with P in the plane
    off = plane.origin - F
    proj = off @ plane.basis.T  # (n_f, 2)
    sq = (coords**2).sum(axis=1)[:, None] + (off**2).sum(axis=1)[None, :] + 2.0 * coords @ proj.T
    return np.maximum(sq, 0.0).min(axis=1)


def min_distance(plane: PlaneGrid, forget_inputs: np.ndarray) -> np.ndarray:
    return np.sqrt(min_sq_distance(plane, forget_inputs))


def partition_far_prox(plane: PlaneGrid, forget_inputs: np.ndarray, delta: float) -> RegionPartition:
    """Far samples are strictly farther than ``delta`` from every forget example."""
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    F = np.asarray(forget_inputs, dtype=np.float64).reshape(-1, plane.origin.size)
    sq = min_sq_distance(plane, F)
    far_mask = sq > delta * delta
    # resolve samples near the threshold with direct differences
    tol = 1e-9 * max(1.0, delta * delta, float(np.abs(sq[np.isfinite(sq)]).max(initial=0.0)))
    near = np.flatnonzero(np.abs(sq - delta * delta) <= tol)
    if len(near):
        pts = plane.samples[near]
        d = np.sqrt(((pts[:, None, :] - F[None, :, :]) ** 2).sum(axis=2)).min(axis=1)
        far_mask[near] = d > delta
    return RegionPartition(np.flatnonzero(far_mask), np.flatnonzero(~far_mask), float(delta))


def _fraction(mask: np.ndarray) -> float:
    return float(np.count_nonzero(mask) / len(mask))


def plane_predictions(w: ParamVector, planes: list[PlaneGrid]) -> list[np.ndarray]:
    return [predict(w, p.samples) for p in planes]


def _scores(preds0, predsu, partitions):
    sims, changes = [], []
    for p0, pu, part in zip(preds0, predsu, partitions):
        sims.append(_fraction(p0[part.far] == pu[part.far]) if len(part.far) else None)
        changes.append(_fraction(p0[part.prox] != pu[part.prox]) if len(part.prox) else None)
    return sims, changes


def _mean_skip(values, what: str) -> tuple[float, int]:
    kept = [v for v in values if v is not None]
    if not kept:
        raise ValueError(f"every plane has an empty {what} set")
    return float(np.mean(kept)), len(values) - len(kept)


def similarity_score(f0: ParamVector, fu: ParamVector, planes, forget_inputs, delta: float) -> float:
    """Mean over planes of far-sample agreement; planes with no far samples are skipped."""
    _require_same(f0, fu)
    parts = [partition_far_prox(p, forget_inputs, delta) for p in planes]
    sims, _ = _scores(plane_predictions(f0, planes), plane_predictions(fu, planes), parts)
    return _mean_skip(sims, "far")[0]


def change_score(f0: ParamVector, fu: ParamVector, planes, forget_inputs, delta: float) -> float:
    """Mean over planes of prox-sample disagreement; planes with no prox samples are skipped."""
    _require_same(f0, fu)
    parts = [partition_far_prox(p, forget_inputs, delta) for p in planes]
    _, changes = _scores(plane_predictions(f0, planes), plane_predictions(fu, planes), parts)
    return _mean_skip(changes, "prox")[0]


def _require_same(f0: ParamVector, fu: ParamVector):
    a, b = f0.config, fu.config
    if (a.input_dim, a.num_classes) != (b.input_dim, b.num_classes):
        raise ValueError("models disagree on input dimension or class count")


def scores_from_predictions(preds0, predsu, partitions, delta: float) -> RegionReport:
    sims, changes = _scores(preds0, predsu, partitions)
    sim, skip_far = _mean_skip(sims, "far")
    chg, skip_prox = _mean_skip(changes, "prox")
    return RegionReport(
        sim,
        chg,
        len(partitions),
        skip_far,
        skip_prox,
        float(delta),
        sims,
        changes,
    )


def region_report(
    f0: ParamVector,
    fu: ParamVector,
    dataset: LabeledDataset,
    forget: np.ndarray,
    m: int = DEFAULT_PLANES,
    delta: float = 1.0,
    seed: int = 0,
    resolution: int = DEFAULT_RESOLUTION,
    margin_fraction: float = DEFAULT_MARGIN,
    dump: str | Path | None = None,
) -> RegionReport:
    _require_same(f0, fu)
    planes, _ = sample_planes(dataset, forget, m, seed, resolution, margin_fraction)
    forget_inputs = dataset.inputs[np.asarray(forget, dtype=np.int64)]
    parts = [partition_far_prox(p, forget_inputs, delta) for p in planes]
    preds0 = plane_predictions(f0, planes)
    predsu = plane_predictions(fu, planes)
    if dump is not None:
        write_plane_dump(dump, planes, preds0, predsu, parts)
    return scores_from_predictions(preds0, predsu, parts, delta)


PLANE_DUMP_COLUMNS = ("plane_id", "grid_u", "grid_v", "pred_before", "pred_after", "is_prox")


def write_plane_dump(path, planes, preds0, predsu, partitions) -> None:
    """One row per grid sample; predictions are written as 1-based labels."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PLANE_DUMP_COLUMNS)
        for plane, p0, pu, part in zip(planes, preds0, predsu, partitions):
            is_prox = np.zeros(len(plane), dtype=np.int64)
            is_prox[part.prox] = 1
            for (u, v), a, b, c in zip(plane.coords, p0, pu, is_prox):
                writer.writerow([plane.plane_id, repr(float(u)), repr(float(v)), int(a) + 1, int(b) + 1, int(c)])


def prox_coverage(planes, forget_inputs, delta: float) -> float:
    """Fraction of planes whose prox set is nonempty."""
    return float(np.mean([len(partition_far_prox(p, forget_inputs, delta).prox) > 0 for p in planes]))


def calibrate_delta(planes, forget_inputs, candidates, target: float = 0.9) -> float:
    """Smallest candidate giving at least ``target`` prox coverage."""
    for delta in sorted(candidates):
        if prox_coverage(planes, forget_inputs, delta) >= target:
            return float(delta)
    raise ValueError(f"no candidate delta reaches prox coverage {target}")
