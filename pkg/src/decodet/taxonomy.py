"""Super-class discovery: average per-class feature vectors, then K-means them.

The resulting :class:`Taxonomy` says which bank of position-sensitive filters
each fine-grained class shares. ``K == 1`` is the pure objectness setup.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


@dataclass(frozen=True)
class ClassRepresentation:
    class_id: int
    vector: np.ndarray


def class_representations(samples: Sequence[Sequence[Sequence[float]]]) -> list[ClassRepresentation]:
    """Element-wise mean of each class's sample vectors.

    ``samples[c]`` is the list of D-vectors observed for class ``c``.
    """
    reps = []
    dim = None
    for class_id, vectors in enumerate(samples):
        arr = np.asarray(vectors, dtype=np.float64)
        if arr.size == 0 or arr.shape[0] == 0:
            raise ValueError(f"class {class_id} has no samples")
        if arr.ndim != 2:
            raise ValueError(f"class {class_id}: samples must be a list of vectors")
        if dim is None:
            dim = arr.shape[1]
        elif arr.shape[1] != dim:
            raise ValueError(f"class {class_id}: dimension {arr.shape[1]} != {dim}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"class {class_id}: non-finite sample values")
        reps.append(ClassRepresentation(class_id, arr.mean(axis=0)))
    return reps


def _sq_dists(points: np.ndarray, centroids: np.ndarray, budget: int = 1 << 22) -> np.ndarray:
    # ||p||^2 - 2 p.c + ||c||^2 cancels badly for near-identical points; use the
    # direct form, chunked over points to bound the (rows, K, D) temporary
    n, k = points.shape[0], centroids.shape[0]
    rows = max(1, budget // max(1, k * points.shape[1]))
    out = np.empty((n, k))
    for start in range(0, n, rows):
        diff = points[start : start + rows, None, :] - centroids[None, :, :]
        out[start : start + rows] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(points, points[chosen]).min(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every point coincides with a chosen centroid; take the first unused index
            unused = np.setdiff1d(np.arange(n), chosen)
            idx = int(unused[0])
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        chosen.append(idx)
        closest = np.minimum(closest, _sq_dists(points, points[idx : idx + 1])[:, 0])
    return points[chosen].copy()


def _repair_empty(points, assignment, centroids, k):
    """Give every empty cluster the point farthest from its centroid in the largest cluster."""
    counts = np.bincount(assignment, minlength=k)
    for empty in np.flatnonzero(counts == 0):
        largest = int(np.argmax(counts))
        members = np.flatnonzero(assignment == largest)
        d = ((points[members] - centroids[largest]) ** 2).sum(axis=1)
        victim = int(members[int(np.argmax(d))])
        assignment[victim] = empty
        centroids[empty] = points[victim]
        counts[largest] -= 1
        counts[empty] = 1
    return assignment


def kmeans_objective(points: np.ndarray, assignment: np.ndarray, centroids: np.ndarray) -> float:
    diff = points - centroids[assignment]
    return float(np.einsum("ij,ij->", diff, diff))


def kmeans(
    points,
    k: int,
    seed: int = 0,
    max_iters: int = 100,
    on_iteration: Callable[[int, float], None] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding.

    Returns ``(assignment, centroids)``. ``on_iteration(i, objective)`` is
    called with the within-cluster sum of squares after the initial
    assignment (``i == 0``) and after every update/reassign round.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be a C x D matrix")
    n = points.shape[0]
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if k > n:
        raise ValueError(f"K={k} exceeds the number of points C={n}")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(points, k, rng)
    assignment = np.argmin(_sq_dists(points, centroids), axis=1)
    assignment = _repair_empty(points, assignment, centroids, k)
    if on_iteration is not None:
        on_iteration(0, kmeans_objective(points, assignment, centroids))

    for it in range(1, max_iters + 1):
        sums = np.zeros_like(centroids)
        np.add.at(sums, assignment, points)
        counts = np.bincount(assignment, minlength=k)
        centroids = sums / counts[:, None]
        new_assignment = np.argmin(_sq_dists(points, centroids), axis=1)
        new_assignment = _repair_empty(points, new_assignment, centroids, k)
        changed = not np.array_equal(new_assignment, assignment)
        assignment = new_assignment
        if changed:
            # keep centroids consistent with the final assignment
            sums = np.zeros_like(centroids)
            np.add.at(sums, assignment, points)
            centroids = sums / np.bincount(assignment, minlength=k)[:, None]
        if on_iteration is not None:
            on_iteration(it, kmeans_objective(points, assignment, centroids))
        if not changed:
            break
    return assignment, centroids


@dataclass
class Taxonomy:
    num_classes: int
    num_superclasses: int
    assignment: np.ndarray
    centroids: np.ndarray
    members: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.assignment.shape != (self.num_classes,):
            raise ValueError(f"assignment length {self.assignment.shape} != C={self.num_classes}")
        if self.num_classes and (self.assignment.min() < 0 or self.assignment.max() >= self.num_superclasses):
            raise ValueError("assignment values must lie in [0, K)")
        if not self.members:
            self.members = [np.flatnonzero(self.assignment == k).tolist() for k in range(self.num_superclasses)]
        if any(len(m) == 0 for m in self.members):
            raise ValueError("taxonomy has an empty super-class")

    @property
    def dim(self) -> int:
        return int(self.centroids.shape[1]) if self.centroids.ndim == 2 else 0

    def superclass_of(self, class_id: int) -> int:
        if not 0 <= class_id < self.num_classes:
            raise ValueError(f"class {class_id} outside taxonomy of {self.num_classes} classes")
        return int(self.assignment[class_id])

    @classmethod
    def objectness(cls, num_classes: int) -> "Taxonomy":
        """Single super-class: every class shares one objectness bank."""
        return cls(num_classes, 1, np.zeros(num_classes, dtype=np.int64), np.zeros((1, 0)))

    def to_dict(self) -> dict:
        return {
            "C": self.num_classes,
            "K": self.num_superclasses,
            "D": self.dim,
            "assignment": self.assignment.tolist(),
            "centroids": self.centroids.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "Taxonomy":
        for key in ("C", "K", "assignment"):
            if key not in doc:
                raise ValueError(f"taxonomy document missing field {key!r}")
        centroids = np.asarray(doc.get("centroids", []), dtype=np.float64)
        if centroids.size == 0:
            centroids = np.zeros((int(doc["K"]), int(doc.get("D", 0))))
        return cls(int(doc["C"]), int(doc["K"]), np.asarray(doc["assignment"]), centroids)


def build_taxonomy(reps: Sequence[ClassRepresentation], k: int, seed: int = 0, max_iters: int = 100) -> Taxonomy:
    reps = sorted(reps, key=lambda r: r.class_id)
    if [r.class_id for r in reps] != list(range(len(reps))):
        raise ValueError("class representations must cover class ids 0..C-1 exactly once")
    points = np.stack([np.asarray(r.vector, dtype=np.float64) for r in reps]) if reps else np.zeros((0, 0))
    assignment, centroids = kmeans(points, k, seed=seed, max_iters=max_iters)
    return Taxonomy(len(reps), k, assignment, centroids)
