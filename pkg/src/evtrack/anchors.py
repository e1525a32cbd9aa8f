"""Trajectory anchors: K-means over expert trajectories plus labeling.

Clustering runs on flattened (x, y) waypoint vectors normalized by RHO;
headings are recomputed from displacements afterwards. The anchor nearest
to a ground-truth trajectory (mean squared (x, y) distance, ties to the
lowest index) is the single positive label.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .core import N_W, SeededRng, Trajectory, recompute_headings

M_ANCHORS = 40
RHO = 5.0  # m, trajectory normalization scale


class ClusteringError(Exception):
    pass


class AnchorFileError(Exception):
    pass


@dataclass
class AnchorSet:
    anchors: list          # M Trajectory, denormalized
    rho: float
    seed: int
    dataset_hash: str
    objective_curve: list = None  # Lloyd objective per iteration (diagnostic)

    @property
    def m(self) -> int:
        return len(self.anchors)

    def normalized_xy(self) -> np.ndarray:
        """(M, 2*N_W) flattened normalized waypoint matrix."""
        return np.stack([t.xy.ravel() for t in self.anchors]) / self.rho


@dataclass(frozen=True)
class AnchorLabels:
    labels: np.ndarray       # (M,) binary, exactly one positive
    positive_index: int


def _flatten_norm(trajectories, rho):
    return np.stack([t.xy.ravel() for t in trajectories]) / rho


def _kmeanspp_init(points: np.ndarray, m: int, rng: SeededRng) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((m, points.shape[1]))
    first = int(rng.integers(0, n))
    centers[0] = points[first]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for j in range(1, m):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(0, n))
        else:
            r = float(rng.uniform(0, total))
            idx = int(np.searchsorted(np.cumsum(d2), r))
            idx = min(idx, n - 1)
        centers[j] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centers[j]) ** 2, axis=1))
    return centers


def kmeans_anchors(trajectories, m: int = M_ANCHORS, max_iters: int = 100,
                   rng: SeededRng | None = None, rho: float = RHO,
                   dataset_hash: str = "") -> AnchorSet:
    """k-means++ / Lloyd clustering of trajectories into m anchors."""
    if rng is None:
        rng = SeededRng(0)
    for t in trajectories:
        if t.waypoints.shape[0] != N_W:
            raise ClusteringError("trajectory length mismatch")
    points = _flatten_norm(trajectories, rho)
    n_distinct = np.unique(points, axis=0).shape[0]
    if n_distinct < m:
        raise ClusteringError(
            f"need >= {m} distinct trajectories, got {n_distinct} of {len(trajectories)}")

    centers = _kmeanspp_init(points, m, rng)
    objective_curve = []
    for _ in range(max_iters):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        objective_curve.append(float(d2[np.arange(len(points)), assign].sum()))
        new_centers = centers.copy()
        for j in range(m):
            members = points[assign == j]
            if len(members) == 0:
                # reseed empty cluster at the point farthest from its centroid
                far = int(d2[np.arange(len(points)), assign].argmax())
                new_centers[j] = points[far]
            else:
                new_centers[j] = members.mean(axis=0)
        shift = np.abs(new_centers - centers).max() * rho
        centers = new_centers
        if shift < 1e-6:
            break
    anchors = [recompute_headings((c * rho).reshape(N_W, 2)) for c in centers]
    return AnchorSet(anchors=anchors, rho=rho, seed=rng.seed,
                     dataset_hash=dataset_hash, objective_curve=objective_curve)


def nearest_anchor(tau_gt: Trajectory, anchor_set: AnchorSet) -> AnchorLabels:
    gt = tau_gt.xy
    dists = np.array([np.mean((a.xy - gt) ** 2) for a in anchor_set.anchors])
    pos = int(dists.argmin())  # argmin breaks ties toward the lowest index
    labels = np.zeros(anchor_set.m)
    labels[pos] = 1.0
    return AnchorLabels(labels=labels, positive_index=pos)


def _anchor_payload_hash(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(canon).hexdigest()


def save_anchors(anchor_set: AnchorSet, path):
    payload = {
        "M": anchor_set.m,
        "N_w": N_W,
        "rho": anchor_set.rho,
        "seed": anchor_set.seed,
        "dataset_hash": anchor_set.dataset_hash,
        "anchors": [a.waypoints.tolist() for a in anchor_set.anchors],
    }
    payload["checksum"] = _anchor_payload_hash(
        {k: v for k, v in payload.items() if k != "checksum"})
    with open(path, "w") as f:
        json.dump(payload, f)


def load_anchors(path) -> AnchorSet:
    try:
        with open(path) as f:
            payload = json.load(f)
    except (json.JSONDecodeError, OSError) as e:
        raise AnchorFileError(f"unreadable anchor file: {e}") from e
    for key in ("M", "N_w", "rho", "seed", "dataset_hash", "anchors", "checksum"):
        if key not in payload:
            raise AnchorFileError(f"anchor file missing field: {key}")
    expect = _anchor_payload_hash({k: v for k, v in payload.items() if k != "checksum"})
    if payload["checksum"] != expect:
        raise AnchorFileError("anchor file checksum mismatch")
    if payload["N_w"] != N_W:
        raise AnchorFileError(f"waypoint count mismatch: {payload['N_w']}")
    anchors = [Trajectory(np.array(a)) for a in payload["anchors"]]
    if len(anchors) != payload["M"]:
        raise AnchorFileError("anchor count mismatch")
    return AnchorSet(anchors=anchors, rho=payload["rho"], seed=payload["seed"],
                     dataset_hash=payload["dataset_hash"])
