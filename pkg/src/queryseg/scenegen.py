"""Synthetic point-cloud scenes, voxel pooling, and the scene file format.

Scenes are collections of axis-aligned Gaussian clusters, one per object
instance. Each class carries a distinctive base color so classification is
learnable from point features alone. Supervision lives at pool (voxel)
granularity: voxels stand in for superpoints.
"""
from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, segment_mean

SCENE_FORMAT_VERSION = 1


class SceneConfigError(ValueError):
    """Scene configuration that cannot produce a valid scene."""


class SceneFormatError(ValueError):
    """Malformed or unsupported scene file."""


@dataclass
class SceneConfig:
    instance_count_range: tuple[int, int] = (3, 8)
    points_per_instance_range: tuple[int, int] = (200, 350)
    extent: float = 8.0
    cluster_std: float = 0.45
    voxel_size: float = 0.2
    class_count: int = 6
    color_noise: float = 0.05

    def validate(self) -> None:
        lo, hi = self.instance_count_range
        if not (1 <= lo <= hi):
            raise SceneConfigError(f"scene.instance_count_range invalid: [{lo}, {hi}]")
        plo, phi = self.points_per_instance_range
        if not (1 <= plo <= phi):
            raise SceneConfigError(f"scene.points_per_instance_range invalid: [{plo}, {phi}]")
        if self.extent <= 0:
            raise SceneConfigError(f"scene.extent must be positive, got {self.extent}")
        if self.cluster_std <= 0:
            raise SceneConfigError(f"scene.cluster_std must be positive, got {self.cluster_std}")
        if self.voxel_size <= 0:
            raise SceneConfigError(f"scene.voxel_size must be positive, got {self.voxel_size}")
        if self.class_count < 1:
            raise SceneConfigError(f"scene.class_count must be >= 1, got {self.class_count}")


@dataclass
class PoolingAssignment:
    """Surjective map from point index to pool index in [0, pool_count)."""

    pool_of_point: np.ndarray
    pool_count: int


@dataclass
class Scene:
    points: np.ndarray          # (N, 6): x, y, z in meters; r, g, b in [0, 1]
    superpoint_id: np.ndarray   # (N,) ints in [0, M)
    gt_semantic: np.ndarray     # (G,) ints in [0, class_count)
    gt_masks: np.ndarray        # (G, M) bool, pool-level instance masks
    seed: int = 0

    @property
    def num_points(self) -> int:
        return self.points.shape[0]

    @property
    def num_pools(self) -> int:
        return self.gt_masks.shape[1]

    @property
    def num_instances(self) -> int:
        return self.gt_masks.shape[0]


def class_color(semantic: int, class_count: int) -> np.ndarray:
    """Deterministic base color per semantic class (evenly spaced hues)."""
    hue = semantic / max(class_count, 1)
    return np.array(colorsys.hsv_to_rgb(hue, 0.85, 0.9))


def voxelize(points: np.ndarray, voxel_size: float) -> PoolingAssignment:
    """Assign each point the densely re-indexed id of its voxel cell."""
    if voxel_size <= 0:
        raise SceneConfigError(f"voxel_size must be positive, got {voxel_size}")
    cells = np.floor(points[:, :3] / voxel_size).astype(np.int64)
    _, pool_ids = np.unique(cells, axis=0, return_inverse=True)
    pool_ids = pool_ids.astype(np.int64)
    return PoolingAssignment(pool_of_point=pool_ids, pool_count=int(pool_ids.max()) + 1)


def superpoint_pool(point_features, assignment: PoolingAssignment):
    """Average point features per pool. Accepts a Tensor (differentiable)
    or a plain array."""
    if isinstance(point_features, Tensor):
        return segment_mean(point_features, assignment.pool_of_point, assignment.pool_count)
    feats = np.asarray(point_features, dtype=np.float64)
    return segment_mean(Tensor(feats), assignment.pool_of_point, assignment.pool_count).data


def gt_masks_to_pools(point_labels: np.ndarray, assignment: PoolingAssignment,
                      num_instances: int) -> np.ndarray:
    """Pool-level masks by strict majority vote of point labels.

    Labels are instance ids in [0, num_instances) or -1 for unlabeled. A pool
    belongs to instance g only when more than half of its points carry g, so
    no pool is ever assigned to two instances.
    """
    labels = np.asarray(point_labels, dtype=np.int64)
    m = assignment.pool_count
    pool_sizes = np.bincount(assignment.pool_of_point, minlength=m)
    masks = np.zeros((num_instances, m), dtype=bool)
    for g in range(num_instances):
        votes = np.bincount(assignment.pool_of_point, weights=(labels == g).astype(np.float64),
                            minlength=m)
        masks[g] = votes * 2 > pool_sizes
    return masks


def generate_scene(cfg: SceneConfig, seed: int) -> Scene:
    """Deterministically generate a labeled scene from (cfg, seed).

    Cluster centers are rejection-sampled to stay at least two standard
    deviations apart. If pooling leaves some instance without any majority
    pool, the whole scene is redrawn from the same random stream (bounded
    number of attempts), keeping generation a pure function of (cfg, seed).
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    for _ in range(16):
        scene = _draw_scene(cfg, rng, seed)
        if scene is not None:
            return scene
    raise SceneConfigError(
        "could not place instances with non-empty pool masks; "
        "scene.extent is too small for scene.instance_count_range"
    )


def _draw_scene(cfg: SceneConfig, rng: np.random.Generator, seed: int) -> Scene | None:
    lo, hi = cfg.instance_count_range
    count = int(rng.integers(lo, hi + 1))

    centers = []
    min_sep = 2.0 * cfg.cluster_std
    for _ in range(count):
        placed = False
        for _ in range(256):
            c = rng.uniform(0.0, cfg.extent, size=3)
            if all(np.linalg.norm(c - prev) >= min_sep for prev in centers):
                centers.append(c)
                placed = True
                break
        if not placed:
            raise SceneConfigError(
                f"cannot place {count} instances {min_sep:.3f} m apart inside "
                f"scene.extent={cfg.extent}"
            )

    plo, phi = cfg.points_per_instance_range
    xyz_parts, rgb_parts, label_parts, semantics = [], [], [], []
    for g, center in enumerate(centers):
        n = int(rng.integers(plo, phi + 1))
        xyz = center + rng.normal(0.0, cfg.cluster_std, size=(n, 3))
        semantic = int(rng.integers(0, cfg.class_count))
        rgb = class_color(semantic, cfg.class_count) + rng.normal(0.0, cfg.color_noise, size=(n, 3))
        xyz_parts.append(xyz)
        rgb_parts.append(np.clip(rgb, 0.0, 1.0))
        label_parts.append(np.full(n, g, dtype=np.int64))
        semantics.append(semantic)

    points = np.concatenate(
        [np.concatenate(xyz_parts), np.concatenate(rgb_parts)], axis=1
    )
    labels = np.concatenate(label_parts)
    assignment = voxelize(points, cfg.voxel_size)
    masks = gt_masks_to_pools(labels, assignment, count)
    if not masks.any(axis=1).all():
        return None
    if count > 1 and masks.all(axis=1).any():
        return None
    return Scene(
        points=points,
        superpoint_id=assignment.pool_of_point,
        gt_semantic=np.array(semantics, dtype=np.int64),
        gt_masks=masks,
        seed=seed,
    )


# ----------------------------------------------------------------------
# scene file format (versioned JSON)


def scene_to_json(scene: Scene) -> str:
    doc = {
        "version": SCENE_FORMAT_VERSION,
        "points": [[float(v) for v in row] for row in scene.points],
        "superpoint_id": [int(v) for v in scene.superpoint_id],
        "instances": [
            {
                "semantic": int(scene.gt_semantic[g]),
                "pool_mask": [int(p) for p in np.flatnonzero(scene.gt_masks[g])],
            }
            for g in range(scene.num_instances)
        ],
        "seed": int(scene.seed),
    }
    return json.dumps(doc)


def save_scene(scene: Scene, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(scene_to_json(scene))


def load_scene(path: str) -> Scene:
    with open(path) as fh:
        raw = fh.read()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{path}: not valid JSON (line {exc.lineno}): {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise SceneFormatError(f"{path}: expected a JSON object at top level")
    version = doc.get("version")
    if version != SCENE_FORMAT_VERSION:
        raise SceneFormatError(
            f"{path}: unsupported scene format version {version!r}, "
            f"expected {SCENE_FORMAT_VERSION}"
        )
    for fname in ("points", "superpoint_id", "instances", "seed"):
        if fname not in doc:
            raise SceneFormatError(f"{path}: missing field {fname!r}")
    points = np.asarray(doc["points"], dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 6:
        raise SceneFormatError(f"{path}: field 'points' must be N x 6")
    superpoint_id = np.asarray(doc["superpoint_id"], dtype=np.int64)
    if superpoint_id.shape[0] != points.shape[0]:
        raise SceneFormatError(f"{path}: field 'superpoint_id' length differs from 'points'")
    pool_count = int(superpoint_id.max()) + 1 if superpoint_id.size else 0
    instances = doc["instances"]
    masks = np.zeros((len(instances), pool_count), dtype=bool)
    semantics = np.zeros(len(instances), dtype=np.int64)
    for g, inst in enumerate(instances):
        if "semantic" not in inst or "pool_mask" not in inst:
            raise SceneFormatError(f"{path}: instance {g} missing 'semantic' or 'pool_mask'")
        semantics[g] = int(inst["semantic"])
        pools = np.asarray(inst["pool_mask"], dtype=np.int64)
        if pools.size and (pools.min() < 0 or pools.max() >= pool_count):
            raise SceneFormatError(f"{path}: instance {g} pool_mask index out of range")
        masks[g, pools] = True
    return Scene(
        points=points,
        superpoint_id=superpoint_id,
        gt_semantic=semantics,
        gt_masks=masks,
        seed=int(doc["seed"]),
    )


def scenes_equal(a: Scene, b: Scene) -> bool:
    return (
        np.array_equal(a.points, b.points)
        and np.array_equal(a.superpoint_id, b.superpoint_id)
        and np.array_equal(a.gt_semantic, b.gt_semantic)
        and np.array_equal(a.gt_masks, b.gt_masks)
        and a.seed == b.seed
    )
