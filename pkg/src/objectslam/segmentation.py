"""Instance-level object extraction from patch-feature grids.

Pipeline: K-means over patch features, attention-based saliency voting,
morphological opening of each salient class mask, connected components,
size/border filtering, then dual centroid extraction (latent-space centroid
of the cluster plus a back-projected 3-D point with an isotropic covariance
that scales with range).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DataFormatError

FGRD_MAGIC = b"FGRD"


@dataclass
class FeatureGrid:
    """H x W patch grid: per-patch feature vectors, attention heads, depth (m, 0 = invalid)."""

    features: np.ndarray   # (H, W, D)
    attention: np.ndarray  # (A, H, W)
    depth: np.ndarray      # (H, W)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.attention = np.asarray(self.attention, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.features.ndim != 3:
            raise ValueError("features must be (H, W, D)")
        h, w, d = self.features.shape
        if h < 2 or w < 2 or d < 2:
            raise ValueError("require H, W >= 2 and D >= 2")
        if self.attention.shape[1:] != (h, w) or self.attention.shape[0] < 1:
            raise ValueError("attention must be (A, H, W) with A >= 1")
        if self.depth.shape != (h, w):
            raise ValueError("depth must be (H, W)")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("non-finite features")
        if np.any(self.attention < 0) or np.any(self.depth < 0):
            raise ValueError("attention and depth must be non-negative")

    @property
    def height(self) -> int:
        return self.features.shape[0]

    @property
    def width(self) -> int:
        return self.features.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    @property
    def num_heads(self) -> int:
        return self.attention.shape[0]


@dataclass
class ClusterMap:
    labels: np.ndarray     # (H, W) ints in [0, k)
    centroids: np.ndarray  # (k, D)
    wcss_history: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


@dataclass
class InstanceComponent:
    cluster_id: int
    members: np.ndarray  # (m, 2) patch (row, col) coordinates, row-major order

    @property
    def area(self) -> int:
        return len(self.members)


@dataclass
class GammaModel:
    """Isotropic detection noise, sigma growing linearly with range."""

    sigma_per_meter: float = 0.025
    sigma_floor: float = 0.01

    def covariance(self, range_m: float) -> np.ndarray:
        sigma = max(self.sigma_floor, self.sigma_per_meter * range_m)
        return np.eye(3) * sigma * sigma


@dataclass
class ObjectDetection:
    """Per-frame object measurement: latent centroid + sensor-frame point + covariance."""

    embedding: np.ndarray
    point: np.ndarray
    point_covariance: np.ndarray
    area: int = 0

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=float)
        self.point = np.asarray(self.point, dtype=float).reshape(3)
        self.point_covariance = np.asarray(self.point_covariance, dtype=float).reshape(3, 3)
        if not np.all(np.isfinite(self.embedding)) or np.linalg.norm(self.embedding) == 0.0:
            raise ValueError("embedding must be finite and non-zero")
        cov = self.point_covariance
        if np.abs(cov - cov.T).max() > 1e-9:
            raise ValueError("point covariance must be symmetric")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("point covariance must be positive definite") from exc


@dataclass
class SegmentationConfig:
    k: int = 6
    max_iters: int = 50
    seed: int = 0
    vote_threshold: float = 0.5
    attended_mass_fraction: float = 0.5
    opening_radius: int = 1
    min_size: int = 4
    connectivity: int = 8
    fx: float = 128.0
    fy: float = 128.0
    cx: float = 128.0
    cy: float = 128.0
    patch_size: int = 8
    gamma: GammaModel = field(default_factory=GammaModel)


def cluster_features(grid: FeatureGrid, k: int, max_iters: int = 50, seed: int = 0) -> ClusterMap:
    """Lloyd's algorithm over the flattened patch features, deterministic per seed.

    Runs until the assignment is a fixed point (or max_iters), so the returned
    centroids are exactly the means of their member features.
    """
    points = grid.features.reshape(-1, grid.dim)
    n = points.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"k={k} out of range for {n} patches")
    distinct = np.unique(points, axis=0).shape[0]
    if k > distinct:
        raise ValueError(f"k={k} exceeds {distinct} distinct feature vectors")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(points, k, rng)
    labels = _assign(points, centroids)
    wcss_history = [_wcss(points, centroids, labels)]

    for _ in range(max_iters):
        centroids = _update_centroids(points, labels, centroids, k)
        new_labels = _assign(points, centroids)
        wcss_history.append(_wcss(points, centroids, new_labels))
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels

    return ClusterMap(labels.reshape(grid.height, grid.width), centroids, wcss_history)


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a centroid; pick any distinct row
            centroids[i] = points[rng.integers(n)]
        else:
            centroids[i] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((points - centroids[i]) ** 2, axis=1))
    return centroids


def _assign(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = (
        np.sum(points * points, axis=1)[:, None]
        - 2.0 * points @ centroids.T
        + np.sum(centroids * centroids, axis=1)[None, :]
    )
    return np.argmin(d2, axis=1)


def _update_centroids(points, labels, centroids, k):
    out = centroids.copy()
    for c in range(k):
        mask = labels == c
        if mask.any():
            out[c] = points[mask].mean(axis=0)
        else:
            # deterministic reseed: point farthest from its current centroid
            d2 = np.sum((points - out[labels]) ** 2, axis=1)
            out[c] = points[int(np.argmax(d2))]
    return out


def _wcss(points, centroids, labels) -> float:
    return float(np.sum((points - centroids[labels]) ** 2))


def vote_saliency(clusters: ClusterMap, attention: np.ndarray, vote_threshold: float,
                  attended_mass_fraction: float = 0.5) -> set[int]:
    """Attention-head voting for foreground clusters.

    Per head, the patches holding the top `attended_mass_fraction` of the
    attention mass are attended (ties included, zero-attention patches never).
    A head votes for a cluster iff more than half of the cluster's patches are
    attended; a cluster is salient iff votes / heads > vote_threshold.
    """
    if not 0.0 <= vote_threshold <= 1.0:
        raise ValueError("vote_threshold must be in [0, 1]")
    labels = clusters.labels.ravel()
    k = clusters.k
    num_heads = attention.shape[0]
    cluster_sizes = np.bincount(labels, minlength=k)

    votes = np.zeros(k, dtype=int)
    for h in range(num_heads):
        w = attention[h].ravel()
        total = w.sum()
        if total <= 0:
            continue
        order = np.argsort(-w, kind="stable")
        csum = np.cumsum(w[order])
        cut = int(np.searchsorted(csum, attended_mass_fraction * total))
        cutoff_value = w[order[min(cut, len(order) - 1)]]
        attended = (w >= cutoff_value) & (w > 0)
        attended_per_cluster = np.bincount(labels[attended], minlength=k)
        votes += attended_per_cluster > 0.5 * cluster_sizes
    return {c for c in range(k) if cluster_sizes[c] > 0 and votes[c] / num_heads > vote_threshold}


def refine_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    """Morphological opening with a square structuring element of the given radius."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    mask = np.asarray(mask, dtype=bool)
    if radius == 0:
        return mask.copy()
    structure = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    eroded = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    return ndimage.binary_dilation(eroded, structure=structure, border_value=0)


_OFFSETS_4 = ((-1, 0), (1, 0), (0, -1), (0, 1))
_OFFSETS_8 = _OFFSETS_4 + ((-1, -1), (-1, 1), (1, -1), (1, 1))


def connected_components(mask: np.ndarray, connectivity: int = 8,
                         cluster_id: int = -1) -> list[InstanceComponent]:
    """Maximal connected sets of true patches, discovered in row-major order."""
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    offsets = _OFFSETS_4 if connectivity == 4 else _OFFSETS_8
    seen = np.zeros_like(mask)
    components = []
    for i in range(h):
        for j in range(w):
            if not mask[i, j] or seen[i, j]:
                continue
            stack = [(i, j)]
            seen[i, j] = True
            members = []
            while stack:
                r, c = stack.pop()
                members.append((r, c))
                for dr, dc in offsets:
                    nr, nc = r + dr, c + dc
                    if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] and not seen[nr, nc]:
                        seen[nr, nc] = True
                        stack.append((nr, nc))
            members = np.array(sorted(members), dtype=int)
            components.append(InstanceComponent(cluster_id, members))
    return components


def filter_components(components: list[InstanceComponent], min_size: int,
                      shape: tuple[int, int]) -> list[InstanceComponent]:
    """Drop components smaller than min_size or touching the grid border."""
    h, w = shape
    out = []
    for comp in components:
        if comp.area < min_size:
            continue
        rows, cols = comp.members[:, 0], comp.members[:, 1]
        if rows.min() == 0 or rows.max() == h - 1 or cols.min() == 0 or cols.max() == w - 1:
            continue
        out.append(comp)
    return out


def extract_objects(components: list[InstanceComponent], clusters: ClusterMap,
                    grid: FeatureGrid, fx: float, fy: float, cx: float, cy: float,
                    patch_size: int, gamma_model: GammaModel,
                    stats: dict | None = None) -> list[ObjectDetection]:
    """Dual centroid per component: cluster's latent centroid + back-projected point.

    Range is the median of valid member depths; components with no valid depth
    are dropped and counted in stats["dropped_no_depth"].
    """
    if fx <= 0 or fy <= 0:
        raise ValueError("intrinsics must be positive")
    detections = []
    for comp in components:
        rows = comp.members[:, 0].astype(float)
        cols = comp.members[:, 1].astype(float)
        depths = grid.depth[comp.members[:, 0], comp.members[:, 1]]
        valid = depths > 0
        if not valid.any():
            if stats is not None:
                stats["dropped_no_depth"] = stats.get("dropped_no_depth", 0) + 1
            continue
        z = float(np.median(depths[valid]))
        u = float((cols + 0.5).mean()) * patch_size
        v = float((rows + 0.5).mean()) * patch_size
        point = np.array([(u - cx) * z / fx, (v - cy) * z / fy, z])
        detections.append(ObjectDetection(
            embedding=clusters.centroids[comp.cluster_id].copy(),
            point=point,
            point_covariance=gamma_model.covariance(z),
            area=comp.area,
        ))
    return detections


def detect(grid: FeatureGrid, config: SegmentationConfig,
           stats: dict | None = None) -> list[ObjectDetection]:
    """Full per-frame extraction: cluster, vote, open, label, filter, back-project."""
    clusters = cluster_features(grid, config.k, config.max_iters, config.seed)
    salient = vote_saliency(clusters, grid.attention, config.vote_threshold,
                            config.attended_mass_fraction)
    detections = []
    for cid in sorted(salient):
        mask = clusters.labels == cid
        opened = refine_mask(mask, config.opening_radius)
        comps = connected_components(opened, config.connectivity, cluster_id=cid)
        comps = filter_components(comps, config.min_size, (grid.height, grid.width))
        detections.extend(extract_objects(
            comps, clusters, grid, config.fx, config.fy, config.cx, config.cy,
            config.patch_size, config.gamma, stats))
    return detections


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def save_feature_grid(path, grid: FeatureGrid) -> None:
    """Binary layout: magic FGRD, u32 H W D A, then f32 features/attention/depth."""
    header = np.array([grid.height, grid.width, grid.dim, grid.num_heads], dtype="<u4")
    with open(path, "wb") as f:
        f.write(FGRD_MAGIC)
        f.write(header.tobytes())
        f.write(grid.features.astype("<f4").tobytes())
        f.write(grid.attention.astype("<f4").tobytes())
        f.write(grid.depth.astype("<f4").tobytes())


def load_feature_grid(path) -> FeatureGrid:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != FGRD_MAGIC:
        raise DataFormatError(f"{path}: bad magic, expected FGRD")
    h, w, d, a = np.frombuffer(raw, dtype="<u4", count=4, offset=4)
    expect = 4 + 16 + 4 * (h * w * d + a * h * w + h * w)
    if len(raw) != expect:
        raise DataFormatError(f"{path}: truncated grid file ({len(raw)} != {expect} bytes)")
    offset = 20
    features = np.frombuffer(raw, dtype="<f4", count=h * w * d, offset=offset)
    offset += 4 * h * w * d
    attention = np.frombuffer(raw, dtype="<f4", count=a * h * w, offset=offset)
    offset += 4 * a * h * w
    depth = np.frombuffer(raw, dtype="<f4", count=h * w, offset=offset)
    return FeatureGrid(
        features.reshape(h, w, d).astype(float),
        attention.reshape(a, h, w).astype(float),
        depth.reshape(h, w).astype(float),
    )


def save_detections(path, detections: list[ObjectDetection], frame: int = 0) -> None:
    import json

    with open(path, "w") as f:
        for det in detections:
            f.write(json.dumps(detection_to_json(det, frame)) + "\n")


def detection_to_json(det: ObjectDetection, frame: int = 0) -> dict:
    return {
        "frame": frame,
        "embedding": [round(float(x), 9) for x in det.embedding],
        "point": [round(float(x), 9) for x in det.point],
        "cov": [round(float(x), 12) for x in det.point_covariance.ravel()],
        "area": int(det.area),
    }


def detection_from_json(obj: dict) -> ObjectDetection:
    try:
        return ObjectDetection(
            embedding=np.array(obj["embedding"], dtype=float),
            point=np.array(obj["point"], dtype=float),
            point_covariance=np.array(obj["cov"], dtype=float).reshape(3, 3),
            area=int(obj.get("area", 0)),
        )
    except (KeyError, ValueError) as exc:
        raise DataFormatError(f"bad detection record: {exc}") from exc
