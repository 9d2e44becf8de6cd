"""Point-cloud data model and preprocessing.

Covers voxelization, normalization, space-filling-curve serialization,
grid pooling, perturbation injection, sparsity subsampling, synthetic
scene generation, and the line-oriented cloud file format.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .diffusion import PerturbSpec, sample_perturbation

CURVE_BITS = 21  # bits per axis; 63-bit keys
ORDERS = ("Z", "TransZ", "Hilbert", "TransHilbert")
_TRANS_AXES = (1, 2, 0)  # y, z, x interleaving for the Trans- variants


class ResolutionError(ValueError):
    """Grid too fine for the curve-key bit width."""


class GenerationError(ValueError):
    """A synthetic scene spec cannot be realized."""


class ParseError(ValueError):
    """A cloud file failed to parse."""


@dataclass
class PointCloud:
    positions: np.ndarray  # (N, 3) float
    features: np.ndarray  # (N, C) float
    labels: np.ndarray  # (N,) int, -1 = unlabeled
    offsets: np.ndarray  # strictly increasing batch boundaries, last == N
    num_classes: int = 0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.offsets = np.asarray(self.offsets, dtype=np.int64)
        n = len(self.positions)
        if self.positions.shape != (n, 3):
            raise ValueError(f"positions must be (N, 3), got {self.positions.shape}")
        if len(self.features) != n or len(self.labels) != n:
            raise ValueError("positions/features/labels row counts differ")
        if len(self.offsets) == 0 or self.offsets[-1] != n:
            raise ValueError(f"offsets must end at N={n}, got {self.offsets}")
        if np.any(np.diff(np.concatenate(([0], self.offsets))) <= 0):
            raise ValueError("offsets must be strictly increasing")
        if self.num_classes and np.any((self.labels < -1) | (self.labels >= self.num_classes)):
            raise ValueError(f"labels must lie in [-1, {self.num_classes})")

    @property
    def num_points(self) -> int:
        return len(self.positions)

    @property
    def num_batches(self) -> int:
        return len(self.offsets)

    def batch_index(self) -> np.ndarray:
        """Per-point batch element index."""
        return np.repeat(np.arange(self.num_batches), self.batch_sizes())

    def batch_sizes(self) -> np.ndarray:
        return np.diff(np.concatenate(([0], self.offsets)))

    def copy(self) -> "PointCloud":
        return PointCloud(self.positions.copy(), self.features.copy(),
                          self.labels.copy(), self.offsets.copy(), self.num_classes)


@dataclass(frozen=True)
class SerializedOrder:
    order: str
    permutation: np.ndarray  # bijection on [0, N)
    codes: np.ndarray  # curve keys, one per point


@dataclass(frozen=True)
class PoolingMap:
    parent: np.ndarray  # (N,) fine index -> coarse cell
    counts: np.ndarray  # (M,) members per cell
    stride: int = 1

    @property
    def num_cells(self) -> int:
        return len(self.counts)


@dataclass(frozen=True)
class NormalizationRecord:
    center: np.ndarray  # (B, 3)
    scale: np.ndarray  # (B,)


@dataclass(frozen=True)
class SceneSpec:
    num_points: int = 2048
    num_classes: int = 4
    extent: tuple[float, float, float] = (4.0, 4.0, 2.5)
    num_blobs: int = 4
    blob_radius: float = 0.4
    feature_noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.num_points <= 0:
            raise GenerationError(f"num_points must be > 0, got {self.num_points}")
        if self.num_classes < 2:
            raise GenerationError(f"num_classes must be >= 2, got {self.num_classes}")


# ---------------------------------------------------------------------------
# Space-filling-curve serialization


def _interleave_bits(coords: np.ndarray, bits: int, msb_axes=(2, 1, 0)) -> np.ndarray:
    """Interleave per-axis bits into one key; msb_axes lists columns from most
    to least significant within each bit group.  The default gives Morton keys
    with x in the lowest bit, so (0,0,0),(1,0,0),(0,1,0),(1,1,0) -> 0,1,2,3."""
    key = np.zeros(len(coords), dtype=np.uint64)
    c = coords.astype(np.uint64)
    for b in range(bits - 1, -1, -1):
        for d in msb_axes:
            key = (key << np.uint64(1)) | ((c[:, d] >> np.uint64(b)) & np.uint64(1))
    return key


def _hilbert_transpose(coords: np.ndarray, bits: int) -> np.ndarray:
    """Axes -> transposed Hilbert form (Skilling's algorithm, vectorized)."""
    x = coords.astype(np.uint64).copy()
    n = 3
    q = np.uint64(1 << (bits - 1))
    one = np.uint64(1)
    while q > one:
        p = np.uint64(q - one)
        for i in range(n):
            hi = (x[:, i] & q) != 0
            x[hi, 0] ^= p
            lo = ~hi
            t = (x[lo, 0] ^ x[lo, i]) & p
            x[lo, 0] ^= t
            x[lo, i] ^= t
        q >>= one
    for i in range(1, n):
        x[:, i] ^= x[:, i - 1]
    t = np.zeros(len(x), dtype=np.uint64)
    q = np.uint64(1 << (bits - 1))
    while q > one:
        hi = (x[:, n - 1] & q) != 0
        t[hi] ^= np.uint64(q - one)
        q >>= one
    for i in range(n):
        x[:, i] ^= t
    return x


def _curve_keys(coords: np.ndarray, order: str) -> np.ndarray:
    if order not in ORDERS:
        raise ValueError(f"unknown serialization order: {order!r}")
    if coords.min() < 0:
        raise ValueError("grid coordinates must be nonnegative")
    if coords.max() >= (1 << CURVE_BITS):
        raise ResolutionError(
            f"grid coordinate {coords.max()} exceeds {CURVE_BITS}-bit curve keys; "
            "use a coarser serialization grid")
    if order.startswith("Trans"):
        coords = coords[:, _TRANS_AXES]
    if order.endswith("Hilbert"):
        # Skilling's transposed form puts the most significant bits in column 0.
        coords = _hilbert_transpose(coords, CURVE_BITS)
        return _interleave_bits(coords, CURVE_BITS, msb_axes=(0, 1, 2))
    return _interleave_bits(coords, CURVE_BITS)


def serialize(cloud: PointCloud, order: str, grid: float) -> SerializedOrder:
    """Stable per-batch sort of points along a space-filling curve."""
    if grid <= 0:
        raise ValueError(f"serialization grid must be > 0, got {grid}")
    codes = np.zeros(cloud.num_points, dtype=np.uint64)
    perm = np.zeros(cloud.num_points, dtype=np.int64)
    start = 0
    for end in cloud.offsets:
        pos = cloud.positions[start:end]
        q = np.floor((pos - pos.min(axis=0)) / grid).astype(np.int64)
        keys = _curve_keys(q, order)
        codes[start:end] = keys
        perm[start:end] = start + np.argsort(keys, kind="stable")
        start = int(end)
    return SerializedOrder(order=order, permutation=perm, codes=codes)


def neighbor_rank_distance(positions: np.ndarray, order: str, grid: float) -> float:
    """Mean rank distance along a serialized order between each point and its
    3D nearest neighbor.  The order is treated as a closed loop (distance is
    min(d, N - d)) so the measure reflects how well the curve keeps spatial
    neighbors together, independent of where the traversal starts and ends.
    """
    pos = np.asarray(positions, dtype=np.float64)
    n = len(pos)
    if n < 2:
        raise ValueError("need at least two points")
    q = np.floor((pos - pos.min(axis=0)) / grid).astype(np.int64)
    keys = _curve_keys(q, order)
    rank = np.empty(n, dtype=np.int64)
    rank[np.argsort(keys, kind="stable")] = np.arange(n)
    d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    nn = d2.argmin(axis=1)
    d = np.abs(rank - rank[nn])
    return float(np.minimum(d, n - d).mean())


# ---------------------------------------------------------------------------
# Voxel grid pooling


def _grid_cells(positions: np.ndarray, batch: np.ndarray, voxel_size: float):
    """Map points to sorted unique (batch, voxel) cells."""
    q = np.floor(positions / voxel_size).astype(np.int64)
    q -= q.min(axis=0) if len(q) else 0
    keys = np.stack([batch, q[:, 0], q[:, 1], q[:, 2]], axis=1)
    uniq, parent, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    return uniq, parent.astype(np.int64), counts.astype(np.int64)


def build_pooling_map(positions: np.ndarray, offsets: np.ndarray,
                      voxel_size: float, stride: int = 1):
    """PoolingMap plus coarse mean positions and offsets for one grid level."""
    batch = np.repeat(np.arange(len(offsets)), np.diff(np.concatenate(([0], offsets))))
    uniq, parent, counts = _grid_cells(positions, batch, voxel_size)
    m = len(counts)
    coarse_pos = np.zeros((m, 3))
    np.add.at(coarse_pos, parent, positions)
    coarse_pos /= counts[:, None]
    coarse_offsets = np.cumsum(np.bincount(uniq[:, 0], minlength=len(offsets)))
    return PoolingMap(parent=parent, counts=counts, stride=stride), coarse_pos, coarse_offsets


def voxelize(cloud: PointCloud, voxel_size: float) -> tuple[PointCloud, PoolingMap]:
    """One point per occupied voxel: mean position/features, majority label."""
    if voxel_size <= 0:
        raise ValueError(f"voxel_size must be > 0, got {voxel_size}")
    if cloud.num_points == 0:
        return cloud.copy(), PoolingMap(parent=np.zeros(0, dtype=np.int64),
                                        counts=np.zeros(0, dtype=np.int64))
    pmap, coarse_pos, coarse_offsets = build_pooling_map(
        cloud.positions, cloud.offsets, voxel_size)
    m = pmap.num_cells
    feats = np.zeros((m, cloud.features.shape[1]))
    np.add.at(feats, pmap.parent, cloud.features)
    feats /= pmap.counts[:, None]

    # Majority label, lowest-class-id tie-break; all-unlabeled cells stay -1.
    k = max(int(cloud.labels.max()) + 1, 1)
    votes = np.zeros((m, k), dtype=np.int64)
    labeled = cloud.labels >= 0
    np.add.at(votes, (pmap.parent[labeled], cloud.labels[labeled]), 1)
    labels = np.where(votes.sum(axis=1) > 0, votes.argmax(axis=1), -1)

    out = PointCloud(coarse_pos, feats, labels, coarse_offsets, cloud.num_classes)
    return out, pmap


def grid_pool(features: np.ndarray, pmap: PoolingMap, mode: str = "mean") -> np.ndarray:
    if len(features) != len(pmap.parent):
        raise ValueError(f"features rows {len(features)} != map size {len(pmap.parent)}")
    m, c = pmap.num_cells, features.shape[1]
    if mode == "mean":
        out = np.zeros((m, c), dtype=features.dtype)
        np.add.at(out, pmap.parent, features)
        return out / pmap.counts[:, None]
    if mode == "max":
        out = np.full((m, c), -np.inf, dtype=features.dtype)
        np.maximum.at(out, pmap.parent, features)
        return out
    raise ValueError(f"unknown pooling mode: {mode!r}")


def grid_unpool(coarse: np.ndarray, pmap: PoolingMap) -> np.ndarray:
    if len(coarse) != pmap.num_cells:
        raise ValueError(f"coarse rows {len(coarse)} != cell count {pmap.num_cells}")
    return coarse[pmap.parent]


# ---------------------------------------------------------------------------
# Normalization and perturbation


def normalize(cloud: PointCloud) -> tuple[PointCloud, NormalizationRecord]:
    """Center and scale each batch element into the unit cube."""
    out = cloud.copy()
    centers = np.zeros((cloud.num_batches, 3))
    scales = np.zeros(cloud.num_batches)
    start = 0
    for i, end in enumerate(cloud.offsets):
        pos = cloud.positions[start:end]
        lo, hi = pos.min(axis=0), pos.max(axis=0)
        centers[i] = (lo + hi) / 2.0
        scales[i] = max(float((hi - lo).max()), 1e-12)
        out.positions[start:end] = (pos - centers[i]) / scales[i]
        start = int(end)
    return out, NormalizationRecord(center=centers, scale=scales)


def denormalize(cloud: PointCloud, record: NormalizationRecord) -> PointCloud:
    out = cloud.copy()
    start = 0
    for i, end in enumerate(cloud.offsets):
        out.positions[start:end] = cloud.positions[start:end] * record.scale[i] + record.center[i]
        start = int(end)
    return out


def perturb(cloud: PointCloud, spec: PerturbSpec, rng: np.random.Generator,
            perturb_features: bool = False) -> PointCloud:
    """Add family noise to positions (and optionally features); labels untouched."""
    out = cloud.copy()
    out.positions += sample_perturbation(spec, out.positions.shape, rng)
    if perturb_features:
        out.features += sample_perturbation(spec, out.features.shape, rng)
    return out


def subsample_dataset(scenes: list, fraction: float, rng: np.random.Generator) -> list:
    """Uniform without-replacement scene selection; order-preserving."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return list(scenes)
    keep = max(1, int(round(fraction * len(scenes))))
    idx = np.sort(rng.choice(len(scenes), size=keep, replace=False))
    return [scenes[i] for i in idx]


# ---------------------------------------------------------------------------
# Synthetic scenes

# Fixed, well-separated pseudo-color palette (repeats after 8 classes).
_PALETTE = np.array([
    [0.85, 0.35, 0.10], [0.15, 0.45, 0.85], [0.20, 0.75, 0.25], [0.90, 0.80, 0.15],
    [0.70, 0.20, 0.75], [0.10, 0.75, 0.75], [0.95, 0.50, 0.60], [0.45, 0.45, 0.45],
])


def _class_color(k: int) -> np.ndarray:
    return _PALETTE[k % len(_PALETTE)]


def synth_scene(spec: SceneSpec, rng: np.random.Generator) -> PointCloud:
    """A room: floor (class 0), walls (class 1), ellipsoid blobs (2..K-1)."""
    wx, wy, wz = spec.extent
    needed_blobs = max(spec.num_classes - 2, 0)
    if spec.num_blobs < needed_blobs:
        raise GenerationError(
            f"{spec.num_classes} classes need >= {needed_blobs} blobs, got {spec.num_blobs}")
    margin = 2.0 * spec.blob_radius
    if spec.num_blobs > 0 and (wx <= 2 * margin or wy <= 2 * margin or wz <= 2 * margin):
        raise GenerationError(
            f"blobs of radius {spec.blob_radius} do not fit in extent {spec.extent}")

    n = spec.num_points
    n_blob_total = n // 3 if spec.num_blobs else 0
    n_floor = (n - n_blob_total) // 2
    n_wall = n - n_blob_total - n_floor

    pos, nrm, lab = [], [], []

    # Floor: z = 0 plane.
    fp = np.column_stack([rng.uniform(0, wx, n_floor), rng.uniform(0, wy, n_floor),
                          np.zeros(n_floor)])
    pos.append(fp)
    nrm.append(np.tile([0.0, 0.0, 1.0], (n_floor, 1)))
    lab.append(np.zeros(n_floor, dtype=np.int64))

    # Four walls, inward normals.
    side = rng.integers(0, 4, n_wall)
    u = rng.uniform(0, 1, n_wall)
    z = rng.uniform(0, wz, n_wall)
    wp = np.zeros((n_wall, 3))
    wn = np.zeros((n_wall, 3))
    wp[side == 0] = np.column_stack([u[side == 0] * wx, np.zeros((side == 0).sum()), z[side == 0]])
    wn[side == 0] = [0, 1, 0]
    wp[side == 1] = np.column_stack([u[side == 1] * wx, np.full((side == 1).sum(), wy), z[side == 1]])
    wn[side == 1] = [0, -1, 0]
    wp[side == 2] = np.column_stack([np.zeros((side == 2).sum()), u[side == 2] * wy, z[side == 2]])
    wn[side == 2] = [1, 0, 0]
    wp[side == 3] = np.column_stack([np.full((side == 3).sum(), wx), u[side == 3] * wy, z[side == 3]])
    wn[side == 3] = [-1, 0, 0]
    pos.append(wp)
    nrm.append(wn)
    lab.append(np.ones(n_wall, dtype=np.int64))

    # Ellipsoid blobs cycling through classes 2..K-1.
    if spec.num_blobs:
        per_blob = np.full(spec.num_blobs, n_blob_total // spec.num_blobs)
        per_blob[: n_blob_total - per_blob.sum()] += 1
        for b in range(spec.num_blobs):
            cls = 2 + b % max(spec.num_classes - 2, 1) if spec.num_classes > 2 else 1
            center = np.array([rng.uniform(margin, wx - margin),
                               rng.uniform(margin, wy - margin),
                               rng.uniform(margin, wz - margin)])
            axes = spec.blob_radius * rng.uniform(0.6, 1.0, 3)
            m = int(per_blob[b])
            d = rng.standard_normal((m, 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            bp = center + d * axes
            bn = d / axes  # gradient of the ellipsoid implicit function
            bn /= np.linalg.norm(bn, axis=1, keepdims=True)
            pos.append(bp)
            nrm.append(bn)
            lab.append(np.full(m, cls, dtype=np.int64))

    positions = np.concatenate(pos)
    normals = np.concatenate(nrm)
    labels = np.concatenate(lab)
    colors = np.stack([_class_color(k) for k in labels])
    if spec.feature_noise > 0:
        colors = colors + rng.normal(0.0, spec.feature_noise, colors.shape)
    colors = np.clip(colors, 0.0, 1.0)
    features = np.concatenate([colors, normals], axis=1)
    return PointCloud(positions, features, labels, np.array([len(positions)]),
                      spec.num_classes)


# ---------------------------------------------------------------------------
# File I/O: `cdseg v1 <N> <K> <C>` header + one point per line.


def save_cloud(cloud: PointCloud, path) -> None:
    if cloud.num_batches != 1:
        raise ValueError("cloud files hold a single batch element")
    path = Path(path)
    c = cloud.features.shape[1]
    with path.open("w", encoding="utf-8") as f:
        f.write(f"cdseg v1 {cloud.num_points} {cloud.num_classes} {c}\n")
        for i in range(cloud.num_points):
            row = np.concatenate([cloud.positions[i], cloud.features[i]])
            f.write(" ".join(f"{v:.17g}" for v in row))
            f.write(f" {cloud.labels[i]}\n")


def load_cloud(path) -> PointCloud:
    path = Path(path)
    with path.open("r", encoding="utf-8") as f:
        header = f.readline().split()
        if len(header) != 5 or header[0] != "cdseg" or header[1] != "v1":
            raise ParseError(f"{path}:1: bad header {' '.join(header)!r}")
        try:
            n, k, c = int(header[2]), int(header[3]), int(header[4])
        except ValueError as exc:
            raise ParseError(f"{path}:1: non-integer header field") from exc
        positions = np.zeros((n, 3))
        features = np.zeros((n, c))
        labels = np.zeros(n, dtype=np.int64)
        for i in range(n):
            parts = f.readline().split()
            if len(parts) != 3 + c + 1:
                raise ParseError(f"{path}:{i + 2}: expected {4 + c} fields, got {len(parts)}")
            vals = [float(p) for p in parts[:-1]]
            positions[i] = vals[:3]
            features[i] = vals[3:]
            labels[i] = int(parts[-1])
    return PointCloud(positions, features, labels, np.array([n]), k)


def save_dataset(scenes: list[PointCloud], splits: list[str], outdir) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (scene, split) in enumerate(zip(scenes, splits)):
        name = f"scene_{i:04d}.cdseg"
        save_cloud(scene, outdir / name)
        lines.append(f"{name} {split}\n")
    (outdir / "manifest.txt").write_text("".join(lines), encoding="utf-8")


def load_dataset(path, split: str | None = None) -> list[PointCloud]:
    path = Path(path)
    manifest = path / "manifest.txt"
    if not manifest.exists():
        raise ParseError(f"missing manifest: {manifest}")
    scenes = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        name, tag = line.split()
        if split is None or tag == split:
            scenes.append(load_cloud(path / name))
    return scenes


def concat_clouds(clouds: list[PointCloud]) -> PointCloud:
    """Batch several single-element clouds into one with offsets."""
    sizes = [c.num_points for c in clouds]
    offsets = np.cumsum(sizes)
    return PointCloud(
        np.concatenate([c.positions for c in clouds]),
        np.concatenate([c.features for c in clouds]),
        np.concatenate([c.labels for c in clouds]),
        offsets,
        max(c.num_classes for c in clouds),
    )
