"""Point-cloud geometry for segmented optic nerve head volumes.

Turns labeled voxel volumes into attribute-carrying 3D point clouds:
anterior-surface extraction with per-point tissue thickness, reference-plane
fitting and rigid alignment, cylindrical cropping, nearest-neighbor attribute
interpolation, and seeded resampling.

Conventions: volume arrays are indexed [x, y, z] with z the axial axis
(anterior surfaces sit at low z); a voxel's physical position is
index * spacing, in mm.  All operations are pure: inputs are never mutated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

TISSUE_NAMES = {
    0: "background",
    1: "rnfl_prelamina",
    2: "gcl_ipl",
    3: "other_retina",
    4: "rpe",
    5: "lamina_cribrosa",
}
N_TISSUE_CLASSES = 5

# Native scanner sampling: lateral within B-scan, between B-scans, axial (mm).
NATIVE_SPACING_MM = (0.0115, 0.0351, 0.00387)

DEFAULT_CROP_RADIUS_MM = 1.75
DEFAULT_KNN_K = 5

FRAME_RAW = "raw"
FRAME_ALIGNED = "bmo-aligned"


class GeometryError(ValueError):
    """Raised on degenerate geometric input (empty segmentation, bad plane...)."""


@dataclass(frozen=True)
class LabeledVolume:
    """Voxel grid with per-voxel tissue class and scan intensity.

    labels    : (nx, ny, nz) integer tissue classes, 0 = background
    intensity : (nx, ny, nz) scalar reflectivity
    spacing   : (dx, dy, dz) mm per voxel
    """

    labels: np.ndarray
    intensity: np.ndarray
    spacing: tuple

    def __post_init__(self):
        labels = np.asarray(self.labels)
        intensity = np.asarray(self.intensity)
        if labels.ndim != 3 or intensity.shape != labels.shape:
            raise ValueError("labels and intensity must be 3D arrays of equal shape")
        if min(labels.shape) < 2:
            raise ValueError("volume dims must all be >= 2")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError("spacing must be three positive lengths (mm)")
        if labels.min() < 0 or labels.max() > N_TISSUE_CLASSES:
            raise ValueError("labels outside the tissue-class set 0..5")
        if not np.all(np.isfinite(intensity)):
            raise ValueError("intensity contains non-finite values")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "intensity", intensity)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self):
        return self.labels.shape


@dataclass
class OnhPointCloud:
    """Points (mm) with per-point tissue class, thickness and optional strain.

    frame is FRAME_RAW for scanner coordinates and FRAME_ALIGNED after
    centering on the reference-plane center and rotating its normal to +z.
    """

    points: np.ndarray          # (n, 3) mm
    tissue: np.ndarray          # (n,) tissue class
    thickness: np.ndarray       # (n,) mm
    strain: np.ndarray | None = None
    frame: str = FRAME_RAW

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.tissue = np.asarray(self.tissue)
        self.thickness = np.asarray(self.thickness, dtype=np.float64)
        n = len(self.points)
        if n == 0:
            raise ValueError("point cloud is empty")
        if self.points.shape != (n, 3):
            raise ValueError("points must have shape (n, 3)")
        if self.tissue.shape != (n,) or self.thickness.shape != (n,):
            raise ValueError("per-point attributes must have shape (n,)")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")
        if np.any(self.thickness < 0):
            raise ValueError("thickness must be >= 0")
        if self.strain is not None:
            self.strain = np.asarray(self.strain, dtype=np.float64)
            if self.strain.shape != (n,):
                raise ValueError("strain must be present for every point or none")
            if np.any(self.strain < 0) or not np.all(np.isfinite(self.strain)):
                raise ValueError("strain values must be finite and >= 0")
        if self.frame not in (FRAME_RAW, FRAME_ALIGNED):
            raise ValueError(f"unknown frame tag {self.frame!r}")

    def __len__(self):
        return len(self.points)

    def take(self, idx):
        """New cloud restricted to (or reordered by) the given indices."""
        return OnhPointCloud(
            points=self.points[idx],
            tissue=self.tissue[idx],
            thickness=self.thickness[idx],
            strain=None if self.strain is None else self.strain[idx],
            frame=self.frame,
        )


@dataclass(frozen=True)
class BmoPlane:
    """Least-squares reference plane through the neural canal opening rim."""

    center: np.ndarray   # (3,) mm
    normal: np.ndarray   # (3,) unit vector, z-component >= 0

    def __post_init__(self):
        center = np.asarray(self.center, dtype=np.float64)
        normal = np.asarray(self.normal, dtype=np.float64)
        if center.shape != (3,) or normal.shape != (3,):
            raise ValueError("center and normal must be 3-vectors")
        if not np.all(np.isfinite(center)):
            raise ValueError("plane center must be finite")
        if abs(np.linalg.norm(normal) - 1.0) > 1e-12:
            raise ValueError("plane normal must be a unit vector")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "normal", normal)


def extract_point_cloud(vol: LabeledVolume) -> OnhPointCloud:
    """Anterior-boundary point cloud with per-point tissue thickness.

    For every (x, y) column and every tissue class present in it, the
    lowest-z voxel of that class becomes one point (position = index *
    spacing).  Its thickness is the minimum Euclidean distance to any
    posterior-boundary voxel (highest-z per column) of the same class,
    searched over all columns via a k-d tree.
    """
    labels = vol.labels
    nz = labels.shape[2]
    spacing = np.asarray(vol.spacing)
    classes = [c for c in range(1, N_TISSUE_CLASSES + 1) if np.any(labels == c)]
    if not classes:
        raise GeometryError("no labeled voxels")

    pts, tis, thk = [], [], []
    for c in classes:
        mask = labels == c
        has = mask.any(axis=2)
        ix, iy = np.nonzero(has)
        ant = mask.argmax(axis=2)[ix, iy]
        post = (nz - 1) - mask[:, :, ::-1].argmax(axis=2)[ix, iy]
        anterior = np.column_stack([ix, iy, ant]) * spacing
        posterior = np.column_stack([ix, iy, post]) * spacing
        dist, _ = cKDTree(posterior).query(anterior, k=1)
        pts.append(anterior)
        tis.append(np.full(len(ix), c, dtype=np.uint8))
        thk.append(dist)

    return OnhPointCloud(
        points=np.concatenate(pts),
        tissue=np.concatenate(tis),
        thickness=np.concatenate(thk),
        frame=FRAME_RAW,
    )


def fit_bmo_plane(points) -> BmoPlane:
    """Least-squares plane through a set of rim points.

    The normal is the singular direction of least variance of the centered
    point matrix, oriented so its z-component is >= 0.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or len(points) < 3:
        raise GeometryError("degenerate BMO ring: need at least 3 points")
    center = points.mean(axis=0)
    centered = points - center
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if s[1] <= 1e-10 * max(s[0], 1e-300):
        raise GeometryError("degenerate BMO ring: points are collinear")
    normal = vt[2]
    if normal[2] < 0:
        normal = -normal
    normal = normal / np.linalg.norm(normal)
    return BmoPlane(center=center, normal=normal)


def rotation_to_axial(normal) -> np.ndarray:
    """Minimal rotation matrix taking the given unit vector to (0, 0, 1).

    Rodrigues construction about normal x z.  The antiparallel case falls
    back to a half-turn about the x-axis.
    """
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    c = n[2]
    axis = np.array([n[1], -n[0], 0.0])  # n x z
    s = np.linalg.norm(axis)
    if s < 1e-15:
        if c > 0:
            return np.eye(3)
        return np.diag([1.0, -1.0, -1.0])  # half-turn about x
    axis = axis / s
    K = np.array([
        [0.0, -axis[2], axis[1]],
        [axis[2], 0.0, -axis[0]],
        [-axis[1], axis[0], 0.0],
    ])
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


def align_to_bmo(cloud: OnhPointCloud, plane: BmoPlane) -> OnhPointCloud:
    """Center the cloud on the plane center and rotate its normal to +z.

    Rigid transform: attributes are untouched, pairwise distances preserved.
    """
    if cloud.frame != FRAME_RAW:
        raise ValueError("cloud is already aligned")
    R = rotation_to_axial(plane.normal)
    moved = (cloud.points - plane.center) @ R.T
    return OnhPointCloud(
        points=moved,
        tissue=cloud.tissue.copy(),
        thickness=cloud.thickness.copy(),
        strain=None if cloud.strain is None else cloud.strain.copy(),
        frame=FRAME_ALIGNED,
    )


def cylindrical_crop(cloud: OnhPointCloud, radius_mm=DEFAULT_CROP_RADIUS_MM) -> OnhPointCloud:
    """Keep points with sqrt(x^2 + y^2) <= radius around the axial axis."""
    if cloud.frame != FRAME_ALIGNED:
        raise ValueError("cylindrical crop requires an aligned cloud")
    if radius_mm <= 0:
        raise ValueError("crop radius must be > 0")
    x, y = cloud.points[:, 0], cloud.points[:, 1]
    keep = np.sqrt(x * x + y * y) <= radius_mm
    if not np.any(keep):
        raise GeometryError("crop removed all points")
    return cloud.take(np.nonzero(keep)[0])


def knn_interpolate(query_points, sample_points, sample_values, k=DEFAULT_KNN_K):
    """Mean of the k nearest sample values for each query point.

    Distances are Euclidean; exact distance ties are broken by sample index
    order (stable sort).  If fewer than k samples exist, all are used.
    """
    query = np.asarray(query_points, dtype=np.float64)
    samples = np.asarray(sample_points, dtype=np.float64)
    values = np.asarray(sample_values, dtype=np.float64)
    if len(samples) == 0:
        raise ValueError("samples must be nonempty")
    if k < 1:
        raise ValueError("k must be >= 1")
    k_eff = min(int(k), len(samples))

    out = np.empty(len(query))
    chunk = max(1, int(2_000_000 // max(len(samples), 1)))
    for lo in range(0, len(query), chunk):
        q = query[lo:lo + chunk]
        d2 = ((q[:, None, :] - samples[None, :, :]) ** 2).sum(axis=2)
        idx = np.argsort(d2, axis=1, kind="stable")[:, :k_eff]
        out[lo:lo + chunk] = values[idx].mean(axis=1)
    return out


def resample(cloud: OnhPointCloud, n: int, rng: np.random.Generator) -> OnhPointCloud:
    """Uniform resampling to exactly n points.

    Without replacement when the cloud has at least n points, with
    replacement otherwise.  Deterministic for a given generator state.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    size = len(cloud)
    idx = rng.choice(size, size=n, replace=size < n)
    return cloud.take(idx)
