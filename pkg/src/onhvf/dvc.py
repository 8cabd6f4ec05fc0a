"""Volume-correlation displacement tracking and strain derivation.

Estimates the 3D displacement field between a baseline and a deformed volume
by normalized cross-correlation of intensity blocks on a regular node grid,
with separable quadratic sub-voxel refinement, then differentiates the field
into infinitesimal strain tensors and a scalar effective strain per node.

Displacements are stored in voxels on a grid of block centers (voxel
coordinates); strain is computed in physical units via the voxel spacing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import gaussian_filter

from .geometry import DEFAULT_KNN_K, LabeledVolume, OnhPointCloud, knn_interpolate

DEFAULT_BLOCK = 11
DEFAULT_STRIDE = 5
DEFAULT_SEARCH = 3
DEFAULT_SMOOTH_SIGMA = 1.5
DEFAULT_MIN_CONFIDENCE = 0.3

# Sentinel below any admissible correlation value; marks untextured candidates.
_NCC_INVALID = -2.0


class DvcError(ValueError):
    """Raised on invalid correlation geometry (block exceeds volume, ...)."""


@dataclass
class DisplacementField:
    """Per-node displacement vectors (voxels) on a regular grid of block centers.

    origin/step are voxel coordinates of the first node and the node pitch;
    confidence holds the correlation peak value in [-1, 1].
    """

    origin: np.ndarray        # (3,) voxel coords of first node
    step: np.ndarray          # (3,) node pitch in voxels
    spacing: tuple            # (dx, dy, dz) mm per voxel of the source volumes
    vectors: np.ndarray       # (gx, gy, gz, 3) displacement in voxels
    confidence: np.ndarray    # (gx, gy, gz) NCC peak value

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.step = np.asarray(self.step, dtype=np.float64)
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        if self.vectors.ndim != 4 or self.vectors.shape[3] != 3:
            raise ValueError("vectors must have shape (gx, gy, gz, 3)")
        if self.confidence.shape != self.vectors.shape[:3]:
            raise ValueError("confidence must match the node grid")
        if np.any(self.step <= 0):
            raise ValueError("grid step must be > 0")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("displacement vectors must be finite")
        if np.any(self.confidence < -1) or np.any(self.confidence > 1):
            raise ValueError("confidence must lie in [-1, 1]")

    @property
    def grid_shape(self):
        return self.vectors.shape[:3]

    def node_centers_vox(self):
        """Node center coordinates, (gx, gy, gz, 3) in voxels."""
        axes = [self.origin[a] + self.step[a] * np.arange(self.grid_shape[a])
                for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def node_centers_mm(self):
        return self.node_centers_vox() * np.asarray(self.spacing)


@dataclass
class StrainField:
    """Symmetric strain tensors and effective strain on a displacement grid."""

    origin: np.ndarray
    step: np.ndarray
    spacing: tuple
    tensors: np.ndarray       # (gx, gy, gz, 3, 3) symmetric
    effective: np.ndarray     # (gx, gy, gz) >= 0

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.step = np.asarray(self.step, dtype=np.float64)
        self.tensors = np.asarray(self.tensors, dtype=np.float64)
        self.effective = np.asarray(self.effective, dtype=np.float64)
        if self.tensors.ndim != 5 or self.tensors.shape[3:] != (3, 3):
            raise ValueError("tensors must have shape (gx, gy, gz, 3, 3)")
        if self.effective.shape != self.tensors.shape[:3]:
            raise ValueError("effective must match the node grid")
        if np.any(self.effective < 0):
            raise ValueError("effective strain must be >= 0")

    @property
    def grid_shape(self):
        return self.tensors.shape[:3]

    def node_centers_mm(self):
        axes = [self.origin[a] + self.step[a] * np.arange(self.grid_shape[a])
                for a in range(3)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        return grid * np.asarray(self.spacing)


def _triple(v, name):
    arr = np.broadcast_to(np.asarray(v, dtype=np.int64), (3,)).copy()
    if np.any(arr < 1):
        raise ValueError(f"{name} must be >= 1 per axis")
    return arr


def _quadratic_peak_offset(c_minus, c0, c_plus):
    """Vertex of the parabola through (-1, c-), (0, c0), (+1, c+), clamped to [-0.5, 0.5]."""
    denom = c_plus + c_minus - 2.0 * c0
    if denom >= 0:
        return 0.0
    delta = (c_minus - c_plus) / (2.0 * denom)
    return float(np.clip(delta, -0.5, 0.5))


def block_match(ref: LabeledVolume, deformed: LabeledVolume,
                block=DEFAULT_BLOCK, stride=DEFAULT_STRIDE,
                search=DEFAULT_SEARCH) -> DisplacementField:
    """Displacement field maximizing block-wise normalized cross-correlation.

    For every grid node the integer displacement maximizing NCC of the
    intensity block over the +-search window is refined to sub-voxel
    precision by a separable quadratic fit around the peak.  Refinement is
    skipped at exact-match peaks (NCC == 1) so that identical volumes and
    pure integer shifts are recovered exactly.  Blocks without intensity
    variance get vector (0,0,0) and confidence 0.

    Each block is normalized to zero mean before correlation, which also
    removes block-wise intensity offsets between the two scans.
    """
    if ref.dims != deformed.dims or ref.spacing != deformed.spacing:
        raise DvcError("volumes must share dims and spacing")
    block = _triple(block, "block")
    stride = _triple(stride, "stride")
    search = _triple(search, "search")
    if np.any(block < 5):
        raise DvcError("block must be >= 5 voxels per axis")
    dims = np.asarray(ref.dims)
    if np.any(block > dims):
        raise DvcError("block exceeds volume")

    I = np.ascontiguousarray(ref.intensity, dtype=np.float32)
    J = np.ascontiguousarray(deformed.intensity, dtype=np.float32)

    starts = [np.arange(0, dims[a] - block[a] + 1, stride[a]) for a in range(3)]
    gshape = tuple(len(s) for s in starts)
    vectors = np.zeros(gshape + (3,))
    confidence = np.zeros(gshape)

    # All candidate block positions in the deformed volume, as one view.
    windows = sliding_window_view(J, tuple(block))
    wdims = np.asarray(windows.shape[:3])
    nblock = int(np.prod(block))

    for gi, x0 in enumerate(starts[0]):
        for gj, y0 in enumerate(starts[1]):
            for gk, z0 in enumerate(starts[2]):
                p0 = np.array([x0, y0, z0])
                a = I[x0:x0 + block[0], y0:y0 + block[1], z0:z0 + block[2]]
                a = np.ascontiguousarray(a).reshape(1, nblock)
                a_c = a - a.mean(axis=1)[:, None]
                d_ref = np.einsum("ij,ij->i", a_c, a_c)[0]
                if d_ref == 0:
                    continue  # untextured block: zero vector, zero confidence

                lo = np.maximum(p0 - search, 0)
                hi = np.minimum(p0 + search, wdims - 1)
                region = windows[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1]
                off_shape = region.shape[:3]
                w = region.reshape(-1, nblock)
                w_c = w - w.mean(axis=1)[:, None]
                num = np.einsum("ij,ij->i", w_c, np.broadcast_to(a_c, w_c.shape))
                d_def = np.einsum("ij,ij->i", w_c, w_c)
                with np.errstate(invalid="ignore", divide="ignore"):
                    ncc = num / np.sqrt(d_ref * d_def)
                ncc = np.where(d_def > 0, np.clip(ncc, -1.0, 1.0), _NCC_INVALID)

                flat_peak = int(np.argmax(ncc))
                peak = np.array(np.unravel_index(flat_peak, off_shape))
                c0 = float(ncc[flat_peak])
                if c0 == _NCC_INVALID:
                    continue  # nothing to correlate against
                disp = (lo + peak - p0).astype(np.float64)

                ncc = ncc.reshape(off_shape)
                if c0 < 1.0:
                    for axis in range(3):
                        if 0 < peak[axis] < off_shape[axis] - 1:
                            sel_m = list(peak); sel_m[axis] -= 1
                            sel_p = list(peak); sel_p[axis] += 1
                            cm = float(ncc[tuple(sel_m)])
                            cp = float(ncc[tuple(sel_p)])
                            if cm > _NCC_INVALID and cp > _NCC_INVALID:
                                disp[axis] += _quadratic_peak_offset(cm, c0, cp)

                vectors[gi, gj, gk] = disp
                confidence[gi, gj, gk] = c0

    origin = (block - 1) / 2.0 + np.array([starts[0][0], starts[1][0], starts[2][0]])
    return DisplacementField(
        origin=origin,
        step=stride.astype(np.float64),
        spacing=ref.spacing,
        vectors=vectors,
        confidence=confidence,
    )


def fill_low_confidence(field: DisplacementField,
                        min_confidence=DEFAULT_MIN_CONFIDENCE) -> DisplacementField:
    """Replace vectors at weakly correlated nodes by neighbor interpolation.

    Nodes with confidence below the threshold take the mean displacement of
    their 5 nearest confident nodes; if no node is confident, the field is
    zeroed.  Confidence values are kept as measured.
    """
    conf = field.confidence
    bad = conf < min_confidence
    if not np.any(bad):
        return field
    vectors = field.vectors.copy()
    centers = field.node_centers_vox().reshape(-1, 3)
    flat = vectors.reshape(-1, 3)
    good = ~bad.reshape(-1)
    if not np.any(good):
        flat[:] = 0.0
    else:
        bad_idx = np.nonzero(~good)[0]
        for comp in range(3):
            flat[bad_idx, comp] = knn_interpolate(
                centers[bad_idx], centers[good], flat[good, comp], k=5)
    return DisplacementField(
        origin=field.origin, step=field.step, spacing=field.spacing,
        vectors=flat.reshape(field.vectors.shape), confidence=conf.copy(),
    )


def smooth_displacement(field: DisplacementField, sigma) -> DisplacementField:
    """Per-component Gaussian smoothing over the node lattice.

    sigma is in node units, the kernel is truncated at 3 sigma and boundaries
    reflect; sigma = 0 returns the field unchanged.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return field
    vectors = np.empty_like(field.vectors)
    for comp in range(3):
        vectors[..., comp] = gaussian_filter(
            field.vectors[..., comp], sigma=sigma, mode="reflect", truncate=3.0)
    return DisplacementField(
        origin=field.origin, step=field.step, spacing=field.spacing,
        vectors=vectors, confidence=field.confidence.copy(),
    )


def effective_strain(eps) -> np.ndarray:
    """Deviatoric (von Mises equivalent) strain magnitude.

    e_eff = sqrt(2/3 * dev(eps) : dev(eps)); zero exactly for hydrostatic
    tensors, positive for any tensile/compressive/shear deviation, and
    invariant under rotation of eps.  Accepts a single 3x3 tensor or an
    (..., 3, 3) stack.
    """
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape[-2:] != (3, 3):
        raise ValueError("strain tensors must be (..., 3, 3)")
    tr = np.trace(eps, axis1=-2, axis2=-1)
    dev = eps - tr[..., None, None] / 3.0 * np.eye(3)
    mag2 = np.einsum("...ij,...ij->...", dev, dev)
    out = np.sqrt(2.0 / 3.0 * mag2)
    return out if out.ndim else float(out)


def strain_tensor(field: DisplacementField, spacing=None) -> StrainField:
    """Infinitesimal strain tensors from a displacement field.

    The displacement gradient is taken by central differences on the node
    grid (one-sided at boundaries) in physical units; the symmetric part is
    the strain, and the effective scalar is attached per node.
    """
    if min(field.grid_shape) < 3:
        raise ValueError("need >= 3 nodes per axis to differentiate")
    spacing = np.asarray(field.spacing if spacing is None else spacing, dtype=np.float64)
    step_mm = field.step * spacing
    u_mm = field.vectors * spacing  # per-component voxel -> mm

    gshape = field.grid_shape
    H = np.empty(gshape + (3, 3))
    for i in range(3):
        grads = np.gradient(u_mm[..., i], step_mm[0], step_mm[1], step_mm[2], edge_order=1)
        for j in range(3):
            H[..., i, j] = grads[j]
    eps = 0.5 * (H + np.swapaxes(H, -1, -2))
    return StrainField(
        origin=field.origin, step=field.step, spacing=tuple(spacing),
        tensors=eps, effective=effective_strain(eps),
    )


def attach_strain(cloud: OnhPointCloud, strain: StrainField, k=DEFAULT_KNN_K,
                  transform=None) -> OnhPointCloud:
    """Attach per-point effective strain interpolated from the node grid.

    Each point takes the mean effective strain of its k nearest nodes (node
    centers converted to mm).  `transform`, when given as (R, center_mm),
    maps node centers into the cloud's frame first; cloud and nodes must
    share a frame either way.
    """
    if strain.effective.size == 0:
        raise ValueError("strain field is empty")
    centers = strain.node_centers_mm().reshape(-1, 3)
    if transform is not None:
        R, center = transform
        centers = (centers - np.asarray(center)) @ np.asarray(R).T
    values = knn_interpolate(cloud.points, centers, strain.effective.reshape(-1), k=k)
    return OnhPointCloud(
        points=cloud.points.copy(),
        tissue=cloud.tissue.copy(),
        thickness=cloud.thickness.copy(),
        strain=values,
        frame=cloud.frame,
    )
