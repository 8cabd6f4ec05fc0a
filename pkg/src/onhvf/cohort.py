"""Synthetic nerve-head cohorts with a planted biomechanics-function link.

Generates per-subject phantom scan pairs (baseline + deformed under elevated
pressure), the canal-rim point ring, an analytic ground-truth displacement
field, and 52-point visual-field labels whose defect probability is driven
by sector-mean tissue strain and thickness.  Because the strain amplitudes
are drawn independently of the thickness pattern, a predictor that ignores
the strain channel faces a strictly harder task: the direction of the
strain-vs-no-strain comparison is guaranteed by construction, only its size
is measured.

Everything is deterministic per (spec, seed); subject streams are derived by
seed-splitting.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .dvc import effective_strain
from .geometry import (
    FRAME_ALIGNED,
    LabeledVolume,
    OnhPointCloud,
    align_to_bmo,
    cylindrical_crop,
    extract_point_cloud,
    fit_bmo_plane,
)
from .visualfield import (
    N_VF_POINTS,
    SECTOR_CENTERS_RAD,
    SECTOR_OF_POINT,
    VisualFieldMap,
    sector_of_angle,
)

MD_DB_FLOOR = -25.2
MD_DB_CEIL = -1.8

BACKGROUND_INTENSITY = 0.10
_CLASS_INTENSITY = {0: BACKGROUND_INTENSITY, 1: 0.62, 2: 0.33, 3: 0.47, 4: 0.78, 5: 0.68}
_TEXTURE_SD = 0.05
_TEXTURE_SMOOTH_VOX = 1.1

MAX_WARP_VOX = 4.0

N_BMO_RING_POINTS = 24


@dataclass(frozen=True)
class LabelCoefficients:
    """Weights of the planted defect-probability model (not physiology).

    Calibrated so the strain term dominates the logit spread (the zeroed
    channel costs real accuracy) and scores are bimodal enough that label
    sampling noise does not cap every predictor.
    """

    alpha: float = 450.0    # sector-mean effective strain
    beta: float = 50.0      # sector-mean nerve-fiber thickness (mm)
    gamma: float = 3.5      # normalized severity in [0, 1]
    bias: float = -3.2
    noise_sd: float = 0.35


@dataclass(frozen=True)
class CohortSpec:
    """Knobs of the synthetic cohort generator."""

    n_subjects: int = 120
    seed: int = 0
    dims: tuple = (56, 56, 48)
    spacing_mm: tuple = (0.07, 0.07, 0.016)
    md_range_db: tuple = (MD_DB_FLOOR, MD_DB_CEIL)
    strain_amplitude_range: tuple = (0.006, 0.042)
    sector_map: tuple = SECTOR_OF_POINT
    coeffs: LabelCoefficients = field(default_factory=LabelCoefficients)
    field_radius_mm: float | None = None   # lateral tissue footprint; None = full field
    crop_radius_mm: float = 1.75

    def __post_init__(self):
        if self.n_subjects < 10:
            raise ValueError("cohort needs at least 10 subjects")
        lo, hi = self.md_range_db
        if not (MD_DB_FLOOR <= lo < hi <= MD_DB_CEIL):
            raise ValueError(f"MD range must lie within [{MD_DB_FLOOR}, {MD_DB_CEIL}] dB")
        if len(self.sector_map) != N_VF_POINTS:
            raise ValueError(f"sector map must assign all {N_VF_POINTS} points")
        if any(not 0 <= s <= 5 for s in self.sector_map):
            raise ValueError("sector indices must lie in 0..5")
        if self.strain_amplitude_range[0] <= 0:
            raise ValueError("strain amplitudes must be positive")


def _angular_blend(values, theta, centers, kappa):
    """Smooth periodic interpolation of per-sector values at angles theta."""
    theta = np.asarray(theta, dtype=np.float64)
    w = np.exp(kappa * np.cos(theta[..., None] - np.asarray(centers)))
    return (w * np.asarray(values)).sum(axis=-1) / w.sum(axis=-1)


def _angular_blend_deriv(values, theta, centers, kappa):
    """d/dtheta of _angular_blend."""
    theta = np.asarray(theta, dtype=np.float64)
    delta = theta[..., None] - np.asarray(centers)
    w = np.exp(kappa * np.cos(delta))
    dw = -kappa * np.sin(delta) * w
    values = np.asarray(values)
    num = (w * values).sum(axis=-1)
    den = w.sum(axis=-1)
    dnum = (dw * values).sum(axis=-1)
    dden = dw.sum(axis=-1)
    return (dnum * den - num * dden) / (den * den)


@dataclass(frozen=True)
class AxialCompressionWarp:
    """Smooth axial compression with sector-dependent amplitude.

    u_z(x, y, z) = -a(x, y) * (z - z_ref), zero laterally, where the local
    amplitude a blends six per-sector values around the canal center with a
    radial falloff.  Angular variation fades near the axis so the gradient
    stays bounded.  Both the displacement and its exact strain tensor are
    available analytically.
    """

    center_mm: tuple              # (cx, cy)
    z_ref_mm: float
    sector_amplitudes: tuple      # 6 values, compressive strain scale
    sector_centers_rad: tuple
    kappa: float = 8.0
    radial_sigma_mm: float = 1.3
    radial_base: float = 0.35
    center_blend_sigma_mm: float = 0.3

    def _amplitude_terms(self, x, y):
        dx = x - self.center_mm[0]
        dy = y - self.center_mm[1]
        r = np.sqrt(dx * dx + dy * dy)
        theta = np.arctan2(dy, dx)
        A = _angular_blend(self.sector_amplitudes, theta,
                           self.sector_centers_rad, self.kappa)
        Abar = float(np.mean(self.sector_amplitudes))
        m = 1.0 - np.exp(-((r / self.center_blend_sigma_mm) ** 2))
        w = self.radial_base + (1.0 - self.radial_base) * np.exp(
            -((r / self.radial_sigma_mm) ** 2))
        a = (Abar + (A - Abar) * m) * w
        return dx, dy, r, theta, A, Abar, m, w, a

    def amplitude(self, x, y):
        return self._amplitude_terms(x, y)[-1]

    def displacement_mm(self, points_mm):
        """(n, 3) displacement vectors at the given mm positions."""
        p = np.asarray(points_mm, dtype=np.float64)
        a = self.amplitude(p[..., 0], p[..., 1])
        u = np.zeros(p.shape)
        u[..., 2] = -a * (p[..., 2] - self.z_ref_mm)
        return u

    def strain_at(self, points_mm):
        """Exact symmetric strain tensors (…, 3, 3) of the displacement field."""
        p = np.asarray(points_mm, dtype=np.float64)
        x, y, z = p[..., 0], p[..., 1], p[..., 2]
        dx, dy, r, theta, A, Abar, m, w, a = self._amplitude_terms(x, y)

        sig_c2 = self.center_blend_sigma_mm ** 2
        sig_w2 = self.radial_sigma_mm ** 2
        dm_dr = (2.0 * r / sig_c2) * np.exp(-(r * r) / sig_c2)
        dw_dr = -(1.0 - self.radial_base) * (2.0 * r / sig_w2) * np.exp(-(r * r) / sig_w2)
        dA_dtheta = _angular_blend_deriv(self.sector_amplitudes, theta,
                                         self.sector_centers_rad, self.kappa)

        safe_r = np.where(r > 1e-12, r, 1.0)
        rx, ry = dx / safe_r, dy / safe_r
        tx, ty = -dy / (safe_r * safe_r), dx / (safe_r * safe_r)
        B = Abar + (A - Abar) * m
        da_dx = (dA_dtheta * tx * m + (A - Abar) * dm_dr * rx) * w + B * dw_dr * rx
        da_dy = (dA_dtheta * ty * m + (A - Abar) * dm_dr * ry) * w + B * dw_dr * ry
        da_dx = np.where(r > 1e-12, da_dx, 0.0)
        da_dy = np.where(r > 1e-12, da_dy, 0.0)

        zz = z - self.z_ref_mm
        eps = np.zeros(p.shape[:-1] + (3, 3))
        eps[..., 2, 2] = -a
        eps[..., 0, 2] = eps[..., 2, 0] = -0.5 * da_dx * zz
        eps[..., 1, 2] = eps[..., 2, 1] = -0.5 * da_dy * zz
        return eps

    def effective_at(self, points_mm):
        return effective_strain(self.strain_at(points_mm))

    def to_dict(self):
        return {
            "kind": "axial_compression",
            "center_mm": list(self.center_mm),
            "z_ref_mm": self.z_ref_mm,
            "sector_amplitudes": list(self.sector_amplitudes),
            "sector_centers_rad": list(self.sector_centers_rad),
            "kappa": self.kappa,
            "radial_sigma_mm": self.radial_sigma_mm,
            "radial_base": self.radial_base,
            "center_blend_sigma_mm": self.center_blend_sigma_mm,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("kind") != "axial_compression":
            raise ValueError("unknown warp kind")
        return cls(
            center_mm=tuple(d["center_mm"]),
            z_ref_mm=float(d["z_ref_mm"]),
            sector_amplitudes=tuple(d["sector_amplitudes"]),
            sector_centers_rad=tuple(d["sector_centers_rad"]),
            kappa=float(d["kappa"]),
            radial_sigma_mm=float(d["radial_sigma_mm"]),
            radial_base=float(d["radial_base"]),
            center_blend_sigma_mm=float(d["center_blend_sigma_mm"]),
        )


@dataclass
class SubjectRecord:
    """One synthetic subject: scan pair, rim ring, truth warp, labels."""

    subject_id: str
    baseline: LabeledVolume
    deformed: LabeledVolume
    bmo_ring_mm: np.ndarray        # (24, 3)
    warp: AxialCompressionWarp
    severity: float                # normalized in [0, 1], higher = worse
    md_db: float
    labels: VisualFieldMap | None = None


def warp_volume(vol: LabeledVolume, warp) -> LabeledVolume:
    """Deformed copy of a volume under a displacement field.

    Intensity is pulled back by trilinear interpolation at x - u(x); labels
    use nearest-neighbor sampling.  Out-of-range samples take background.
    `warp` is either a callable mapping (n, 3) mm positions to (n, 3) mm
    displacements or an object exposing displacement_mm.
    """
    disp_fn = warp if callable(warp) else warp.displacement_mm
    spacing = np.asarray(vol.spacing)
    nx, ny, nz = vol.dims
    idx = np.stack(np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                               indexing="ij"), axis=-1).astype(np.float64)
    u_mm = disp_fn(idx.reshape(-1, 3) * spacing).reshape(idx.shape)
    u_vox = u_mm / spacing
    if np.max(np.abs(u_vox)) > MAX_WARP_VOX:
        raise ValueError(f"displacement exceeds the {MAX_WARP_VOX}-voxel bound")
    coords = np.moveaxis(idx - u_vox, -1, 0)
    intensity = map_coordinates(vol.intensity, coords, order=1,
                                mode="constant", cval=BACKGROUND_INTENSITY)
    labels = map_coordinates(vol.labels, coords, order=0,
                             mode="constant", cval=0)
    return LabeledVolume(labels=labels, intensity=intensity, spacing=vol.spacing)


def _severity_from_md(md_db, md_range):
    lo, hi = md_range
    return float((hi - md_db) / (hi - lo))


def generate_phantom(spec: CohortSpec, subject_seed) -> SubjectRecord:
    """Layered tilted-slab phantom with central cup, texture, and truth warp.

    Classes 1-4 stack under a tilted anterior surface; inside the canal
    opening the prelamina fills down to a class-5 lamina slab, so class 5
    appears only beneath the cup.  Per-voxel intensity is a class-dependent
    base plus band-limited texture (every correlation block carries
    variance).  The rim ring holds 24 points on the class-4 opening edge.
    """
    rng = np.random.default_rng(subject_seed)
    nx, ny, nz = spec.dims
    dx, dy, dz = spec.spacing_mm
    cx, cy = (nx - 1) * dx / 2.0, (ny - 1) * dy / 2.0

    md_db = float(rng.uniform(*spec.md_range_db))
    severity = _severity_from_md(md_db, spec.md_range_db)
    tilt = rng.uniform(-0.05, 0.05, size=2)
    bmo_r = float(rng.uniform(0.55, 0.75))
    cup_r = bmo_r * float(rng.uniform(0.55, 0.75))
    cup_depth = float(rng.uniform(0.12, 0.20))
    t1_base = float(rng.uniform(0.10, 0.14))
    damage = np.clip(severity * rng.uniform(0.35, 1.15, size=6), 0.0, 1.0)
    t1_sector = t1_base * (1.0 - 0.55 * damage)
    t2 = float(rng.uniform(0.050, 0.075))
    t3 = float(rng.uniform(0.055, 0.085))
    t4 = float(rng.uniform(0.030, 0.042))
    t_lc = float(rng.uniform(0.09, 0.13))
    lc_top_offset = cup_depth + float(rng.uniform(0.05, 0.09))
    amplitudes = rng.uniform(*spec.strain_amplitude_range, size=6)

    xs = np.arange(nx) * dx
    ys = np.arange(ny) * dy
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    dX, dY = X - cx, Y - cy
    r2d = np.sqrt(dX * dX + dY * dY)
    theta2d = np.arctan2(dY, dX)

    z_top_base = 0.18
    z0 = z_top_base + tilt[0] * dX + tilt[1] * dY
    zs = z0 + cup_depth * np.exp(-((r2d / cup_r) ** 2))
    t1_col = _angular_blend(t1_sector, theta2d, SECTOR_CENTERS_RAD, kappa=8.0)
    lc_z = z0 + lc_top_offset

    inside = r2d < bmo_r
    footprint = np.ones_like(inside) if spec.field_radius_mm is None \
        else r2d <= spec.field_radius_mm

    z = (np.arange(nz) * dz)[None, None, :]
    zs3, t13, lc3 = zs[..., None], t1_col[..., None], lc_z[..., None]
    labels = np.zeros(spec.dims, dtype=np.uint8)

    out3 = (~inside & footprint)[..., None]
    b1 = zs3 + t13
    b2 = b1 + t2
    b3 = b2 + t3
    b4 = b3 + t4
    labels[np.broadcast_to(out3, labels.shape) & (z >= zs3) & (z < b1)] = 1
    labels[np.broadcast_to(out3, labels.shape) & (z >= b1) & (z < b2)] = 2
    labels[np.broadcast_to(out3, labels.shape) & (z >= b2) & (z < b3)] = 3
    labels[np.broadcast_to(out3, labels.shape) & (z >= b3) & (z < b4)] = 4

    in3 = (inside & footprint)[..., None]
    labels[np.broadcast_to(in3, labels.shape) & (z >= zs3) & (z < lc3)] = 1
    labels[np.broadcast_to(in3, labels.shape) & (z >= lc3) & (z < lc3 + t_lc)] = 5

    base = np.array([_CLASS_INTENSITY[c] for c in range(6)])[labels]
    texture = gaussian_filter(rng.standard_normal(spec.dims), _TEXTURE_SMOOTH_VOX,
                              mode="reflect")
    texture *= _TEXTURE_SD / texture.std()
    intensity = np.clip(base + texture, 0.002, 0.998)
    baseline = LabeledVolume(labels=labels, intensity=intensity,
                             spacing=spec.spacing_mm)

    phi = 2.0 * np.pi * np.arange(N_BMO_RING_POINTS) / N_BMO_RING_POINTS
    ring_x = cx + bmo_r * np.cos(phi)
    ring_y = cy + bmo_r * np.sin(phi)
    ring_z0 = z_top_base + tilt[0] * (ring_x - cx) + tilt[1] * (ring_y - cy)
    ring_zs = ring_z0 + cup_depth * np.exp(-((bmo_r / cup_r) ** 2))
    ring_t1 = _angular_blend(t1_sector, phi, SECTOR_CENTERS_RAD, kappa=8.0)
    bmo_ring = np.column_stack([ring_x, ring_y, ring_zs + ring_t1 + t2 + t3])

    warp = AxialCompressionWarp(
        center_mm=(cx, cy),
        z_ref_mm=z_top_base + 0.22,
        sector_amplitudes=tuple(float(a) for a in amplitudes),
        sector_centers_rad=SECTOR_CENTERS_RAD,
    )
    deformed = warp_volume(baseline, warp)

    return SubjectRecord(
        subject_id="", baseline=baseline, deformed=deformed,
        bmo_ring_mm=bmo_ring, warp=warp, severity=severity, md_db=md_db,
    )


def plant_vf_labels(cloud: OnhPointCloud, sector_map, severity,
                    rng: np.random.Generator,
                    coeffs: LabelCoefficients = LabelCoefficients()) -> VisualFieldMap:
    """Bernoulli defect labels from sector-mean strain and thickness.

    Per sector the mean effective strain over its points and the mean
    nerve-fiber-layer thickness (class-1 points; all points if none) feed a
    sigmoid score together with severity and Gaussian noise; each VF point
    draws its label from its sector's score.  Sectors without points default
    to non-defect.  Deterministic per generator state.
    """
    if cloud.strain is None:
        raise ValueError("cloud carries no strain attribute")
    if cloud.frame != FRAME_ALIGNED:
        raise ValueError("labels are planted in the aligned frame")
    sector_map = np.asarray(sector_map)
    theta = np.arctan2(cloud.points[:, 1], cloud.points[:, 0])
    point_sector = sector_of_angle(theta)

    mean_strain = np.zeros(6)
    mean_thick = np.zeros(6)
    populated = np.zeros(6, dtype=bool)
    for s in range(6):
        sel = point_sector == s
        if not np.any(sel):
            continue
        populated[s] = True
        mean_strain[s] = cloud.strain[sel].mean()
        rnfl = sel & (cloud.tissue == 1)
        mean_thick[s] = cloud.thickness[rnfl].mean() if np.any(rnfl) \
            else cloud.thickness[sel].mean()

    logit = (coeffs.alpha * mean_strain - coeffs.beta * mean_thick
             + coeffs.gamma * severity + coeffs.bias)
    noise = rng.normal(0.0, coeffs.noise_sd, size=N_VF_POINTS)
    u = rng.uniform(0.0, 1.0, size=N_VF_POINTS)

    score = 1.0 / (1.0 + np.exp(-(logit[sector_map] + noise)))
    score = np.where(populated[sector_map], score, 0.0)
    labels = (u < score).astype(np.int8)
    return VisualFieldMap(labels=labels)


def attach_truth_strain(cloud: OnhPointCloud, warp,
                        raw_points_mm=None) -> OnhPointCloud:
    """Cloud copy carrying the exact effective strain of the analytic warp.

    Strain is a scalar invariant, so it may be evaluated at the raw scanner
    positions (pass them when the cloud is already aligned).
    """
    where = cloud.points if raw_points_mm is None else np.asarray(raw_points_mm)
    eff = warp.effective_at(where)
    return OnhPointCloud(points=cloud.points.copy(), tissue=cloud.tissue.copy(),
                         thickness=cloud.thickness.copy(), strain=eff,
                         frame=cloud.frame)


def generate_subject(spec: CohortSpec, subject_seed, subject_id=""):
    """Full subject: phantom plus labels planted on the truth-strain cloud.

    Runs the geometric pipeline (extract, truth-strain attach, align, crop)
    on the phantom and plants labels from the resulting sector statistics.
    Returns (record, aligned truth-strain cloud).
    """
    ss = subject_seed if isinstance(subject_seed, np.random.SeedSequence) \
        else np.random.SeedSequence(subject_seed)
    seeds = ss.spawn(2)
    record = generate_phantom(spec, seeds[0])
    record.subject_id = subject_id

    raw = extract_point_cloud(record.baseline)
    raw = attach_truth_strain(raw, record.warp)
    plane = fit_bmo_plane(record.bmo_ring_mm)
    aligned = align_to_bmo(raw, plane)
    cropped = cylindrical_crop(aligned, spec.crop_radius_mm)

    label_rng = np.random.default_rng(seeds[1])
    record.labels = plant_vf_labels(cropped, spec.sector_map, record.severity,
                                    label_rng, spec.coeffs)
    return record, cropped


def generate_cohort(spec: CohortSpec):
    """All subjects of a cohort, deterministic per spec.seed."""
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.n_subjects)
    out = []
    for i, s in enumerate(seeds):
        record, _ = generate_subject(spec, s, subject_id=f"s{i:03d}")
        out.append(record)
    return out
