"""24-2 visual-field representation and a synthetic sector correspondence.

The 24-2 perimetry pattern tests 54 locations on a 6-degree grid; the two
blind-spot points are excluded, leaving the 52 points modeled here.  Points
are ordered row by row from the superior edge, x ascending (right-eye
orientation).

SECTOR_OF_POINT assigns every point to one of six 60-degree nerve-head
sectors.  The table is a deliberately regular synthetic stand-in for the
anatomical correspondence (superior field maps to inferior disc and the
horizontal is mirrored); it exists to plant and score ground truth in
generated cohorts, not to describe real anatomy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_VF_POINTS = 52
N_SECTORS = 6

# (x, y) in degrees of visual angle, blind spot excluded.
PATTERN_24_2 = (
    (-9, 21), (-3, 21), (3, 21), (9, 21),
    (-15, 15), (-9, 15), (-3, 15), (3, 15), (9, 15), (15, 15),
    (-21, 9), (-15, 9), (-9, 9), (-3, 9), (3, 9), (9, 9), (15, 9), (21, 9),
    (-27, 3), (-21, 3), (-15, 3), (-9, 3), (-3, 3), (3, 3), (9, 3), (21, 3),
    (-27, -3), (-21, -3), (-15, -3), (-9, -3), (-3, -3), (3, -3), (9, -3), (21, -3),
    (-21, -9), (-15, -9), (-9, -9), (-3, -9), (3, -9), (9, -9), (15, -9), (21, -9),
    (-15, -15), (-9, -15), (-3, -15), (3, -15), (9, -15), (15, -15),
    (-9, -21), (-3, -21), (3, -21), (9, -21),
)

# Sector index per VF point: floor(atan2(-y, -x) / 60 deg), i.e. the disc
# sector diametrically opposite the field location.
SECTOR_OF_POINT = (
    4, 4, 4, 4,
    5, 5, 4, 4, 3, 3,
    5, 5, 5, 4, 4, 3, 3, 3,
    5, 5, 5, 5, 5, 3, 3, 3,
    0, 0, 0, 0, 0, 2, 2, 2,
    0, 0, 0, 1, 1, 2, 2, 2,
    0, 0, 1, 1, 2, 2,
    1, 1, 1, 1,
)

# Angular center of each sector in the aligned nerve-head frame (radians).
SECTOR_CENTERS_RAD = tuple((60.0 * s + 30.0) * np.pi / 180.0 for s in range(N_SECTORS))


@dataclass
class VisualFieldMap:
    """Binary defect labels for the 52 test points, with optional probabilities."""

    labels: np.ndarray                 # (52,) in {0, 1}
    probs: np.ndarray | None = None    # (52,) in (0, 1)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.shape != (N_VF_POINTS,):
            raise ValueError(f"labels must have length {N_VF_POINTS}")
        if not np.all(np.isin(self.labels, (0, 1))):
            raise ValueError("labels must be binary")
        self.labels = self.labels.astype(np.int8)
        if self.probs is not None:
            self.probs = np.asarray(self.probs, dtype=np.float64)
            if self.probs.shape != (N_VF_POINTS,):
                raise ValueError(f"probs must have length {N_VF_POINTS}")
            if np.any(self.probs <= 0) or np.any(self.probs >= 1):
                raise ValueError("probs must lie strictly in (0, 1)")

    @property
    def defect_count(self):
        return int(self.labels.sum())


def sector_of_angle(theta):
    """Sector index for angles (radians) in the aligned nerve-head frame."""
    deg = np.degrees(np.mod(theta, 2.0 * np.pi))
    return (deg // 60).astype(np.int64) % N_SECTORS
