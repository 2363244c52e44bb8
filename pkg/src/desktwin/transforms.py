"""Small rotation/transform helpers used by model loading and kinematics.

Quaternions are stored (w, x, y, z) and must be unit length. Rotation
matrices are plain 3x3 float64 numpy arrays.
"""

import numpy as np

from .errors import ModelFormatError

# Normalization thresholds for quaternions read from files: silently
# renormalize small drift, reject anything clearly malformed.
QUAT_NORMALIZE_TOL = 1e-6
QUAT_REJECT_TOL = 1e-3


def quat_to_matrix(quat_wxyz) -> np.ndarray:
    """Convert a unit quaternion (w, x, y, z) to a rotation matrix.

    Norm within QUAT_NORMALIZE_TOL of 1 is silently normalized; deviation
    beyond QUAT_REJECT_TOL raises ModelFormatError.
    """
    q = np.asarray(quat_wxyz, dtype=float)
    if q.shape != (4,):
        raise ModelFormatError(f"quaternion must have 4 components, got shape {q.shape}")
    norm = float(np.linalg.norm(q))
    if abs(norm - 1.0) > QUAT_REJECT_TOL:
        raise ModelFormatError(f"quaternion norm {norm:.6f} too far from 1")
    if abs(norm - 1.0) > QUAT_NORMALIZE_TOL:
        q = q / norm
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    a = np.asarray(axis, dtype=float)
    c, s = np.cos(angle), np.sin(angle)
    C = 1.0 - c
    x, y, z = a
    return np.array(
        [
            [x * x * C + c, x * y * C - z * s, x * z * C + y * s],
            [y * x * C + z * s, y * y * C + c, y * z * C - x * s],
            [z * x * C - y * s, z * y * C + x * s, z * z * C + c],
        ]
    )


def compose(R_a, p_a, R_b, p_b):
    """Compose rigid transforms: (R_a, p_a) then (R_b, p_b) in a's frame."""
    return R_a @ R_b, p_a + R_a @ p_b
