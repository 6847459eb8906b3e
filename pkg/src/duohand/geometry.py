"""Rigid alignment and SO(3) primitives.

Joint sets are ``(21, 3)`` float arrays in millimeters with the wrist at row 0.
Rotations are ``(3, 3)`` arrays. Functions here never mutate their inputs.
"""

from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateConfigurationError, DegenerateMeanError, InvalidInputError

NUM_JOINTS = 21
WRIST = 0

# Second singular value of the aligned cross-covariance, in mm^2.
DEGENERACY_THRESHOLD = 1e-9
ROTATION_TOLERANCE = 1e-9


def as_joint_set(joints: np.ndarray) -> np.ndarray:
    """Validate and return joints as a float array of shape ``(..., 21, 3)``."""
    arr = np.asarray(joints, dtype=float)
    if arr.ndim < 2 or arr.shape[-2:] != (NUM_JOINTS, 3):
        raise InvalidInputError(f"expected (..., {NUM_JOINTS}, 3) joints, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("joint coordinates must be finite")
    return arr


def is_rotation(matrix: np.ndarray, tol: float = ROTATION_TOLERANCE) -> bool:
    """Check orthogonality and a +1 determinant within ``tol``."""
    m = np.asarray(matrix, dtype=float)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        return False
    ortho = np.linalg.norm(m.T @ m - np.eye(3))
    return bool(ortho <= tol and abs(np.linalg.det(m) - 1.0) <= tol)


def wrist_align(joints: np.ndarray) -> np.ndarray:
    """Translate joints so the wrist sits at the origin.

    Works on a single joint set or on any stack of them.

    Args:
        joints: Array of shape ``(..., 21, 3)``.

    Returns:
        A new array where every joint has the wrist subtracted.
    """
    arr = as_joint_set(joints)
    return arr - arr[..., WRIST : WRIST + 1, :]


def _project_to_so3(m: np.ndarray) -> np.ndarray:
    # nearest rotation to each matrix in a (..., 3, 3) stack
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    d = np.where(d == 0, 1.0, d)
    u = u.copy()
    u[..., :, 2] *= d[..., None]
    return u @ vt


def kabsch_from_covariance(h: np.ndarray) -> np.ndarray:
    """Rotation(s) maximizing ``trace(R H)`` for a stack of cross-covariances.

    ``H = sum_k a_k b_k^T`` yields the rotation taking ``a`` onto ``b``.

    Raises:
        DegenerateConfigurationError: if any covariance has a second singular
            value below ``DEGENERACY_THRESHOLD``.
    """
    u, s, vt = np.linalg.svd(h)
    if np.any(s[..., 1] < DEGENERACY_THRESHOLD):
        raise DegenerateConfigurationError(
            "joints are collinear or coincident after wrist alignment"
        )
    v = np.swapaxes(vt, -1, -2)
    ut = np.swapaxes(u, -1, -2)
    d = np.sign(np.linalg.det(v @ ut))
    d = np.where(d == 0, 1.0, d)
    v = v.copy()
    v[..., :, 2] *= d[..., None]
    return v @ ut


def cross_covariance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``sum_k a_k b_k^T`` of wrist-aligned joint sets (stack-aware)."""
    return np.einsum("...ki,...kj->...ij", wrist_align(a), wrist_align(b))


def kabsch_rotation(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rotation that best maps joint set ``a`` onto joint set ``b``.

    Both sets are wrist-aligned first, then the cross-covariance is decomposed
    by SVD with a determinant correction so the result is always proper. All
    21 joints carry equal weight.

    Args:
        a: Source joints, shape ``(21, 3)``.
        b: Target joints, shape ``(21, 3)``.

    Returns:
        ``R`` minimizing ``||R a' - b'||_F`` over SO(3), where the rows of
        ``a'`` and ``b'`` are the aligned joints.

    Raises:
        DegenerateConfigurationError: if the aligned joints are collinear.
    """
    return kabsch_from_covariance(cross_covariance(a, b))


def so3_mean(
    rotations: Sequence[np.ndarray], weights: Optional[Sequence[float]] = None
) -> np.ndarray:
    """Chordal L2 mean of rotations.

    The (weighted) arithmetic mean of the matrices is projected back onto
    SO(3) through its SVD, flipping the last singular direction if needed.

    Args:
        rotations: Non-empty sequence of 3x3 rotations.
        weights: Optional non-negative weights summing to one.

    Returns:
        The rotation closest in Frobenius norm to the weighted mean.

    Raises:
        InvalidInputError: on an empty list or malformed weights.
        DegenerateMeanError: if the mean matrix is rank deficient.
    """
    stack = np.asarray(rotations, dtype=float)
    if stack.ndim != 3 or stack.shape[0] == 0 or stack.shape[1:] != (3, 3):
        raise InvalidInputError("so3_mean needs a non-empty list of 3x3 matrices")
    if not np.all(np.isfinite(stack)):
        raise InvalidInputError("rotation entries must be finite")
    if weights is None:
        w = np.full(stack.shape[0], 1.0 / stack.shape[0])
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (stack.shape[0],):
            raise InvalidInputError("weights must match the number of rotations")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise InvalidInputError("weights must be non-negative and sum to 1")
    mean = np.einsum("n,nij->ij", w, stack)
    s = np.linalg.svd(mean, compute_uv=False)
    if s[2] <= 1e-12 * max(1.0, s[0]):
        raise DegenerateMeanError(
            f"mean of rotations is rank deficient (singular values {s.tolist()})"
        )
    return _project_to_so3(mean)


def geodesic_angle(r1: np.ndarray, r2: np.ndarray) -> float:
    """Angle in radians of the relative rotation ``r1^T r2``, in ``[0, pi]``."""
    m = np.asarray(r1, dtype=float).T @ np.asarray(r2, dtype=float)
    cos = (np.trace(m) - 1.0) / 2.0
    skew = m - m.T
    sin = np.linalg.norm(skew) / (2.0 * np.sqrt(2.0))
    return float(np.arctan2(sin, cos))


def frobenius_distance(r1: np.ndarray, r2: np.ndarray) -> float:
    """Chordal distance ``||r1 - r2||_F``."""
    return float(np.linalg.norm(np.asarray(r1, dtype=float) - np.asarray(r2, dtype=float)))
