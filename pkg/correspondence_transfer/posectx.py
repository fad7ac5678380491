# correspondence_transfer/posectx.py

import logging
from typing import Optional, Tuple

import numpy as np

from .config import POSE_BINS
from .errors import BinRangeError, DegeneratePoseError, DimensionError, NoValidEntriesError
from .models import JointSet, PoseContext

log = logging.getLogger(__name__)


def _others(n: int) -> np.ndarray:
    """Column j of row i holds the j-th joint other than i, ascending."""
    return np.array([[j for j in range(n) if j != i] for i in range(n)], dtype=np.int64)


def compute_pose_context(joints: JointSet, n_bins: int = POSE_BINS) -> PoseContext:
    """Magnitude and angle bins of every joint in the polar frame of every other joint."""
    coords, valid = joints.coords, joints.valid
    n = len(coords)
    if valid.sum() < 2:
        raise DegeneratePoseError(f"pose context needs at least 2 valid joints, got {int(valid.sum())}")

    others = _others(n)
    delta = coords[others] - coords[:, None, :]
    dist = np.linalg.norm(delta, axis=-1)

    pair_valid = valid[:, None] & valid[others]
    scale = dist[pair_valid].max()
    if scale <= 0:
        raise DegeneratePoseError("all valid joints coincide")

    # bins are 1-based; a magnitude of exactly 1 lands in the last bin
    magnitude = dist / scale
    psi = np.minimum(np.floor(magnitude * n_bins).astype(np.int64) + 1, n_bins)

    # counterclockwise as seen on screen: image y grows downward
    angle = np.degrees(np.arctan2(-delta[..., 1], delta[..., 0])) % 360.0
    phi = (np.floor(angle / (360.0 / n_bins)).astype(np.int64) % n_bins) + 1

    psi = np.where(pair_valid, psi, 0)
    phi = np.where(pair_valid, phi, 0)
    return PoseContext(psi=psi, phi=phi)


def cyclic_bin_distance(b1, b2, n_bins: int = POSE_BINS):
    """Squared minimum number of bin steps between b1 and b2 around the circle."""
    b1 = np.asarray(b1, dtype=np.int64)
    b2 = np.asarray(b2, dtype=np.int64)
    if np.any((b1 < 1) | (b1 > n_bins) | (b2 < 1) | (b2 > n_bins)):
        raise BinRangeError(f"bins must lie in [1, {n_bins}]")
    gap = np.abs(b1 - b2)
    alpha = np.minimum(gap, n_bins - gap)
    result = (alpha * alpha).astype(np.float64)
    return float(result) if result.ndim == 0 else result


def similarity_terms(a: PoseContext, b: PoseContext, n_bins: int = POSE_BINS) -> Tuple[float, float]:
    """(S_psi, S_phi) over the entries valid in both descriptors."""
    if a.psi.shape != b.psi.shape:
        raise DimensionError(f"descriptor shapes differ: {a.psi.shape} vs {b.psi.shape}")
    mask = a.valid_mask & b.valid_mask
    if not mask.any():
        raise NoValidEntriesError("descriptors share no valid entries")
    s_psi = np.exp(-np.abs(a.psi[mask] - b.psi[mask]).astype(np.float64)).mean()
    s_phi = np.exp(-cyclic_bin_distance(a.phi[mask], b.phi[mask], n_bins)).mean()
    return float(s_psi), float(s_phi)


def pose_similarity(a: PoseContext, b: PoseContext, n_bins: int = POSE_BINS) -> float:
    s_psi, s_phi = similarity_terms(a, b, n_bins)
    return s_psi * s_phi


def pair_similarity(probe_a: PoseContext, gallery_a: PoseContext,
                    probe_b: PoseContext, gallery_b: PoseContext, n_bins: int = POSE_BINS) -> float:
    return pose_similarity(probe_a, probe_b, n_bins) * pose_similarity(gallery_a, gallery_b, n_bins)


def stack_contexts(contexts) -> Tuple[np.ndarray, np.ndarray]:
    """Stack descriptors into (T, rows, cols) psi/phi arrays; missing ones become all-invalid."""
    shape = next((c.psi.shape for c in contexts if c is not None), (0, 0))
    psi = np.zeros((len(contexts),) + shape, dtype=np.int64)
    phi = np.zeros_like(psi)
    for t, c in enumerate(contexts):
        if c is not None:
            psi[t], phi[t] = c.psi, c.phi
    return psi, phi


def pose_similarity_batch(query: Optional[PoseContext], psi: np.ndarray, phi: np.ndarray,
                          n_bins: int = POSE_BINS) -> np.ndarray:
    """pose_similarity of one descriptor against a stack; 0 where no entries are jointly valid."""
    if query is None or len(psi) == 0:
        return np.zeros(len(psi))
    mask = (query.psi > 0)[None] & (psi > 0)
    counts = mask.sum(axis=(1, 2))

    d_psi = np.abs(query.psi[None] - psi).astype(np.float64)
    gap = np.abs(query.phi[None] - phi)
    alpha = np.minimum(gap, n_bins - gap).astype(np.float64)

    s_psi = np.where(mask, np.exp(-d_psi), 0.0).sum(axis=(1, 2))
    s_phi = np.where(mask, np.exp(-alpha * alpha), 0.0).sum(axis=(1, 2))
    safe = np.where(counts > 0, counts, 1)
    return np.where(counts > 0, (s_psi / safe) * (s_phi / safe), 0.0)
