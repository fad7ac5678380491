# correspondence_transfer/affinity.py

import logging

import numpy as np
from scipy.spatial.distance import cdist

from .errors import IndexRangeError, LayoutMismatchError, StripeError
from .models import AffinityMatrix, AttributedGraph, MatchProblem, PatchLayout

log = logging.getLogger(__name__)


def node_affinity(pos1, pos2, feat1, feat2, sigma_p: float, sigma_f: float) -> float:
    """exp(-|dpos|/sigma_p) * exp(-|dfeat|/sigma_f) for one candidate correspondence."""
    d_pos = np.linalg.norm(np.asarray(pos1, dtype=np.float64) - np.asarray(pos2, dtype=np.float64))
    d_feat = np.linalg.norm(np.asarray(feat1, dtype=np.float64) - np.asarray(feat2, dtype=np.float64))
    return float(np.exp(-d_pos / sigma_p) * np.exp(-d_feat / sigma_f))


def edge_affinity(pos_i1, pos_j1, pos_i2, pos_j2, feat_i1, feat_j1, feat_i2, feat_j2,
                  sigma_p: float, sigma_f: float) -> float:
    """Compatibility of the candidate pairs (i1->i2) and (j1->j2)."""
    p = lambda v: np.asarray(v, dtype=np.float64)
    d_pos = np.linalg.norm((p(pos_i1) - p(pos_j1)) - (p(pos_i2) - p(pos_j2)))
    d_feat = np.linalg.norm((p(feat_i1) - p(feat_j1)) - (p(feat_i2) - p(feat_j2)))
    return float(np.exp(-d_pos / sigma_p) * np.exp(-d_feat / sigma_f))


def build_affinity_matrix(probe: AttributedGraph, gallery: AttributedGraph, problem: MatchProblem,
                          sigma_p: float, sigma_f: float) -> AffinityMatrix:
    """Dense K over candidates (i1, i2) in probe-major order, conflicting candidates zeroed."""
    p_nodes, g_nodes = problem.probe_nodes, problem.gallery_nodes
    if p_nodes.min() < 0 or p_nodes.max() >= probe.n_nodes:
        raise IndexRangeError(f"probe node index outside [0, {probe.n_nodes})")
    if g_nodes.min() < 0 or g_nodes.max() >= gallery.n_nodes:
        raise IndexRangeError(f"gallery node index outside [0, {gallery.n_nodes})")

    n1, n2 = problem.n1, problem.n2
    P1, F1 = probe.positions_norm[p_nodes], probe.features[p_nodes]
    P2, F2 = gallery.positions_norm[g_nodes], gallery.features[g_nodes]

    # axes (i1, i2, j1, j2)
    dP1 = P1[:, None, :] - P1[None, :, :]
    dP2 = P2[:, None, :] - P2[None, :, :]
    pos_gap = np.linalg.norm(dP1[:, None, :, None, :] - dP2[None, :, None, :, :], axis=-1)

    # |(f_i1 - f_j1) - (g_i2 - g_j2)|^2 expanded through the cross Gram matrix G = F1 F2^T
    G = F1 @ F2.T
    cross = G[:, :, None, None] - G[:, None, None, :] - G.T[None, :, :, None] + G[None, None, :, :]
    feat_sq = cdist(F1, F1, "sqeuclidean")[:, None, :, None] + cdist(F2, F2, "sqeuclidean")[None, :, None, :]
    feat_gap = np.sqrt(np.maximum(feat_sq - 2.0 * cross, 0.0))
    K = np.exp(-pos_gap / sigma_p) * np.exp(-feat_gap / sigma_f)

    node_pos = np.linalg.norm(P1[:, None, :] - P2[None, :, :], axis=-1)
    node_feat = np.linalg.norm(F1[:, None, :] - F2[None, :, :], axis=-1)
    node = np.exp(-node_pos / sigma_p) * np.exp(-node_feat / sigma_f)

    same_probe = np.eye(n1, dtype=bool)[:, None, :, None]
    same_gallery = np.eye(n2, dtype=bool)[None, :, None, :]
    K = np.where(same_probe | same_gallery, 0.0, K).reshape(n1 * n2, n1 * n2)
    K = (K + K.T) / 2.0
    K[np.diag_indices(n1 * n2)] = node.ravel()

    return AffinityMatrix(entries=K, n1=n1, n2=n2, sigma_p=sigma_p, sigma_f=sigma_f)


def stripe_search_space(probe_layout: PatchLayout, gallery_layout: PatchLayout,
                        stripe_idx: int, expand_rows: int) -> MatchProblem:
    """Probe stripe patches against the gallery stripe widened by expand_rows rows each side."""
    if probe_layout.n_stripes != gallery_layout.n_stripes:
        raise LayoutMismatchError(
            f"probe has {probe_layout.n_stripes} stripes, gallery has {gallery_layout.n_stripes}"
        )
    if not 0 <= stripe_idx < probe_layout.n_stripes:
        raise StripeError(f"stripe index {stripe_idx} outside [0, {probe_layout.n_stripes})")

    p_first, p_last = probe_layout.stripe_rows(stripe_idx)
    g_first, g_last = gallery_layout.stripe_rows(stripe_idx)
    g_first = max(0, g_first - expand_rows)
    g_last = min(gallery_layout.n_rows - 1, g_last + expand_rows)

    problem = MatchProblem(
        probe_nodes=probe_layout.patches_in_rows(p_first, p_last),
        gallery_nodes=gallery_layout.patches_in_rows(g_first, g_last),
    )
    log.debug(f"Stripe {stripe_idx}: probe rows {p_first}-{p_last}, gallery rows {g_first}-{g_last} "
              f"(n1={problem.n1}, n2={problem.n2})")
    return problem
