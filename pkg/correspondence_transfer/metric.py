# correspondence_transfer/metric.py

import logging
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from sklearn.decomposition import PCA

from .config import METRIC_D_RED, METRIC_REG
from .errors import ConfigError, DimensionError, InsufficientDataError, SingularCovarianceError
from .models import MetricModel
from .state import DeltaCounter

log = logging.getLogger(__name__)

Pair = Tuple[np.ndarray, np.ndarray]


def _differences(pairs: Sequence[Pair]) -> np.ndarray:
    return np.array([np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64) for x, y in pairs])


def clip_psd(matrix: np.ndarray) -> np.ndarray:
    """Nearest PSD matrix by truncating negative eigenvalues at zero."""
    sym = (matrix + matrix.T) / 2.0
    values, vectors = linalg.eigh(sym)
    clipped = (vectors * np.maximum(values, 0.0)) @ vectors.T
    return (clipped + clipped.T) / 2.0


def _inverse_covariance(diffs: np.ndarray, reg: float, label: str) -> np.ndarray:
    cov = diffs.T @ diffs / len(diffs) + reg * np.eye(diffs.shape[1])
    try:
        factor = linalg.cho_factor(cov)
    except linalg.LinAlgError as e:
        raise SingularCovarianceError(f"{label} covariance is not invertible (reg={reg})") from e
    return linalg.cho_solve(factor, np.eye(cov.shape[0]))


def fit_kissme(similar_pairs: Sequence[Pair], dissimilar_pairs: Sequence[Pair],
               d_red: int = METRIC_D_RED, reg: float = METRIC_REG) -> MetricModel:
    """KISSME: M = clip_psd(inv(Sigma_S) - inv(Sigma_D)) in a PCA subspace of pair differences."""
    if reg < 0:
        raise ConfigError(f"regulariser must be >= 0, got {reg}")
    if not similar_pairs or not dissimilar_pairs:
        raise InsufficientDataError("KISSME needs both similar and dissimilar pairs")

    d_in = len(np.asarray(similar_pairs[0][0]))
    d_red = min(d_red, d_in)
    if len(similar_pairs) < d_red + 1 or len(dissimilar_pairs) < d_red + 1:
        raise InsufficientDataError(
            f"need at least {d_red + 1} pairs of each kind, got {len(similar_pairs)} similar "
            f"and {len(dissimilar_pairs)} dissimilar"
        )

    diff_s = _differences(similar_pairs)
    diff_d = _differences(dissimilar_pairs)

    # differences are sign-symmetric, so the stack is centred up to rounding
    stack = np.vstack([diff_s, -diff_s, diff_d, -diff_d])
    pca = PCA(n_components=d_red, svd_solver="full").fit(stack)
    basis = pca.components_.T

    proj_s = diff_s @ basis
    proj_d = diff_d @ basis
    M = clip_psd(_inverse_covariance(proj_s, reg, "similar") - _inverse_covariance(proj_d, reg, "dissimilar"))

    mean = np.mean(np.vstack([np.asarray(x, dtype=np.float64) for pair in similar_pairs for x in pair]), axis=0)
    log.info(f"Fitted KISSME metric: {d_in} -> {d_red} dims from {len(diff_s)} similar / {len(diff_d)} dissimilar pairs")
    return MetricModel(pca_mean=mean, pca_basis=basis, M=M, kind="kissme")


def euclidean_model(dim: int) -> MetricModel:
    """Identity projection and identity M: delta is the squared Euclidean distance."""
    return MetricModel(pca_mean=np.zeros(dim), pca_basis=np.eye(dim), M=np.eye(dim), kind="euclidean")


def metric_distance(model: MetricModel, x, y, counter: Optional[DeltaCounter] = None) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != (model.input_dim,) or y.shape != (model.input_dim,):
        raise DimensionError(f"expected vectors of dim {model.input_dim}, got {x.shape} and {y.shape}")
    d = (x - y) @ model.pca_basis
    if counter is not None:
        counter.add(1)
    return max(float(d @ model.M @ d), 0.0)


def embed(model: MetricModel, features) -> np.ndarray:
    """Project feature rows once so batches of delta reduce to quadratic forms."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[1] != model.input_dim:
        raise DimensionError(f"expected features of dim {model.input_dim}, got {features.shape[1]}")
    return (features - model.pca_mean) @ model.pca_basis


def embedded_distances(model: MetricModel, a: np.ndarray, b: np.ndarray,
                       counter: Optional[DeltaCounter] = None) -> np.ndarray:
    """Row-wise delta between two stacks of embedded vectors."""
    d = a - b
    if counter is not None:
        counter.add(len(d))
    return np.maximum(np.einsum("ni,ij,nj->n", d, model.M, d), 0.0)


def pairwise_distances(model: MetricModel, X, Y) -> np.ndarray:
    """delta between every row of X and every row of Y."""
    ex, ey = embed(model, X), embed(model, Y)
    d = ex[:, None, :] - ey[None, :, :]
    return np.maximum(np.einsum("pgi,ij,pgj->pg", d, model.M, d), 0.0)
