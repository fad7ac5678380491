# correspondence_transfer/imggraph.py

import logging
from typing import Any

import numpy as np

from .errors import CountMismatchError, DimensionError, StripeError
from .models import AttributedGraph, PatchLayout
from .utils import l2_normalize_rows

log = logging.getLogger(__name__)


def decompose_into_patches(w: int, h: int, patch_w: int, patch_h: int,
                           stride_w: int, stride_h: int, n_stripes: int) -> PatchLayout:
    """Overlapping patch grid anchored at (0, 0); rows split into contiguous stripes."""
    if patch_w < 1 or patch_h < 1 or patch_w > w or patch_h > h:
        raise DimensionError(f"patch {patch_w}x{patch_h} does not fit a {w}x{h} image")
    if stride_w < 1 or stride_h < 1:
        raise DimensionError(f"strides must be >= 1, got ({stride_w}, {stride_h})")

    n_rows = (h - patch_h) // stride_h + 1
    n_cols = (w - patch_w) // stride_w + 1
    if n_stripes < 1 or n_stripes > n_rows:
        raise StripeError(f"cannot split {n_rows} patch rows into {n_stripes} stripes")

    rows, cols = np.meshgrid(np.arange(n_rows), np.arange(n_cols), indexing="ij")
    centers = np.stack(
        [cols.ravel() * stride_w + patch_w / 2.0, rows.ravel() * stride_h + patch_h / 2.0],
        axis=1,
    )

    # earlier stripes take the remainder rows
    base, extra = divmod(n_rows, n_stripes)
    sizes = [base + (1 if s < extra else 0) for s in range(n_stripes)]
    stripe_of_row = np.repeat(np.arange(n_stripes), sizes)
    stripe_of_patch = np.repeat(stripe_of_row, n_cols)

    return PatchLayout(
        image_width_px=w, image_height_px=h,
        patch_w_px=patch_w, patch_h_px=patch_h,
        stride_w_px=stride_w, stride_h_px=stride_h,
        centers=centers, n_rows=n_rows, n_cols=n_cols,
        stripe_of_patch=stripe_of_patch, n_stripes=n_stripes,
    )


def stripe_sizes(layout: PatchLayout) -> list[int]:
    """Number of patch rows in every stripe."""
    per_row = layout.stripe_of_patch[:: layout.n_cols]
    return np.bincount(per_row, minlength=layout.n_stripes).tolist()


def extract_builtin_features(pixels: Any, layout: PatchLayout, bins_per_channel: int = 8) -> np.ndarray:
    """Per-patch RGB histograms, L1-normalised per channel, then L2-normalised as a whole."""
    pixels = np.asarray(pixels)
    expected = (layout.image_height_px, layout.image_width_px, 3)
    if pixels.shape != expected:
        raise DimensionError(f"pixel array shape {pixels.shape} does not match layout {expected}")
    if bins_per_channel < 2:
        raise DimensionError(f"bins_per_channel must be >= 2, got {bins_per_channel}")

    binned = (pixels.astype(np.int64) * bins_per_channel) // 256
    features = np.zeros((layout.n_patches, 3 * bins_per_channel), dtype=np.float64)
    for patch in range(layout.n_patches):
        row, col = divmod(patch, layout.n_cols)
        y0, x0 = row * layout.stride_h_px, col * layout.stride_w_px
        window = binned[y0:y0 + layout.patch_h_px, x0:x0 + layout.patch_w_px]
        for channel in range(3):
            hist = np.bincount(window[..., channel].ravel(), minlength=bins_per_channel).astype(np.float64)
            features[patch, channel * bins_per_channel:(channel + 1) * bins_per_channel] = hist / hist.sum()

    return l2_normalize_rows(features)


def build_graph(layout: PatchLayout, features: Any) -> AttributedGraph:
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if len(features) != layout.n_patches:
        raise CountMismatchError(f"{len(features)} feature vectors for {layout.n_patches} patches")
    positions = layout.centers / np.array([layout.image_width_px, layout.image_height_px], dtype=np.float64)
    return AttributedGraph(layout=layout, positions_norm=positions, features=l2_normalize_rows(features))
