# correspondence_transfer/synth.py
"""Synthetic two-camera dataset with controlled vertical misalignment.

Each identity wears a stack of coloured horizontal bands. Camera "a" sees the
person in a canonical pose; camera "b" sees the same person shifted vertically
by one of five levels in [-shift_max, shift_max], in an articulation (arm swing
and leg spread) tied to that level. Pose context therefore predicts the
misalignment, which is what reference selection relies on.
"""

import logging
from pathlib import Path
from typing import List, Tuple

import numpy as np

from .codec import write_manifest, write_ppm
from .config import IMAGE_HEIGHT_PX, IMAGE_WIDTH_PX
from .errors import DimensionError, InsufficientDataError
from .models import DatasetIndex, ManifestEntry
from .utils import derive_rng

log = logging.getLogger(__name__)

N_SHIFT_LEVELS = 5
# one 12 px stride row, inside the default gallery search window
SHIFT_MAX_PX = 12
# histogram bin centres for 8 bins per channel; jitter below 16 never changes a bin
PALETTE_LEVELS = (48, 112, 176, 240)
BACKGROUND = (48, 48, 48)
JITTER = 6
BAND_HEIGHTS = (8, 12, 16)
BODY_X = (6, 42)

Band = Tuple[int, int, Tuple[int, int, int], Tuple[int, int, int], int]

# (x, y) on a 48x128 frame, ordered as config.JOINT_NAMES
CANONICAL_JOINTS = np.array([
    [24, 14], [24, 26],
    [14, 30], [34, 30], [11, 48], [37, 48], [10, 64], [38, 64],
    [18, 68], [30, 68], [17, 92], [31, 92], [17, 116], [31, 116],
], dtype=np.float64)
ARM_SWING_DEG = 30.0
LEG_SPREAD_PX = 4.0
JOINT_JITTER_PX = 0.25


def shift_levels(shift_max_px: int) -> np.ndarray:
    return np.rint(np.linspace(-shift_max_px, shift_max_px, N_SHIFT_LEVELS)).astype(np.int64)


def _palette_color(rng: np.random.Generator) -> Tuple[int, int, int]:
    while True:
        color = tuple(int(PALETTE_LEVELS[i]) for i in rng.integers(len(PALETTE_LEVELS), size=3))
        if color != BACKGROUND:
            return color


def random_appearance(rng: np.random.Generator, height: int = IMAGE_HEIGHT_PX) -> List[Band]:
    """Bands (y0, y1, left colour, right colour, split x) from head to feet."""
    bands: List[Band] = []
    y = 4
    previous = None
    while y < height - 4:
        y1 = min(y + int(BAND_HEIGHTS[rng.integers(len(BAND_HEIGHTS))]), height - 4)
        left = _palette_color(rng)
        while left == previous:
            left = _palette_color(rng)
        right = _palette_color(rng) if rng.random() < 0.5 else left
        split = int(rng.choice([16, 24, 32]))
        bands.append((y, y1, left, right, split))
        previous = left
        y = y1
    return bands


def render_view(bands: List[Band], shift_px: int, rng: np.random.Generator,
                width: int = IMAGE_WIDTH_PX, height: int = IMAGE_HEIGHT_PX) -> np.ndarray:
    """Draw the bands, shift the content down by shift_px (up if negative), add a colour cast."""
    canvas = np.empty((height, width, 3), dtype=np.int64)
    canvas[:] = BACKGROUND
    x0, x1 = BODY_X
    for y0, y1, left, right, split in bands:
        canvas[y0:y1, x0:split] = left
        canvas[y0:y1, split:x1] = right

    shifted = np.empty_like(canvas)
    shifted[:] = BACKGROUND
    if shift_px >= 0:
        shifted[shift_px:] = canvas[:height - shift_px]
    else:
        shifted[:height + shift_px] = canvas[-shift_px:]

    cast = rng.integers(-JITTER, JITTER + 1, size=3)
    return np.clip(shifted + cast, 0, 255).astype(np.uint8)


def _rotate_about(points: np.ndarray, pivot: np.ndarray, degrees: float) -> np.ndarray:
    t = np.radians(degrees)
    rot = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    return (points - pivot) @ rot.T + pivot


def skeleton(level: int, shift_px: int, rng: np.random.Generator, articulated: bool,
             width: int = IMAGE_WIDTH_PX, height: int = IMAGE_HEIGHT_PX) -> np.ndarray:
    """14 joints; articulated views swing arms and spread legs by the shift level."""
    joints = CANONICAL_JOINTS.copy()
    if articulated:
        swing = (level - N_SHIFT_LEVELS // 2) * ARM_SWING_DEG
        joints[[4, 6]] = _rotate_about(joints[[4, 6]], joints[2], swing)
        joints[[5, 7]] = _rotate_about(joints[[5, 7]], joints[3], -swing)
        spread = (level - N_SHIFT_LEVELS // 2) * LEG_SPREAD_PX
        joints[[10, 12], 0] -= spread
        joints[[11, 13], 0] += spread
    joints[:, 1] += shift_px
    joints += rng.normal(scale=JOINT_JITTER_PX, size=joints.shape)
    joints[:, 0] = np.clip(joints[:, 0], 0, width - 1)
    joints[:, 1] = np.clip(joints[:, 1], 0, height - 1)
    return np.round(joints, 2)


def generate_identity(seed: int, identity: int, shift_max_px: int):
    """(pixels_a, pixels_b, joints_a, joints_b, shift_px) for one identity."""
    rng = derive_rng(seed, identity)
    levels = shift_levels(shift_max_px)
    level = int(rng.integers(N_SHIFT_LEVELS))
    shift_px = int(levels[level])
    bands = random_appearance(rng)
    pixels_a = render_view(bands, 0, rng)
    pixels_b = render_view(bands, shift_px, rng)
    joints_a = skeleton(level, 0, rng, articulated=False)
    joints_b = skeleton(level, shift_px, rng, articulated=True)
    return pixels_a, pixels_b, joints_a, joints_b, shift_px


def write_dataset(out_dir, n_identities: int, shift_max_px: int, seed: int) -> DatasetIndex:
    """Write images/ and manifest.json under out_dir; returns the index."""
    if n_identities < 2:
        raise InsufficientDataError(f"need at least 2 identities, got {n_identities}")
    if not 0 <= shift_max_px < IMAGE_HEIGHT_PX // 2:
        raise DimensionError(f"shift_max_px must lie in [0, {IMAGE_HEIGHT_PX // 2}), got {shift_max_px}")

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    entries: List[ManifestEntry] = []
    for identity in range(n_identities):
        pixels_a, pixels_b, joints_a, joints_b, shift_px = generate_identity(seed, identity, shift_max_px)
        name = f"{identity:04d}"
        for camera, pixels, joints in (("a", pixels_a, joints_a), ("b", pixels_b, joints_b)):
            image_id = f"{name}_{camera}"
            rel = f"images/{image_id}.ppm"
            write_ppm(out_dir / rel, pixels)
            entries.append(ManifestEntry(
                image_id=image_id, identity=name, camera=camera, pixels_path=rel,
                joints=[(float(x), float(y)) for x, y in joints],
            ))
        log.debug(f"Identity {name}: shift {shift_px}px")

    write_manifest(out_dir / "manifest.json", entries)
    log.info(f"Wrote {len(entries)} synthetic images for {n_identities} identities to {out_dir}")
    return DatasetIndex(entries=entries, root=str(out_dir))
