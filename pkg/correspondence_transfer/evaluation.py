# correspondence_transfer/evaluation.py

import logging
import math
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import state
from .codec import load_records
from .config import Settings, TransferSettings
from .errors import DimensionError, InsufficientDataError, MissingGroundTruthError
from .models import CmcCurve, DatasetIndex, ImageRecord, ManifestEntry, TemplateStore, TrainingPair
from .state import DeltaCounter
from .tasks import run_jobs
from .transfer import PairScorer, build_template_store
from .utils import derive_rng, derive_seed

log = logging.getLogger(__name__)

SPLIT_STREAM = 1
DRAW_STREAM = 2
REPORT_RANKS = (1, 5, 10, 20)

Records = Dict[str, ImageRecord]


def _cameras(entries: Sequence[ManifestEntry]) -> Dict[str, List[ManifestEntry]]:
    by_camera: Dict[str, List[ManifestEntry]] = {}
    for e in entries:
        by_camera.setdefault(e.camera, []).append(e)
    return {cam: by_camera[cam] for cam in sorted(by_camera)}


def eligible_identities(index: DatasetIndex) -> List[str]:
    """Identities seen by at least two cameras."""
    grouped = index.by_identity()
    eligible = [i for i in sorted(grouped) if len(_cameras(grouped[i])) >= 2]
    skipped = len(grouped) - len(eligible)
    if skipped:
        log.warning(f"Skipping {skipped} identities seen by a single camera")
    return eligible


def split_dataset(index: DatasetIndex, seed: int) -> Tuple[List[str], List[str]]:
    """Seeded half/half identity split; an odd identity goes to training."""
    identities = eligible_identities(index)
    if len(identities) < 2:
        raise InsufficientDataError(f"need at least 2 identities to split, got {len(identities)}")
    order = derive_rng(seed, SPLIT_STREAM).permutation(len(identities))
    shuffled = [identities[i] for i in order]
    n_train = (len(shuffled) + 1) // 2
    return sorted(shuffled[:n_train]), sorted(shuffled[n_train:])


def positive_pairs(index: DatasetIndex, records: Records, identities: Sequence[str]) -> List[TrainingPair]:
    """Every cross-camera image pair of each identity, lower camera id on the probe side."""
    grouped = index.by_identity()
    pairs: List[TrainingPair] = []
    for identity in identities:
        cameras = list(_cameras(grouped[identity]).values())
        for a, probe_cam in enumerate(cameras):
            for gallery_cam in cameras[a + 1:]:
                for p in probe_cam:
                    for g in gallery_cam:
                        pairs.append(TrainingPair(
                            pair_id=f"{p.image_id}|{g.image_id}", identity=identity,
                            probe=records[p.image_id], gallery=records[g.image_id],
                        ))
    return pairs


def draw_test_images(index: DatasetIndex, identities: Sequence[str], seed: int,
                     multi_shot: bool = False) -> Tuple[List[ManifestEntry], List[ManifestEntry]]:
    """One probe from each identity's first camera; gallery image(s) from a drawn second camera."""
    rng = derive_rng(seed, DRAW_STREAM)
    grouped = index.by_identity()
    probes, galleries = [], []
    for identity in identities:
        cameras = list(_cameras(grouped[identity]).values())
        probe_cam = cameras[0]
        gallery_cam = cameras[1 + int(rng.integers(len(cameras) - 1))]
        probes.append(probe_cam[int(rng.integers(len(probe_cam)))])
        if multi_shot:
            galleries.extend(gallery_cam)
        else:
            galleries.append(gallery_cam[int(rng.integers(len(gallery_cam)))])
    return probes, galleries


def distance_matrix(scorer: PairScorer, probes: Sequence[ImageRecord], galleries: Sequence[ImageRecord],
                    threads: int = 1) -> np.ndarray:
    def row(p: ImageRecord):
        return lambda: [scorer.score(p, g) for g in galleries]

    rows = run_jobs([row(p) for p in probes], threads)
    return np.array(rows, dtype=np.float64).reshape(len(probes), len(galleries))


def aggregate_by_identity(distances: np.ndarray, gallery_ids: Sequence[str]) -> Tuple[np.ndarray, List[str]]:
    """Multi-shot gallery: minimum distance over each identity's gallery images."""
    gallery_ids = np.asarray(gallery_ids, dtype=object)
    unique = list(dict.fromkeys(gallery_ids.tolist()))
    columns = [distances[:, gallery_ids == identity].min(axis=1) for identity in unique]
    return np.stack(columns, axis=1), unique


def cmc_curve(distances, probe_ids: Sequence[str], gallery_ids: Sequence[str]) -> CmcCurve:
    """Rate (percent) of probes whose first true match sits within rank r; ties go to the lower gallery index."""
    distances = np.asarray(distances, dtype=np.float64)
    probe_ids = np.asarray(probe_ids, dtype=object)
    gallery_ids = np.asarray(gallery_ids, dtype=object)
    if distances.shape != (len(probe_ids), len(gallery_ids)):
        raise DimensionError(f"distance matrix {distances.shape} does not match "
                             f"{len(probe_ids)} probes x {len(gallery_ids)} gallery items")

    order = np.argsort(distances, axis=1, kind="stable")
    ranks = np.empty(len(probe_ids), dtype=np.int64)
    for p, probe_id in enumerate(probe_ids):
        hits = np.flatnonzero(gallery_ids[order[p]] == probe_id)
        if len(hits) == 0:
            raise MissingGroundTruthError(f"probe {probe_id!r} has no true match in the gallery")
        ranks[p] = hits[0] + 1

    counts = np.bincount(ranks, minlength=len(gallery_ids) + 1)[1:]
    return CmcCurve(rates=100.0 * np.cumsum(counts) / len(probe_ids))


def average_curves(curves: Sequence[CmcCurve]) -> CmcCurve:
    """Element-wise mean, exactly rounded so the result does not depend on trial order."""
    stacked = np.stack([c.rates for c in curves])
    return CmcCurve(rates=[math.fsum(column) / len(curves) for column in stacked.T])


def evaluate_store(store: TemplateStore, records: Records, probes: Sequence[ManifestEntry],
                   galleries: Sequence[ManifestEntry], settings: Settings, multi_shot: bool = False,
                   counter: Optional[DeltaCounter] = state.metric_evaluations, threads: int = 1) -> CmcCurve:
    """CMC of one store on one probe/gallery draw; delta evaluations are added to counter."""
    # per-call count; concurrent trials share counter
    local = DeltaCounter()
    scorer = PairScorer(store, settings, local)
    distances = distance_matrix(scorer, [records[e.image_id] for e in probes],
                                [records[e.image_id] for e in galleries], threads)
    log.debug(f"{local.count / distances.size:.1f} delta evaluations per test pair ({settings.transfer.scoring}, "
              f"R={settings.transfer.R}, k={settings.transfer.k})")
    if counter is not None:
        counter.add(local.count)

    gallery_ids = [e.identity for e in galleries]
    if multi_shot:
        distances, gallery_ids = aggregate_by_identity(distances, gallery_ids)
    return cmc_curve(distances, [e.identity for e in probes], gallery_ids)


def trial_seeds(master: int, trial: int) -> Tuple[int, int, int]:
    split_seed, store_seed, draw_seed = derive_seed(master, trial).generate_state(3)
    return int(split_seed), int(store_seed), int(draw_seed)


def run_trial(index: DatasetIndex, records: Records, settings: Settings, trial: int,
              variants: Optional[Sequence[TransferSettings]] = None, threads: int = 1) -> List[CmcCurve]:
    """One split, one store, then one CMC curve per transfer variant."""
    variants = list(variants) if variants else [settings.transfer]
    split_seed, store_seed, draw_seed = trial_seeds(settings.protocol.seed, trial)

    train, test = split_dataset(index, split_seed)
    store = build_template_store(positive_pairs(index, records, train), settings, seed=store_seed)
    probes, galleries = draw_test_images(index, test, draw_seed, settings.protocol.multi_shot)

    curves = []
    for variant in variants:
        scoped = settings.model_copy(update={"transfer": variant})
        curves.append(evaluate_store(store, records, probes, galleries, scoped,
                                     settings.protocol.multi_shot, threads=threads))
    log.info(f"Trial {trial}: rank-1 " + ", ".join(f"{c.rank(1):.1f}%" for c in curves))
    return curves


def run_trials(index: DatasetIndex, records: Records, settings: Settings,
               variants: Optional[Sequence[TransferSettings]] = None) -> List[List[CmcCurve]]:
    """Per-trial curves, indexed [trial][variant]."""
    trials = settings.protocol.trials
    if trials < 1:
        raise InsufficientDataError(f"trials must be >= 1, got {trials}")
    # parallelise across trials when there are several, across probe rows otherwise
    row_threads = settings.threads if trials == 1 else 1
    jobs = [
        (lambda t=t: run_trial(index, records, settings, t, variants, threads=row_threads))
        for t in range(trials)
    ]
    return run_jobs(jobs, settings.threads if trials > 1 else 1)


def run_protocol(index: DatasetIndex, records: Records, settings: Settings) -> CmcCurve:
    """Repeated random splits, CMC averaged over trials."""
    per_trial = run_trials(index, records, settings)
    curve = average_curves([curves[0] for curves in per_trial])
    log.info(f"Protocol over {settings.protocol.trials} trials: "
             + ", ".join(f"rank-{r} {curve.rank(r):.1f}%" for r in REPORT_RANKS))
    return curve


def sweep_rk(index: DatasetIndex, records: Records, settings: Settings,
             Rs: Sequence[int], ks: Sequence[int]) -> List[Tuple[Dict[str, Any], CmcCurve]]:
    """Protocol over an (R, k) grid; each trial's store is shared by every grid point."""
    variants = [settings.transfer.model_copy(update={"R": R, "k": k}) for R in Rs for k in ks]
    per_trial = run_trials(index, records, settings, variants)
    results = []
    for v, variant in enumerate(variants):
        curve = average_curves([curves[v] for curves in per_trial])
        results.append(({"R": variant.R, "k": variant.k}, curve))
        log.info(f"R={variant.R} k={variant.k}: rank-1 {curve.rank(1):.1f}%")
    return results


def sweep_patches(index: DatasetIndex, settings: Settings,
                  grid: Sequence[Tuple[int, int, int, int]]) -> List[Tuple[Dict[str, Any], CmcCurve]]:
    """Protocol per (patch_w, patch_h, stride_w, stride_h); graphs are rebuilt from pixels each time."""
    results = []
    for w, h, stride_w, stride_h in grid:
        patch = settings.patch.model_copy(update={"w": w, "h": h, "stride_w": stride_w, "stride_h": stride_h})
        scoped = settings.model_copy(update={"patch": patch})
        records = load_records(index, scoped)
        curve = run_protocol(index, records, scoped)
        results.append(({"patch_w": w, "patch_h": h, "stride_w": stride_w, "stride_h": stride_h}, curve))
    return results
