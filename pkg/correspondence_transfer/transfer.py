# correspondence_transfer/transfer.py

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from . import state
from .config import Settings
from .errors import CountMismatchError, DimensionError, InsufficientDataError, LayoutMismatchError
from .gmsolver import match_image_pair
from .metric import embed, embedded_distances, euclidean_model, fit_kissme
from .models import (
    AttributedGraph, CompactTemplate, CorrespondenceTemplate, ImageRecord, MetricModel,
    PatchLayout, PoseContext, TemplateStore, TrainingPair,
)
from .posectx import pose_similarity_batch, stack_contexts
from .state import DeltaCounter
from .utils import derive_rng

log = logging.getLogger(__name__)

DISSIMILAR_STREAM = 0xD15


def _dissimilar_pairs(pairs: Sequence[TrainingPair], templates: Sequence[CorrespondenceTemplate],
                      count: int, seed: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Random patch pairs across different identities; same-identity fallback uses unmatched patches."""
    rng = derive_rng(seed, DISSIMILAR_STREAM)
    identities = np.array([p.identity for p in pairs])
    out = []
    single_identity = len(set(identities.tolist())) < 2
    if single_identity:
        log.warning("Only one training identity: dissimilar pairs drawn from unmatched patches of the same pairs")

    for _ in range(count):
        a = int(rng.integers(len(pairs)))
        i = int(rng.integers(pairs[a].probe.graph.n_nodes))
        if single_identity:
            b = a
            matched = int(templates[a].gallery_for_probe[i])
            choices = np.setdiff1d(np.arange(pairs[b].gallery.graph.n_nodes), [matched])
            j = int(choices[rng.integers(len(choices))])
        else:
            others = np.flatnonzero(identities != identities[a])
            b = int(others[rng.integers(len(others))])
            j = int(rng.integers(pairs[b].gallery.graph.n_nodes))
        out.append((pairs[a].probe.graph.features[i], pairs[b].gallery.graph.features[j]))
    return out


def fit_store_metric(pairs: Sequence[TrainingPair], templates: Sequence[CorrespondenceTemplate],
                     settings: Settings, seed: int) -> MetricModel:
    dim = pairs[0].probe.graph.feature_dim
    if settings.metric.kind == "euclidean":
        return euclidean_model(dim)

    similar = []
    for pair, template in zip(pairs, templates):
        for p, g in template.matches:
            similar.append((pair.probe.graph.features[p], pair.gallery.graph.features[g]))
    dissimilar = _dissimilar_pairs(pairs, templates, len(similar), seed)
    return fit_kissme(similar, dissimilar, d_red=settings.metric.d_red, reg=settings.metric.reg)


def build_template_store(train_pairs: Sequence[TrainingPair], settings: Settings, seed: int = 0) -> TemplateStore:
    """One template per positive pair via graph matching, plus the patch metric learned from them."""
    if not train_pairs:
        raise InsufficientDataError("at least one positive training pair is required")
    layout = train_pairs[0].probe.graph.layout
    for pair in train_pairs:
        for record in (pair.probe, pair.gallery):
            if not record.graph.layout.same_grid(layout):
                raise LayoutMismatchError(f"image {record.entry.image_id} does not share the training patch grid")

    templates = []
    for pair in train_pairs:
        matched = match_image_pair(pair.probe.graph, pair.gallery.graph, settings, pair_id=pair.pair_id)
        templates.append(CorrespondenceTemplate(
            pair_id=pair.pair_id, matches=matched.matches,
            probe_pose=pair.probe.pose, gallery_pose=pair.gallery.pose,
        ))
        log.debug(f"Template {pair.pair_id}: {matched.n} correspondences")
    log.info(f"Built {len(templates)} correspondence templates over {layout.n_patches} patches")

    metric = fit_store_metric(train_pairs, templates, settings, seed)
    echo = settings.model_dump(exclude={"threads"})
    return TemplateStore(templates=templates, layout=layout, metric=metric, settings_echo=echo)


class ReferenceIndex:
    """Stacked pose descriptors of a store, for ranking every template against a test pair at once."""

    def __init__(self, store: TemplateStore, n_bins: int):
        self.store = store
        self.n_bins = n_bins
        self.ids = [t.pair_id for t in store.templates]
        self.probe_psi, self.probe_phi = stack_contexts([t.probe_pose for t in store.templates])
        self.gallery_psi, self.gallery_phi = stack_contexts([t.gallery_pose for t in store.templates])
        missing = sum(t.probe_pose is None or t.gallery_pose is None for t in store.templates)
        if missing:
            log.warning(f"{missing} templates carry no pose context; they rank last")

    def similarities(self, probe_pose: Optional[PoseContext], gallery_pose: Optional[PoseContext]) -> np.ndarray:
        if probe_pose is None or gallery_pose is None:
            return np.zeros(len(self.ids))
        return (pose_similarity_batch(probe_pose, self.probe_psi, self.probe_phi, self.n_bins)
                * pose_similarity_batch(gallery_pose, self.gallery_psi, self.gallery_phi, self.n_bins))

    def rank(self, probe_pose: Optional[PoseContext], gallery_pose: Optional[PoseContext],
             R: int) -> List[Tuple[str, float]]:
        sims = self.similarities(probe_pose, gallery_pose)
        order = sorted(range(len(self.ids)), key=lambda t: (-sims[t], self.ids[t]))
        return [(self.ids[t], float(sims[t])) for t in order[:R]]


def rank_references(store: TemplateStore, test_probe_pose: Optional[PoseContext],
                    test_gallery_pose: Optional[PoseContext], R: int, n_bins: int = 8) -> List[Tuple[str, float]]:
    """Top-R (pair_id, pose-pair similarity), descending, ties by pair_id."""
    if R < 1:
        raise CountMismatchError(f"R must be >= 1, got {R}")
    return ReferenceIndex(store, n_bins).rank(test_probe_pose, test_gallery_pose, R)


def select_references(store: TemplateStore, test_probe_pose: Optional[PoseContext],
                      test_gallery_pose: Optional[PoseContext], R: int, n_bins: int = 8) -> List[str]:
    return [pair_id for pair_id, _ in rank_references(store, test_probe_pose, test_gallery_pose, R, n_bins)]


def _check_graphs(probe: AttributedGraph, gallery: AttributedGraph, n: int) -> None:
    if not probe.layout.same_grid(gallery.layout):
        raise LayoutMismatchError("probe and gallery graphs use different patch grids")
    if probe.n_nodes != n:
        raise LayoutMismatchError(f"graphs have {probe.n_nodes} patches but templates hold {n} correspondences")


def _mean_delta(metric: MetricModel, probe_emb: np.ndarray, gallery_emb: np.ndarray,
                probe_idx: np.ndarray, gallery_idx: np.ndarray, counter: Optional[DeltaCounter]) -> float:
    deltas = embedded_distances(metric, probe_emb[probe_idx], gallery_emb[gallery_idx], counter)
    return float(deltas.mean())


def distance_full(probe: AttributedGraph, gallery: AttributedGraph, refs: Sequence[CorrespondenceTemplate],
                  metric: MetricModel, counter: Optional[DeltaCounter] = state.metric_evaluations) -> float:
    """Mean delta over all R*n transferred correspondences."""
    if not refs:
        raise InsufficientDataError("distance_full needs at least one reference template")
    _check_graphs(probe, gallery, refs[0].n)
    matches = np.concatenate([t.matches for t in refs])
    return _mean_delta(metric, embed(metric, probe.features), embed(metric, gallery.features),
                       matches[:, 0], matches[:, 1], counter)


def ensemble_templates(refs: Sequence[CorrespondenceTemplate], probe_layout: PatchLayout,
                       gallery_layout: PatchLayout, k: int) -> CompactTemplate:
    """Average the R suggested offsets per probe patch, keep the k gallery patches nearest the target."""
    if not refs:
        raise InsufficientDataError("ensemble needs at least one reference template")
    if not 1 <= k <= gallery_layout.n_patches:
        raise DimensionError(f"k must lie in [1, {gallery_layout.n_patches}], got {k}")

    suggested = np.stack([t.gallery_for_probe for t in refs])
    probe_centers = probe_layout.centers[np.arange(suggested.shape[1])]
    offsets = gallery_layout.centers[suggested] - probe_centers[None]
    targets = probe_centers + offsets.mean(axis=0)

    dist = cdist(targets, gallery_layout.centers)
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return CompactTemplate(indices=nearest)


def distance_ensemble(probe: AttributedGraph, gallery: AttributedGraph, compact: CompactTemplate,
                      metric: MetricModel, counter: Optional[DeltaCounter] = state.metric_evaluations) -> float:
    """Mean delta over the k*n compact correspondences."""
    _check_graphs(probe, gallery, compact.n)
    probe_idx = np.repeat(np.arange(compact.n), compact.k)
    return _mean_delta(metric, embed(metric, probe.features), embed(metric, gallery.features),
                       probe_idx, compact.indices.ravel(), counter)


def distance_aligned(probe: AttributedGraph, gallery: AttributedGraph, metric: MetricModel,
                     counter: Optional[DeltaCounter] = state.metric_evaluations) -> float:
    """No-transfer baseline: patch j against patch j."""
    _check_graphs(probe, gallery, gallery.n_nodes)
    idx = np.arange(probe.n_nodes)
    return _mean_delta(metric, embed(metric, probe.features), embed(metric, gallery.features), idx, idx, counter)


class PairScorer:
    """Scores test pairs against one store; caches per-image embeddings and compact templates."""

    def __init__(self, store: TemplateStore, settings: Settings,
                 counter: Optional[DeltaCounter] = state.metric_evaluations):
        self.store = store
        self.settings = settings
        self.counter = counter
        self.index = ReferenceIndex(store, settings.pose.n_bins)
        self.templates: Dict[str, CorrespondenceTemplate] = store.by_id()
        self._embeddings: Dict[str, np.ndarray] = {}

    def _embedded(self, record: ImageRecord) -> np.ndarray:
        key = record.entry.image_id
        if key not in self._embeddings:
            if not record.graph.layout.same_grid(self.store.layout):
                raise LayoutMismatchError(f"image {key} does not match the store's patch grid")
            self._embeddings[key] = embed(self.store.metric, record.graph.features)
        return self._embeddings[key]

    def references(self, probe: ImageRecord, gallery: ImageRecord) -> List[CorrespondenceTemplate]:
        ranked = self.index.rank(probe.pose, gallery.pose, self.settings.transfer.R)
        return [self.templates[pair_id] for pair_id, _ in ranked]

    def correspondences(self, probe: ImageRecord, gallery: ImageRecord) -> Tuple[np.ndarray, np.ndarray]:
        """(probe_idx, gallery_idx) used by the configured scoring mode."""
        scoring = self.settings.transfer.scoring
        n = self.store.layout.n_patches
        if scoring == "aligned":
            idx = np.arange(n)
            return idx, idx
        refs = self.references(probe, gallery)
        if scoring == "full":
            matches = np.concatenate([t.matches for t in refs])
            return matches[:, 0], matches[:, 1]
        compact = ensemble_templates(refs, self.store.layout, self.store.layout, self.settings.transfer.k)
        return np.repeat(np.arange(compact.n), compact.k), compact.indices.ravel()

    def score(self, probe: ImageRecord, gallery: ImageRecord) -> float:
        probe_idx, gallery_idx = self.correspondences(probe, gallery)
        return _mean_delta(self.store.metric, self._embedded(probe), self._embedded(gallery),
                           probe_idx, gallery_idx, self.counter)
