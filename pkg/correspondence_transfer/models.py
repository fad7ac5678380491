# correspondence_transfer/models.py

from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .config import N_JOINTS
from .errors import CountMismatchError, DimensionError, IndexRangeError
from .utils import readonly


class ArrayModel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)


class PatchLayout(ArrayModel):
    image_width_px: int = Field(ge=1)
    image_height_px: int = Field(ge=1)
    patch_w_px: int = Field(ge=1)
    patch_h_px: int = Field(ge=1)
    stride_w_px: int = Field(ge=1)
    stride_h_px: int = Field(ge=1)
    centers: np.ndarray
    n_rows: int = Field(ge=1)
    n_cols: int = Field(ge=1)
    stripe_of_patch: np.ndarray
    n_stripes: int = Field(ge=1)

    @field_validator("centers", mode="before")
    @classmethod
    def as_centers(cls, v):
        return readonly(np.asarray(v, dtype=np.float64).reshape(-1, 2))

    @field_validator("stripe_of_patch", mode="before")
    @classmethod
    def as_stripes(cls, v):
        return readonly(np.asarray(v, dtype=np.int64).reshape(-1))

    @model_validator(mode="after")
    def check_grid(self) -> "PatchLayout":
        n = self.n_rows * self.n_cols
        if len(self.centers) != n or len(self.stripe_of_patch) != n:
            raise CountMismatchError(f"layout holds {len(self.centers)} centers for a {self.n_rows}x{self.n_cols} grid")
        return self

    @property
    def n_patches(self) -> int:
        return self.n_rows * self.n_cols

    def stripe_rows(self, stripe: int) -> Tuple[int, int]:
        """First and last (inclusive) patch row of a stripe."""
        rows = np.flatnonzero(self.stripe_of_patch[:: self.n_cols] == stripe)
        return int(rows[0]), int(rows[-1])

    def patches_in_rows(self, first_row: int, last_row: int) -> np.ndarray:
        return np.arange(first_row * self.n_cols, (last_row + 1) * self.n_cols, dtype=np.int64)

    def grid_signature(self) -> Tuple[int, ...]:
        return (
            self.image_width_px, self.image_height_px, self.patch_w_px, self.patch_h_px,
            self.stride_w_px, self.stride_h_px, self.n_stripes,
        )

    def same_grid(self, other: "PatchLayout") -> bool:
        return self.grid_signature() == other.grid_signature()


class AttributedGraph(ArrayModel):
    layout: PatchLayout
    positions_norm: np.ndarray
    features: np.ndarray

    @field_validator("positions_norm", "features", mode="before")
    @classmethod
    def as_matrix(cls, v):
        return readonly(np.atleast_2d(np.asarray(v, dtype=np.float64)))

    @model_validator(mode="after")
    def check_sizes(self) -> "AttributedGraph":
        n = self.layout.n_patches
        if len(self.positions_norm) != n or len(self.features) != n:
            raise CountMismatchError(
                f"graph has {len(self.positions_norm)} positions and {len(self.features)} features for {n} patches"
            )
        return self

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def n_nodes(self) -> int:
        return self.layout.n_patches


class MatchProblem(ArrayModel):
    probe_nodes: np.ndarray
    gallery_nodes: np.ndarray

    @field_validator("probe_nodes", "gallery_nodes", mode="before")
    @classmethod
    def as_indices(cls, v):
        return readonly(np.asarray(v, dtype=np.int64).reshape(-1))

    @model_validator(mode="after")
    def check_sizes(self) -> "MatchProblem":
        if self.n1 < 1 or self.n2 < self.n1:
            raise CountMismatchError(f"match problem needs 1 <= n1 <= n2, got n1={self.n1}, n2={self.n2}")
        return self

    @property
    def n1(self) -> int:
        return len(self.probe_nodes)

    @property
    def n2(self) -> int:
        return len(self.gallery_nodes)


class AffinityMatrix(ArrayModel):
    entries: np.ndarray
    n1: int = Field(ge=1)
    n2: int = Field(ge=1)
    sigma_p: float = Field(gt=0)
    sigma_f: float = Field(gt=0)

    @field_validator("entries", mode="before")
    @classmethod
    def as_square(cls, v):
        return readonly(np.atleast_2d(np.asarray(v, dtype=np.float64)))

    @model_validator(mode="after")
    def check_order(self) -> "AffinityMatrix":
        if self.entries.shape != (self.order, self.order):
            raise DimensionError(f"affinity matrix shape {self.entries.shape} does not match order {self.order}")
        return self

    @property
    def order(self) -> int:
        return self.n1 * self.n2


class SoftAssignment(ArrayModel):
    weights: np.ndarray
    iterations_used: int = Field(ge=0)
    converged: bool

    @field_validator("weights", mode="before")
    @classmethod
    def as_weights(cls, v):
        return readonly(np.atleast_2d(np.asarray(v, dtype=np.float64)))


class Assignment(ArrayModel):
    matches: List[Tuple[int, int]]
    objective: float

    @model_validator(mode="after")
    def check_one_to_one(self) -> "Assignment":
        probes = [p for p, _ in self.matches]
        galleries = [g for _, g in self.matches]
        if len(set(probes)) != len(probes) or len(set(galleries)) != len(galleries):
            raise IndexRangeError(f"assignment violates one-to-one constraints: {self.matches}")
        return self


class JointSet(ArrayModel):
    coords: np.ndarray
    valid: np.ndarray

    @field_validator("coords", mode="before")
    @classmethod
    def as_coords(cls, v):
        return readonly(np.asarray(v, dtype=np.float64).reshape(-1, 2))

    @field_validator("valid", mode="before")
    @classmethod
    def as_flags(cls, v):
        return readonly(np.asarray(v, dtype=bool).reshape(-1))

    @model_validator(mode="after")
    def check_count(self) -> "JointSet":
        if len(self.coords) != N_JOINTS or len(self.valid) != N_JOINTS:
            raise CountMismatchError(f"expected {N_JOINTS} joints, got {len(self.coords)}")
        return self

    @classmethod
    def from_coords(cls, coords) -> "JointSet":
        coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
        return cls(coords=coords, valid=np.ones(len(coords), dtype=bool))


class PoseContext(ArrayModel):
    psi: np.ndarray
    phi: np.ndarray

    @field_validator("psi", "phi", mode="before")
    @classmethod
    def as_bins(cls, v):
        return readonly(np.asarray(v, dtype=np.int64))

    @model_validator(mode="after")
    def check_mask(self) -> "PoseContext":
        if self.psi.shape != self.phi.shape:
            raise DimensionError(f"psi {self.psi.shape} and phi {self.phi.shape} differ in shape")
        if not np.array_equal(self.psi == 0, self.phi == 0):
            raise DimensionError("psi and phi must share the same invalid-entry mask")
        return self

    @property
    def valid_mask(self) -> np.ndarray:
        return self.psi > 0


class MetricModel(ArrayModel):
    pca_mean: np.ndarray
    pca_basis: np.ndarray
    M: np.ndarray
    kind: str = "kissme"

    @field_validator("pca_mean", mode="before")
    @classmethod
    def as_vector(cls, v):
        return readonly(np.asarray(v, dtype=np.float64).reshape(-1))

    @field_validator("pca_basis", "M", mode="before")
    @classmethod
    def as_matrix(cls, v):
        return readonly(np.atleast_2d(np.asarray(v, dtype=np.float64)))

    @model_validator(mode="after")
    def check_shapes(self) -> "MetricModel":
        d_in, d_red = self.pca_basis.shape
        if self.pca_mean.shape != (d_in,) or self.M.shape != (d_red, d_red):
            raise DimensionError(
                f"metric shapes disagree: mean {self.pca_mean.shape}, basis {self.pca_basis.shape}, M {self.M.shape}"
            )
        return self

    @property
    def input_dim(self) -> int:
        return int(self.pca_basis.shape[0])

    @property
    def reduced_dim(self) -> int:
        return int(self.pca_basis.shape[1])


class CorrespondenceTemplate(ArrayModel):
    pair_id: str = ""
    matches: np.ndarray
    probe_pose: Optional[PoseContext] = None
    gallery_pose: Optional[PoseContext] = None

    @field_validator("matches", mode="before")
    @classmethod
    def as_matches(cls, v):
        return readonly(np.asarray(v, dtype=np.int64).reshape(-1, 2))

    @model_validator(mode="after")
    def check_coverage(self) -> "CorrespondenceTemplate":
        if not np.array_equal(np.sort(self.matches[:, 0]), np.arange(len(self.matches))):
            raise IndexRangeError(f"template {self.pair_id!r} does not cover every probe patch exactly once")
        return self

    @property
    def n(self) -> int:
        return len(self.matches)

    @property
    def gallery_for_probe(self) -> np.ndarray:
        """Gallery patch index per probe patch, indexed by probe patch."""
        order = np.argsort(self.matches[:, 0], kind="stable")
        return self.matches[order, 1]


class TemplateStore(ArrayModel):
    templates: List[CorrespondenceTemplate]
    layout: PatchLayout
    metric: MetricModel
    settings_echo: Dict = Field(default_factory=dict)

    @model_validator(mode="after")
    def check_templates(self) -> "TemplateStore":
        sizes = {t.n for t in self.templates}
        if len(sizes) > 1 or (sizes and sizes.pop() != self.layout.n_patches):
            raise CountMismatchError("every template must hold one correspondence per layout patch")
        for t in self.templates:
            if t.matches[:, 1].min(initial=0) < 0 or t.matches[:, 1].max(initial=0) >= self.layout.n_patches:
                raise IndexRangeError(f"template {t.pair_id!r} references a gallery patch outside the layout")
        return self

    def by_id(self) -> Dict[str, CorrespondenceTemplate]:
        return {t.pair_id: t for t in self.templates}


class CompactTemplate(ArrayModel):
    indices: np.ndarray

    @field_validator("indices", mode="before")
    @classmethod
    def as_indices(cls, v):
        return readonly(np.atleast_2d(np.asarray(v, dtype=np.int64)))

    @property
    def n(self) -> int:
        return int(self.indices.shape[0])

    @property
    def k(self) -> int:
        return int(self.indices.shape[1])


class CmcCurve(ArrayModel):
    rates: np.ndarray

    @field_validator("rates", mode="before")
    @classmethod
    def as_rates(cls, v):
        return readonly(np.asarray(v, dtype=np.float64).reshape(-1))

    def rank(self, r: int) -> float:
        """Match rate in percent at 1-based rank r (clamped to the gallery size)."""
        return float(self.rates[min(r, len(self.rates)) - 1])


class ManifestEntry(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    image_id: str
    identity: str
    camera: str
    pixels_path: Optional[str] = None
    features_path: Optional[str] = None
    width: Optional[int] = Field(default=None, ge=1)
    height: Optional[int] = Field(default=None, ge=1)
    joints: Optional[List[Optional[Tuple[float, float]]]] = None

    @field_validator("identity", "camera", mode="before")
    @classmethod
    def as_text(cls, v):
        return str(v)

    @model_validator(mode="after")
    def check_sources(self) -> "ManifestEntry":
        if (self.pixels_path is None) == (self.features_path is None):
            raise ValueError("exactly one of pixels_path or features_path must be given")
        if self.joints is not None and len(self.joints) != N_JOINTS:
            raise ValueError(f"expected {N_JOINTS} joints, got {len(self.joints)}")
        return self


class DatasetIndex(BaseModel):
    model_config = ConfigDict(frozen=True)

    entries: List[ManifestEntry]
    root: str = "."

    @model_validator(mode="after")
    def check_unique(self) -> "DatasetIndex":
        ids = [e.image_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("image_id values must be unique")
        return self

    def identities(self) -> List[str]:
        return sorted({e.identity for e in self.entries})

    def by_identity(self) -> Dict[str, List[ManifestEntry]]:
        grouped: Dict[str, List[ManifestEntry]] = {}
        for e in self.entries:
            grouped.setdefault(e.identity, []).append(e)
        return grouped

    def image_counts(self) -> Dict[str, int]:
        return {identity: len(items) for identity, items in self.by_identity().items()}

    def get(self, image_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.image_id == image_id:
                return e
        raise KeyError(image_id)


class ImageRecord(ArrayModel):
    """A loaded manifest entry: its graph and (optional) pose context."""
    entry: ManifestEntry
    graph: AttributedGraph
    pose: Optional[PoseContext] = None


class TrainingPair(ArrayModel):
    pair_id: str
    identity: str
    probe: ImageRecord
    gallery: ImageRecord
