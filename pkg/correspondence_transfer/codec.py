# correspondence_transfer/codec.py

import base64
import csv
import io
import json
import logging
import re
import struct
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import orjson
from PIL import Image, UnidentifiedImageError
from pydantic import ValidationError

from .config import IMAGE_HEIGHT_PX, IMAGE_WIDTH_PX, Settings
from .errors import (
    DegeneratePoseError, FeatureFileError, LayoutMismatchError, ManifestError, MissingDataError, StoreFormatError,
)
from .imggraph import build_graph, decompose_into_patches, extract_builtin_features
from .models import (
    CmcCurve, CorrespondenceTemplate, DatasetIndex, ImageRecord, JointSet, ManifestEntry, MetricModel,
    PatchLayout, PoseContext, TemplateStore,
)
from .posectx import compute_pose_context

log = logging.getLogger(__name__)

GCTF_MAGIC = b"GCTF"
GCTF_VERSION = 1
GCTF_HEADER = struct.Struct("<4sIII")

STORE_FORMAT = "gct-template-store"
STORE_VERSION = 1

_WHITESPACE = re.compile(r"\s*")


# --- GCTF feature files ---

def write_gctf(path, features) -> None:
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    n_patches, dim = features.shape
    with open(path, "wb") as fh:
        fh.write(GCTF_HEADER.pack(GCTF_MAGIC, GCTF_VERSION, n_patches, dim))
        fh.write(features.astype("<f4").tobytes(order="C"))


def read_gctf(path) -> np.ndarray:
    """Read an (n_patches, dim) float matrix from a GCTF file."""
    path = Path(path)
    if not path.is_file():
        raise MissingDataError(path)
    data = path.read_bytes()
    if len(data) < GCTF_HEADER.size:
        raise FeatureFileError(f"{path}: truncated GCTF header")
    magic, version, n_patches, dim = GCTF_HEADER.unpack_from(data)
    if magic != GCTF_MAGIC:
        raise FeatureFileError(f"{path}: bad magic {magic!r}")
    if version != GCTF_VERSION:
        raise FeatureFileError(f"{path}: unsupported GCTF version {version}")
    expected = GCTF_HEADER.size + 4 * n_patches * dim
    if len(data) != expected:
        raise FeatureFileError(f"{path}: expected {expected} bytes for {n_patches}x{dim} floats, got {len(data)}")
    payload = np.frombuffer(data, dtype="<f4", offset=GCTF_HEADER.size)
    return payload.reshape(n_patches, dim).astype(np.float64)


# --- PPM pixels ---

def read_ppm(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingDataError(path)
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as e:
        raise FeatureFileError(f"{path}: unreadable image: {e}") from e


def write_ppm(path, pixels) -> None:
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="RGB").save(path, format="PPM")


# --- Manifest ---

def _line_of(text: str, pos: int) -> int:
    return text.count("\n", 0, pos) + 1


def _skip(text: str, pos: int) -> int:
    return _WHITESPACE.match(text, pos).end()


def _scan_entries(text: str) -> Iterator[Tuple[int, Any]]:
    """Yield (line, decoded object) for every element of the top-level JSON array."""
    decoder = json.JSONDecoder()
    pos = _skip(text, 0)
    if pos >= len(text) or text[pos] != "[":
        raise ManifestError("manifest must be a JSON array of entries", line=_line_of(text, pos))
    pos = _skip(text, pos + 1)
    if pos < len(text) and text[pos] == "]":
        pos = _skip(text, pos + 1)
    else:
        while True:
            try:
                obj, end = decoder.raw_decode(text, pos)
            except json.JSONDecodeError as e:
                raise ManifestError(f"invalid JSON: {e.msg}", line=e.lineno) from e
            yield _line_of(text, pos), obj
            pos = _skip(text, end)
            if pos < len(text) and text[pos] == ",":
                pos = _skip(text, pos + 1)
                continue
            if pos < len(text) and text[pos] == "]":
                pos = _skip(text, pos + 1)
                break
            raise ManifestError("expected ',' or ']' after entry", line=_line_of(text, pos))
    if pos != len(text):
        raise ManifestError("trailing content after the entry array", line=_line_of(text, pos))


def parse_manifest(text: str, root: str = ".") -> DatasetIndex:
    entries: List[ManifestEntry] = []
    seen: Dict[str, int] = {}
    for line, obj in _scan_entries(text):
        if not isinstance(obj, dict):
            raise ManifestError(f"entry must be an object, got {type(obj).__name__}", line=line)
        try:
            entry = ManifestEntry(**obj)
        except ValidationError as e:
            problems = "; ".join(f"{'.'.join(map(str, err['loc'])) or 'entry'}: {err['msg']}" for err in e.errors())
            raise ManifestError(problems, line=line) from e
        if entry.image_id in seen:
            raise ManifestError(f"duplicate image_id {entry.image_id!r} (first on line {seen[entry.image_id]})",
                                line=line)
        seen[entry.image_id] = line
        entries.append(entry)
    return DatasetIndex(entries=entries, root=root)


def load_manifest(path) -> DatasetIndex:
    """Parse a manifest file; relative data paths resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise MissingDataError(path, "manifest not found")
    index = parse_manifest(path.read_text(encoding="utf-8"), root=str(path.parent))
    log.info(f"Loaded manifest {path}: {len(index.entries)} images, {len(index.identities())} identities")
    return index


def write_manifest(path, entries: Sequence[ManifestEntry]) -> None:
    """One entry per line so load errors point at the offending image."""
    lines = [json.dumps(e.model_dump(exclude_none=True), sort_keys=True) for e in entries]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("[\n" + ",\n".join(lines) + "\n]\n")


# --- Records ---

def joints_of(entry: ManifestEntry, width: int, height: int) -> Optional[JointSet]:
    """Joint set of an entry; null or out-of-image joints are marked invalid."""
    if entry.joints is None:
        return None
    coords = np.zeros((len(entry.joints), 2))
    valid = np.zeros(len(entry.joints), dtype=bool)
    for j, point in enumerate(entry.joints):
        if point is None:
            continue
        x, y = point
        coords[j] = (x, y)
        valid[j] = 0 <= x < width and 0 <= y < height
    return JointSet(coords=coords, valid=valid)


def _pose_of(entry: ManifestEntry, width: int, height: int, n_bins: int) -> Optional[PoseContext]:
    joints = joints_of(entry, width, height)
    if joints is None:
        log.warning(f"Image {entry.image_id} has no joints; it gets no pose context")
        return None
    try:
        return compute_pose_context(joints, n_bins)
    except DegeneratePoseError as e:
        log.warning(f"Image {entry.image_id}: {e}; it gets no pose context")
        return None


def load_record(index: DatasetIndex, entry: ManifestEntry, settings: Settings,
                layouts: Optional[Dict[Tuple[int, int], PatchLayout]] = None) -> ImageRecord:
    layouts = {} if layouts is None else layouts
    root = Path(index.root)
    patch = settings.patch

    if entry.pixels_path is not None:
        pixels = read_ppm(root / entry.pixels_path)
        height, width = pixels.shape[:2]
    else:
        features = read_gctf(root / entry.features_path)
        width = entry.width or IMAGE_WIDTH_PX
        height = entry.height or IMAGE_HEIGHT_PX

    size = (width, height)
    if size not in layouts:
        layouts[size] = decompose_into_patches(width, height, patch.w, patch.h,
                                               patch.stride_w, patch.stride_h, patch.n_stripes)
    layout = layouts[size]

    if entry.pixels_path is not None:
        features = extract_builtin_features(pixels, layout, patch.feature_bins)
    elif len(features) != layout.n_patches:
        raise LayoutMismatchError(
            f"{entry.features_path}: {len(features)} feature rows but the {width}x{height} grid has "
            f"{layout.n_patches} patches"
        )

    return ImageRecord(entry=entry, graph=build_graph(layout, features),
                       pose=_pose_of(entry, width, height, settings.pose.n_bins))


def load_records(index: DatasetIndex, settings: Settings) -> Dict[str, ImageRecord]:
    layouts: Dict[Tuple[int, int], PatchLayout] = {}
    records = {e.image_id: load_record(index, e, settings, layouts) for e in index.entries}
    log.info(f"Loaded {len(records)} image graphs on {len(layouts)} patch grid(s)")
    return records


# --- Template store ---

def _encode_array(array: np.ndarray, dtype: str) -> Dict[str, Any]:
    array = np.ascontiguousarray(array, dtype=dtype)
    return {"dtype": dtype, "shape": list(array.shape), "data": base64.b64encode(array.tobytes()).decode("ascii")}


def _decode_array(doc: Dict[str, Any]) -> np.ndarray:
    dtype = doc["dtype"]
    if dtype not in ("<i4", "<f8"):
        raise StoreFormatError(f"unsupported array dtype {dtype!r}")
    raw = base64.b64decode(doc["data"], validate=True)
    return np.frombuffer(raw, dtype=dtype).reshape(doc["shape"]).copy()


def _encode_pose(pose: Optional[PoseContext]) -> Optional[Dict[str, Any]]:
    if pose is None:
        return None
    return {"psi": _encode_array(pose.psi, "<i4"), "phi": _encode_array(pose.phi, "<i4")}


def _decode_pose(doc: Optional[Dict[str, Any]]) -> Optional[PoseContext]:
    if doc is None:
        return None
    return PoseContext(psi=_decode_array(doc["psi"]), phi=_decode_array(doc["phi"]))


def dump_store(store: TemplateStore) -> bytes:
    layout = store.layout
    doc = {
        "format": STORE_FORMAT,
        "version": STORE_VERSION,
        "settings": store.settings_echo,
        "layout": {
            "image_width_px": layout.image_width_px, "image_height_px": layout.image_height_px,
            "patch_w_px": layout.patch_w_px, "patch_h_px": layout.patch_h_px,
            "stride_w_px": layout.stride_w_px, "stride_h_px": layout.stride_h_px,
            "n_stripes": layout.n_stripes,
        },
        "metric": {
            "kind": store.metric.kind,
            "pca_mean": _encode_array(store.metric.pca_mean, "<f8"),
            "pca_basis": _encode_array(store.metric.pca_basis, "<f8"),
            "M": _encode_array(store.metric.M, "<f8"),
        },
        "templates": [
            {
                "pair_id": t.pair_id,
                "matches": _encode_array(t.matches, "<i4"),
                "probe_pose": _encode_pose(t.probe_pose),
                "gallery_pose": _encode_pose(t.gallery_pose),
            }
            for t in store.templates
        ],
    }
    return orjson.dumps(doc, option=orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2)


def parse_store(data: bytes) -> TemplateStore:
    try:
        doc = orjson.loads(data)
        if doc.get("format") != STORE_FORMAT:
            raise StoreFormatError(f"not a template store (format={doc.get('format')!r})")
        if doc.get("version") != STORE_VERSION:
            raise StoreFormatError(f"unsupported store version {doc.get('version')!r}")
        lay = doc["layout"]
        layout = decompose_into_patches(
            lay["image_width_px"], lay["image_height_px"], lay["patch_w_px"], lay["patch_h_px"],
            lay["stride_w_px"], lay["stride_h_px"], lay["n_stripes"],
        )
        met = doc["metric"]
        metric = MetricModel(pca_mean=_decode_array(met["pca_mean"]), pca_basis=_decode_array(met["pca_basis"]),
                             M=_decode_array(met["M"]), kind=met["kind"])
        templates = [
            CorrespondenceTemplate(
                pair_id=t["pair_id"], matches=_decode_array(t["matches"]),
                probe_pose=_decode_pose(t["probe_pose"]), gallery_pose=_decode_pose(t["gallery_pose"]),
            )
            for t in doc["templates"]
        ]
        return TemplateStore(templates=templates, layout=layout, metric=metric, settings_echo=doc["settings"])
    except StoreFormatError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise StoreFormatError(f"malformed template store: {e}") from e


def write_store(path, store: TemplateStore) -> None:
    Path(path).write_bytes(dump_store(store))
    log.info(f"Wrote template store with {len(store.templates)} templates to {path}")


def read_store(path) -> TemplateStore:
    path = Path(path)
    if not path.is_file():
        raise MissingDataError(path, "template store not found")
    return parse_store(path.read_bytes())


# --- Reports ---

def write_cmc_csv(path, curve: CmcCurve) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "rate"])
        for r, rate in enumerate(curve.rates, start=1):
            writer.writerow([r, f"{rate:.6f}"])


def write_sweep_csv(path, rows: Sequence[Tuple[Dict[str, Any], CmcCurve]], ranks: Sequence[int]) -> None:
    """One row per configuration: its parameters, then the rate at each listed rank."""
    keys = list(rows[0][0].keys()) if rows else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(keys + [f"rank{r}" for r in ranks])
        for params, curve in rows:
            writer.writerow([params[k] for k in keys] + [f"{curve.rank(r):.6f}" for r in ranks])


def format_correspondences_csv(rows: Sequence[Tuple[int, int, float, float, float]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["probe_index", "gallery_index", "delta", "dx_px", "dy_px"])
    for probe, gallery, delta, dx, dy in rows:
        writer.writerow([probe, gallery, f"{delta:.6f}", f"{dx:.1f}", f"{dy:.1f}"])
    return buffer.getvalue()


def write_correspondences_csv(path, rows: Sequence[Tuple[int, int, float, float, float]]) -> None:
    Path(path).write_text(format_correspondences_csv(rows), encoding="utf-8")
