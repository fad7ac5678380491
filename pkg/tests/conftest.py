# tests/conftest.py
import pytest

from correspondence_transfer.codec import load_manifest, load_records
from correspondence_transfer.config import Settings
from correspondence_transfer.imggraph import build_graph, decompose_into_patches, extract_builtin_features
from correspondence_transfer.models import AttributedGraph, ImageRecord, JointSet, ManifestEntry
from correspondence_transfer.posectx import compute_pose_context
from correspondence_transfer.synth import generate_identity, write_dataset


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end benchmarks that take tens of seconds")


@pytest.fixture
def settings():
    return Settings(threads=1)


@pytest.fixture
def layout():
    return decompose_into_patches(48, 128, 32, 32, 8, 12, 4)


def random_graph(layout, rng, dim=24):
    return build_graph(layout, rng.random((layout.n_patches, dim)))


def point_graph(layout, positions, features):
    """Graph with arbitrary node positions; the layout only fixes the node count."""
    return AttributedGraph(layout=layout, positions_norm=positions, features=features)


def make_record(image_id, identity, camera, pixels, joints, settings):
    height, width = pixels.shape[:2]
    layout = decompose_into_patches(width, height, settings.patch.w, settings.patch.h,
                                    settings.patch.stride_w, settings.patch.stride_h, settings.patch.n_stripes)
    graph = build_graph(layout, extract_builtin_features(pixels, layout, settings.patch.feature_bins))
    pose = compute_pose_context(JointSet.from_coords(joints)) if joints is not None else None
    entry = ManifestEntry(image_id=image_id, identity=identity, camera=camera, pixels_path=f"{image_id}.ppm")
    return ImageRecord(entry=entry, graph=graph, pose=pose)


def synthetic_records(n_identities, shift_max_px, seed, settings):
    """(probe, gallery, shift) records for each identity, built in memory."""
    out = []
    for i in range(n_identities):
        pixels_a, pixels_b, joints_a, joints_b, shift = generate_identity(seed, i, shift_max_px)
        name = f"{i:04d}"
        out.append((
            make_record(f"{name}_a", name, "a", pixels_a, joints_a, settings),
            make_record(f"{name}_b", name, "b", pixels_b, joints_b, settings),
            shift,
        ))
    return out


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """8 identities, shifts up to 24 px, on disk."""
    root = tmp_path_factory.mktemp("small")
    write_dataset(root, 8, 24, seed=3)
    return root / "manifest.json"


@pytest.fixture(scope="session")
def aligned_dataset(tmp_path_factory):
    """10 identities whose two views differ only by colour cast."""
    root = tmp_path_factory.mktemp("aligned")
    write_dataset(root, 10, 0, seed=5)
    return root / "manifest.json"


@pytest.fixture
def small_index_records(small_dataset, settings):
    index = load_manifest(small_dataset)
    return index, load_records(index, settings)
