# tests/test_cli.py
import csv
import json
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from typer.testing import CliRunner

from correspondence_transfer.cli import app
from correspondence_transfer.codec import read_store, write_gctf
from correspondence_transfer.synth import generate_identity

runner = CliRunner()


def _invoke(*args):
    return runner.invoke(app, [str(a) for a in args])


def _rates(path):
    with open(path, newline="") as fh:
        return [float(row["rate"]) for row in csv.DictReader(fh)]


@pytest.fixture(scope="module")
def aligned_store(aligned_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("aligned_store") / "store.json"
    result = _invoke("build-templates", "--manifest", aligned_dataset, "--out", out)
    assert result.exit_code == 0, result.output
    return out


@pytest.fixture(scope="module")
def shifted_store(small_dataset, tmp_path_factory):
    root = tmp_path_factory.mktemp("shifted_store")
    config = root / "config.yaml"
    config.write_text("patch:\n  expand_rows: 2\n")
    out = root / "store.json"
    result = _invoke("build-templates", "--manifest", small_dataset, "--out", out, "--config", config)
    assert result.exit_code == 0, result.output
    return out


def test_synth_writes_two_views_per_identity(tmp_path):
    result = _invoke("synth", "--out", tmp_path / "one", "--identities", 40, "--seed", 1)
    assert result.exit_code == 0, result.output
    assert "wrote 80 images for 40 identities" in result.output
    assert len(list((tmp_path / "one" / "images").glob("*.ppm"))) == 80
    assert len(json.loads((tmp_path / "one" / "manifest.json").read_text())) == 80


def test_synth_is_reproducible(tmp_path):
    for name in ("one", "two"):
        assert _invoke("synth", "--out", tmp_path / name, "--identities", 5, "--seed", 7).exit_code == 0
    for path in sorted((tmp_path / "one").rglob("*.*")):
        twin = tmp_path / "two" / path.relative_to(tmp_path / "one")
        assert path.read_bytes() == twin.read_bytes()


def test_synth_rejects_tiny_datasets(tmp_path):
    result = _invoke("synth", "--out", tmp_path, "--identities", 1)
    assert result.exit_code != 0
    assert "at least 2 identities" in result.output


def test_build_templates_is_reproducible(aligned_store, aligned_dataset, tmp_path):
    store = read_store(aligned_store)
    assert len(store.templates) == 10
    assert store.layout.n_patches == 27

    again = tmp_path / "store.json"
    assert _invoke("build-templates", "--manifest", aligned_dataset, "--out", again).exit_code == 0
    assert again.read_bytes() == aligned_store.read_bytes()


def test_missing_feature_file_exits_3(tmp_path):
    manifest = tmp_path / "manifest.json"
    manifest.write_text(json.dumps([
        {"image_id": "x_a", "identity": "x", "camera": "a", "features_path": "x_a.gctf"},
        {"image_id": "x_b", "identity": "x", "camera": "b", "features_path": "x_b.gctf"},
    ]))
    result = _invoke("build-templates", "--manifest", manifest, "--out", tmp_path / "store.json")
    assert result.exit_code == 3
    assert "x_a.gctf" in result.output
    assert not (tmp_path / "store.json").exists()


def test_malformed_manifest_exits_2(tmp_path):
    manifest = tmp_path / "manifest.json"
    manifest.write_text('[\n{"image_id": "x_a", "identity": "x"}\n]\n')
    result = _invoke("build-templates", "--manifest", manifest, "--out", tmp_path / "store.json")
    assert result.exit_code == 2
    assert "line 2" in result.output


def test_bad_config_exits_4(aligned_dataset, tmp_path):
    config = tmp_path / "config.yaml"
    config.write_text("transfer:\n  R: 0\n")
    result = _invoke("build-templates", "--manifest", aligned_dataset, "--out", tmp_path / "s.json",
                     "--config", config)
    assert result.exit_code == 4


def test_evaluate_aligned_views(aligned_store, aligned_dataset, tmp_path):
    first, second = tmp_path / "first.csv", tmp_path / "second.csv"
    for out in (first, second):
        result = _invoke("evaluate", "--manifest", aligned_dataset, "--store", aligned_store,
                         "--trials", 2, "--out", out)
        assert result.exit_code == 0, result.output
    rates = _rates(first)
    assert len(rates) == 10
    assert rates[0] >= 90.0
    assert rates[-1] == 100.0
    assert first.read_bytes() == second.read_bytes()


def test_evaluate_reports_evaluations_per_pair(aligned_store, aligned_dataset):
    result = _invoke("evaluate", "--manifest", aligned_dataset, "--store", aligned_store,
                     "--trials", 1, "--R", 2, "--k", 1)
    assert result.exit_code == 0, result.output
    assert "delta evaluations per pair: 27.0" in result.output


def test_evaluate_layout_mismatch_exits_5(aligned_store, tmp_path):
    write_gctf(tmp_path / "wide.gctf", np.ones((45, 24)))
    manifest = tmp_path / "manifest.json"
    manifest.write_text(json.dumps([{"image_id": "wide", "identity": "w", "camera": "a",
                                     "features_path": "wide.gctf", "width": 64, "height": 128}]))
    result = _invoke("evaluate", "--manifest", manifest, "--store", aligned_store, "--trials", 1)
    assert result.exit_code == 5


def test_evaluate_missing_store_exits_3(aligned_dataset, tmp_path):
    result = _invoke("evaluate", "--manifest", aligned_dataset, "--store", tmp_path / "none.json")
    assert result.exit_code == 3
    assert "template store not found" in result.output


def test_match_pair_self_is_identity(aligned_store, aligned_dataset, tmp_path):
    out = tmp_path / "pairs.csv"
    result = _invoke("match-pair", "--manifest", aligned_dataset, "--probe", "0000_a", "--gallery", "0000_a",
                     "--store", aligned_store, "--out", out)
    assert result.exit_code == 0, result.output
    with open(out, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 27
    assert all(row["probe_index"] == row["gallery_index"] for row in rows)
    assert all(float(row["delta"]) == 0.0 for row in rows)


def test_match_pair_follows_vertical_shift(shifted_store, small_dataset, tmp_path):
    # first identity of the fixture dataset whose second view is shifted
    identity, shift = next((i, s) for i in range(8) for s in [generate_identity(3, i, 24)[4]] if s != 0)
    name = f"{identity:04d}"
    out = tmp_path / "pairs.csv"
    result = _invoke("match-pair", "--manifest", small_dataset, "--probe", f"{name}_a", "--gallery", f"{name}_b",
                     "--store", shifted_store, "--out", out)
    assert result.exit_code == 0, result.output
    with open(out, newline="") as fh:
        dy = Counter(float(row["dy_px"]) for row in csv.DictReader(fh))
    assert dy.most_common(1)[0][0] == shift


def test_match_pair_transferred(shifted_store, small_dataset, tmp_path):
    out = tmp_path / "pairs.csv"
    result = _invoke("match-pair", "--manifest", small_dataset, "--probe", "0001_a", "--gallery", "0002_b",
                     "--store", shifted_store, "--transferred", "--out", out)
    assert result.exit_code == 0, result.output
    with open(out, newline="") as fh:
        # default ensemble keeps k=3 gallery candidates per probe patch
        assert len(list(csv.DictReader(fh))) == 27 * 3


def test_match_pair_unknown_image_exits_3(aligned_store, aligned_dataset):
    result = _invoke("match-pair", "--manifest", aligned_dataset, "--probe", "nobody", "--gallery", "0000_a",
                     "--store", aligned_store)
    assert result.exit_code == 3
    assert "nobody" in result.output


def test_pose_sim_self(aligned_dataset):
    result = _invoke("pose-sim", "--manifest", aligned_dataset, "--a", "0000_a", "--b", "0000_a")
    assert result.exit_code == 0, result.output
    assert "1.000000" in result.output


def test_pose_sim_pairs(aligned_dataset):
    result = _invoke("pose-sim", "--manifest", aligned_dataset, "--a", "0000_a", "--b", "0000_b",
                     "--c", "0000_a", "--d", "0000_b")
    assert result.exit_code == 0, result.output
    assert "pair similarity: 1.000000" in result.output


def test_pose_sim_needs_both_extra_images(aligned_dataset):
    result = _invoke("pose-sim", "--manifest", aligned_dataset, "--a", "0000_a", "--b", "0000_b", "--c", "0001_a")
    assert result.exit_code == 4


def test_protocol_writes_cmc(small_dataset, tmp_path):
    out = tmp_path / "cmc.csv"
    result = _invoke("protocol", "--manifest", small_dataset, "--trials", 1, "--R", 2, "--k", 1, "--out", out)
    assert result.exit_code == 0, result.output
    rates = _rates(out)
    assert len(rates) == 4
    assert rates[-1] == 100.0


def test_sweep_writes_one_row_per_configuration(small_dataset, tmp_path):
    out = tmp_path / "sweep.csv"
    result = _invoke("sweep", "--manifest", small_dataset, "--R", "1,2", "--k", "1", "--trials", 1, "--out", out)
    assert result.exit_code == 0, result.output
    with open(out, newline="") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 3
    assert rows[0][-4:] == ["rank1", "rank5", "rank10", "rank20"]


def test_sweep_rejects_bad_lists(small_dataset):
    result = _invoke("sweep", "--manifest", small_dataset, "--R", "one", "--trials", 1)
    assert result.exit_code == 4


def test_sweep_over_patch_grids(small_dataset, tmp_path):
    out = tmp_path / "patches.csv"
    result = _invoke("sweep", "--manifest", small_dataset, "--patches", "32x32/8x12,24x24/8x8",
                     "--trials", 1, "--out", out)
    assert result.exit_code == 0, result.output
    with open(out, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [(row["patch_w"], row["stride_h"]) for row in rows] == [("32", "12"), ("24", "8")]


def test_sweep_rejects_bad_patch_grid(small_dataset):
    result = _invoke("sweep", "--manifest", small_dataset, "--patches", "32by32", "--trials", 1)
    assert result.exit_code == 4


def test_protocol_with_misaligned_config(small_dataset, tmp_path):
    config = Path(__file__).resolve().parents[1] / "configs" / "misaligned.yaml"
    out = tmp_path / "cmc.csv"
    result = _invoke("protocol", "--manifest", small_dataset, "--config", config, "--trials", 1, "--out", out)
    assert result.exit_code == 0, result.output
    assert _rates(out)[-1] == 100.0
