# correspondence_transfer/cli.py

import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import typer
from rich.console import Console
from rich.table import Table

from . import state
from .codec import (
    format_correspondences_csv, load_manifest, load_record, load_records, read_store, write_cmc_csv,
    write_correspondences_csv, write_store, write_sweep_csv,
)
from .config import LOG_FORMAT, Settings, load_settings
from .errors import (
    ConfigError, CorrespondenceError, InsufficientDataError, LayoutMismatchError, MissingDataError, NoValidEntriesError,
)
from .evaluation import (
    REPORT_RANKS, average_curves, draw_test_images, eligible_identities, evaluate_store,
    positive_pairs, run_protocol, sweep_patches, sweep_rk, trial_seeds,
)
from .gmsolver import match_image_pair
from .metric import embed, embedded_distances
from .models import CmcCurve, DatasetIndex, ImageRecord
from .posectx import similarity_terms
from .synth import SHIFT_MAX_PX, write_dataset
from .transfer import PairScorer, build_template_store

log = logging.getLogger("correspondence_transfer")

app = typer.Typer(help="Graph correspondence transfer for person re-identification.",
                  no_args_is_help=True, add_completion=False)
console = Console()
err_console = Console(stderr=True)


@app.callback()
def main(verbose: bool = typer.Option(False, "--verbose", "-v", help="Log at DEBUG level.")):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT, force=True)


@contextmanager
def exit_on_error():
    try:
        yield
    except CorrespondenceError as e:
        log.error(f"{type(e).__name__}: {e}")
        err_console.print(f"error: {e}", markup=False, highlight=False, soft_wrap=True)
        raise typer.Exit(code=e.exit_code)


def _cmc_table(title: str, rows: Sequence[Tuple[str, CmcCurve]]) -> Table:
    table = Table(title=title)
    table.add_column("configuration")
    for r in REPORT_RANKS:
        table.add_column(f"rank-{r}", justify="right")
    for label, curve in rows:
        table.add_row(label, *(f"{curve.rank(r):.2f}" for r in REPORT_RANKS))
    return table


def _record(index: DatasetIndex, image_id: str, settings: Settings) -> ImageRecord:
    try:
        entry = index.get(image_id)
    except KeyError:
        raise MissingDataError(image_id, "image id not in manifest")
    return load_record(index, entry, settings)


def _store_settings(store_echo: Dict) -> Settings:
    """Settings the store was built with."""
    return load_settings(None, store_echo)


def _int_list(text: str, flag: str) -> List[int]:
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ConfigError(f"{flag} expects comma-separated integers, got {text!r}") from e
    if not values:
        raise ConfigError(f"{flag} is empty")
    return values


def _patch_grid(text: str) -> List[Tuple[int, int, int, int]]:
    """'32x32/8x12,24x24/8x8' -> [(w, h, stride_w, stride_h), ...]"""
    grid = []
    for item in filter(None, (part.strip() for part in text.split(","))):
        try:
            size, stride = item.split("/")
            w, h = (int(v) for v in size.split("x"))
            sw, sh = (int(v) for v in stride.split("x"))
        except ValueError as e:
            raise ConfigError(f"--patches item {item!r} is not WxH/SWxSH") from e
        grid.append((w, h, sw, sh))
    return grid


@app.command("build-templates")
def build_templates(
    manifest: Path = typer.Option(..., "--manifest", help="Dataset manifest (JSON)."),
    out: Path = typer.Option(..., "--out", help="Template store to write."),
    config: Optional[Path] = typer.Option(None, "--config", help="YAML settings file."),
    seed: Optional[int] = typer.Option(None, "--seed"),
):
    """Match every cross-camera positive pair and store the templates with the learned metric."""
    with exit_on_error():
        settings = load_settings(config, {"protocol.seed": seed})
        index = load_manifest(manifest)
        records = load_records(index, settings)
        pairs = positive_pairs(index, records, eligible_identities(index))
        store = build_template_store(pairs, settings, seed=settings.protocol.seed)
        write_store(out, store)

        table = Table(title="Template store")
        table.add_column("templates", justify="right")
        table.add_column("patches per image", justify="right")
        table.add_column("metric")
        table.add_column("dims", justify="right")
        table.add_row(str(len(store.templates)), str(store.layout.n_patches), store.metric.kind,
                      f"{store.metric.input_dim} -> {store.metric.reduced_dim}")
        console.print(table)


@app.command()
def evaluate(
    manifest: Path = typer.Option(..., "--manifest"),
    store: Path = typer.Option(..., "--store"),
    config: Optional[Path] = typer.Option(None, "--config"),
    R: Optional[int] = typer.Option(None, "--R", help="Reference templates per test pair."),
    k: Optional[int] = typer.Option(None, "--k", help="Gallery candidates per probe patch."),
    trials: Optional[int] = typer.Option(None, "--trials"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    scoring: Optional[str] = typer.Option(None, "--scoring", help="ensemble, full or aligned."),
    multi_shot: bool = typer.Option(False, "--multi-shot"),
    out: Optional[Path] = typer.Option(None, "--out", help="CMC CSV to write."),
):
    """Score held-out identities of the manifest against a built store and report CMC."""
    with exit_on_error():
        template_store = read_store(store)
        overrides = {"transfer.R": R, "transfer.k": k, "transfer.scoring": scoring,
                     "protocol.trials": trials, "protocol.seed": seed,
                     "protocol.multi_shot": multi_shot or None}
        settings = load_settings(config, overrides)
        store_settings = _store_settings(template_store.settings_echo)
        settings = settings.model_copy(update={"patch": store_settings.patch, "pose": store_settings.pose})

        index = load_manifest(manifest)
        records = load_records(index, settings)
        for record in records.values():
            if not record.graph.layout.same_grid(template_store.layout):
                raise LayoutMismatchError(
                    f"image {record.entry.image_id} grid {record.graph.layout.grid_signature()} does not match "
                    f"the store grid {template_store.layout.grid_signature()}"
                )

        trained = set()
        for t in template_store.templates:
            for image_id in t.pair_id.split("|"):
                try:
                    trained.add(index.get(image_id).identity)
                except KeyError:
                    pass
        candidates = eligible_identities(index)
        test_ids = [i for i in candidates if i not in trained] or candidates
        if not test_ids:
            raise InsufficientDataError("manifest has no identity seen by two cameras")
        log.info(f"Evaluating {len(test_ids)} identities ({len(candidates) - len(test_ids)} used in training)")

        state.metric_evaluations.reset()
        scored_pairs = 0
        curves = []
        for trial in range(settings.protocol.trials):
            _, _, draw_seed = trial_seeds(settings.protocol.seed, trial)
            probes, galleries = draw_test_images(index, test_ids, draw_seed, settings.protocol.multi_shot)
            curves.append(evaluate_store(template_store, records, probes, galleries, settings,
                                         settings.protocol.multi_shot, threads=settings.threads))
            scored_pairs += len(probes) * len(galleries)
        curve = average_curves(curves)

        per_pair = state.metric_evaluations.count / scored_pairs
        log.info(f"{per_pair:.1f} delta evaluations per test pair")
        console.print(_cmc_table(f"CMC over {settings.protocol.trials} trial(s)", [(settings.transfer.scoring, curve)]))
        console.print(f"delta evaluations per pair: {per_pair:.1f}")
        if out is not None:
            write_cmc_csv(out, curve)


@app.command("match-pair")
def match_pair(
    manifest: Path = typer.Option(..., "--manifest"),
    probe: str = typer.Option(..., "--probe", help="Probe image_id."),
    gallery: str = typer.Option(..., "--gallery", help="Gallery image_id."),
    store: Path = typer.Option(..., "--store"),
    transferred: bool = typer.Option(False, "--transferred", help="Dump transferred instead of matched correspondences."),
    out: Optional[Path] = typer.Option(None, "--out", help="CSV to write; stdout when omitted."),
):
    """Per-patch correspondences of one image pair with their patch distances."""
    with exit_on_error():
        template_store = read_store(store)
        settings = _store_settings(template_store.settings_echo)
        index = load_manifest(manifest)
        probe_rec = _record(index, probe, settings)
        gallery_rec = _record(index, gallery, settings)
        for record in (probe_rec, gallery_rec):
            if not record.graph.layout.same_grid(template_store.layout):
                raise LayoutMismatchError(f"image {record.entry.image_id} does not match the store grid")

        if transferred:
            probe_idx, gallery_idx = PairScorer(template_store, settings).correspondences(probe_rec, gallery_rec)
        else:
            template = match_image_pair(probe_rec.graph, gallery_rec.graph, settings, pair_id=f"{probe}|{gallery}")
            probe_idx, gallery_idx = template.matches[:, 0], template.matches[:, 1]

        metric = template_store.metric
        deltas = embedded_distances(metric, embed(metric, probe_rec.graph.features)[probe_idx],
                                    embed(metric, gallery_rec.graph.features)[gallery_idx])
        centers = template_store.layout.centers
        offsets = centers[gallery_idx] - centers[probe_idx]
        rows = [(int(p), int(g), float(d), float(dx), float(dy))
                for p, g, d, (dx, dy) in zip(probe_idx, gallery_idx, deltas, offsets)]

        if out is None:
            typer.echo(format_correspondences_csv(rows), nl=False)
            return
        write_correspondences_csv(out, rows)
        shifts, counts = np.unique(offsets[:, 1], return_counts=True)
        table = Table(title=f"{probe} -> {gallery}: vertical offsets")
        table.add_column("dy (px)", justify="right")
        table.add_column("patches", justify="right")
        for dy, count in zip(shifts, counts):
            table.add_row(f"{dy:.1f}", str(count))
        console.print(table)


@app.command()
def synth(
    out: Path = typer.Option(..., "--out", help="Directory for images/ and manifest.json."),
    identities: int = typer.Option(40, "--identities"),
    shift_max: int = typer.Option(SHIFT_MAX_PX, "--shift-max", help="Largest vertical shift of the second view, px."),
    seed: int = typer.Option(0, "--seed"),
):
    """Generate a two-camera synthetic dataset with pose-linked vertical misalignment."""
    with exit_on_error():
        index = write_dataset(out, identities, shift_max, seed)
        console.print(f"wrote {len(index.entries)} images for {len(index.identities())} identities "
                      f"to {out / 'manifest.json'}")


@app.command("pose-sim")
def pose_sim(
    manifest: Path = typer.Option(..., "--manifest"),
    a: str = typer.Option(..., "--a"),
    b: str = typer.Option(..., "--b"),
    c: Optional[str] = typer.Option(None, "--c"),
    d: Optional[str] = typer.Option(None, "--d"),
    config: Optional[Path] = typer.Option(None, "--config"),
):
    """Pose-context similarity of two images, or of pair (a, b) against pair (c, d)."""
    with exit_on_error():
        if (c is None) != (d is None):
            raise ConfigError("--c and --d must be given together")
        settings = load_settings(config)
        index = load_manifest(manifest)
        ids = [i for i in (a, b, c, d) if i is not None]
        poses = {}
        for image_id in ids:
            record = _record(index, image_id, settings)
            if record.pose is None:
                raise NoValidEntriesError(f"image {image_id} has no usable pose context")
            poses[image_id] = record.pose

        comparisons = [(a, b)] if c is None else [(a, c), (b, d)]
        table = Table(title="Pose context similarity")
        for column in ("images", "S_psi", "S_phi", "O"):
            table.add_column(column, justify="right" if column != "images" else "left")
        product = 1.0
        for x, y in comparisons:
            s_psi, s_phi = similarity_terms(poses[x], poses[y], settings.pose.n_bins)
            product *= s_psi * s_phi
            table.add_row(f"{x} / {y}", f"{s_psi:.6f}", f"{s_phi:.6f}", f"{s_psi * s_phi:.6f}")
        console.print(table)
        if c is not None:
            console.print(f"pair similarity: {product:.6f}")


@app.command()
def protocol(
    manifest: Path = typer.Option(..., "--manifest"),
    config: Optional[Path] = typer.Option(None, "--config"),
    R: Optional[int] = typer.Option(None, "--R"),
    k: Optional[int] = typer.Option(None, "--k"),
    trials: Optional[int] = typer.Option(None, "--trials"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    scoring: Optional[str] = typer.Option(None, "--scoring"),
    multi_shot: bool = typer.Option(False, "--multi-shot"),
    out: Optional[Path] = typer.Option(None, "--out"),
):
    """Full repeated-split protocol: split, build store, score test pairs, average CMC."""
    with exit_on_error():
        settings = load_settings(config, {
            "transfer.R": R, "transfer.k": k, "transfer.scoring": scoring,
            "protocol.trials": trials, "protocol.seed": seed, "protocol.multi_shot": multi_shot or None,
        })
        index = load_manifest(manifest)
        records = load_records(index, settings)
        curve = run_protocol(index, records, settings)
        console.print(_cmc_table(f"CMC over {settings.protocol.trials} trial(s)",
                                 [(settings.transfer.scoring, curve)]))
        if out is not None:
            write_cmc_csv(out, curve)


@app.command()
def sweep(
    manifest: Path = typer.Option(..., "--manifest"),
    config: Optional[Path] = typer.Option(None, "--config"),
    R: str = typer.Option("100", "--R", help="Comma-separated R values."),
    k: str = typer.Option("3", "--k", help="Comma-separated k values."),
    patches: Optional[str] = typer.Option(None, "--patches", help="Patch grid instead, e.g. 32x32/8x12,24x24/8x8."),
    trials: Optional[int] = typer.Option(None, "--trials"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    out: Optional[Path] = typer.Option(None, "--out"),
):
    """Protocol across an (R, k) grid, or across patch sizes and strides."""
    with exit_on_error():
        settings = load_settings(config, {"protocol.trials": trials, "protocol.seed": seed})
        index = load_manifest(manifest)
        if patches:
            results = sweep_patches(index, settings, _patch_grid(patches))
        else:
            records = load_records(index, settings)
            results = sweep_rk(index, records, settings, _int_list(R, "--R"), _int_list(k, "--k"))

        labels = [(" ".join(f"{key}={value}" for key, value in params.items()), curve) for params, curve in results]
        console.print(_cmc_table("Parameter sweep", labels))
        if out is not None:
            write_sweep_csv(out, results, REPORT_RANKS)


if __name__ == "__main__":
    app()
