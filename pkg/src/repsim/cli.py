"""Command-line entry point composing the pipeline.

Every command writes its artifacts into an output location plus a
``run_summary.json`` recording the exact configuration, a config hash, wall
time, and the produced files. All randomness flows from explicit ``--seed``
flags; reports are byte-identical across runs with equal configs (the run
summary's wall time is the one field that varies).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .compare import (
    build_similarity_report,
    linkage_to_newick,
    paired_t_test,
    ward_linkage,
)
from .embedding_store import Manifest, plan_batches, read_embedding_set
from .errors import DegenerateDataError, RepsimError, ValidationError
from .rdm import Metric, compute_rdm, read_rdm, write_rdm, write_rdm_pgm
from .specificity import GroupingKind, GroupingSpec, specificity_report
from .spectral import cumulative_curve, features_for_mass, spectrum_from_file
from .stain import (
    DEFAULT_ALPHA,
    DEFAULT_BETA,
    DEFAULT_IO,
    DEFAULT_PATCH_PX,
    MACENKO_REFERENCE,
    estimate_stain_matrix,
    foreground_mask,
    load_gray_thumbnail,
    load_rgb,
    normalize_stain,
    sample_patch_coords,
    save_rgb,
)
from .synth import SynthConfig, generate_synthetic
from .embedding_store import write_embedding_set

_IMAGE_SUFFIXES = (".png", ".ppm", ".pnm", ".bmp", ".tif", ".tiff")


def _err(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


def _progress(label: str):
    state = {"last": -1}

    def callback(done: int, total: int) -> None:
        pct = int(100 * done / total) if total else 100
        if pct >= state["last"] + 10 or done == total:
            state["last"] = pct
            print(f"{label}: {done}/{total}", file=sys.stderr)

    return callback


def _config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def _format_float(x) -> str:
    return repr(float(x))


class _Run:
    """Collects outputs and writes the run summary at the end of a command."""

    def __init__(self, command: str, argv: list[str], config: dict, force: bool):
        self.command = command
        self.argv = argv
        self.config = config
        self.force = force
        self.outputs: list[str] = []
        self.started = time.perf_counter()

    def claim(self, path: Path) -> Path:
        if path.exists() and not self.force:
            raise ValidationError(f"refusing to overwrite {path} (use --force)")
        self.outputs.append(str(path))
        return path

    def write_summary(self, path: Path) -> None:
        summary = {
            "command": self.command,
            "argv": self.argv,
            "config": self.config,
            "config_hash": _config_hash(self.config),
            "wall_time_s": time.perf_counter() - self.started,
            "outputs": sorted(self.outputs),
            "version": __version__,
        }
        path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _set_threads(args) -> None:
    requested = args.threads or os.environ.get("REPSIM_THREADS")
    if requested:
        import numba

        limit = numba.config.NUMBA_NUM_THREADS
        numba.set_num_threads(max(1, min(int(requested), limit)))


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_format_float(v) if isinstance(v, float) else str(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def _peek_model_id(manifest_path: Path) -> str | None:
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            fh.readline()
            first = fh.readline().rstrip("\n").split("\t")
        return first[4] if len(first) >= 5 else None
    except OSError:
        return None


# ---------------------------------------------------------------- commands


def _cmd_plan_batches(args, argv) -> int:
    config = {
        "manifest": str(args.manifest),
        "n_batches": args.n_batches,
        "wsis_per_disease": args.wsis_per_disease,
        "patches_per_wsi": args.patches_per_wsi,
        "seed": args.seed,
    }
    run = _Run("plan-batches", argv, config, args.force)
    out = _out_dir(args)
    manifest = Manifest.from_tsv(args.manifest)
    plan = plan_batches(
        manifest,
        n_batches=args.n_batches,
        wsis_per_disease_per_batch=args.wsis_per_disease,
        patches_per_wsi=args.patches_per_wsi,
        seed=args.seed,
    )
    plan_path = run.claim(out / "batch_plan.json")
    plan_path.write_text(json.dumps(plan.to_json_dict(), indent=2, sort_keys=True) + "\n")
    run.write_summary(out / "run_summary.json")
    return 0


def _cmd_synth(args, argv) -> int:
    cfg_raw = json.loads(Path(args.config).read_text())
    cfg = SynthConfig(**cfg_raw)
    config = {"config": cfg_raw, "out": str(args.out)}
    run = _Run("synth", argv, config, args.force)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    run.claim(out_path)
    embedding_set = generate_synthetic(cfg, model_id=args.model_id, batch_id=args.batch_id)
    write_embedding_set(embedding_set, out_path)
    run.write_summary(out_path.parent / f"{out_path.stem}.run_summary.json")
    return 0


def _cmd_rdm(args, argv) -> int:
    config = {
        "in": str(args.infile),
        "metric": args.metric,
        "panel_rows": args.panel_rows,
    }
    run = _Run("rdm", argv, config, args.force)
    out = _out_dir(args)
    embedding_set = read_embedding_set(args.infile)
    metric = Metric(args.metric)
    rdm = compute_rdm(
        embedding_set,
        metric,
        panel_rows=args.panel_rows,
        progress=_progress("rdm pairs"),
    )
    rdm_path = run.claim(out / (Path(args.infile).stem + ".rdm1"))
    write_rdm(rdm, rdm_path)
    run.write_summary(out / "run_summary.json")
    return 0


def _load_rdm_spec(spec_path: Path) -> dict[tuple[str, int], Path]:
    raw = json.loads(spec_path.read_text())
    models = raw.get("models")
    if not isinstance(models, dict) or not models:
        raise ValidationError(f"{spec_path}: expected {{'models': {{model: {{batch: path}}}}}}")
    cells: dict[tuple[str, int], Path] = {}
    for model, batches in models.items():
        for batch_str, rel in batches.items():
            path = Path(rel)
            if not path.is_absolute():
                path = spec_path.parent / path
            cells[(model, int(batch_str))] = path
    return cells


def _cmd_compare(args, argv) -> int:
    config = {
        "rdms": str(args.rdms),
        "baseline": sorted(args.baseline),
        "cluster_transform": args.cluster_transform,
        "sides": args.sides,
    }
    run = _Run("compare", argv, config, args.force)
    out = _out_dir(args)
    cells = _load_rdm_spec(Path(args.rdms))
    rdms = {key: read_rdm(path) for key, path in cells.items()}
    report = build_similarity_report(rdms, baseline_models=args.baseline)

    ids = list(report.model_ids)
    report_payload = {
        "model_ids": ids,
        "batch_ids": list(report.batch_ids),
        "baseline_models": sorted(report.baseline_models),
        "per_batch": {str(b): report.per_batch[b].tolist() for b in report.batch_ids},
        "mean": report.mean.tolist(),
        "range_lo": report.range_lo.tolist(),
        "range_hi": report.range_hi.tolist(),
        "mean_cross_model": dict(report.mean_cross_model),
        "per_batch_cross_model": {
            str(b): dict(v) for b, v in report.per_batch_cross_model.items()
        },
    }
    json_path = run.claim(out / "compare_report.json")
    json_path.write_text(json.dumps(report_payload, indent=2, sort_keys=True) + "\n")

    pair_rows = []
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            pair_rows.append(
                [ids[i], ids[j], float(report.mean[i, j]),
                 float(report.range_lo[i, j]), float(report.range_hi[i, j])]
            )
    _write_csv(
        run.claim(out / "compare_pairs.csv"),
        ["model_a", "model_b", "mean_spearman", "range_lo", "range_hi"],
        pair_rows,
    )
    _write_csv(
        run.claim(out / "compare_model_means.csv"),
        ["model", "mean_cross_model"],
        [[m, float(v)] for m, v in report.mean_cross_model.items()],
    )

    ttest_rows = []
    cross_models = [m for m in ids if m in report.mean_cross_model]
    if len(report.batch_ids) >= 2:
        series = {
            m: [report.per_batch_cross_model[b][m] for b in report.batch_ids]
            for m in cross_models
        }
        for i in range(len(cross_models)):
            for j in range(i + 1, len(cross_models)):
                a, b = cross_models[i], cross_models[j]
                try:
                    result = paired_t_test(series[a], series[b], sides=args.sides)
                except DegenerateDataError:
                    continue  # identical per-batch series (always so for M=2)
                ttest_rows.append(
                    [a, b, result.t_statistic, result.p_value, result.dof,
                     result.n_pairs, result.sides]
                )
    _write_csv(
        run.claim(out / "compare_ttests.csv"),
        ["model_a", "model_b", "t_statistic", "p_value", "dof", "n_pairs", "sides"],
        ttest_rows,
    )

    if len(ids) >= 2:
        linkage = ward_linkage(report.mean, transform=args.cluster_transform)
        linkage_payload = {
            "labels": ids,
            "transform": args.cluster_transform,
            "merges": [
                {"cluster_a": a, "cluster_b": b, "height": h, "size": s}
                for a, b, h, s in linkage.merges
            ],
        }
        run.claim(out / "linkage.json").write_text(
            json.dumps(linkage_payload, indent=2, sort_keys=True) + "\n"
        )
        run.claim(out / "linkage.newick").write_text(linkage_to_newick(linkage, ids) + "\n")
    run.write_summary(out / "run_summary.json")
    return 0


def _cmd_specificity(args, argv) -> int:
    config = {
        "rdms": [str(p) for p in args.rdm],
        "grouping": args.grouping,
        "inter_within_disease": args.inter_within_disease,
        "model": args.model,
    }
    run = _Run("specificity", argv, config, args.force)
    out = _out_dir(args)
    grouping = GroupingSpec(
        GroupingKind(args.grouping), inter_within_disease=args.inter_within_disease
    )
    rdms = {}
    model = args.model
    for index, path in enumerate(args.rdm):
        rdm = read_rdm(path)
        if rdm.labels is None:
            raise ValidationError(f"{path}: no sibling manifest; labels required")
        rdms[index] = rdm
        if model is None:
            model = rdm.labels.rows[0].model_id
    result = specificity_report(rdms, grouping)
    _write_csv(
        run.claim(out / "specificity.csv"),
        ["model", "grouping", "mean_delta", "range_lo", "range_hi",
         "n_intra", "n_inter", "effect_size"],
        [[model, args.grouping, result.delta, result.range_lo, result.range_hi,
          result.n_intra, result.n_inter, result.effect_size_label]],
    )
    _write_csv(
        run.claim(out / "specificity_batches.csv"),
        ["model", "grouping", "batch", "delta", "n_intra", "n_inter"],
        [[model, args.grouping, b.batch_id, b.delta, b.n_intra, b.n_inter]
         for b in result.per_batch],
    )
    run.write_summary(out / "run_summary.json")
    return 0


def _cmd_spectral(args, argv) -> int:
    config = {
        "in": [str(p) for p in args.infiles],
        "mass": args.mass,
        "block_rows": args.block_rows,
    }
    run = _Run("spectral", argv, config, args.force)
    out = _out_dir(args)
    combined_rows = []
    summary_rows = []
    for path in args.infiles:
        path = Path(path)
        spectrum = spectrum_from_file(path, block_rows=args.block_rows, mass=args.mass)
        model = _peek_model_id(path.with_suffix(".manifest.tsv")) or path.stem
        curve = cumulative_curve(spectrum)
        _write_csv(
            run.claim(out / f"{path.stem}_spectrum.csv"),
            ["fraction_features", "cumulative_mass"],
            [[float(f), float(c)] for f, c in curve],
        )
        combined_rows.extend([[model, float(f), float(c)] for f, c in curve])
        summary_rows.append(
            [model, spectrum.n_items, spectrum.dim, curve.shape[0],
             features_for_mass(spectrum, 0.5), features_for_mass(spectrum, 0.9),
             features_for_mass(spectrum, 0.99)]
        )
    _write_csv(
        run.claim(out / "spectra_combined.csv"),
        ["model", "fraction_features", "cumulative_mass"],
        combined_rows,
    )
    _write_csv(
        run.claim(out / "spectral_summary.csv"),
        ["model", "n_items", "dim", "n_values",
         "features_for_50pct", "features_for_90pct", "features_for_99pct"],
        summary_rows,
    )
    run.write_summary(out / "run_summary.json")
    return 0


def _cmd_sample_patches(args, argv) -> int:
    config = {
        "thumb": str(args.thumb),
        "n": args.n,
        "seed": args.seed,
        "patch_px": args.patch_px,
        "with_replacement": args.with_replacement,
    }
    run = _Run("sample-patches", argv, config, args.force)
    out = _out_dir(args)
    thumb = load_gray_thumbnail(args.thumb, downsample_factor=args.patch_px)
    mask = foreground_mask(thumb)
    coords = sample_patch_coords(
        mask, args.n, patch_px=args.patch_px, seed=args.seed,
        with_replacement=args.with_replacement,
    )
    lines = ["x\ty"] + [f"{x}\t{y}" for x, y in coords.tolist()]
    run.claim(out / "patch_coords.tsv").write_text("\n".join(lines) + "\n")
    run.write_summary(out / "run_summary.json")
    return 0


def _cmd_stain_normalize(args, argv) -> int:
    config = {
        "in": str(args.indir),
        "reference": str(args.reference) if args.reference else None,
        "io": args.io,
        "alpha": args.alpha,
        "beta": args.beta,
    }
    run = _Run("stain-normalize", argv, config, args.force)
    out = _out_dir(args)
    if args.reference:
        reference = estimate_stain_matrix(
            load_rgb(args.reference), io=args.io, alpha=args.alpha, beta=args.beta
        )
    else:
        reference = MACENKO_REFERENCE
    indir = Path(args.indir)
    images = sorted(p for p in indir.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
    if not images:
        raise ValidationError(f"no images with suffixes {_IMAGE_SUFFIXES} in {indir}")
    done = 0
    for image_path in images:
        patch = load_rgb(image_path)
        params = estimate_stain_matrix(patch, io=args.io, alpha=args.alpha, beta=args.beta)
        normalized = normalize_stain(patch, params, reference)
        save_rgb(normalized, run.claim(out / image_path.name))
        done += 1
        print(f"stain-normalize: {done}/{len(images)}", file=sys.stderr)
    run.write_summary(out / "run_summary.json")
    return 0


def _cmd_render_rdm(args, argv) -> int:
    config = {"in": str(args.infile)}
    run = _Run("render-rdm", argv, config, args.force)
    out = _out_dir(args)
    rdm = read_rdm(args.infile)
    pgm_path = run.claim(out / (Path(args.infile).stem + ".pgm"))
    write_rdm_pgm(rdm, pgm_path)
    run.write_summary(out / "run_summary.json")
    return 0


# ---------------------------------------------------------------- parser


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="repsim",
        description="Representational dissimilarity analysis over patch-embedding sets",
    )
    parser.add_argument("--threads", type=int, default=None,
                        help="cap internal parallelism (default: all cores, or REPSIM_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan-batches", help="assign slides to disjoint batches per disease")
    p.add_argument("--manifest", required=True)
    p.add_argument("--n-batches", type=int, default=5)
    p.add_argument("--wsis-per-disease", type=int, default=50)
    p.add_argument("--patches-per-wsi", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_plan_batches)

    p = sub.add_parser("synth", help="generate a synthetic embedding set")
    p.add_argument("--config", required=True, help="JSON file with generator parameters")
    p.add_argument("--out", required=True, help="output .emb1 path")
    p.add_argument("--model-id", default="synth")
    p.add_argument("--batch-id", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("rdm", help="compute a condensed dissimilarity matrix")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--metric", choices=[m.value for m in Metric], default="euclidean")
    p.add_argument("--panel-rows", type=int, default=128)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_rdm)

    p = sub.add_parser("compare", help="cross-model Spearman report and clustering")
    p.add_argument("--rdms", required=True,
                   help="JSON spec: {'models': {model: {batch: rdm path}}}")
    p.add_argument("--baseline", action="append", default=[],
                   help="model excluded from cross-model means (repeatable)")
    p.add_argument("--cluster-transform", choices=["one-minus", "arccos"],
                   default="one-minus")
    p.add_argument("--sides", choices=["two-sided", "greater", "less"],
                   default="two-sided")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("specificity", help="slide/disease specificity via Cliff's Delta")
    p.add_argument("--rdm", nargs="+", required=True, help="one RDM file per batch")
    p.add_argument("--grouping", choices=[g.value for g in GroupingKind], required=True)
    p.add_argument("--inter-within-disease", action="store_true",
                   help="restrict inter-slide pairs to the same disease")
    p.add_argument("--model", default=None, help="model name for the report")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_specificity)

    p = sub.add_parser("spectral", help="normalized singular-value spectra")
    p.add_argument("--in", dest="infiles", nargs="+", required=True)
    p.add_argument("--mass", choices=["singular", "variance"], default="singular")
    p.add_argument("--block-rows", type=int, default=8192)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_spectral)

    p = sub.add_parser("sample-patches", help="sample patch coordinates from a thumbnail")
    p.add_argument("--thumb", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patch-px", type=int, default=DEFAULT_PATCH_PX)
    p.add_argument("--with-replacement", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_sample_patches)

    p = sub.add_parser("stain-normalize", help="Macenko-normalize a directory of patches")
    p.add_argument("--in", dest="indir", required=True)
    p.add_argument("--reference", default=None,
                   help="reference patch image (default: built-in target)")
    p.add_argument("--io", type=float, default=DEFAULT_IO)
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    p.add_argument("--beta", type=float, default=DEFAULT_BETA)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_stain_normalize)

    p = sub.add_parser("render-rdm", help="export an RDM as an 8-bit PGM heatmap")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_render_rdm)

    return parser


def run(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _set_threads(args)
        return args.func(args, list(argv))
    except RepsimError as exc:
        _err(type(exc).__name__, str(exc))
        return 1
    except (OSError, json.JSONDecodeError) as exc:
        _err(type(exc).__name__, str(exc))
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))
