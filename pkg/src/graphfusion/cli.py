"""Batch command-line interface.

Commands: ``generate``, ``build-graphs``, ``train``, ``evaluate``,
``report``. Global flags: ``--seed``, ``--jobs``, ``--config``, ``--set``.
Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every command writes a run manifest listing its outputs with content hashes.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from .config import (
    effective_config,
    format_config,
    get_bool,
    get_float,
    get_float_list,
    get_int,
    get_int_list,
    get_str,
    get_str_list,
)
from .data import Endpoint, load_dataset, split_by_patient
from .errors import ConfigError, ContractError, GraphFusionError, ParseError
from .evaluation import (
    EvalReport,
    evaluate_predictions,
    pathologist_baseline,
    read_report,
    render_svg,
    render_table,
    write_report,
)
from .graph_build import (
    GraphBuildConfig,
    build_graph,
    heatmap_build_seed,
    read_heatmap,
)
from .model import predict_samples, read_checkpoint, write_checkpoint
from .synth import GeneratorConfig, RaterSpec, generate_dataset
from .training import TrainConfig, grid_search, train, write_trace


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out_dir: Path, command: str, cfg: dict, outputs: list[Path], timings: dict):
    manifest = {
        "command": command,
        "config": dict(sorted(cfg.items())),
        "outputs": {str(p.relative_to(out_dir)): _sha256(p) for p in sorted(outputs)},
        "timings_s": {k: round(v, 3) for k, v in timings.items()},
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _graph_build_config(cfg: dict) -> GraphBuildConfig:
    return GraphBuildConfig(
        n_pixels=get_int(cfg, "graph.n_pixels"),
        target_k=get_int(cfg, "graph.target_k"),
        knn_k=get_int(cfg, "graph.knn_k"),
        birch_threshold=get_float(cfg, "graph.birch_threshold"),
        birch_branching=get_int(cfg, "graph.birch_branching"),
        logit_weight=get_float(cfg, "graph.logit_weight"),
        seed=get_int(cfg, "graph.seed"),
        extra_feature_blocks=tuple(get_str_list(cfg, "graph.extra_feature_blocks")),
    )


def _generator_config(cfg: dict) -> GeneratorConfig:
    ids = get_str_list(cfg, "generate.rater_ids")
    biases = get_float_list(cfg, "generate.rater_biases")
    if len(ids) != len(biases):
        raise ConfigError(
            "config fields 'generate.rater_ids' and 'generate.rater_biases' differ in length"
        )
    profile_raw = get_str(cfg, "generate.class_profile").strip()
    profile = None if profile_raw in ("", "uniform") else tuple(get_float_list(cfg, "generate.class_profile"))
    return GeneratorConfig(
        n_patients=get_int(cfg, "generate.n_patients"),
        samples_per_patient=get_int(cfg, "generate.samples_per_patient"),
        height=get_int(cfg, "generate.height"),
        width=get_int(cfg, "generate.width"),
        endpoint=Endpoint(get_str(cfg, "generate.endpoint")),
        w_a=get_float(cfg, "generate.w_a"),
        w_b=get_float(cfg, "generate.w_b"),
        w_ab=get_float(cfg, "generate.w_ab"),
        raters=tuple(RaterSpec(r, b) for r, b in zip(ids, biases)),
        rater_noise=get_float(cfg, "generate.rater_noise"),
        class_profile=profile,
    )


def _train_config(cfg: dict) -> TrainConfig:
    head_hidden = tuple(get_int_list(cfg, "train.head_hidden")) or None
    dropout_raw = get_str(cfg, "train.head_dropout").strip()
    grid = {}
    for key, value in cfg.items():
        if key.startswith("train.grid."):
            axis = key[len("train.grid.") :]
            parts = [p.strip() for p in value.split(",") if p.strip()]
            parsed = []
            for p in parts:
                try:
                    parsed.append(int(p))
                except ValueError:
                    try:
                        parsed.append(float(p))
                    except ValueError:
                        parsed.append(p)
            grid[axis] = parsed
    return TrainConfig(
        endpoint=Endpoint(get_str(cfg, "train.endpoint")),
        strategy=get_str(cfg, "train.strategy"),
        max_iterations=get_int(cfg, "train.max_iterations"),
        lr=get_float(cfg, "train.lr"),
        batch_size=get_int(cfg, "train.batch_size"),
        val_every=get_int(cfg, "train.val_every"),
        patience=get_int(cfg, "train.patience"),
        seed=get_int(cfg, "train.seed"),
        d_h=get_int(cfg, "train.d_h"),
        n_conv_layers=get_int(cfg, "train.n_conv_layers"),
        sagpool_ratio=get_float(cfg, "train.sagpool_ratio"),
        fusion_dim=get_int(cfg, "train.fusion_dim"),
        readout=get_str(cfg, "train.readout"),
        head_hidden=head_hidden,
        head_dropout=float(dropout_raw) if dropout_raw else None,
        symmetric_edges=get_bool(cfg, "train.symmetric_edges"),
        clamp_normalizer=get_bool(cfg, "train.clamp_normalizer"),
        kron_bilinear_gate=get_bool(cfg, "train.kron_bilinear_gate"),
        grid=grid,
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_generate(args, cfg: dict) -> int:
    out_dir = Path(args.out)
    gen_cfg = _generator_config(cfg)
    build_cfg = _graph_build_config(cfg)
    t0 = time.time()
    generate_dataset(
        gen_cfg, get_int(cfg, "generate.seed"), out_dir, build_cfg, jobs=args.jobs
    )
    outputs = [p for p in out_dir.rglob("*") if p.is_file() and p.name != "run_manifest.json"]
    _write_manifest(out_dir, "generate", cfg, outputs, {"generate": time.time() - t0})
    n = gen_cfg.n_patients * gen_cfg.samples_per_patient
    print(f"generated {n} paired samples in {out_dir}")
    return 0


def cmd_build_graphs(args, cfg: dict) -> int:
    in_dir = Path(args.input)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    build_cfg = _graph_build_config(cfg)
    built = skipped = failed = 0
    outputs = []
    t0 = time.time()
    for path in sorted(in_dir.iterdir()):
        if not path.is_file() or path.suffix != ".hmp":
            skipped += 1
            continue
        try:
            hm = read_heatmap(path)
            seed = heatmap_build_seed(path.read_bytes(), build_cfg.seed)
            g = build_graph(hm, build_cfg, seed=seed)
            out_path = out_dir / (path.stem + ".mgf")
            from .data import write_graph

            write_graph(g, out_path)
            outputs.append(out_path)
            built += 1
        except GraphFusionError as exc:
            print(f"failed: {path.name}: {exc}", file=sys.stderr)
            failed += 1
    _write_manifest(out_dir, "build-graphs", cfg, outputs, {"build": time.time() - t0})
    print(f"built {built} / skipped {skipped} / failed {failed}")
    return 1 if failed else 0


def cmd_train(args, cfg: dict) -> int:
    data_dir = Path(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = load_dataset(data_dir / "graphs", data_dir / "labels.csv")
    fractions = (
        get_float(cfg, "split.train"),
        get_float(cfg, "split.val"),
        get_float(cfg, "split.test"),
    )
    split = split_by_patient(samples, fractions, get_int(cfg, "split.seed"))
    train_cfg = _train_config(cfg)
    t0 = time.time()
    outputs = []
    if train_cfg.grid:
        best_cfg, _ = grid_search(train_cfg, split, samples, out_path=out_dir / "leaderboard.tsv")
        outputs.append(out_dir / "leaderboard.tsv")
        train_cfg = best_cfg
    result = train(train_cfg, split, samples)
    ckpt = out_dir / "checkpoint.gfcp"
    write_checkpoint(result.model, ckpt)
    trace_path = out_dir / "trace.csv"
    write_trace(result.trace, trace_path)
    outputs += [ckpt, trace_path]
    _write_manifest(out_dir, "train", cfg, outputs, {"train": time.time() - t0})
    status = "aborted (non-finite loss)" if result.aborted else "done"
    print(
        f"{status}: {result.iterations_run} iterations, best val loss "
        f"{result.best_val_loss:.6f} -> {ckpt}"
    )
    return 1 if result.aborted else 0


def cmd_evaluate(args, cfg: dict) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = read_checkpoint(args.checkpoint)
    data_dir = Path(args.data)
    samples = load_dataset(data_dir / "graphs", data_dir / "labels.csv")
    d_a = samples[0].graph_a.node_features.shape[1]
    d_b = samples[0].graph_b.node_features.shape[1]
    if d_a != model.config.d_in_a or d_b != model.config.d_in_b:
        raise _MismatchError(
            f"checkpoint expects feature dims ({model.config.d_in_a}, {model.config.d_in_b}) "
            f"but data has ({d_a}, {d_b})"
        )
    if not model.split or not model.split.get("test"):
        raise _MismatchError("checkpoint carries no test split")
    by_id = {s.sample_id: s for s in samples}
    missing = [i for i in model.split["test"] if i not in by_id]
    if missing:
        raise _MismatchError(f"test samples missing from data dir: {missing[:5]}")
    test_samples = [by_id[i] for i in model.split["test"]]
    endpoint = model.config.endpoint
    t0 = time.time()
    preds = predict_samples(model, test_samples)
    report = EvalReport()
    report.entries.append(
        evaluate_predictions(
            preds,
            test_samples,
            endpoint,
            label=model.config.strategy,
            n_resamples=get_int(cfg, "eval.n_resamples"),
            seed=get_int(cfg, "eval.seed"),
        )
    )
    if get_bool(cfg, "eval.baseline"):
        base = pathologist_baseline(
            test_samples,
            endpoint,
            n_resamples=get_int(cfg, "eval.n_resamples"),
            seed=get_int(cfg, "eval.seed"),
            leave_one_out=get_bool(cfg, "eval.consensus_leave_one_out"),
        )
        if base is not None:
            report.entries.append(base)
    report_path = out_dir / f"report_{model.config.strategy}_{endpoint.value}.csv"
    write_report(report, report_path)
    outputs = [report_path]
    if get_bool(cfg, "eval.svg"):
        svg_path = report_path.with_suffix(".svg")
        svg_path.write_text(render_svg(report.entries))
        outputs.append(svg_path)
    _write_manifest(out_dir, "evaluate", cfg, outputs, {"evaluate": time.time() - t0})
    print(render_table(report.entries), end="")
    return 0


def cmd_report(args, cfg: dict) -> int:
    entries = []
    for path in args.reports:
        entries.extend(read_report(path).entries)
    seen = set()
    unique = []
    for e in entries:
        key = (e.label, e.endpoint)
        if key not in seen:
            seen.add(key)
            unique.append(e)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = render_table(unique)
    (out_dir / "combined_report.txt").write_text(table)
    (out_dir / "combined_report.svg").write_text(render_svg(unique))
    combined = EvalReport(entries=unique)
    write_report(combined, out_dir / "combined_report.csv")
    _write_manifest(
        out_dir,
        "report",
        cfg,
        [out_dir / "combined_report.txt", out_dir / "combined_report.svg", out_dir / "combined_report.csv"],
        {},
    )
    print(table, end="")
    return 0


class _MismatchError(GraphFusionError):
    """Checkpoint does not match the supplied data or config (exit code 2)."""


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphfusion",
        description="Generate data, build graphs, train fusion models, and report kappa.",
    )
    parser.add_argument("--config", default=None, help="path to a key=value config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config entry (repeatable)")
    parser.add_argument("--seed", type=int, default=None, help="master seed for all stages")
    parser.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                        help="worker processes for data generation")
    parser.add_argument("--print-config", action="store_true",
                        help="print the effective configuration and exit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("generate", help="emit a synthetic dataset")
    p.add_argument("--out", required=True)

    p = sub.add_parser("build-graphs", help="convert .hmp heatmaps to .mgf graphs")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train one model (or a grid) on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on its test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="merge evaluation reports into one table")
    p.add_argument("--out", required=True)
    p.add_argument("reports", nargs="+")
    return parser


_COMMANDS = {
    "generate": cmd_generate,
    "build-graphs": cmd_build_graphs,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = effective_config(args.config, args.set, args.seed)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.print_config:
        print(format_config(cfg), end="")
        return 0
    if args.command is None:
        parser.print_help()
        return 2
    try:
        return _COMMANDS[args.command](args, cfg)
    except (ConfigError, ContractError, _MismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except GraphFusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
