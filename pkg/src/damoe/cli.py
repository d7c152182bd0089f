"""Command-line entry points: train, experiment runners, dataset generation.

All commands are non-interactive, write only under --out, and derive every
random draw from --seed. Exit codes: 0 success, 2 bad configuration or
arguments, 3 training divergence.
"""

import glob
import hashlib
import json
import os
import sys
from datetime import datetime, timezone

import click
import numpy as np

from . import __version__
from . import experiments as ex
from .graphs import (generate_depth_sensitive_dataset, load_tu_dataset,
                     write_dataset_manifest, write_tu_dataset)
from .model import save_model
from .training import ConfigError, TrainConfig, TrainingError, train


def _fail(code, message):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _dataset_fingerprint(dataset):
    h = hashlib.sha256()
    h.update(f"{dataset.task}|{dataset.feature_dim}|{dataset.num_classes}".encode())
    for g in dataset.graphs:
        h.update(np.int64(g.n).tobytes())
        h.update(g.undirected_pairs().tobytes())
        h.update(np.ascontiguousarray(g.x).tobytes())
        h.update(str(g.label).encode())
        if g.node_labels is not None:
            h.update(g.node_labels.tobytes())
    return h.hexdigest()


def _detect_dataset_name(data_dir):
    hits = sorted(glob.glob(os.path.join(data_dir, "*_A.txt")))
    if len(hits) != 1:
        _fail(2, f"expected exactly one *_A.txt under {data_dir}, found {len(hits)}; "
                 "pass --name to disambiguate")
    return os.path.basename(hits[0])[:-len("_A.txt")]


def _load_dataset(data_dir, name, config):
    if not os.path.isdir(data_dir):
        _fail(2, f"data directory does not exist: {data_dir}")
    name = name or _detect_dataset_name(data_dir)
    try:
        return load_tu_dataset(data_dir, name, max_degree_cap=config.degree_cap,
                               task=config.task)
    except (FileNotFoundError, ValueError) as exc:
        _fail(2, str(exc))


def _build_config(config_path, seed, experts, topk, backbone, gating, task, lambdas):
    try:
        cfg = TrainConfig.from_json(config_path) if config_path else TrainConfig()
        overrides = {}
        if seed is not None:
            overrides["seed"] = seed
        if experts is not None:
            overrides["num_experts"] = experts
        if topk is not None:
            overrides["top_k"] = topk
        if backbone is not None:
            overrides["backbone"] = backbone
        if gating is not None:
            overrides["gating"] = gating
        if task is not None:
            overrides["task"] = task
        if lambdas is not None:
            values = _parse_lambdas(lambdas)
            if len(values) != 1:
                raise ConfigError("lambdas: pass one value to train; lists are for lambda-sweep")
            overrides["lambda_importance"] = overrides["lambda_load"] = values[0]
        if overrides:
            cfg = TrainConfig.from_dict({**cfg.to_dict(), **overrides})
        return cfg
    except ConfigError as exc:
        _fail(2, str(exc))


def _parse_lambdas(raw):
    try:
        values = [float(v) for v in raw.split(",") if v.strip() != ""]
    except ValueError:
        raise ConfigError(f"lambdas: could not parse {raw!r} as comma-separated floats")
    if not values:
        raise ConfigError("lambdas: empty list")
    if any(v < 0 for v in values):
        raise ConfigError("lambdas: values must be non-negative")
    return values


def _write_manifest(out_dir, config, dataset, seeds, artifacts):
    manifest = {
        "config": config.to_dict(),
        "dataset": {"name": dataset.name, "graphs": len(dataset),
                    "fingerprint": _dataset_fingerprint(dataset)},
        "seeds": list(seeds),
        "artifacts": sorted(artifacts),
        "tool_version": __version__,
        "started_at": datetime.now(timezone.utc).isoformat(),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


_shared_options = [
    click.option("--data", "data_dir", required=True, help="TU-format dataset directory"),
    click.option("--out", "out_dir", required=True, help="output directory"),
    click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                 default=None, help="JSON training configuration"),
    click.option("--name", default=None, help="dataset name (defaults to the *_A.txt prefix)"),
    click.option("--seed", type=int, default=None),
    click.option("--experts", type=int, default=None, help="number of experts s"),
    click.option("--topk", type=int, default=None, help="experts selected per input"),
    click.option("--backbone", type=click.Choice(["gcn", "gin"]), default=None),
    click.option("--gating", type=click.Choice(["structure", "linear"]), default=None),
    click.option("--task", type=click.Choice(["graph-classification", "graph-regression",
                                              "node-classification", "link-prediction"]),
                 default=None),
    click.option("--lambdas", default=None,
                 help="balancing factor (one value; comma list for lambda-sweep)"),
]


def shared_options(fn):
    for opt in reversed(_shared_options):
        fn = opt(fn)
    return fn


@click.group()
@click.version_option(version=__version__)
def main():
    """Depth-adaptive mixture-of-experts GNN toolkit."""


@main.command("train")
@shared_options
def cmd_train(data_dir, out_dir, config_path, name, seed, experts, topk, backbone,
              gating, task, lambdas):
    """Train one model; writes manifest.json, log.csv, report.json, model.json."""
    cfg = _build_config(config_path, seed, experts, topk, backbone, gating, task, lambdas)
    dataset = _load_dataset(data_dir, name, cfg)
    os.makedirs(out_dir, exist_ok=True)
    artifacts = ["manifest.json", "log.csv", "report.json", "model.json"]
    _write_manifest(out_dir, cfg, dataset, [cfg.seed], artifacts)
    try:
        result = train(cfg, dataset)
    except ConfigError as exc:
        _fail(2, str(exc))
    except TrainingError as exc:
        _fail(3, str(exc))
    result.write_history_csv(os.path.join(out_dir, "log.csv"))
    report = result.report.to_dict()
    report.update({"train_size": result.train_size, "test_size": result.test_size,
                   "epochs": cfg.epochs, "seed": cfg.seed})
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    save_model(result.model, os.path.join(out_dir, "model.json"))
    click.echo(f"{result.report.metric_name}: {result.report.metric_value:.4f}")


EXPERIMENTS = ("depth-sensitivity", "lambda-sweep", "sparse-dense", "gating-ablation")


@main.command("experiment")
@click.argument("experiment_name", type=click.Choice(EXPERIMENTS))
@click.option("--seeds", "n_seeds", type=int, default=5, show_default=True,
              help="number of consecutive seeds starting at --seed")
@shared_options
def cmd_experiment(experiment_name, n_seeds, data_dir, out_dir, config_path, name, seed,
                   experts, topk, backbone, gating, task, lambdas):
    """Run one of the analysis studies; writes CSV tables under --out."""
    cfg = _build_config(config_path, seed, experts, topk, backbone, gating, task,
                        lambdas if experiment_name != "lambda-sweep" else None)
    if n_seeds < 1:
        _fail(2, f"seeds: must be >= 1, got {n_seeds}")
    dataset = _load_dataset(data_dir, name, cfg)
    os.makedirs(out_dir, exist_ok=True)
    seeds = [cfg.seed + i for i in range(n_seeds)]
    _write_manifest(out_dir, cfg, dataset, seeds, [f"{experiment_name}.csv"])

    try:
        if experiment_name == "depth-sensitivity":
            result = ex.run_depth_sensitivity(cfg, dataset, seeds=seeds)
            ex.write_rows_csv(os.path.join(out_dir, "depth_sensitivity.csv"), result["rows"],
                              ["model", "small", "medium", "large", "overall"])
            ex.write_heatmap_csv(result["mean_weight_matrix"],
                                 os.path.join(out_dir, "heatmap.csv"), cfg.num_experts)
            model = result.pop("_last_model", None)
            if model is not None:
                ex.export_gating_trace(model, dataset,
                                       os.path.join(out_dir, "gating_trace.csv"))
        elif experiment_name == "lambda-sweep":
            values = _parse_lambdas(lambdas) if lambdas else [0.0, 1e-4, 1e-3, 1e-2, 1e-1]
            rows = ex.run_lambda_sweep(cfg, dataset, values, seeds=seeds)
            ex.write_rows_csv(os.path.join(out_dir, "lambda_sweep.csv"), rows,
                              ["lambda", "metric", "n_seeds"])
        elif experiment_name == "sparse-dense":
            rows = ex.run_sparse_vs_dense(cfg, dataset, seeds=seeds)
            ex.write_rows_csv(os.path.join(out_dir, "sparse_vs_dense.csv"), rows,
                              ["mode", "top_k", "metric", "executed_per_graph",
                               "seconds_per_epoch", "n_seeds"])
        else:
            result = ex.run_gating_ablation(cfg, dataset, seeds=seeds)
            ex.write_rows_csv(os.path.join(out_dir, "gating_ablation.csv"), result["rows"],
                              ["gating", "seeds", "metric_mean", "metric_std"])
            with open(os.path.join(out_dir, "gating_ablation_configs.json"), "w") as fh:
                json.dump(result["configs"], fh, indent=2, sort_keys=True)
    except ConfigError as exc:
        _fail(2, str(exc))
    except TrainingError as exc:
        _fail(3, str(exc))
    click.echo(f"{experiment_name}: wrote results to {out_dir}")


@main.command("gen-data")
@click.option("--out", "out_dir", required=True)
@click.option("--name", default="synthetic", show_default=True)
@click.option("--count", type=int, required=True, help="number of graphs")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--d-feature", type=int, default=3, show_default=True)
@click.option("--max-hops", type=int, default=5, show_default=True)
def cmd_gen_data(out_dir, name, count, seed, d_feature, max_hops):
    """Materialize a synthetic depth-sensitive dataset as TU-format files."""
    try:
        dataset = generate_depth_sensitive_dataset(count, seed, d_feature=d_feature,
                                                   max_hops=max_hops)
    except ValueError as exc:
        _fail(2, str(exc))
    os.makedirs(out_dir, exist_ok=True)
    write_tu_dataset(dataset, out_dir, name)
    dataset.name = name
    write_dataset_manifest(dataset, os.path.join(out_dir, f"{name}_manifest.json"))
    click.echo(f"wrote {count} graphs to {out_dir} as {name!r}")


if __name__ == "__main__":
    main()
