"""Experiment runners: depth sensitivity, lambda sweep, sparse-vs-dense,
gating ablation, gating-trace export, and the inference timing probe."""

import csv
import time
from dataclasses import replace

import numpy as np

from . import autodiff as ad
from . import kernels
from .graphs import BUCKET_NAMES, Graph, bucket_name
from .model import DaMoeModel, SingleGnnModel
from .training import Adam, build_model, evaluate, train
from . import losses as ls


def write_rows_csv(path, rows, fieldnames):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k) for k in fieldnames})


def _seed_list(config, seeds):
    return list(seeds) if seeds is not None else [config.seed]


def train_single_gnn(config, dataset, depth):
    """Train a plain fixed-depth GNN baseline on the config's split/seed.

    Follows the same optimization protocol as the mixture (Adam, same lr,
    epochs, and batching) so per-bucket comparisons are like for like.
    """
    from .graphs import split_dataset
    from . import metrics as mt

    seq = np.random.SeedSequence(config.seed)
    init_seed, _, shuffle_seed = seq.spawn(3)
    init_rng = np.random.default_rng(init_seed)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    train_set, test_set = split_dataset(dataset, config.train_fraction, config.seed)
    model = SingleGnnModel(config.task, config.backbone, depth, dataset.feature_dim,
                           config.hidden_dim, init_rng, num_classes=dataset.num_classes,
                           readout=config.readout)
    optimizer = Adam(model.parameters(), config.lr)
    batch = config.batch_size or len(train_set)
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(train_set)) if batch < len(train_set) \
            else np.arange(len(train_set))
        for start in range(0, len(order), batch):
            chunk = [train_set.graphs[i] for i in order[start:start + batch]]
            ad.clear_tape()
            optimizer.zero_grad()
            terms = [ls.task_loss(model.forward(g), g.label, config.task)
                     for g in chunk]
            total = terms[0]
            for t in terms[1:]:
                total = ad.add(total, t)
            total = ad.mul(total, 1.0 / len(terms))
            if not np.isfinite(total.data[0, 0]):
                from .training import TrainingError
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}")
            ad.backward(total)
            optimizer.step()
    ad.clear_tape()

    with ad.no_grad():
        preds, labels, scores_by_bucket = [], [], {b: [0, 0] for b in BUCKET_NAMES}
        for g in test_set.graphs:
            logits = model.forward(g).data[0]
            pred = int(np.argmax(logits))
            preds.append(pred)
            labels.append(g.label)
            b = bucket_name(g.n)
            scores_by_bucket[b][0] += int(pred == g.label)
            scores_by_bucket[b][1] += 1
    per_bucket = {b: (c / n if n else None) for b, (c, n) in scores_by_bucket.items()}
    overall = mt.accuracy(preds, labels)
    return model, overall, per_bucket


def run_depth_sensitivity(config, dataset, seeds=None):
    """Fixed-depth baselines vs the mixture, per scale bucket.

    Returns the accuracy table (one row per model), the best fixed depth
    per bucket (ties go to the shallower model), and the bucket × expert
    mean-gate-weight matrix from the mixture runs.
    """
    seeds = _seed_list(config, seeds)
    depths = range(1, config.num_experts + 1)
    fixed_acc = {d: {b: [] for b in (*BUCKET_NAMES, "overall")} for d in depths}
    moe_acc = {b: [] for b in (*BUCKET_NAMES, "overall")}
    weight_matrix = {b: np.zeros(config.num_experts) for b in BUCKET_NAMES}
    weight_rows = {b: 0 for b in BUCKET_NAMES}

    last_model = None
    for seed in seeds:
        cfg = replace(config, seed=seed)
        for d in depths:
            _, overall, per_bucket = train_single_gnn(cfg, dataset, d)
            fixed_acc[d]["overall"].append(overall)
            for b in BUCKET_NAMES:
                if per_bucket[b] is not None:
                    fixed_acc[d][b].append(per_bucket[b])
        result = train(cfg, dataset)
        last_model = result.model
        moe_acc["overall"].append(result.report.metric_value)
        for b in BUCKET_NAMES:
            info = result.report.per_bucket[b]
            if info["count"]:
                moe_acc[b].append(info["value"])
            mw = result.report.mean_weights_per_bucket[b]
            if mw is not None:
                weight_matrix[b] += np.array(mw)
                weight_rows[b] += 1

    def mean_or_none(values):
        return float(np.mean(values)) if values else None

    rows = []
    for d in depths:
        rows.append({"model": f"depth-{d}",
                     **{b: mean_or_none(fixed_acc[d][b]) for b in (*BUCKET_NAMES, "overall")}})
    rows.append({"model": "da-moe",
                 **{b: mean_or_none(moe_acc[b]) for b in (*BUCKET_NAMES, "overall")}})

    best_fixed_depth = {}
    for b in BUCKET_NAMES:
        candidates = [(mean_or_none(fixed_acc[d][b]), d) for d in depths]
        candidates = [(v, d) for v, d in candidates if v is not None]
        best_fixed_depth[b] = max(candidates, key=lambda vd: (vd[0], -vd[1]))[1] if candidates else None

    matrix = {b: (weight_matrix[b] / weight_rows[b]).tolist() if weight_rows[b] else None
              for b in BUCKET_NAMES}
    return {"rows": rows, "best_fixed_depth": best_fixed_depth,
            "damoe_per_bucket": {b: mean_or_none(moe_acc[b]) for b in BUCKET_NAMES},
            "mean_weight_matrix": matrix, "seeds": seeds, "_last_model": last_model}


def run_lambda_sweep(config, dataset, lambdas, seeds=None):
    """Train once per balancing factor; both balancing terms share it."""
    seeds = _seed_list(config, seeds)
    rows = []
    for lam in lambdas:
        values = []
        for seed in seeds:
            cfg = replace(config, seed=seed, lambda_importance=lam, lambda_load=lam)
            values.append(train(cfg, dataset).report.metric_value)
        rows.append({"lambda": lam, "metric": float(np.mean(values)),
                     "per_seed": values, "n_seeds": len(seeds)})
    return rows


def count_executed_experts(model, dataset):
    """Expert forwards one noise-free pass executes, summed over the dataset."""
    total = 0
    with ad.no_grad():
        for g in dataset.graphs:
            total += len(model.forward(g, rng=None, training=False).executed_experts)
    return total


def run_sparse_vs_dense(config, dataset, seeds=None):
    """Sparse (k < s) vs dense (k = s) selection: metric, executed expert
    forwards per graph, and wall-clock time per epoch."""
    seeds = _seed_list(config, seeds)
    rows = []
    for mode, k in (("sparse", config.top_k), ("dense", config.num_experts)):
        values, executed = [], []
        t0 = time.perf_counter()
        epochs_run = 0
        for seed in seeds:
            cfg = replace(config, seed=seed, top_k=k)
            result = train(cfg, dataset)
            values.append(result.report.metric_value)
            executed.append(count_executed_experts(result.model, dataset) / len(dataset))
            epochs_run += cfg.epochs
        elapsed = time.perf_counter() - t0
        rows.append({"mode": mode, "top_k": k, "metric": float(np.mean(values)),
                     "executed_per_graph": float(np.mean(executed)),
                     "seconds_per_epoch": elapsed / epochs_run,
                     "per_seed": values, "n_seeds": len(seeds)})
    return rows


def run_gating_ablation(config, dataset, seeds=None):
    """Structure-aware gating vs plain linear gating, same seeds."""
    seeds = _seed_list(config, seeds)
    configs = {mode: replace(config, gating=mode) for mode in ("structure", "linear")}
    rows = []
    for mode, cfg in configs.items():
        values = [train(replace(cfg, seed=seed), dataset).report.metric_value
                  for seed in seeds]
        rows.append({"gating": mode, "seeds": ";".join(str(s) for s in seeds),
                     "metric_mean": float(np.mean(values)),
                     "metric_std": float(np.std(values)), "per_seed": values})
    return {"rows": rows,
            "configs": {mode: cfg.to_dict() for mode, cfg in configs.items()}}


def export_gating_trace(model, dataset, path):
    """Per-graph gate weights: (graph_id, n_nodes, expert_id, Q_value, selected)."""
    rows = []
    with ad.no_grad():
        for gid, g in enumerate(dataset.graphs):
            res = model.forward(g, rng=None, training=False)
            weights = res.gating.weights.data.mean(axis=0)
            for e in range(model.num_experts):
                rows.append({"graph_id": gid, "n_nodes": g.n, "expert_id": e,
                             "Q_value": weights[e],
                             "selected_flag": int(e in res.executed_experts)})
    write_rows_csv(path, rows, ["graph_id", "n_nodes", "expert_id", "Q_value", "selected_flag"])
    return rows


def write_heatmap_csv(matrix, path, num_experts):
    rows = []
    for b in BUCKET_NAMES:
        if matrix.get(b) is None:
            continue
        row = {"bucket": b}
        row.update({f"expert_{i + 1}": matrix[b][i] for i in range(num_experts)})
        rows.append(row)
    write_rows_csv(path, rows, ["bucket"] + [f"expert_{i + 1}" for i in range(num_experts)])


# ---------------------------------------------------------------------------
# inference cost probe
# ---------------------------------------------------------------------------

def _random_timing_graphs(count, rng, n_range=(100, 300), d_in=16, attach=3):
    graphs = []
    for _ in range(count):
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        pairs = set()
        for v in range(1, n):
            for u in rng.integers(0, v, size=min(attach, v)):
                pairs.add((int(u), v))
        g = Graph(n, sorted(pairs), rng.standard_normal((n, d_in)), label=0)
        graphs.append(g)
    return graphs


def _best_time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def inference_timing_study(backbone="gcn", d_in=64, hidden=64, num_experts=4,
                           n_graphs=100, seed=0, repeats=3, n_range=(300, 500)):
    """Measure per-graph inference time versus the number of selected experts.

    Returns the median time per k (the same parameters are reused so the
    top-k selections nest), and the per-graph ratio between the k=1 mixture
    and a plain fixed-depth model of the depth the gate selected. Sizes
    default to the flop-dominated regime the cost model describes.
    """
    kernels.warm_up()
    rng = np.random.default_rng(seed)
    graphs = _random_timing_graphs(n_graphs, rng, n_range=n_range, d_in=d_in)
    model = DaMoeModel("graph-classification", backbone, num_experts, 1, d_in, hidden,
                       rng, num_classes=2)
    # generic gate scores so the selected depth varies across graphs
    gate = model.block.gate
    gate.w2.data = rng.uniform(-1, 1, gate.w2.data.shape)
    gate.b2.data = rng.uniform(-0.5, 0.5, gate.b2.data.shape)
    singles = {d: SingleGnnModel("graph-classification", backbone, d, d_in, hidden,
                                 rng, num_classes=2)
               for d in range(1, num_experts + 1)}

    with ad.no_grad():
        for g in graphs[:2]:  # warm caches (adjacency, JIT) before timing
            model.forward(g, rng=None, training=False)
            for s in singles.values():
                s.forward(g)

        times_per_k = {}
        for k in range(1, num_experts + 1):
            model.block.gate.top_k = k
            times_per_k[k] = [
                _best_time(lambda: model.forward(g, rng=None, training=False), repeats)
                for g in graphs
            ]

        model.block.gate.top_k = 1
        ratios = []
        for g in graphs:
            chosen = model.forward(g, rng=None, training=False).executed_experts[0]
            depth = chosen + 1
            t_moe = _best_time(lambda: model.forward(g, rng=None, training=False), repeats)
            t_single = _best_time(lambda: singles[depth].forward(g), repeats)
            ratios.append(t_moe / t_single)

    return {
        "median_time_per_k": {k: float(np.median(v)) for k, v in times_per_k.items()},
        "k1_vs_fixed_ratio_median": float(np.median(ratios)),
        "ratios": ratios,
        "n_graphs": n_graphs,
    }
