import csv

import numpy as np
import pytest

from damoe import experiments as ex
from damoe.graphs import BUCKET_NAMES, generate_depth_sensitive_dataset
from damoe.training import TrainConfig, train


def tiny_config(**overrides):
    base = dict(num_experts=3, top_k=2, hidden_dim=6, gate_hidden=6, epochs=2,
                lr=0.01, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def dataset():
    return generate_depth_sensitive_dataset(24, seed=5)


def test_depth_sensitivity_table_shape(dataset):
    cfg = tiny_config()
    result = ex.run_depth_sensitivity(cfg, dataset)
    rows = result["rows"]
    assert len(rows) == cfg.num_experts + 1  # one per fixed depth plus the mixture
    assert [r["model"] for r in rows[:-1]] == [f"depth-{d}" for d in range(1, 4)]
    assert rows[-1]["model"] == "da-moe"
    for row in rows:
        assert set(BUCKET_NAMES) | {"model", "overall"} <= set(row)
    matrix = result["mean_weight_matrix"]
    for b in BUCKET_NAMES:
        assert matrix[b] is None or len(matrix[b]) == cfg.num_experts


def test_lambda_sweep_rows_and_zero_consistency(dataset):
    cfg = tiny_config()
    lambdas = [0.0, 0.001, 0.01]
    rows = ex.run_lambda_sweep(cfg, dataset, lambdas)
    assert [r["lambda"] for r in rows] == lambdas
    direct = train(TrainConfig(**{**cfg.to_dict(),
                                  "lambda_importance": 0.0, "lambda_load": 0.0}),
                   dataset)
    assert rows[0]["metric"] == direct.report.metric_value


def test_sparse_vs_dense_counts(dataset):
    cfg = tiny_config(num_experts=3, top_k=2)
    rows = ex.run_sparse_vs_dense(cfg, dataset)
    assert len(rows) == 2
    sparse = next(r for r in rows if r["mode"] == "sparse")
    dense = next(r for r in rows if r["mode"] == "dense")
    assert sparse["executed_per_graph"] == 2.0
    assert dense["executed_per_graph"] == 3.0


def test_gating_ablation_rows_and_config_diff(dataset):
    result = ex.run_gating_ablation(tiny_config(), dataset, seeds=[0, 1])
    rows = result["rows"]
    assert len(rows) == 2
    assert rows[0]["seeds"] == rows[1]["seeds"] == "0;1"
    diff = {k for k in result["configs"]["structure"]
            if result["configs"]["structure"][k] != result["configs"]["linear"][k]}
    assert diff == {"gating"}


def test_gating_trace_csv(dataset, tmp_path):
    cfg = tiny_config(epochs=1)
    result = train(cfg, dataset)
    path = tmp_path / "trace.csv"
    rows = ex.export_gating_trace(result.model, dataset, path)
    assert len(rows) == len(dataset) * cfg.num_experts
    with open(path) as fh:
        parsed = list(csv.DictReader(fh))
    assert len(parsed) == len(rows)
    assert set(parsed[0]) == {"graph_id", "n_nodes", "expert_id", "Q_value", "selected_flag"}
    by_graph = {}
    for row in parsed:
        by_graph.setdefault(row["graph_id"], []).append(row)
    for rows_g in by_graph.values():
        selected = sum(int(r["selected_flag"]) for r in rows_g)
        assert selected == cfg.top_k
        q_sum = sum(float(r["Q_value"]) for r in rows_g)
        assert abs(q_sum - 1.0) < 1e-9


def test_heatmap_csv(dataset, tmp_path):
    cfg = tiny_config(epochs=1)
    result = ex.run_depth_sensitivity(cfg, dataset)
    path = tmp_path / "heatmap.csv"
    ex.write_heatmap_csv(result["mean_weight_matrix"], path, cfg.num_experts)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert {r["bucket"] for r in rows} <= set(BUCKET_NAMES)
    assert set(rows[0]) == {"bucket", "expert_1", "expert_2", "expert_3"}


def test_inference_timing_study_smoke():
    out = ex.inference_timing_study(n_graphs=6, n_range=(20, 40), d_in=4, hidden=8,
                                    repeats=1)
    assert set(out["median_time_per_k"]) == {1, 2, 3, 4}
    assert all(v > 0 for v in out["median_time_per_k"].values())
    assert out["k1_vs_fixed_ratio_median"] > 0
