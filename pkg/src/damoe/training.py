"""Optimization loop, configuration, evaluation reports, and metrics glue."""

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import losses as ls
from . import metrics as mt
from .graphs import (BUCKET_NAMES, TASK_GRAPH_CLASSIFICATION, TASK_GRAPH_REGRESSION,
                     TASK_LINK_PREDICTION, TASK_NODE_CLASSIFICATION, TASKS,
                     bucket_name, derive_link_prediction_split, sample_non_edges,
                     split_dataset)
from .model import DaMoeModel
from scipy.special import expit


class ConfigError(ValueError):
    """Invalid or unknown configuration field."""


class TrainingError(RuntimeError):
    """Training failed (e.g. the loss became non-finite)."""


@dataclass
class TrainConfig:
    task: str = TASK_GRAPH_CLASSIFICATION
    backbone: str = "gcn"
    num_experts: int = 4
    top_k: int = 2
    hidden_dim: int = 32
    gate_hidden: int = 32
    lambda_importance: float = 0.001
    lambda_load: float = 0.001
    lr: float = 0.01
    epochs: int = 200
    seed: int = 0
    readout: str | None = None
    noise_enabled: bool = True
    gating: str = "structure"
    train_fraction: float = 0.8
    hits_at: int = 10
    degree_cap: int = 10
    eval_every: int = 1
    batch_size: int | None = None  # None = full batch

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.task not in TASKS:
            raise ConfigError(f"task: unknown value {self.task!r}; expected one of {TASKS}")
        if self.backbone not in ("gcn", "gin"):
            raise ConfigError(f"backbone: unknown value {self.backbone!r}")
        if self.gating not in ("structure", "linear"):
            raise ConfigError(f"gating: unknown value {self.gating!r}")
        if self.readout not in (None, "mean", "sum"):
            raise ConfigError(f"readout: unknown value {self.readout!r}")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(
                f"top_k: must satisfy 1 <= top_k <= num_experts, got k={self.top_k}, s={self.num_experts}")
        if self.lr <= 0:
            raise ConfigError(f"lr: must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs: must be >= 1, got {self.epochs}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction: must be in (0, 1), got {self.train_fraction}")
        if self.lambda_importance < 0 or self.lambda_load < 0:
            raise ConfigError("lambda_importance/lambda_load: must be non-negative")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every: must be >= 1, got {self.eval_every}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError(f"batch_size: must be >= 1, got {self.batch_size}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in doc.items():
            if key not in known:
                raise ConfigError(f"{key}: unknown config field")
            kwargs[key] = value
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(doc)


class Adam:
    """Adaptive-moment gradient descent over named parameters."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in params]
        self.v = [np.zeros_like(p.data) for _, p in params]

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for (_, p), m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()


@dataclass
class EvalReport:
    metric_name: str
    metric_value: float
    test_size: int
    per_bucket: dict = field(default_factory=dict)
    mean_weights_per_bucket: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "metric_name": self.metric_name,
            "metric_value": self.metric_value,
            "test_size": self.test_size,
            "per_bucket": self.per_bucket,
            "mean_weights_per_bucket": self.mean_weights_per_bucket,
        }


@dataclass
class TrainResult:
    model: DaMoeModel
    report: EvalReport
    history: list
    train_size: int
    test_size: int

    def write_history_csv(self, path):
        cols = ["epoch", "task_loss", "importance_loss", "load_loss", "total",
                "train_metric", "test_metric"]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            for row in self.history:
                writer.writerow({c: row[c] for c in cols})


def build_model(config, feature_dim, num_classes, rng):
    return DaMoeModel(config.task, config.backbone, config.num_experts, config.top_k,
                      feature_dim, config.hidden_dim, rng, num_classes=num_classes,
                      readout=config.readout, noise_enabled=config.noise_enabled,
                      gating_mode=config.gating, gate_hidden=config.gate_hidden)


def default_metric(task, hits_at=10):
    return {
        TASK_GRAPH_CLASSIFICATION: "accuracy",
        TASK_NODE_CLASSIFICATION: "accuracy",
        TASK_GRAPH_REGRESSION: "rmse",
        TASK_LINK_PREDICTION: f"hits@{hits_at}",
    }[task]


def _eval_workers():
    raw = os.environ.get("DAMOE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _forward_eval(model, graphs):
    """Noise-free forward passes with frozen parameters; optionally threaded."""
    workers = _eval_workers()
    with ad.no_grad():
        if workers == 1 or len(graphs) < 4:
            return [model.forward(g, rng=None, training=False) for g in graphs]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda g: model.forward(g, rng=None, training=False), graphs))


def _classification_scores(logits):
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def evaluate(model, dataset, metric=None):
    """Noise-off evaluation with per-scale-bucket breakdowns.

    For graph tasks the report also carries the mean gate weight each expert
    received per bucket (the heatmap data).
    """
    metric = metric or default_metric(model.task)
    if model.task == TASK_LINK_PREDICTION:
        raise ValueError("use evaluate_link for link-prediction models")
    if model.task in (TASK_GRAPH_CLASSIFICATION, TASK_NODE_CLASSIFICATION):
        if metric not in ("accuracy", "roc-auc"):
            raise ValueError(f"metric {metric!r} does not match task {model.task!r}")
    if model.task == TASK_GRAPH_REGRESSION and metric != "rmse":
        raise ValueError(f"metric {metric!r} does not match task {model.task!r}")

    results = _forward_eval(model, dataset.graphs)

    buckets = {b: {"count": 0} for b in BUCKET_NAMES}
    weight_sums = {b: np.zeros(model.num_experts) for b in BUCKET_NAMES}
    weight_rows = {b: 0 for b in BUCKET_NAMES}

    if model.task == TASK_GRAPH_CLASSIFICATION:
        preds, labels, scores = [], [], []
        correct = {b: 0 for b in BUCKET_NAMES}
        for g, res in zip(dataset.graphs, results):
            b = bucket_name(g.n)
            logits = res.output.data[0]
            pred = int(np.argmax(logits))
            preds.append(pred)
            labels.append(g.label)
            if dataset.num_classes == 2:
                scores.append(_classification_scores(logits)[1])
            buckets[b]["count"] += 1
            correct[b] += int(pred == g.label)
            weight_sums[b] += res.gating.weights.data.sum(axis=0)
            weight_rows[b] += res.gating.weights.data.shape[0]
        if metric == "accuracy":
            value = mt.accuracy(preds, labels)
        else:
            if dataset.num_classes != 2:
                raise ValueError("roc-auc requires a binary classification task")
            value = mt.roc_auc(scores, labels)
        for b in BUCKET_NAMES:
            n = buckets[b]["count"]
            buckets[b]["correct"] = correct[b]
            buckets[b]["value"] = correct[b] / n if n else None
    elif model.task == TASK_GRAPH_REGRESSION:
        preds, targets = [], []
        sq = {b: 0.0 for b in BUCKET_NAMES}
        for g, res in zip(dataset.graphs, results):
            b = bucket_name(g.n)
            pred = float(res.output.data[0, 0])
            preds.append(pred)
            targets.append(g.label)
            buckets[b]["count"] += 1
            sq[b] += (pred - g.label) ** 2
            weight_sums[b] += res.gating.weights.data.sum(axis=0)
            weight_rows[b] += res.gating.weights.data.shape[0]
        value = mt.rmse(preds, targets)
        for b in BUCKET_NAMES:
            n = buckets[b]["count"]
            buckets[b]["value"] = float(np.sqrt(sq[b] / n)) if n else None
    else:  # node classification
        preds, labels = [], []
        correct = {b: 0 for b in BUCKET_NAMES}
        labeled = {b: 0 for b in BUCKET_NAMES}
        for g, res in zip(dataset.graphs, results):
            b = bucket_name(g.n)
            mask = g.node_labels >= 0
            pred = np.argmax(res.output.data, axis=1)[mask]
            lab = g.node_labels[mask]
            preds.extend(pred.tolist())
            labels.extend(lab.tolist())
            buckets[b]["count"] += 1
            correct[b] += int((pred == lab).sum())
            labeled[b] += int(mask.sum())
            weight_sums[b] += res.gating.weights.data.sum(axis=0)
            weight_rows[b] += res.gating.weights.data.shape[0]
        value = mt.accuracy(preds, labels)
        for b in BUCKET_NAMES:
            buckets[b]["correct"] = correct[b]
            buckets[b]["labeled"] = labeled[b]
            buckets[b]["value"] = correct[b] / labeled[b] if labeled[b] else None

    mean_weights = {
        b: (weight_sums[b] / weight_rows[b]).tolist() if weight_rows[b] else None
        for b in BUCKET_NAMES
    }
    return EvalReport(metric, float(value), len(dataset), buckets, mean_weights)


def link_scores(model, g, pairs):
    """Pair scores: sigmoid of the dot product of the two node embeddings."""
    with ad.no_grad():
        emb = model.forward(g, rng=None, training=False).output.data
    raw = (emb[pairs[:, 0]] * emb[pairs[:, 1]]).sum(axis=1)
    return expit(raw)


def evaluate_link(model, split, hits_at=10):
    pos = link_scores(model, split.train_graph, split.test_pos)
    neg = link_scores(model, split.train_graph, split.test_neg)
    value = mt.hits_at_n(pos, neg, hits_at)
    return EvalReport(f"hits@{hits_at}", value, int(split.test_pos.shape[0] + split.test_neg.shape[0]))


def _train_step_graphs(model, graphs, noise_rng, task):
    """One full-batch forward over graphs; returns task term, Q/P lists, preds."""
    task_terms = []
    batch_weights, batch_probs = [], []
    preds = []
    for g in graphs:
        res = model.forward(g, noise_rng, training=True)
        batch_weights.append(res.gating.weights)
        batch_probs.append(res.gating.select_probs)
        if task == TASK_GRAPH_CLASSIFICATION:
            task_terms.append(ls.task_loss(res.output, g.label, task))
            preds.append(int(np.argmax(res.output.data[0])))
        elif task == TASK_GRAPH_REGRESSION:
            task_terms.append(ls.task_loss(res.output, g.label, task))
            preds.append(float(res.output.data[0, 0]))
        else:  # node classification
            task_terms.append(ls.task_loss(res.output, g.node_labels, task))
            preds.append(np.argmax(res.output.data, axis=1))
    total = task_terms[0]
    for term in task_terms[1:]:
        total = ad.add(total, term)
    return ad.mul(total, 1.0 / len(task_terms)), batch_weights, batch_probs, preds


def _train_metric(task, preds, graphs):
    if task == TASK_GRAPH_CLASSIFICATION:
        return mt.accuracy(preds, [g.label for g in graphs])
    if task == TASK_GRAPH_REGRESSION:
        return mt.rmse(preds, [g.label for g in graphs])
    correct = total = 0
    for p, g in zip(preds, graphs):
        mask = g.node_labels >= 0
        correct += int((p[mask] == g.node_labels[mask]).sum())
        total += int(mask.sum())
    return correct / total if total else 0.0


def train(config, dataset):
    """Full-batch Adam training; deterministic for a fixed (config, dataset).

    Returns the trained model, the final test report, and the per-epoch
    loss/metric history.
    """
    if dataset.task != config.task:
        raise ConfigError(f"task: config says {config.task!r} but dataset is {dataset.task!r}")
    if config.task == TASK_LINK_PREDICTION:
        return _train_link(config, dataset)

    seq = np.random.SeedSequence(config.seed)
    init_seed, noise_seed, shuffle_seed = seq.spawn(3)
    init_rng = np.random.default_rng(init_seed)
    noise_rng = np.random.default_rng(noise_seed)
    shuffle_rng = np.random.default_rng(shuffle_seed)

    train_set, test_set = split_dataset(dataset, config.train_fraction, config.seed)
    model = build_model(config, dataset.feature_dim, dataset.num_classes, init_rng)
    optimizer = Adam(model.parameters(), config.lr)
    batch = config.batch_size or len(train_set)

    history = []
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(train_set)) if batch < len(train_set) \
            else np.arange(len(train_set))
        epoch_rows = []
        preds_by_graph = [None] * len(train_set)
        for start in range(0, len(order), batch):
            chunk = [train_set.graphs[i] for i in order[start:start + batch]]
            ad.clear_tape()
            optimizer.zero_grad()
            task_term, batch_weights, batch_probs, preds = _train_step_graphs(
                model, chunk, noise_rng, config.task)
            breakdown = ls.total_loss(task_term,
                                      ls.importance_loss(batch_weights),
                                      ls.load_loss(batch_probs),
                                      config.lambda_importance, config.lambda_load)
            if not np.isfinite(breakdown.total):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            ad.backward(breakdown.total_node)
            optimizer.step()
            epoch_rows.append((len(chunk), breakdown))
            for i, p in zip(order[start:start + batch], preds):
                preds_by_graph[i] = p
        total_graphs = sum(c for c, _ in epoch_rows)
        breakdown = ls.LossBreakdown(
            task_loss=sum(c * b.task_loss for c, b in epoch_rows) / total_graphs,
            importance_loss=sum(c * b.importance_loss for c, b in epoch_rows) / total_graphs,
            load_loss=sum(c * b.load_loss for c, b in epoch_rows) / total_graphs,
            total=sum(c * b.total for c, b in epoch_rows) / total_graphs,
            lambda_importance=config.lambda_importance, lambda_load=config.lambda_load)
        preds = preds_by_graph

        if epoch % config.eval_every == 0 or epoch == config.epochs:
            test_metric = evaluate(model, test_set).metric_value
        else:
            test_metric = None
        row = {"epoch": epoch, **breakdown.as_row(),
               "train_metric": _train_metric(config.task, preds, train_set.graphs),
               "test_metric": test_metric}
        history.append(row)

    ad.clear_tape()
    final_report = evaluate(model, test_set)
    return TrainResult(model, final_report, history, len(train_set), len(test_set))


def _train_link(config, dataset):
    if len(dataset) != 1:
        raise ConfigError("task: link prediction expects a single-graph dataset")
    seq = np.random.SeedSequence(config.seed)
    init_seed, noise_seed, neg_seed = seq.spawn(3)
    init_rng = np.random.default_rng(init_seed)
    noise_rng = np.random.default_rng(noise_seed)
    neg_rng = np.random.default_rng(neg_seed)

    split = derive_link_prediction_split(dataset.graphs[0], config.seed)
    g = split.train_graph
    model = build_model(config, dataset.feature_dim, None, init_rng)
    optimizer = Adam(model.parameters(), config.lr)

    pos_pairs = g.undirected_pairs()
    history = []
    for epoch in range(1, config.epochs + 1):
        ad.clear_tape()
        optimizer.zero_grad()
        neg_pairs = sample_non_edges(g, pos_pairs.shape[0], neg_rng,
                                     forbidden=split.test_pos)
        res = model.forward(g, noise_rng, training=True)
        pairs = np.vstack([pos_pairs, neg_pairs])
        targets = np.concatenate([np.ones(len(pos_pairs)), np.zeros(len(neg_pairs))])
        left = ad.gather_rows(res.output, pairs[:, 0])
        right = ad.gather_rows(res.output, pairs[:, 1])
        raw = ad.row_sum(ad.mul(left, right))
        task_term = ls.task_loss(raw, targets, TASK_LINK_PREDICTION)
        breakdown = ls.total_loss(task_term,
                                  ls.importance_loss([res.gating.weights]),
                                  ls.load_loss([res.gating.select_probs]),
                                  config.lambda_importance, config.lambda_load)
        if not np.isfinite(breakdown.total):
            raise TrainingError(f"non-finite loss at epoch {epoch}")
        ad.backward(breakdown.total_node)
        optimizer.step()

        if epoch % config.eval_every == 0 or epoch == config.epochs:
            test_metric = evaluate_link(model, split, config.hits_at).metric_value
        else:
            test_metric = None
        history.append({"epoch": epoch, **breakdown.as_row(),
                        "train_metric": float("nan"),
                        "test_metric": test_metric})

    ad.clear_tape()
    final = evaluate_link(model, split, config.hits_at)
    return TrainResult(model, final, history, len(pos_pairs), int(split.test_pos.shape[0]))
