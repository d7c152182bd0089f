"""Graph data model, TU-format parsing, synthetic generation, and splits."""

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels

TASK_GRAPH_CLASSIFICATION = "graph-classification"
TASK_GRAPH_REGRESSION = "graph-regression"
TASK_NODE_CLASSIFICATION = "node-classification"
TASK_LINK_PREDICTION = "link-prediction"

TASKS = (
    TASK_GRAPH_CLASSIFICATION,
    TASK_GRAPH_REGRESSION,
    TASK_NODE_CLASSIFICATION,
    TASK_LINK_PREDICTION,
)

CLASSIFICATION_TASKS = (TASK_GRAPH_CLASSIFICATION, TASK_NODE_CLASSIFICATION)


class GraphFormatError(ValueError):
    """Raised when an on-disk dataset violates the expected text format."""


class Graph:
    """An undirected graph: edge list (stored symmetrically), features, label.

    ``edges`` is an e×2 int array containing both directions of every
    undirected edge. ``x`` is the n×d node feature matrix. ``label`` is an
    integer class or float target for graph tasks; ``node_labels`` carries
    per-node integer targets for node tasks (-1 marks unlabeled nodes).
    """

    def __init__(self, n, undirected_pairs, x, label=None, node_labels=None, meta=None):
        self.n = int(n)
        pairs = np.asarray(undirected_pairs, dtype=np.int64).reshape(-1, 2)
        if pairs.size and (pairs.min() < 0 or pairs.max() >= self.n):
            bad = pairs[(pairs < 0) | (pairs >= self.n)][0]
            raise ValueError(f"edge endpoint {bad} out of range [0, {self.n})")
        both = np.vstack([pairs, pairs[:, ::-1]]) if pairs.size else pairs
        self.edges = np.unique(both, axis=0) if both.size else both.reshape(0, 2)
        self.x = np.asarray(x, dtype=np.float64)
        if self.x.shape[0] != self.n:
            raise ValueError(f"feature matrix has {self.x.shape[0]} rows for {self.n} nodes")
        self.label = label
        self.node_labels = None if node_labels is None else np.asarray(node_labels, dtype=np.int64)
        self.meta = dict(meta) if meta else {}
        self._csr = None
        self._adj_hat = None

    @property
    def feature_dim(self):
        return self.x.shape[1]

    @property
    def num_undirected_edges(self):
        return self.undirected_pairs().shape[0]

    def undirected_pairs(self):
        """Each undirected edge once, as (u, v) with u <= v."""
        if self.edges.size == 0:
            return np.zeros((0, 2), dtype=np.int64)
        canon = np.sort(self.edges, axis=1)
        return np.unique(canon, axis=0)

    def degrees(self):
        deg = np.zeros(self.n, dtype=np.int64)
        if self.edges.size:
            deg += np.bincount(self.edges[:, 0], minlength=self.n)
        return deg

    def csr(self):
        """(indptr, indices) adjacency in CSR form, neighbors sorted."""
        if self._csr is None:
            if self.edges.size:
                order = np.lexsort((self.edges[:, 1], self.edges[:, 0]))
                src = self.edges[order, 0]
                indices = self.edges[order, 1]
                indptr = np.zeros(self.n + 1, dtype=np.int64)
                np.add.at(indptr, src + 1, 1)
                indptr = np.cumsum(indptr)
            else:
                indptr = np.zeros(self.n + 1, dtype=np.int64)
                indices = np.zeros(0, dtype=np.int64)
            self._csr = (indptr, indices)
        return self._csr

    def bfs_distances(self, source):
        """Hop distances from ``source``; -1 for unreachable nodes."""
        indptr, indices = self.csr()
        return kernels.bfs_distances(indptr, indices, source, self.n)

    def adjacency_matrix(self):
        a = np.zeros((self.n, self.n))
        if self.edges.size:
            a[self.edges[:, 0], self.edges[:, 1]] = 1.0
        return a

    def __repr__(self):
        return f"Graph(n={self.n}, edges={self.num_undirected_edges}, label={self.label})"


@dataclass
class GraphDataset:
    graphs: list
    feature_dim: int
    task: str
    num_classes: int | None = None
    name: str = "dataset"

    def __post_init__(self):
        if not self.graphs:
            raise ValueError("dataset must contain at least one graph")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        for g in self.graphs:
            if g.feature_dim != self.feature_dim:
                raise ValueError(
                    f"feature dim mismatch: graph has {g.feature_dim}, dataset declares {self.feature_dim}"
                )

    def __len__(self):
        return len(self.graphs)

    def labels(self):
        return np.array([g.label for g in self.graphs])


@dataclass(frozen=True)
class ScaleBucket:
    name: str
    lo: int
    hi: int | None  # inclusive; None = unbounded

    def contains(self, n):
        return n >= self.lo and (self.hi is None or n <= self.hi)


SCALE_BUCKETS = (
    ScaleBucket("small", 0, 14),
    ScaleBucket("medium", 15, 25),
    ScaleBucket("large", 26, None),
)

BUCKET_NAMES = tuple(b.name for b in SCALE_BUCKETS)


def bucket_name(n):
    for b in SCALE_BUCKETS:
        if b.contains(n):
            return b.name
    raise ValueError(f"node count {n} matched no bucket")


def bucket_by_scale(dataset):
    """Partition graphs into the small/medium/large node-count buckets."""
    out = {b.name: [] for b in SCALE_BUCKETS}
    for g in dataset.graphs:
        out[bucket_name(g.n)].append(g)
    return out


# ---------------------------------------------------------------------------
# TU text format
# ---------------------------------------------------------------------------

def _read_number_lines(path, kind, parse=int):
    values = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                values.append(parse(line))
            except ValueError as exc:
                raise GraphFormatError(f"{path}:{lineno}: bad {kind} value {line!r}") from exc
    return values


def load_tu_dataset(directory_path, dataset_name, max_degree_cap=10,
                    feature_mode="auto", task=TASK_GRAPH_CLASSIFICATION):
    """Parse a dataset in the TU text convention from ``directory_path``.

    Expects ``<name>_A.txt`` (1-indexed "i, j" edge lines),
    ``<name>_graph_indicator.txt`` (graph id per node) and
    ``<name>_graph_labels.txt``; ``<name>_node_labels.txt`` is optional.

    Node features are one-hot node labels when the node-label file exists
    (and ``feature_mode`` is "auto"), otherwise one-hot degree capped at
    ``max_degree_cap`` with an overflow bin. Graph labels are remapped to
    contiguous 0-based classes for classification tasks.
    """
    import os

    prefix = os.path.join(str(directory_path), dataset_name)
    adj_path = prefix + "_A.txt"
    indicator_path = prefix + "_graph_indicator.txt"
    labels_path = prefix + "_graph_labels.txt"
    node_labels_path = prefix + "_node_labels.txt"

    for path in (adj_path, indicator_path, labels_path):
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing required dataset file: {path}")

    node_graph = np.array(_read_number_lines(indicator_path, "graph indicator"), dtype=np.int64)
    if node_graph.size == 0:
        raise GraphFormatError(f"{indicator_path}: no nodes declared")
    num_graphs = int(node_graph.max())
    # local node id = rank of the node within its own graph, in file order
    local_id = np.zeros(node_graph.size, dtype=np.int64)
    counts = np.zeros(num_graphs + 1, dtype=np.int64)
    for i, gid in enumerate(node_graph):
        local_id[i] = counts[gid]
        counts[gid] += 1

    pairs_per_graph = [[] for _ in range(num_graphs + 1)]
    with open(adj_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.replace(" ", "").split(",")
            if len(parts) != 2:
                raise GraphFormatError(f"{adj_path}:{lineno}: expected 'i, j', got {line!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise GraphFormatError(f"{adj_path}:{lineno}: non-integer endpoint in {line!r}") from exc
            if not (1 <= u <= node_graph.size and 1 <= v <= node_graph.size):
                raise GraphFormatError(
                    f"{adj_path}:{lineno}: node id out of range in {line!r}"
                )
            gu, gv = node_graph[u - 1], node_graph[v - 1]
            if gu != gv:
                raise GraphFormatError(
                    f"{adj_path}:{lineno}: edge {u},{v} joins graph {gu} to graph {gv}"
                )
            pairs_per_graph[gu].append((local_id[u - 1], local_id[v - 1]))

    label_parse = int if task in CLASSIFICATION_TASKS else float
    raw_graph_labels = _read_number_lines(labels_path, "graph label", parse=label_parse)
    if len(raw_graph_labels) != num_graphs:
        raise GraphFormatError(
            f"{labels_path}: {len(raw_graph_labels)} labels for {num_graphs} graphs"
        )

    node_labels = None
    if os.path.exists(node_labels_path):
        node_labels = np.array(_read_number_lines(node_labels_path, "node label"), dtype=np.int64)
        if node_labels.size != node_graph.size:
            raise GraphFormatError(
                f"{node_labels_path}: {node_labels.size} labels for {node_graph.size} nodes"
            )

    use_node_label_features = (
        node_labels is not None and feature_mode == "auto" and task != TASK_NODE_CLASSIFICATION
    )
    if use_node_label_features:
        uniq = np.unique(node_labels)
        label_col = {v: i for i, v in enumerate(uniq)}
        feature_dim = len(uniq)
    else:
        feature_dim = max_degree_cap + 1  # overflow bin for degree >= cap

    if task in (TASK_GRAPH_CLASSIFICATION, TASK_NODE_CLASSIFICATION):
        class_of = {v: i for i, v in enumerate(sorted(set(raw_graph_labels)))}
    else:
        class_of = None

    graphs = []
    for gid in range(1, num_graphs + 1):
        n = int(counts[gid])
        mask = node_graph == gid
        pairs = pairs_per_graph[gid]
        g_node_labels = node_labels[mask] if node_labels is not None else None
        label = class_of[raw_graph_labels[gid - 1]] if class_of else float(raw_graph_labels[gid - 1])
        g = Graph(n, pairs, np.zeros((n, 1)), label=label, node_labels=g_node_labels)
        if use_node_label_features:
            x = np.zeros((n, feature_dim))
            for i, lv in enumerate(g_node_labels):
                x[i, label_col[lv]] = 1.0
        else:
            x = np.zeros((n, feature_dim))
            deg = np.minimum(g.degrees(), max_degree_cap)
            x[np.arange(n), deg] = 1.0
        g.x = x
        graphs.append(g)

    if task == TASK_NODE_CLASSIFICATION:
        if node_labels is None:
            raise FileNotFoundError(f"missing required dataset file: {node_labels_path}")
        num_classes = int(np.unique(node_labels).size)
        remap = {v: i for i, v in enumerate(np.unique(node_labels))}
        for g in graphs:
            g.node_labels = np.array([remap[v] for v in g.node_labels], dtype=np.int64)
    elif task == TASK_GRAPH_CLASSIFICATION:
        num_classes = len(class_of)
    else:
        num_classes = None

    return GraphDataset(graphs, feature_dim, task, num_classes, name=dataset_name)


def write_tu_dataset(dataset, directory_path, name):
    """Write a dataset back out in the TU text convention (1-indexed)."""
    import os

    os.makedirs(directory_path, exist_ok=True)
    prefix = os.path.join(str(directory_path), name)
    offset = 0
    adj_lines = []
    indicator_lines = []
    label_lines = []
    node_label_lines = []
    has_node_labels = all(g.node_labels is not None for g in dataset.graphs)
    for gid, g in enumerate(dataset.graphs, start=1):
        for u, v in g.edges:
            adj_lines.append(f"{offset + u + 1}, {offset + v + 1}")
        indicator_lines.extend([str(gid)] * g.n)
        if dataset.task in CLASSIFICATION_TASKS:
            label_lines.append(str(int(g.label) + 1))
        else:
            label_lines.append(str(g.label))
        if has_node_labels:
            node_label_lines.extend(str(int(v)) for v in g.node_labels)
        offset += g.n
    with open(prefix + "_A.txt", "w") as fh:
        fh.write("\n".join(adj_lines) + "\n")
    with open(prefix + "_graph_indicator.txt", "w") as fh:
        fh.write("\n".join(indicator_lines) + "\n")
    with open(prefix + "_graph_labels.txt", "w") as fh:
        fh.write("\n".join(label_lines) + "\n")
    if has_node_labels:
        with open(prefix + "_node_labels.txt", "w") as fh:
            fh.write("\n".join(node_label_lines) + "\n")


def write_dataset_manifest(dataset, path):
    buckets = bucket_by_scale(dataset)
    doc = {
        "name": dataset.name,
        "task": dataset.task,
        "feature_dim": dataset.feature_dim,
        "num_classes": dataset.num_classes,
        "counts": {
            "graphs": len(dataset),
            "by_bucket": {k: len(v) for k, v in buckets.items()},
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return doc


def read_dataset_manifest(path):
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# synthetic depth-sensitive generator
# ---------------------------------------------------------------------------

def _spine_tree_pairs(n, rng, stick=0.7):
    # random tree biased toward a long spine, so large trees have large diameter
    return [(i - 1 if rng.random() < stick else int(rng.integers(0, i)), i)
            for i in range(1, n)]


def _path_pairs(n):
    return [(i, i + 1) for i in range(n - 1)]


def _cycle_pairs(n):
    return [(i, (i + 1) % n) for i in range(n)]


def _random_structure(n, rng):
    draw = rng.random()
    if draw < 0.35:
        return _cycle_pairs(n)
    if draw < 0.60:
        return _path_pairs(n)
    return _spine_tree_pairs(n, rng)


def _radius_for_size(n, max_hops):
    # larger graphs get a larger marker radius, hence need deeper aggregation
    if n < 15:
        return 1
    if n <= 25:
        return min(3, max_hops)
    return min(5, max_hops)


def _pick_marker_pair(g, radius, want_positive, rng, attempts=40):
    """Find a marker pair at distance <= radius (positive) or beyond it.

    Positive distances are drawn from the odd values up to the radius, so
    shallow receptive fields earn partial credit while only the matched
    depth resolves every positive. Negatives are pushed beyond twice the
    depth a matched model needs (ceil(radius/2)), where no node of a
    matched-depth network sees both markers.
    """
    depth_needed = (radius + 1) // 2
    far = 2 * depth_needed + 1
    target = int(rng.choice(np.arange(1, radius + 1, 2))) if want_positive else 0
    for attempt in range(attempts):
        u = int(rng.integers(0, g.n))
        dist = g.bfs_distances(u)
        phase = attempt * 3 // attempts
        if want_positive:
            if phase == 0:
                ok = dist == target
            else:
                ok = (dist >= 1) & (dist <= radius)
        else:
            if phase == 0:
                ok = (dist >= far) & (dist <= far + 1)
            elif phase == 1:
                ok = dist >= far
            else:
                ok = dist > radius
        candidates = np.flatnonzero(ok)
        if candidates.size:
            return u, int(candidates[rng.integers(0, candidates.size)])
    return None


def generate_depth_sensitive_dataset(count, seed, d_feature=3, max_hops=5):
    """Emit random trees/cycles whose label needs scale-dependent depth.

    Each graph carries exactly two marker nodes, on distinguishable marker
    channels; the label is 1 iff their shortest-path distance is at most a
    per-graph radius that grows with the graph size. Negative pairs are kept
    far apart, so resolving the label requires a receptive field that scales
    with the graph, by construction.
    """
    if count <= 0:
        raise ValueError(f"count must be positive, got {count}")
    if max_hops < 2:
        raise ValueError(f"max_hops must be >= 2, got {max_hops}")
    if d_feature < 3:
        raise ValueError(f"d_feature must be >= 3, got {d_feature}")

    rng = np.random.default_rng(seed)
    # sizes drawn from [6, 40], concentrated well inside each scale bucket so
    # bucket membership is unambiguous for both the gate and the analysis
    size_bands = ((6, 12), (18, 24), (32, 40))
    graphs = []
    while len(graphs) < count:
        want_positive = bool(rng.integers(0, 2))
        placed = None
        for _ in range(20):
            lo, hi = size_bands[int(rng.integers(0, len(size_bands)))]
            n = int(rng.integers(lo, hi + 1))
            radius = _radius_for_size(n, max_hops)
            g = Graph(n, _random_structure(n, rng), np.zeros((n, d_feature)))
            placed = _pick_marker_pair(g, radius, want_positive, rng)
            if placed is not None:
                break
        if placed is None:
            # structure cannot host the requested class at this radius; flip
            want_positive = not want_positive
            placed = _pick_marker_pair(g, radius, want_positive, rng)
            if placed is None:
                continue
        u, v = placed
        dist = int(g.bfs_distances(u)[v])
        x = np.zeros((n, d_feature))
        x[:, 0] = 1.0
        for channel, m in enumerate((u, v), start=1):
            x[m, 0] = 0.0
            x[m, channel] = 1.0
        g.x = x
        g.label = int(dist <= radius)
        g.node_labels = np.argmax(x[:, :3], axis=1)  # 0 plain, 1/2 markers
        g.meta = {"radius": radius, "markers": (u, v), "marker_distance": dist}
        graphs.append(g)

    return GraphDataset(graphs, d_feature, TASK_GRAPH_CLASSIFICATION, num_classes=2,
                        name="synthetic-depth")


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def _largest_remainder_counts(sizes, fraction, total_target):
    exact = [s * fraction for s in sizes]
    base = [int(np.floor(e)) for e in exact]
    leftover = total_target - sum(base)
    order = sorted(range(len(sizes)), key=lambda i: (-(exact[i] - base[i]), i))
    out = list(base)
    for i in order[:max(leftover, 0)]:
        out[i] += 1
    return out


def split_dataset(dataset, train_fraction, seed):
    """Seeded disjoint train/test split, stratified by class where possible."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    n = len(dataset)
    n_train = int(np.floor(n * train_fraction + 0.5))
    n_train = min(max(n_train, 1), n - 1)

    stratify = dataset.task == TASK_GRAPH_CLASSIFICATION
    if stratify:
        by_class = {}
        for i, g in enumerate(dataset.graphs):
            by_class.setdefault(g.label, []).append(i)
        if any(len(v) < 2 for v in by_class.values()):
            warnings.warn("a class has fewer than 2 graphs; falling back to unstratified split")
            stratify = False

    if stratify:
        classes = sorted(by_class)
        takes = _largest_remainder_counts([len(by_class[c]) for c in classes],
                                          train_fraction, n_train)
        train_idx, test_idx = [], []
        for c, t in zip(classes, takes):
            perm = rng.permutation(by_class[c])
            train_idx.extend(perm[:t])
            test_idx.extend(perm[t:])
    else:
        perm = rng.permutation(n)
        train_idx, test_idx = perm[:n_train], perm[n_train:]

    def subset(idx):
        return GraphDataset([dataset.graphs[i] for i in sorted(idx)], dataset.feature_dim,
                            dataset.task, dataset.num_classes, name=dataset.name)

    return subset(train_idx), subset(test_idx)


# ---------------------------------------------------------------------------
# normalized adjacency and link-prediction derivation
# ---------------------------------------------------------------------------

def normalized_adjacency(g):
    """Symmetrically normalized adjacency with self-loops (dense n×n)."""
    if g._adj_hat is None:
        a = g.adjacency_matrix()
        np.fill_diagonal(a, a.diagonal() + 1.0)
        inv_sqrt = 1.0 / np.sqrt(a.sum(axis=1))
        g._adj_hat = a * inv_sqrt[:, None] * inv_sqrt[None, :]
    return g._adj_hat


@dataclass
class LinkSplit:
    train_graph: Graph
    test_pos: np.ndarray  # m×2 hidden true edges
    test_neg: np.ndarray  # m×2 sampled non-edges
    meta: dict = field(default_factory=dict)


def sample_non_edges(g, count, rng, forbidden=None):
    """Sample ``count`` distinct (u, v) u<v pairs absent from the graph."""
    edge_set = {(int(u), int(v)) for u, v in g.undirected_pairs()}
    if forbidden is not None and len(forbidden):
        edge_set |= {(min(a, b), max(a, b)) for a, b in forbidden}
    max_pairs = g.n * (g.n - 1) // 2
    if max_pairs - len(edge_set) < count:
        raise ValueError(f"cannot sample {count} non-edges from graph with {g.n} nodes")
    out = set()
    while len(out) < count:
        u = int(rng.integers(0, g.n))
        v = int(rng.integers(0, g.n))
        if u == v:
            continue
        pair = (min(u, v), max(u, v))
        if pair not in edge_set and pair not in out:
            out.add(pair)
    return np.array(sorted(out), dtype=np.int64)


def derive_link_prediction_split(g, seed, test_fraction=0.1):
    """Hide a seeded fraction of edges as positives; sample matched non-edges."""
    rng = np.random.default_rng(seed)
    pairs = g.undirected_pairs()
    m = pairs.shape[0]
    n_test = max(1, int(round(m * test_fraction)))
    perm = rng.permutation(m)
    test_pos = pairs[np.sort(perm[:n_test])]
    train_pairs = pairs[np.sort(perm[n_test:])]
    test_neg = sample_non_edges(g, n_test, rng)
    train_graph = Graph(g.n, train_pairs, g.x, label=g.label, node_labels=g.node_labels)
    return LinkSplit(train_graph, test_pos, test_neg,
                     meta={"hidden_fraction": test_fraction, "seed": seed})
