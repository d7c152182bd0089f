"""GCN and GIN message-passing layers and depth-L expert networks."""

import numpy as np

from . import autodiff as ad
from .graphs import normalized_adjacency


def glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class GcnLayer:
    """Symmetric-normalized graph convolution: relu(Â H W + b)."""

    def __init__(self, d_in, d_out, rng):
        self.d_in = d_in
        self.d_out = d_out
        self.weight = ad.parameter(glorot(rng, d_in, d_out))
        self.bias = ad.parameter(np.zeros((1, d_out)))

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


class GinLayer:
    """Sum-aggregation layer: mlp((1 + eps) · H_v + Σ_{u∈N(v)} H_u)."""

    def __init__(self, d_in, d_out, rng):
        self.d_in = d_in
        self.d_out = d_out
        self.eps = ad.parameter(np.zeros((1, 1)))
        self.w1 = ad.parameter(glorot(rng, d_in, d_out))
        self.b1 = ad.parameter(np.zeros((1, d_out)))
        self.w2 = ad.parameter(glorot(rng, d_out, d_out))
        self.b2 = ad.parameter(np.zeros((1, d_out)))

    def parameters(self):
        return [("eps", self.eps), ("mlp1.weight", self.w1), ("mlp1.bias", self.b1),
                ("mlp2.weight", self.w2), ("mlp2.bias", self.b2)]


def neighbor_sum(h, g):
    """Per-node sum of neighbor rows of ``h`` along the graph's edges."""
    if g.edges.size == 0:
        return ad.constant(np.zeros(h.data.shape))
    msgs = ad.gather_rows(h, g.edges[:, 0])
    return ad.scatter_add_rows(msgs, g.edges[:, 1], g.n)


def gcn_forward(layer, h, adj_hat):
    if h.data.shape[1] != layer.d_in:
        raise ValueError(f"gcn layer expects {layer.d_in} input features, got {h.data.shape}")
    propagated = ad.matmul(ad.constant(adj_hat), h)
    return ad.relu(ad.add(ad.matmul(propagated, layer.weight), layer.bias))


def gin_forward(layer, h, g):
    if h.data.shape[1] != layer.d_in:
        raise ValueError(f"gin layer expects {layer.d_in} input features, got {h.data.shape}")
    scaled_self = ad.mul(ad.add(layer.eps, 1.0), h)
    pre = ad.add(scaled_self, neighbor_sum(h, g))
    hidden = ad.relu(ad.add(ad.matmul(pre, layer.w1), layer.b1))
    return ad.add(ad.matmul(hidden, layer.w2), layer.b2)


class ExpertGnn:
    """An independently parameterized GNN of fixed depth with a readout.

    All layers are homogeneous (all-GCN or all-GIN); the first maps the
    input features to the hidden width, the rest are hidden-to-hidden.
    """

    def __init__(self, backbone, depth, d_in, hidden, readout, rng):
        if depth < 1:
            raise ValueError(f"expert depth must be >= 1, got {depth}")
        if backbone not in ("gcn", "gin"):
            raise ValueError(f"unknown backbone {backbone!r}")
        if readout not in ("mean", "sum"):
            raise ValueError(f"unknown readout {readout!r}")
        self.backbone = backbone
        self.depth = depth
        self.readout = readout
        cls = GcnLayer if backbone == "gcn" else GinLayer
        dims = [d_in] + [hidden] * depth
        self.layers = [cls(dims[i], dims[i + 1], rng) for i in range(depth)]

    def parameters(self):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend((f"layer{i}.{name}", node) for name, node in layer.parameters())
        return out

    def num_parameters(self):
        return sum(node.data.size for _, node in self.parameters())


def _expert_node_embeddings(expert, g):
    h = ad.constant(g.x)
    adj_hat = normalized_adjacency(g) if expert.backbone == "gcn" else None
    for layer in expert.layers:
        if expert.backbone == "gcn":
            h = gcn_forward(layer, h, adj_hat)
        else:
            h = gin_forward(layer, h, g)
    return h


def expert_forward_node(expert, g):
    """Per-node embeddings after the expert's final layer (no readout)."""
    return _expert_node_embeddings(expert, g)


def expert_forward_graph(expert, g):
    """Whole-graph embedding: readout over the final layer's node rows."""
    h = _expert_node_embeddings(expert, g)
    return ad.mean_pool_rows(h) if expert.readout == "mean" else ad.sum_pool_rows(h)
