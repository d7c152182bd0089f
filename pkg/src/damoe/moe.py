"""Depth-adaptive mixture of experts: structure-aware noisy top-k gating
over GNN experts of increasing depth, and the sparse weighted mixture.

The gate scores each expert from a neighbor-aggregated view of the node
features; during training, Gaussian noise scaled by the softplus of the
clean scores keeps expert selection exploratory. Only the top-k experts
per input are evaluated and mixed.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, ndtr

from . import autodiff as ad
from . import layers as gl

_SQRT_2PI = np.sqrt(2.0 * np.pi)
_MIN_NOISE_STD = 1e-12  # numerical floor; softplus underflows only for scores < -700


class GatingNetwork:
    """Scores experts per node and selects the top-k per input.

    ``mode`` is "structure" (neighbor sum plus a learnable self weight
    feeds the scorer) or "linear" (the scorer sees raw node features only).
    """

    def __init__(self, d_in, num_experts, top_k, rng, hidden=32,
                 noise_enabled=True, mode="structure"):
        if not 1 <= top_k <= num_experts:
            raise ValueError(f"top_k must be in [1, {num_experts}], got {top_k}")
        if mode not in ("structure", "linear"):
            raise ValueError(f"unknown gating mode {mode!r}")
        self.num_experts = num_experts
        self.top_k = top_k
        self.noise_enabled = noise_enabled
        self.mode = mode
        self.hidden = hidden
        self.self_weight = ad.parameter(np.zeros((1, 1)))  # the learnable self-feature scale
        self.w1 = ad.parameter(gl.glorot(rng, d_in, hidden))
        self.b1 = ad.parameter(np.zeros((1, hidden)))
        # zero-init final layer: every expert starts at score 0, so early
        # selection is noise-driven and uniform, which averts the cold-start
        # collapse where unselected experts never receive gradient
        self.w2 = ad.parameter(np.zeros((hidden, num_experts)))
        self.b2 = ad.parameter(np.zeros((1, num_experts)))

    def parameters(self):
        named = [("self_weight", self.self_weight), ("fc1.weight", self.w1),
                 ("fc1.bias", self.b1), ("fc2.weight", self.w2), ("fc2.bias", self.b2)]
        if self.mode == "linear":
            named = named[1:]  # self weight unused; keep it out of optimization
        return named


@dataclass
class GatingOutput:
    """Everything one gating pass produced, per input row."""

    clean_scores: ad.TensorNode   # rows × s
    noisy_scores: ad.TensorNode   # rows × s; == clean_scores when noise is off
    selected: np.ndarray          # rows × k expert indices, ascending
    weights: ad.TensorNode        # rows × s, masked softmax over selected
    select_probs: ad.TensorNode   # rows × s, probability each expert is selected
    noise_draws: np.ndarray | None


def top_k_indices(values, k):
    """Indices of the k largest entries per row; ties keep the lowest index."""
    v = np.atleast_2d(values)
    order = np.argsort(-v, axis=1, kind="stable")
    return np.sort(order[:, :k], axis=1)


def compute_load_probability(clean_scores, noisy_scores, k):
    """Per-expert probability of entering the top-k under a noise redraw.

    For each row and expert i, the threshold is the k-th largest noisy score
    among the *other* experts; the probability that expert i clears it when
    its own noise term is redrawn is the Gaussian CDF of
    (clean_i - threshold_i) / softplus(clean_i). When k exceeds the number
    of other experts the threshold does not exist and the probability is 1.

    Differentiable with respect to both score matrices.
    """
    t = ad._coerce(clean_scores)
    u = ad._coerce(noisy_scores)
    if t.data.shape != u.data.shape:
        raise ValueError(f"score shapes differ: {t.data.shape} vs {u.data.shape}")
    rows, s = t.data.shape
    if s < 1 or k < 1:
        raise ValueError(f"need s >= 1 and k >= 1, got s={s}, k={k}")

    if k > s - 1:
        out_data = np.ones((rows, s))

        def backward_fn(g):  # constant output, nothing flows
            return None

        return ad._record(out_data, backward_fn, t, u)

    order = np.argsort(-u.data, axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(s)[None, :].repeat(rows, axis=0), axis=1)
    # threshold index: k-th largest of the row once expert i is excluded
    thresh_idx = np.where(rank < k, order[:, k][:, None], order[:, k - 1][:, None])
    tau = np.take_along_axis(u.data, thresh_idx, axis=1)

    std = np.maximum(ad.softplus_values(t.data), _MIN_NOISE_STD)
    a = (t.data - tau) / std
    out_data = ndtr(a)

    def backward_fn(g):
        pdf = np.exp(-0.5 * a * a) / _SQRT_2PI
        common = g * pdf
        if t.requires_grad:
            dstd = expit(t.data)  # derivative of softplus
            da_dt = (std - (t.data - tau) * dstd) / (std * std)
            t.accumulate_grad(common * da_dt)
        if u.requires_grad:
            du = np.zeros_like(u.data)
            np.add.at(du, (np.arange(rows)[:, None].repeat(s, axis=1).ravel(),
                           thresh_idx.ravel()), (-common / std).ravel())
            u.accumulate_grad(du)

    return ad._record(out_data, backward_fn, t, u)


def gating_scores(gate, g, level, rng, training=True):
    """Run the gate on one graph; returns scores, selection, and weights.

    ``level`` is "graph" (scores pooled to one row by node mean) or "node"
    (one row per node). Noise is drawn only when ``training`` and the gate
    has noise enabled; the draws are recorded for reproducibility.
    """
    if level not in ("graph", "node"):
        raise ValueError(f"unknown gating level {level!r}")
    x = ad.constant(g.x)
    if gate.mode == "structure":
        scaled_self = ad.mul(ad.add(gate.self_weight, 1.0), x)
        pre = ad.add(scaled_self, gl.neighbor_sum(x, g))
    else:
        pre = x
    hidden = ad.relu(ad.add(ad.matmul(pre, gate.w1), gate.b1))
    per_node = ad.add(ad.matmul(hidden, gate.w2), gate.b2)

    clean = ad.mean_pool_rows(per_node) if level == "graph" else per_node

    noise_draws = None
    if gate.noise_enabled and training:
        noise_draws = rng.standard_normal(clean.data.shape)
        noisy = ad.add(clean, ad.mul(ad.constant(noise_draws), ad.softplus(clean)))
    else:
        noisy = clean

    selected = top_k_indices(noisy.data, gate.top_k)
    mask = np.zeros(noisy.data.shape, dtype=bool)
    np.put_along_axis(mask, selected, True, axis=1)
    weights = ad.masked_softmax(noisy, mask)
    select_probs = compute_load_probability(clean, noisy, gate.top_k)
    return GatingOutput(clean, noisy, selected, weights, select_probs, noise_draws)


@dataclass
class MixtureResult:
    output: ad.TensorNode
    gating: GatingOutput
    executed_experts: list


class DaMoeBlock:
    """A gate plus experts of depths 1..s sharing input/output width."""

    def __init__(self, backbone, num_experts, top_k, d_in, hidden, readout, rng,
                 noise_enabled=True, gating_mode="structure", gate_hidden=32):
        self.gate = GatingNetwork(d_in, num_experts, top_k, rng, hidden=gate_hidden,
                                  noise_enabled=noise_enabled, mode=gating_mode)
        self.experts = [gl.ExpertGnn(backbone, depth, d_in, hidden, readout, rng)
                        for depth in range(1, num_experts + 1)]
        self.hidden = hidden

    def parameters(self):
        named = [(f"gate.{n}", p) for n, p in self.gate.parameters()]
        for i, expert in enumerate(self.experts):
            named.extend((f"expert{i}.{n}", p) for n, p in expert.parameters())
        return named


def mixture_forward(block, g, level, rng, training=True):
    """Weighted sum of the selected experts' outputs for one graph.

    Only experts that some row selected are evaluated. Graph level yields a
    1×d embedding; node level an n×d matrix with per-node selections.
    """
    gating = gating_scores(block.gate, g, level, rng, training=training)
    executed = sorted({int(i) for i in gating.selected.ravel()})
    mixed = None
    for i in executed:
        if level == "graph":
            expert_out = gl.expert_forward_graph(block.experts[i], g)
        else:
            expert_out = gl.expert_forward_node(block.experts[i], g)
        term = ad.mul(ad.take_column(gating.weights, i), expert_out)
        mixed = term if mixed is None else ad.add(mixed, term)
    return MixtureResult(mixed, gating, executed)
