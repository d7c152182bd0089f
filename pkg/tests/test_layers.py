import numpy as np
import pytest

from damoe import autodiff as ad
from damoe import layers as gl
from damoe.graphs import Graph, normalized_adjacency
from damoe.moe import DaMoeBlock

from conftest import check_gradients


def path_graph(n, d=3, rng=None):
    x = rng.uniform(-2, 2, (n, d)) if rng is not None else np.zeros((n, d))
    return Graph(n, [(i, i + 1) for i in range(n - 1)], x)


def random_graph(n, d, rng, p=0.3):
    pairs = [(u, v) for u in range(n) for v in range(u + 1, n) if rng.random() < p]
    return Graph(n, pairs, rng.uniform(-2, 2, (n, d)))


# ---------------------------------------------------------------------------
# GCN layer
# ---------------------------------------------------------------------------

def test_gcn_isolated_node_identity_weight(rng):
    g = Graph(1, [], rng.uniform(-2, 2, (1, 3)))
    layer = gl.GcnLayer(3, 3, rng)
    layer.weight.data = np.eye(3)
    layer.bias.data = np.zeros((1, 3))
    out = gl.gcn_forward(layer, ad.constant(g.x), normalized_adjacency(g))
    np.testing.assert_array_equal(out.data, np.maximum(g.x, 0.0))


def test_gcn_zero_features_broadcast_bias(rng):
    g = path_graph(4)
    layer = gl.GcnLayer(3, 2, rng)
    layer.bias.data = np.array([[0.5, -0.5]])
    out = gl.gcn_forward(layer, ad.constant(g.x), normalized_adjacency(g))
    np.testing.assert_array_equal(out.data, np.tile([0.5, 0.0], (4, 1)))


def test_gcn_shape_error():
    rng = np.random.default_rng(0)
    layer = gl.GcnLayer(3, 2, rng)
    with pytest.raises(ValueError, match="3"):
        gl.gcn_forward(layer, ad.constant(np.zeros((2, 5))), np.eye(2))


def test_gcn_gradient_on_random_graph(rng):
    g = random_graph(5, 3, rng)
    layer = gl.GcnLayer(3, 4, rng)
    adj = normalized_adjacency(g)
    w = rng.uniform(-1, 1, (5, 4))

    def loss():
        return ad.sum_all(ad.mul(gl.gcn_forward(layer, ad.constant(g.x), adj),
                                 ad.constant(w)))

    check_gradients(loss, [layer.weight, layer.bias])


# ---------------------------------------------------------------------------
# GIN layer
# ---------------------------------------------------------------------------

def test_gin_no_edges_is_rowwise_mlp(rng):
    g = Graph(3, [], rng.uniform(-2, 2, (3, 2)))
    layer = gl.GinLayer(2, 4, rng)
    out = gl.gin_forward(layer, ad.constant(g.x), g)
    expected = np.maximum(g.x @ layer.w1.data + layer.b1.data, 0) @ layer.w2.data + layer.b2.data
    np.testing.assert_allclose(out.data, expected, atol=1e-14)


def test_gin_triangle_symmetry(rng):
    h = rng.uniform(-2, 2, (1, 3))
    g = Graph(3, [(0, 1), (1, 2), (0, 2)], np.tile(h, (3, 1)))
    layer = gl.GinLayer(3, 4, rng)
    out = gl.gin_forward(layer, ad.constant(g.x), g)
    np.testing.assert_allclose(out.data[0], out.data[1], atol=1e-12)
    np.testing.assert_allclose(out.data[0], out.data[2], atol=1e-12)


def test_gin_gradient_including_eps(rng):
    g = random_graph(5, 3, rng)
    layer = gl.GinLayer(3, 4, rng)
    layer.eps.data = np.array([[0.3]])
    w = rng.uniform(-1, 1, (5, 4))

    def loss():
        return ad.sum_all(ad.mul(gl.gin_forward(layer, ad.constant(g.x), g),
                                 ad.constant(w)))

    params = [node for _, node in layer.parameters()]
    check_gradients(loss, params)


# ---------------------------------------------------------------------------
# experts
# ---------------------------------------------------------------------------

def test_expert_depth1_single_node_mean_readout(rng):
    g = Graph(1, [], rng.uniform(-2, 2, (1, 3)))
    expert = gl.ExpertGnn("gcn", 1, 3, 4, "mean", rng)
    node_out = gl.expert_forward_node(expert, g)
    graph_out = gl.expert_forward_graph(expert, g)
    np.testing.assert_array_equal(graph_out.data, node_out.data)


def test_sum_vs_mean_readout_factor_two(rng):
    g = Graph(2, [(0, 1)], rng.uniform(-2, 2, (2, 3)))
    mean_expert = gl.ExpertGnn("gcn", 2, 3, 4, "mean", rng)
    sum_expert = gl.ExpertGnn("gcn", 2, 3, 4, "sum", rng)
    for src, dst in zip(mean_expert.parameters(), sum_expert.parameters()):
        dst[1].data = src[1].data.copy()
    mean_out = gl.expert_forward_graph(mean_expert, g)
    sum_out = gl.expert_forward_graph(sum_expert, g)
    np.testing.assert_array_equal(sum_out.data, 2.0 * mean_out.data)


def test_expert_node_output_row_count(rng):
    for backbone in ("gcn", "gin"):
        for _ in range(5):
            n = int(rng.integers(2, 15))
            g = random_graph(n, 3, rng)
            expert = gl.ExpertGnn(backbone, 2, 3, 4, "mean", rng)
            assert gl.expert_forward_node(expert, g).data.shape == (n, 4)


def test_node_embeddings_shared_with_graph_readout(rng):
    g = random_graph(6, 3, rng)
    expert = gl.ExpertGnn("gin", 3, 3, 4, "sum", rng)
    node_out = gl.expert_forward_node(expert, g).data
    graph_out = gl.expert_forward_graph(expert, g).data
    np.testing.assert_array_equal(graph_out, node_out.sum(axis=0, keepdims=True))


@pytest.mark.parametrize("backbone", ["gcn", "gin"])
def test_receptive_field_locality_is_exact(backbone, rng):
    """Perturbing a node beyond depth hops leaves a row bitwise unchanged."""
    n, depth = 9, 2
    g = path_graph(n, d=3, rng=rng)
    expert = gl.ExpertGnn(backbone, depth, 3, 4, "mean", rng)
    for name, p in expert.parameters():
        if name.endswith("bias") or name.endswith("b1"):
            p.data += 0.3  # keep relu units alive so the control case reacts
    with ad.no_grad():
        base = gl.expert_forward_node(expert, g).data.copy()
        g2 = Graph(g.n, g.undirected_pairs(), g.x.copy())
        g2.x[depth + 1:, :] += rng.uniform(0.5, 1.5, (n - depth - 1, 3))
        perturbed = gl.expert_forward_node(expert, g2).data
    assert np.array_equal(base[0], perturbed[0])  # exact, tolerance 0
    assert not np.array_equal(base, perturbed)  # the perturbation does matter


@pytest.mark.parametrize("backbone", ["gcn", "gin"])
def test_permutation_equivariance(backbone, rng):
    for _ in range(5):
        n = int(rng.integers(3, 12))
        g = random_graph(n, 3, rng)
        perm = rng.permutation(n)
        g_perm = Graph(n, [(perm[u], perm[v]) for u, v in g.undirected_pairs()],
                       g.x[np.argsort(perm)])
        expert = gl.ExpertGnn(backbone, 2, 3, 4, "mean", rng)
        with ad.no_grad():
            out = gl.expert_forward_node(expert, g).data
            out_perm = gl.expert_forward_node(expert, g_perm).data
            graph_out = gl.expert_forward_graph(expert, g).data
            graph_out_perm = gl.expert_forward_graph(expert, g_perm).data
        np.testing.assert_allclose(out_perm[perm], out, atol=1e-9)
        np.testing.assert_allclose(graph_out_perm, graph_out, atol=1e-9)


def test_parameter_count_law(rng):
    block = DaMoeBlock("gcn", 4, 2, d_in=3, hidden=8, readout="mean", rng=rng)
    expert_total = sum(e.num_parameters() for e in block.experts)
    gate_total = sum(p.data.size for _, p in block.gate.parameters())
    block_total = sum(p.data.size for _, p in block.parameters())
    assert block_total == expert_total + gate_total
    # depth-i expert has exactly i layers, no parameter aliasing anywhere
    assert [e.depth for e in block.experts] == [1, 2, 3, 4]
    ids = [id(p) for _, p in block.parameters()]
    assert len(ids) == len(set(ids))


def test_expert_rejects_bad_config(rng):
    with pytest.raises(ValueError):
        gl.ExpertGnn("gcn", 0, 3, 4, "mean", rng)
    with pytest.raises(ValueError):
        gl.ExpertGnn("sage", 1, 3, 4, "mean", rng)
    with pytest.raises(ValueError):
        gl.ExpertGnn("gcn", 1, 3, 4, "max", rng)
