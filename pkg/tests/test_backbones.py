"""Encoder templates, forward recipes, and shared GNN invariants."""

import numpy as np
import pytest

from ugn import autodiff as ad
from ugn.autodiff import Tensor, gradient_check
from ugn.backbones import (
    BackboneKind,
    EncoderConfig,
    EncoderWorkspace,
    attention_weights,
    encode,
    init_params,
)
from ugn.graph import build_graph, normalize

ALL_KINDS = list(BackboneKind)


def tensorize(arrays):
    return {name: Tensor(a) for name, a in arrays.items()}


def random_graph(n, dim, seed, edge_prob=0.25):
    rng = np.random.default_rng(seed)
    pairs = [(u, v) for u in range(n) for v in range(u + 1, n) if rng.random() < edge_prob]
    return build_graph(n, pairs, rng.standard_normal((n, dim)),
                       rng.integers(0, 3, n), 3)


# ---------------------------------------------------------------------------
# parameter templates
# ---------------------------------------------------------------------------

def test_gcn_template_shapes_at_high_dimension():
    params = init_params(BackboneKind.GCN, 9034, EncoderConfig(), seed=0)
    assert params["enc.l1.weight"].shape == (9034, 16)
    assert params["enc.l1.bias"].shape == (1, 16)
    assert params["enc.l2.weight"].shape == (16, 16)
    assert params["enc.l2.bias"].shape == (1, 16)


def test_sgc_template_is_one_linear_map():
    params = init_params(BackboneKind.SGC, 300, EncoderConfig(), seed=0)
    weights = [k for k in params if k.endswith(".weight")]
    assert weights == ["enc.lin.weight"]
    assert params["enc.lin.weight"].shape == (300, 16)


def test_init_is_deterministic_per_seed():
    a = init_params(BackboneKind.GAT1, 12, EncoderConfig(), seed=5)
    b = init_params(BackboneKind.GAT1, 12, EncoderConfig(), seed=5)
    c = init_params(BackboneKind.GAT1, 12, EncoderConfig(), seed=6)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_glorot_bound_is_respected():
    params = init_params(BackboneKind.GCN, 48, EncoderConfig(hidden_dim=16), seed=1)
    w = params["enc.l1.weight"]
    bound = np.sqrt(6.0 / (48 + 16))
    assert np.abs(w).max() <= bound
    assert np.abs(w).max() > 0.5 * bound  # actually fills the range
    assert np.all(params["enc.l1.bias"] == 0.0)


def test_parse_accepts_cli_spellings():
    assert BackboneKind.parse("sage") is BackboneKind.SAGE_MEAN
    assert BackboneKind.parse("GAT") is BackboneKind.GAT1
    with pytest.raises(ValueError, match="unknown backbone"):
        BackboneKind.parse("transformer")


# ---------------------------------------------------------------------------
# forward recipes
# ---------------------------------------------------------------------------

def test_gcn_single_node_first_layer_is_relu_of_weights():
    graph = build_graph(1, [], [[1.0]], [0], 1)
    cfg = EncoderConfig(hidden_dim=4, out_dim=4)
    arrays = init_params(BackboneKind.GCN, 1, cfg, seed=2)
    # isolated node: symmetric normalization is the 1x1 identity, so the
    # full forward is relu(x W1 + b1) W2 + b2 with x = [[1]]
    out = encode(BackboneKind.GCN, graph, tensorize(arrays), cfg).values
    h1 = np.maximum(arrays["enc.l1.weight"][0] + arrays["enc.l1.bias"][0], 0.0)
    expected = h1 @ arrays["enc.l2.weight"] + arrays["enc.l2.bias"]
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_sgc_with_identity_features_reads_off_squared_adjacency():
    graph = build_graph(2, [(0, 1)], np.eye(2), [0, 1], 2)
    cfg = EncoderConfig(out_dim=2)
    params = {"enc.lin.weight": Tensor(np.eye(2)), "enc.lin.bias": Tensor(np.zeros((1, 2)))}
    out = encode(BackboneKind.SGC, graph, params, cfg).values
    a_hat = normalize(graph, "symmetric").to_dense()
    np.testing.assert_allclose(out, a_hat @ a_hat, atol=1e-12)


def test_appnp_with_full_teleport_ignores_topology():
    graph = random_graph(10, 5, seed=3)
    cfg = EncoderConfig(hidden_dim=6, out_dim=4, appnp_teleport=1.0)
    arrays = init_params(BackboneKind.APPNP, 5, cfg, seed=4)
    out = encode(BackboneKind.APPNP, graph, tensorize(arrays), cfg).values
    hidden = np.maximum(graph.features @ arrays["enc.mlp1.weight"] + arrays["enc.mlp1.bias"], 0.0)
    z0 = hidden @ arrays["enc.mlp2.weight"] + arrays["enc.mlp2.bias"]
    np.testing.assert_allclose(out, z0, atol=1e-12)


def test_every_kind_produces_out_dim_embeddings():
    graph = random_graph(14, 6, seed=5)
    cfg = EncoderConfig(hidden_dim=8, out_dim=12)
    for kind in ALL_KINDS:
        arrays = init_params(kind, 6, cfg, seed=6)
        out = encode(kind, graph, tensorize(arrays), cfg)
        assert out.shape == (14, 12), kind
        assert np.isfinite(out.values).all()


def test_gat_attention_rows_sum_to_one_over_neighborhood():
    graph = random_graph(12, 5, seed=7)
    ws = EncoderWorkspace(graph)
    mask = ws.attention_mask()
    rng = np.random.default_rng(8)
    hw = Tensor(rng.standard_normal((12, 6)))
    att = attention_weights(hw, Tensor(rng.standard_normal((6, 1))),
                            Tensor(rng.standard_normal((6, 1))), mask, 0.2).values
    np.testing.assert_allclose(att.sum(axis=1), np.ones(12), atol=1e-12)
    # weight only on neighbors-plus-self
    allowed = mask == 0.0
    assert np.all(att[~allowed] == 0.0)
    assert np.all(att[np.diag_indices(12)] > 0.0)


# ---------------------------------------------------------------------------
# invariants
# ---------------------------------------------------------------------------

def permute_graph(graph, perm):
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    edges = graph.edge_list()
    return build_graph(
        graph.num_nodes,
        np.column_stack([perm[edges[:, 0]], perm[edges[:, 1]]]),
        graph.features[inv],
        graph.labels[inv],
        graph.num_classes,
    )


@pytest.mark.parametrize("kind", ALL_KINDS, ids=lambda k: k.value)
def test_permutation_equivariance(kind):
    graph = random_graph(12, 5, seed=9)
    cfg = EncoderConfig(hidden_dim=6, out_dim=6)
    arrays = init_params(kind, 5, cfg, seed=10)
    rng = np.random.default_rng(11)
    perm = rng.permutation(12)
    out = encode(kind, graph, tensorize(arrays), cfg).values
    out_perm = encode(kind, permute_graph(graph, perm), tensorize(arrays), cfg).values
    np.testing.assert_allclose(out_perm[perm], out, atol=1e-9)


@pytest.mark.parametrize("kind", [k for k in ALL_KINDS if k is not BackboneKind.APPNP],
                         ids=lambda k: k.value)
def test_two_layer_locality(kind):
    # path 0-1-2-3-4-5-6-7: an edge added between nodes 5 and 7 sits outside
    # the 2-hop neighborhood of nodes 0 and 1 (degree changes included)
    dim = 4
    rng = np.random.default_rng(12)
    feats = rng.standard_normal((8, dim))
    path = [(i, i + 1) for i in range(7)]
    before = build_graph(8, path, feats, np.zeros(8, dtype=int), 1)
    after = build_graph(8, path + [(5, 7)], feats, np.zeros(8, dtype=int), 1)
    cfg = EncoderConfig(hidden_dim=5, out_dim=3)
    arrays = tensorize(init_params(kind, dim, cfg, seed=13))
    emb_before = encode(kind, before, arrays, cfg).values
    emb_after = encode(kind, after, arrays, cfg).values
    np.testing.assert_allclose(emb_after[:2], emb_before[:2], atol=1e-12)
    # and the far end did change
    assert np.abs(emb_after[5:] - emb_before[5:]).max() > 1e-9


@pytest.mark.parametrize("kind", ALL_KINDS, ids=lambda k: k.value)
def test_encode_gradients_match_finite_differences(kind):
    graph = random_graph(9, 4, seed=14, edge_prob=0.35)
    cfg = EncoderConfig(hidden_dim=3, out_dim=3, appnp_iterations=4)
    arrays = init_params(kind, 4, cfg, seed=15)
    names = sorted(arrays)
    weights = np.random.default_rng(16).standard_normal((9, 3))
    ws = EncoderWorkspace(graph)

    def f(*tensors):
        params = dict(zip(names, tensors))
        emb = encode(kind, graph, params, cfg, ws)
        return ad.sum_all(ad.multiply(emb, Tensor(weights)))

    result = gradient_check(f, [arrays[n] for n in names], step=1e-5, tolerance=1e-4)
    assert result.passed, f"{kind.value}: {result}"


def test_workspace_rejects_foreign_graph():
    g1 = random_graph(6, 3, seed=17)
    g2 = random_graph(6, 3, seed=18)
    cfg = EncoderConfig(hidden_dim=4, out_dim=4)
    arrays = tensorize(init_params(BackboneKind.GCN, 3, cfg, seed=19))
    with pytest.raises(ValueError, match="different graph"):
        encode(BackboneKind.GCN, g1, arrays, cfg, EncoderWorkspace(g2))
