"""Programmatic verification suite behind the `check` CLI command.

Each check re-derives an expected result through an independent route
(finite differences, dense recomputation, direct enumeration) and compares
the production path against it. Failures come back as data; the CLI turns
them into exit codes.
"""

from __future__ import annotations

import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, gradient_check
from .backbones import BackboneKind, EncoderConfig, encode, init_params
from .episodes import Episode, sample_episode, split_classes
from .graph import generate_synthetic, load_dataset, normalize, save_dataset
from .metric import cosine_similarities, metric_probabilities, nll_loss, prototypes
from .uncertainty import UncertaintyConfig, effective_similarity, init_uncertainty_params, \
    uncertainty_head


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _check_primitive_gradients() -> CheckResult:
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 4)) + 0.05
    w = rng.standard_normal((3, 4))
    cases = {
        "matmul": lambda a: ad.sum_all(ad.multiply(ad.matmul(a, ad.transpose(a)), Tensor(np.eye(3)))),
        "row_softmax": lambda a: ad.sum_all(ad.multiply(ad.row_softmax(a), Tensor(w))),
        "l2_row_normalize": lambda a: ad.sum_all(ad.multiply(ad.l2_row_normalize(a), Tensor(w))),
        "softplus": lambda a: ad.sum_all(ad.multiply(ad.softplus(a), a)),
        "leaky_relu": lambda a: ad.sum_all(ad.multiply(ad.leaky_relu(a, 0.2), a)),
        "gather_rows": lambda a: ad.sum_all(ad.multiply(ad.gather_rows(a, [1, 0, 1]),
                                                        ad.gather_rows(a, [1, 0, 1]))),
    }
    worst = ("", 0.0)
    for name, f in cases.items():
        result = gradient_check(f, [x], step=1e-5, tolerance=1e-5)
        if result.max_rel_error > worst[1]:
            worst = (name, result.max_rel_error)
        if not result.passed:
            return CheckResult("primitive gradients", False, f"{name}: {result}")
    return CheckResult("primitive gradients", True,
                       f"worst {worst[0]} rel error {worst[1]:.2e}")


def _micro_episode():
    n, k, m = 3, 2, 2
    nodes = np.arange(n * (k + m)).reshape(n, k + m)
    return Episode(n=n, k=k, m=m, classes=tuple(range(n)),
                   support=nodes[:, :k], query=nodes[:, k:])


def _check_end_to_end_gradients() -> CheckResult:
    rng = np.random.default_rng(1)
    episode = _micro_episode()
    graph = generate_synthetic(3, 4, 5, 0.5, 0.2, signal_strength=1.0, seed=1)
    enc_cfg = EncoderConfig(hidden_dim=4, out_dim=8)
    enc_arrays = init_params(BackboneKind.GCN, 5, enc_cfg, seed=2)
    ugn_cfg = UncertaintyConfig(num_parts=4, sigma_hidden=5)
    ugn_arrays = init_uncertainty_params(ugn_cfg, seed=3)
    names = sorted(enc_arrays) + sorted(ugn_arrays)
    arrays = {**enc_arrays, **ugn_arrays}
    noise = rng.standard_normal((3 * episode.query_nodes.size, episode.n))
    labels = episode.query_local_labels

    def f(*tensors):
        params = dict(zip(names, tensors))
        emb = encode(BackboneKind.GCN, graph, params, enc_cfg)
        support = ad.gather_rows(emb, episode.support_nodes)
        queries = ad.gather_rows(emb, episode.query_nodes)
        protos = prototypes(support, episode)
        mu = cosine_similarities(queries, protos, temperature=10.0)
        sigma = uncertainty_head(queries, protos, params, ugn_cfg)
        probs = effective_similarity(mu, sigma, 3, noise=noise)
        return nll_loss(probs, labels)

    result = gradient_check(f, [arrays[n] for n in names], step=1e-5, tolerance=1e-4)
    return CheckResult("end-to-end loss gradients", result.passed,
                       f"max rel error {result.max_rel_error:.2e}")


def _check_sparse_against_dense() -> CheckResult:
    rng = np.random.default_rng(2)
    graph = generate_synthetic(4, 8, 3, 0.4, 0.1, seed=4)
    for kind in ("symmetric", "row_mean", "sum"):
        adj = normalize(graph, kind)
        h = rng.standard_normal((graph.num_nodes, 5))
        sparse_out = ad.sparse_dense_matmul(adj, Tensor(h)).values
        dense_out = adj.to_dense() @ h
        err = np.abs(sparse_out - dense_out).max()
        if err > 1e-12:
            return CheckResult("sparse vs dense propagation", False,
                               f"{kind}: max abs error {err:.2e}")
    return CheckResult("sparse vs dense propagation", True, "all kinds within 1e-12")


def _check_probability_normalization() -> CheckResult:
    rng = np.random.default_rng(3)
    mu = Tensor(rng.standard_normal((40, 5)) * 8.0)
    sigma = Tensor(np.abs(rng.standard_normal((40, 5))) + 0.1)
    plain = metric_probabilities(mu).values
    mixed = effective_similarity(mu, sigma, 25, rng=rng).values
    err = max(np.abs(plain.sum(axis=1) - 1.0).max(), np.abs(mixed.sum(axis=1) - 1.0).max())
    return CheckResult("probability rows sum to one", err < 1e-9, f"max deviation {err:.2e}")


def _check_floor_sigma_equivalence() -> CheckResult:
    rng = np.random.default_rng(4)
    mu = Tensor(10.0 * rng.uniform(-1.0, 1.0, size=(2000, 5)))
    sigma = Tensor(np.full((2000, 5), 1e-4))
    mixed = effective_similarity(mu, sigma, 200, rng=rng).values
    plain = metric_probabilities(mu).values
    max_dev = np.abs(mixed - plain).max()
    agreement = (mixed.argmax(axis=1) == plain.argmax(axis=1)).mean()
    ok = max_dev < 5e-4 and agreement >= 0.99
    return CheckResult("floor-sigma equivalence", ok,
                       f"max dev {max_dev:.2e}, argmax agreement {agreement:.4f}")


def _check_episode_invariants() -> CheckResult:
    graph = generate_synthetic(10, 12, 4, 0.2, 0.05, seed=5)
    split = split_classes(graph, (4, 3, 3), seed=5, min_nodes_per_class=7)
    rng = np.random.default_rng(6)
    for i in range(2000):
        phase = ("train", "val", "test")[i % 3]
        episode = sample_episode(graph, split.phase(phase), 3, 2, 4, rng, phase=phase)
        if set(episode.classes) - set(split.phase(phase)):
            return CheckResult("episode invariants", False, f"class outside {phase} phase")
        if set(episode.support_nodes) & set(episode.query_nodes):
            return CheckResult("episode invariants", False, "support/query overlap")
    return CheckResult("episode invariants", True, "2000 episodes clean")


def _check_dataset_roundtrip() -> CheckResult:
    graph = generate_synthetic(3, 6, 4, 0.4, 0.1, signal_strength=2.0, seed=7)
    with tempfile.TemporaryDirectory() as tmp:
        first = Path(tmp) / "a"
        second = Path(tmp) / "b"
        save_dataset(graph, first)
        save_dataset(load_dataset(first), second)
        for name in ("edges.tsv", "features.tsv", "labels.tsv", "meta.json"):
            if (first / name).read_bytes() != (second / name).read_bytes():
                return CheckResult("dataset round trip", False, f"{name} differs")
    return CheckResult("dataset round trip", True, "byte-identical second save")


def _check_encoder_equivariance() -> CheckResult:
    from .graph import build_graph

    rng = np.random.default_rng(8)
    graph = generate_synthetic(3, 4, 5, 0.5, 0.2, seed=9)
    perm = rng.permutation(graph.num_nodes)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    edges = graph.edge_list()
    permuted = build_graph(graph.num_nodes,
                           np.column_stack([perm[edges[:, 0]], perm[edges[:, 1]]]),
                           graph.features[inv], graph.labels[inv], graph.num_classes)
    cfg = EncoderConfig(hidden_dim=4, out_dim=4)
    for kind in (BackboneKind.GCN, BackboneKind.GAT1):
        params = {name: Tensor(arr)
                  for name, arr in init_params(kind, 5, cfg, seed=10).items()}
        base = encode(kind, graph, params, cfg).values
        moved = encode(kind, permuted, params, cfg).values
        err = np.abs(moved[perm] - base).max()
        if err > 1e-9:
            return CheckResult("encoder permutation equivariance", False,
                               f"{kind.value}: max error {err:.2e}")
    return CheckResult("encoder permutation equivariance", True, "gcn and gat agree")


def run_self_check() -> list[CheckResult]:
    """Run every check; failures are returned, never raised."""
    checks = (
        _check_primitive_gradients,
        _check_end_to_end_gradients,
        _check_sparse_against_dense,
        _check_probability_normalization,
        _check_floor_sigma_equivalence,
        _check_episode_invariants,
        _check_dataset_roundtrip,
        _check_encoder_equivariance,
    )
    results = []
    for check in checks:
        try:
            results.append(check())
        except Exception as err:  # a crash is a failure, not an abort
            results.append(CheckResult(check.__name__.strip("_"), False, f"raised {err!r}"))
    return results
