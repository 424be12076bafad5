"""Interchangeable message-passing encoders producing node embeddings.

Six two-layer encoders over the full graph: plain graph convolution (gcn),
its collapsed linear variant (sgc), mean-aggregation with self-concat
(sage), sum-aggregation with per-layer MLPs (gin), an MLP followed by
personalized-PageRank propagation (appnp), and single-head attention (gat).
Every forward runs on the autodiff tape; support/query embeddings are
gathered rows of the full embedding matrix afterwards.

The final layer of every encoder is linear: a trailing relu would confine
embeddings to the positive orthant and cap the cosine-similarity range the
heads depend on.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, glorot_uniform
from .graph import AdjacencyCache, SparseGraph

_MASK_OFF = -1e30


class BackboneKind(str, Enum):
    """The encoder architectures; values are the CLI spellings."""

    GCN = "gcn"
    SGC = "sgc"
    SAGE_MEAN = "sage"
    GIN = "gin"
    APPNP = "appnp"
    GAT1 = "gat"

    @classmethod
    def parse(cls, value) -> "BackboneKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            options = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown backbone {value!r}; expected one of: {options}") from None


@dataclass(frozen=True)
class EncoderConfig:
    hidden_dim: int = 16
    out_dim: int = 16
    num_layers: int = 2           # the layer recipes below are written for 2
    appnp_iterations: int = 10
    appnp_teleport: float = 0.1
    gin_epsilon: float = 0.0
    gat_leaky_slope: float = 0.2

    def __post_init__(self):
        if self.num_layers != 2:
            raise ValueError("encoders are two-layer; num_layers must be 2")
        if self.hidden_dim < 1 or self.out_dim < 1:
            raise ValueError(
                f"dimensions must be positive, got hidden={self.hidden_dim}, out={self.out_dim}"
            )


class EncoderWorkspace:
    """Per-graph caches shared by every episode of a run: the normalized
    adjacencies and (for attention) the dense non-edge mask."""

    def __init__(self, graph: SparseGraph):
        self.graph = graph
        self.adjacency = AdjacencyCache(graph)
        self._attention_mask: np.ndarray | None = None

    def attention_mask(self) -> np.ndarray:
        """Additive mask with 0 on edges and the diagonal, -1e30 elsewhere."""
        if self._attention_mask is None:
            dense = self.adjacency.get("sum").to_dense() > 0.0
            np.fill_diagonal(dense, True)
            self._attention_mask = np.where(dense, 0.0, _MASK_OFF)
        return self._attention_mask


# ---------------------------------------------------------------------------
# parameter templates
# ---------------------------------------------------------------------------

def _template(kind: BackboneKind, d: int, cfg: EncoderConfig) -> list[tuple[str, str, tuple[int, int]]]:
    """(name, init, shape) triples; init is 'glorot' or 'zeros'."""
    h, o = cfg.hidden_dim, cfg.out_dim
    if kind is BackboneKind.GCN:
        return [("l1.weight", "glorot", (d, h)), ("l1.bias", "zeros", (1, h)),
                ("l2.weight", "glorot", (h, o)), ("l2.bias", "zeros", (1, o))]
    if kind is BackboneKind.SGC:
        return [("lin.weight", "glorot", (d, o)), ("lin.bias", "zeros", (1, o))]
    if kind is BackboneKind.SAGE_MEAN:
        return [("l1.weight", "glorot", (2 * d, h)), ("l1.bias", "zeros", (1, h)),
                ("l2.weight", "glorot", (2 * h, o)), ("l2.bias", "zeros", (1, o))]
    if kind is BackboneKind.GIN:
        return [("l1.mlp1.weight", "glorot", (d, h)), ("l1.mlp1.bias", "zeros", (1, h)),
                ("l1.mlp2.weight", "glorot", (h, h)), ("l1.mlp2.bias", "zeros", (1, h)),
                ("l2.mlp1.weight", "glorot", (h, h)), ("l2.mlp1.bias", "zeros", (1, h)),
                ("l2.mlp2.weight", "glorot", (h, o)), ("l2.mlp2.bias", "zeros", (1, o))]
    if kind is BackboneKind.APPNP:
        return [("mlp1.weight", "glorot", (d, h)), ("mlp1.bias", "zeros", (1, h)),
                ("mlp2.weight", "glorot", (h, o)), ("mlp2.bias", "zeros", (1, o))]
    if kind is BackboneKind.GAT1:
        return [("l1.weight", "glorot", (d, h)), ("l1.att_src", "glorot", (h, 1)),
                ("l1.att_dst", "glorot", (h, 1)), ("l1.bias", "zeros", (1, h)),
                ("l2.weight", "glorot", (h, o)), ("l2.att_src", "glorot", (o, 1)),
                ("l2.att_dst", "glorot", (o, 1)), ("l2.bias", "zeros", (1, o))]
    raise ValueError(f"no parameter template for {kind}")


def init_params(
    kind: BackboneKind,
    feature_dim: int,
    config: EncoderConfig,
    seed: int,
    prefix: str = "enc.",
) -> dict[str, np.ndarray]:
    """Deterministic Glorot-uniform weights and zero biases for one encoder."""
    if feature_dim < 1:
        raise ValueError(f"feature_dim must be >= 1, got {feature_dim}")
    kind = BackboneKind.parse(kind)
    rng = np.random.default_rng(seed)
    out = {}
    for name, init, shape in _template(kind, feature_dim, config):
        out[prefix + name] = glorot_uniform(rng, shape) if init == "glorot" else np.zeros(shape)
    return out


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def attention_weights(
    transformed: Tensor,
    att_src: Tensor,
    att_dst: Tensor,
    additive_mask: np.ndarray,
    slope: float,
) -> Tensor:
    """Single-head attention matrix: leaky-relu of pairwise source/target
    scores, masked to the graph structure, row-softmaxed. Each row sums to 1
    over the node's neighborhood plus itself."""
    src = ad.matmul(transformed, att_src)   # (n, 1)
    dst = ad.matmul(transformed, att_dst)   # (n, 1)
    logits = ad.leaky_relu(ad.add(src, ad.transpose(dst)), slope)
    return ad.row_softmax(ad.add(logits, Tensor(additive_mask)))


def encode(
    kind: BackboneKind,
    graph: SparseGraph,
    params: dict[str, Tensor],
    config: EncoderConfig,
    workspace: EncoderWorkspace | None = None,
    prefix: str = "enc.",
) -> Tensor:
    """Embed every node of the graph; returns a (num_nodes, out_dim) tensor."""
    kind = BackboneKind.parse(kind)
    ws = workspace if workspace is not None else EncoderWorkspace(graph)
    if ws.graph is not graph:
        raise ValueError("workspace was built for a different graph")
    x = Tensor(graph.features)

    def p(name: str) -> Tensor:
        try:
            return params[prefix + name]
        except KeyError:
            raise KeyError(
                f"missing parameter {prefix + name!r} for backbone {kind.value}"
            ) from None

    if kind is BackboneKind.GCN:
        sym = ws.adjacency.get("symmetric")
        h1 = ad.relu(ad.add(ad.matmul(ad.sparse_dense_matmul(sym, x), p("l1.weight")),
                            p("l1.bias")))
        return ad.add(ad.matmul(ad.sparse_dense_matmul(sym, h1), p("l2.weight")), p("l2.bias"))

    if kind is BackboneKind.SGC:
        sym = ws.adjacency.get("symmetric")
        prop = ad.sparse_dense_matmul(sym, ad.sparse_dense_matmul(sym, x))
        return ad.add(ad.matmul(prop, p("lin.weight")), p("lin.bias"))

    if kind is BackboneKind.SAGE_MEAN:
        mean = ws.adjacency.get("row_mean")

        def sage_layer(h, layer):
            agg = ad.concat_cols([h, ad.sparse_dense_matmul(mean, h)])
            return ad.add(ad.matmul(agg, p(f"{layer}.weight")), p(f"{layer}.bias"))

        return sage_layer(ad.relu(sage_layer(x, "l1")), "l2")

    if kind is BackboneKind.GIN:
        summed = ws.adjacency.get("sum")
        eps = config.gin_epsilon

        def gin_layer(h, layer):
            z = ad.add(ad.scale(h, 1.0 + eps), ad.sparse_dense_matmul(summed, h))
            hidden = ad.relu(ad.add(ad.matmul(z, p(f"{layer}.mlp1.weight")),
                                    p(f"{layer}.mlp1.bias")))
            return ad.add(ad.matmul(hidden, p(f"{layer}.mlp2.weight")), p(f"{layer}.mlp2.bias"))

        return gin_layer(gin_layer(x, "l1"), "l2")

    if kind is BackboneKind.APPNP:
        sym = ws.adjacency.get("symmetric")
        alpha = config.appnp_teleport
        hidden = ad.relu(ad.add(ad.matmul(x, p("mlp1.weight")), p("mlp1.bias")))
        z0 = ad.add(ad.matmul(hidden, p("mlp2.weight")), p("mlp2.bias"))
        z = z0
        for _ in range(config.appnp_iterations):
            z = ad.add(ad.scale(ad.sparse_dense_matmul(sym, z), 1.0 - alpha),
                       ad.scale(z0, alpha))
        return z

    if kind is BackboneKind.GAT1:
        mask = ws.attention_mask()
        slope = config.gat_leaky_slope

        def gat_layer(h, layer):
            hw = ad.matmul(h, p(f"{layer}.weight"))
            att = attention_weights(hw, p(f"{layer}.att_src"), p(f"{layer}.att_dst"),
                                    mask, slope)
            return ad.add(ad.matmul(att, hw), p(f"{layer}.bias"))

        return gat_layer(ad.relu(gat_layer(x, "l1")), "l2")

    raise ValueError(f"no forward routine for {kind}")
