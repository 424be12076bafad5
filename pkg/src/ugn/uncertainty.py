"""Uncertainty head: learned per-class deviations and Monte-Carlo similarities.

For every query the head builds a small complete graph whose n nodes are the
episode's class prototypes. Node features are the relational-similarity
matrix F (partitioned dot products between the query and each prototype);
edge weights come from two learned linear maps of F; a 2-layer graph network
over that graph predicts one standard deviation per class. Classification
probabilities are then the mean over num_samples of softmax(mu + sigma*eps),
with gradients flowing through mu and sigma only (the noise is a constant).

All per-query graphs of an episode are processed in one batch: their F
matrices are stacked query-major into a (q*n, L) tensor and the pairwise
scores are masked block-diagonally, which is exactly equivalent to running
each query's n-node graph on its own.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, glorot_uniform
from .metric import nll_loss

# additive mask value for cross-query pairs; underflows to exactly 0 in softmax
_MASK_OFF = -1e30


@dataclass(frozen=True)
class UncertaintyConfig:
    """Shape and architecture knobs of the uncertainty head.

    num_parts must divide the encoder's output width. gnn picks the network
    that maps the prototype graph to deviations: "gcn" propagates with the
    learned edge weights, "gat" replaces them with single-head attention.
    """

    num_parts: int = 8
    sigma_hidden: int = 16
    sigma_floor: float = 1e-4
    gnn: str = "gcn"
    attention_slope: float = 0.2

    def __post_init__(self):
        if self.num_parts < 1:
            raise ValueError(f"num_parts must be >= 1, got {self.num_parts}")
        if self.gnn not in ("gcn", "gat"):
            raise ValueError(f"uncertainty gnn must be 'gcn' or 'gat', got {self.gnn!r}")
        if self.sigma_floor <= 0.0:
            raise ValueError(f"sigma_floor must be positive, got {self.sigma_floor}")


def init_uncertainty_params(config: UncertaintyConfig, seed: int) -> dict[str, np.ndarray]:
    """Glorot-uniform weights and zero biases for the head, keyed by name."""
    rng = np.random.default_rng(seed)
    L, hidden = config.num_parts, config.sigma_hidden
    params: dict[str, np.ndarray] = {}
    if config.gnn == "gcn":
        # the gat variant recomputes its edges by attention, so the learned
        # edge-score maps exist only for gcn propagation
        params["ugn.phi.weight"] = glorot_uniform(rng, (L, L))
        params["ugn.phi.bias"] = np.zeros((1, L))
        params["ugn.phi_prime.weight"] = glorot_uniform(rng, (L, L))
        params["ugn.phi_prime.bias"] = np.zeros((1, L))
    params["ugn.sigma1.weight"] = glorot_uniform(rng, (L, hidden))
    params["ugn.sigma1.bias"] = np.zeros((1, hidden))
    params["ugn.sigma2.weight"] = glorot_uniform(rng, (hidden, 1))
    params["ugn.sigma2.bias"] = np.zeros((1, 1))
    if config.gnn == "gat":
        params["ugn.sigma1.att_src"] = glorot_uniform(rng, (hidden, 1))
        params["ugn.sigma1.att_dst"] = glorot_uniform(rng, (hidden, 1))
        params["ugn.sigma2.att_src"] = glorot_uniform(rng, (1, 1))
        params["ugn.sigma2.att_dst"] = glorot_uniform(rng, (1, 1))
    return params


def relational_features(query_embeddings: Tensor, protos: Tensor, num_parts: int) -> Tensor:
    """Partitioned dot products of every query against every prototype.

    The embedding width is cut into num_parts contiguous slices; entry
    (x*n + j, part) is dot(slice(query x), slice(prototype j)). Rows are
    query-major, so rows [x*n, (x+1)*n) form query x's own n-by-L feature
    matrix.
    """
    q_rows, dim = query_embeddings.shape
    n = protos.shape[0]
    if protos.shape[1] != dim:
        raise ValueError(f"width mismatch: queries {query_embeddings.shape} vs protos {protos.shape}")
    if dim % num_parts != 0:
        raise ValueError(f"num_parts={num_parts} does not divide embedding width {dim}")
    width = dim // num_parts
    columns = []
    for part in range(num_parts):
        lo = part * width
        q_slice = ad.column_slice(query_embeddings, lo, lo + width)
        p_slice = ad.column_slice(protos, lo, lo + width)
        block = ad.matmul(q_slice, ad.transpose(p_slice))  # (q, n)
        columns.append(ad.reshape(block, q_rows * n, 1))
    return ad.concat_cols(columns)


def cross_query_mask(num_queries: int, num_classes: int) -> np.ndarray:
    """Additive mask: 0 inside each query's n-by-n block, -1e30 elsewhere."""
    block = np.kron(np.eye(num_queries), np.ones((num_classes, num_classes)))
    return np.where(block > 0.0, 0.0, _MASK_OFF)


def raw_edge_scores(feats: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Pairwise scores between prototype nodes before masking/normalization."""
    fp = ad.add(ad.matmul(feats, params["ugn.phi_prime.weight"]), params["ugn.phi_prime.bias"])
    fq = ad.add(ad.matmul(feats, params["ugn.phi.weight"]), params["ugn.phi.bias"])
    return ad.matmul(fp, ad.transpose(fq))


def edge_weights(feats: Tensor, params: dict[str, Tensor], num_classes: int) -> Tensor:
    """Row-stochastic prototype-graph weights, block-diagonal per query.

    Raw scores are the bilinear form of the two learned maps; each row is
    softmax-normalized so propagation stays bounded whatever scale the
    scores take. Self-edges are retained.
    """
    qn = feats.shape[0]
    if qn % num_classes != 0:
        raise ValueError(f"{qn} feature rows not divisible by {num_classes} classes")
    raw = raw_edge_scores(feats, params)
    mask = cross_query_mask(qn // num_classes, num_classes)
    return ad.row_softmax(ad.add(raw, Tensor(mask)))


def predict_sigma(
    prop: Tensor,
    feats: Tensor,
    params: dict[str, Tensor],
    num_classes: int,
    sigma_floor: float = 1e-4,
) -> Tensor:
    """Two propagation-plus-linear steps over the prototype graph, softplus
    to force positivity, plus a small floor; returns a (queries, n) block."""
    h1 = ad.relu(ad.add(ad.matmul(ad.matmul(prop, feats), params["ugn.sigma1.weight"]),
                        params["ugn.sigma1.bias"]))
    raw = ad.add(ad.matmul(ad.matmul(prop, h1), params["ugn.sigma2.weight"]),
                 params["ugn.sigma2.bias"])
    sigma = ad.add(ad.softplus(raw), Tensor([[sigma_floor]]))
    qn = sigma.shape[0]
    return ad.reshape(sigma, qn // num_classes, num_classes)


def predict_sigma_attention(
    feats: Tensor,
    params: dict[str, Tensor],
    num_classes: int,
    sigma_floor: float = 1e-4,
    slope: float = 0.2,
) -> Tensor:
    """The "gat" variant: single-head attention over each query's complete
    prototype graph instead of the learned edge weights."""
    from .backbones import attention_weights

    qn = feats.shape[0]
    mask = cross_query_mask(qn // num_classes, num_classes)

    hw1 = ad.matmul(feats, params["ugn.sigma1.weight"])
    att1 = attention_weights(hw1, params["ugn.sigma1.att_src"],
                             params["ugn.sigma1.att_dst"], mask, slope)
    h1 = ad.relu(ad.add(ad.matmul(att1, hw1), params["ugn.sigma1.bias"]))

    hw2 = ad.matmul(h1, params["ugn.sigma2.weight"])
    att2 = attention_weights(hw2, params["ugn.sigma2.att_src"],
                             params["ugn.sigma2.att_dst"], mask, slope)
    raw = ad.add(ad.matmul(att2, hw2), params["ugn.sigma2.bias"])

    sigma = ad.add(ad.softplus(raw), Tensor([[sigma_floor]]))
    return ad.reshape(sigma, qn // num_classes, num_classes)


def uncertainty_head(
    query_embeddings: Tensor,
    protos: Tensor,
    params: dict[str, Tensor],
    config: UncertaintyConfig,
) -> Tensor:
    """Full sigma pipeline: relational features -> graph -> deviations."""
    n = protos.shape[0]
    feats = relational_features(query_embeddings, protos, config.num_parts)
    if config.gnn == "gat":
        return predict_sigma_attention(feats, params, n, config.sigma_floor,
                                       config.attention_slope)
    prop = edge_weights(feats, params, n)
    return predict_sigma(prop, feats, params, n, config.sigma_floor)


def effective_similarity(
    mu: Tensor,
    sigma: Tensor,
    num_samples: int,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> Tensor:
    """Mean over num_samples of softmax(mu + sigma * eps) per query row.

    eps is standard normal, drawn independently per (query, class, sample),
    and enters as a constant so gradients reparameterize through mu and
    sigma. Pass noise of shape (num_samples * queries, n) to freeze the
    draws (gradient checks, variance studies).
    """
    if num_samples < 1:
        raise ValueError(f"num_samples must be >= 1, got {num_samples}")
    if mu.shape != sigma.shape:
        raise ValueError(f"mu shape {mu.shape} != sigma shape {sigma.shape}")
    if np.any(sigma.values <= 0.0):
        raise ValueError("sigma entries must be strictly positive")
    q, n = mu.shape
    if noise is None:
        if rng is None:
            raise ValueError("effective_similarity needs either rng or frozen noise")
        noise = rng.standard_normal((num_samples * q, n))
    else:
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != (num_samples * q, n):
            raise ValueError(
                f"noise shape {noise.shape} != ({num_samples * q}, {n})"
            )

    sims = ad.add(ad.tile_rows(mu, num_samples),
                  ad.multiply(ad.tile_rows(sigma, num_samples), Tensor(noise)))
    probs = ad.row_softmax(sims)
    # rows are sample-major: average the num_samples copies of each (query, class)
    stacked = ad.reshape(probs, num_samples, q * n)
    means = ad.row_mean(ad.transpose(stacked))
    return ad.reshape(means, q, n)


def ugn_loss(effective: Tensor, true_local_labels) -> Tensor:
    """Negative log likelihood of the Monte-Carlo probabilities; same
    contract as the metric head's loss."""
    return nll_loss(effective, true_local_labels)
