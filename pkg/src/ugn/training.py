"""Joint episodic training, meta-test evaluation, and sensitivity sweeps.

One run: sample a training episode from the train classes, embed the whole
graph, classify queries through the metric head (optionally via the
uncertainty head's Monte-Carlo similarities), take one Adam step, repeat.
Every eval_every episodes a fixed validation episode set is scored and the
best-scoring parameters are kept; meta-test reports accuracy of those
parameters on novel classes with no adaptation of any kind.

Randomness is split into independent named streams derived from the run
seed, so a baseline run and an uncertainty run with the same seed consume
byte-identical episode sequences (the noise stream is separate), which is
what makes paired comparisons meaningful.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy import stats

from . import autodiff as ad
from .autodiff import ParamStore, Tape, Tensor
from .backbones import BackboneKind, EncoderConfig, EncoderWorkspace, encode, init_params
from .episodes import ClassSplit, Episode, sample_episode
from .graph import SparseGraph
from .metric import accuracy, cosine_similarities, metric_probabilities, nll_loss, prototypes
from .uncertainty import (
    UncertaintyConfig,
    effective_similarity,
    init_uncertainty_params,
    uncertainty_head,
)

log = logging.getLogger(__name__)

DIVERGENCE_LOSS = 1e6
MAX_CONSECUTIVE_SKIPS = 3

_STREAM_NAMES = (
    "encoder_init", "head_init", "episodes", "train_noise",
    "val_episodes", "val_noise", "test_episodes", "test_noise",
)


def derive_seed_streams(seed: int) -> dict[str, np.random.SeedSequence]:
    """Independent named seed streams, all reproducible from the run seed."""
    children = np.random.SeedSequence(seed).spawn(len(_STREAM_NAMES))
    return dict(zip(_STREAM_NAMES, children))


def default_split_counts(num_classes: int) -> tuple[int, int, int]:
    """Roughly half/quarter/quarter class split when none is requested."""
    val = max(1, num_classes // 4)
    test = max(1, num_classes // 4)
    train = num_classes - val - test
    if train < 1:
        raise ValueError(f"{num_classes} classes are too few to split into three phases")
    return train, val, test


@dataclass(frozen=True)
class RunConfig:
    """Everything one experiment needs; echoed verbatim into its metrics."""

    backbone: str = "gcn"
    ugn_enabled: bool = True
    ugn_gnn: str = "gcn"
    n: int = 5
    k: int = 3
    m: int = 10
    episodes: int = 1000
    T_train: int = 100
    T_test: int = 1000
    L: int = 8
    temperature: float = 10.0
    learning_rate: float = 5e-3
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    eval_episodes: int = 200
    eval_every: int = 50
    hidden_dim: int = 16
    out_dim: int = 16
    sigma_floor: float = 1e-4
    split_counts: tuple[int, int, int] | None = None

    def validate(self) -> None:
        if self.episodes < 1:
            raise ValueError(f"episodes must be >= 1, got {self.episodes}")
        if min(self.n, self.k, self.m) < 1:
            raise ValueError(f"n/k/m must be >= 1, got {(self.n, self.k, self.m)}")
        if min(self.T_train, self.T_test) < 1:
            raise ValueError("sample counts must be >= 1")
        if self.learning_rate <= 0 or self.temperature <= 0 or self.weight_decay < 0:
            raise ValueError("rates must be positive (weight decay may be zero)")
        if self.eval_every < 1 or self.eval_episodes < 1:
            raise ValueError("eval_every and eval_episodes must be >= 1")
        if self.ugn_enabled and self.out_dim % self.L != 0:
            raise ValueError(
                f"L={self.L} must divide out_dim={self.out_dim} for the uncertainty head"
            )
        BackboneKind.parse(self.backbone)

    @property
    def backbone_kind(self) -> BackboneKind:
        return BackboneKind.parse(self.backbone)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(hidden_dim=self.hidden_dim, out_dim=self.out_dim)

    def uncertainty_config(self) -> UncertaintyConfig:
        return UncertaintyConfig(num_parts=self.L, sigma_floor=self.sigma_floor,
                                 gnn=self.ugn_gnn)

    def to_dict(self) -> dict:
        out = asdict(self)
        if out["split_counts"] is not None:
            out["split_counts"] = list(out["split_counts"])
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        values = dict(payload)
        if values.get("split_counts") is not None:
            values["split_counts"] = tuple(values["split_counts"])
        return cls(**values)


@dataclass
class RunMetrics:
    """Run outputs: traces, selection point, test accuracy, config echo.

    episode_log holds (classes, support ids, query ids) per training episode
    for paired-stream assertions; it stays in memory and is not serialized.
    """

    config: dict
    loss_trace: list[float] = field(default_factory=list)
    eval_points: list[dict] = field(default_factory=list)
    best_episode: int = 0
    best_val_accuracy: float | None = None
    sigma_mean_trace: list[float] = field(default_factory=list)
    sigma_max_trace: list[float] = field(default_factory=list)
    test_accuracy: float | None = None
    test_stderr: float | None = None
    test_episode_accuracies: list[float] = field(default_factory=list)
    wall_clock_seconds: float = 0.0
    episode_log: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "loss_trace": self.loss_trace,
            "eval_points": self.eval_points,
            "best_episode": self.best_episode,
            "best_val_accuracy": self.best_val_accuracy,
            "sigma_mean_trace": self.sigma_mean_trace,
            "sigma_max_trace": self.sigma_max_trace,
            "test_accuracy": self.test_accuracy,
            "test_stderr": self.test_stderr,
            "test_episode_accuracies": self.test_episode_accuracies,
            "wall_clock_seconds": self.wall_clock_seconds,
        }


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def adam_step(store: ParamStore, gradients: dict[str, np.ndarray], config: RunConfig) -> bool:
    """Decoupled weight decay followed by a bias-corrected Adam update.

    A non-finite gradient skips the whole step (logged and counted);
    MAX_CONSECUTIVE_SKIPS skips in a row abort the run. Returns True when
    the step was applied.
    """
    for name, g in gradients.items():
        if not np.isfinite(g).all():
            store.consecutive_skips += 1
            log.warning("skipping optimizer step %d: non-finite gradient for %r "
                        "(%d consecutive)", store.step_count + 1, name, store.consecutive_skips)
            if store.consecutive_skips >= MAX_CONSECUTIVE_SKIPS:
                raise RuntimeError(
                    f"{MAX_CONSECUTIVE_SKIPS} consecutive non-finite gradients; "
                    f"last offender {name!r}"
                )
            return False
    store.consecutive_skips = 0
    store.step_count += 1
    t = store.step_count
    lr, wd = config.learning_rate, config.weight_decay
    b1, b2, eps = config.beta1, config.beta2, config.adam_epsilon
    for name in store.names():
        g = gradients[name]
        p = store.value(name)
        if wd > 0.0:
            p *= 1.0 - lr * wd
        m = store.moment1[name]
        v = store.moment2[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return True


# ---------------------------------------------------------------------------
# run assembly
# ---------------------------------------------------------------------------

def init_run(graph: SparseGraph, config: RunConfig):
    """Parameter store, per-graph workspace, and seed streams for one run."""
    config.validate()
    streams = derive_seed_streams(config.seed)
    enc_cfg = config.encoder_config()
    store = ParamStore()
    enc_seed = int(streams["encoder_init"].generate_state(1)[0])
    for name, arr in init_params(config.backbone_kind, graph.feature_dim,
                                 enc_cfg, enc_seed).items():
        store.add(name, arr)
    if config.ugn_enabled:
        head_seed = int(streams["head_init"].generate_state(1)[0])
        for name, arr in init_uncertainty_params(config.uncertainty_config(), head_seed).items():
            store.add(name, arr)
    return store, EncoderWorkspace(graph), streams


def _episode_probabilities(
    emb: Tensor,
    episode: Episode,
    params: dict[str, Tensor],
    config: RunConfig,
    num_samples: int,
    noise_rng: np.random.Generator | None,
):
    """Classification probabilities for one episode given full-graph
    embeddings; returns (probabilities, sigma values or None)."""
    support = ad.gather_rows(emb, episode.support_nodes)
    queries = ad.gather_rows(emb, episode.query_nodes)
    protos = prototypes(support, episode)
    mu = cosine_similarities(queries, protos, config.temperature,
                             query_ids=episode.query_nodes)
    if not config.ugn_enabled:
        return metric_probabilities(mu), None
    sigma = uncertainty_head(queries, protos, params, config.uncertainty_config())
    probs = effective_similarity(mu, sigma, num_samples, rng=noise_rng)
    return probs, sigma.values


def _train_step(graph, episode, store, config, ws, noise_rng):
    tape = Tape()
    leaves = store.bind(tape)
    emb = encode(config.backbone_kind, graph, leaves, config.encoder_config(), ws)
    probs, sigma_values = _episode_probabilities(
        emb, episode, leaves, config, config.T_train, noise_rng)
    loss = nll_loss(probs, episode.query_local_labels)
    grads = store.gradients(leaves, tape.backward(loss))
    adam_step(store, grads, config)
    return loss.item(), sigma_values


def evaluate_episodes(
    graph: SparseGraph,
    episodes: list[Episode],
    store: ParamStore,
    config: RunConfig,
    ws: EncoderWorkspace,
    noise_rng: np.random.Generator | None,
    num_samples: int,
) -> list[float]:
    """Accuracy per episode under fixed parameters; no tape, no updates.

    The full-graph embedding depends only on the parameters, so it is
    computed once and shared by every episode.
    """
    params = {name: Tensor(store.value(name)) for name in store.names()}
    emb = encode(config.backbone_kind, graph, params, config.encoder_config(), ws)
    accs = []
    for episode in episodes:
        probs, _ = _episode_probabilities(emb, episode, params, config,
                                          num_samples, noise_rng)
        accs.append(accuracy(probs.values, episode.query_local_labels))
    return accs


def train(graph: SparseGraph, split: ClassSplit, config: RunConfig) -> tuple[ParamStore, RunMetrics]:
    """Run the episodic loop; returns the best-validation parameters.

    When validation is possible (a non-empty val phase and eval_every within
    the horizon), the returned store holds the checkpoint with the highest
    mean validation accuracy; otherwise the final parameters.
    """
    start = time.perf_counter()
    store, ws, streams = init_run(graph, config)
    episode_rng = np.random.default_rng(streams["episodes"])
    noise_rng = np.random.default_rng(streams["train_noise"])
    metrics = RunMetrics(config=config.to_dict())

    do_eval = config.eval_every <= config.episodes and len(split.val_classes) > 0
    val_episodes: list[Episode] = []
    if do_eval:
        val_rng = np.random.default_rng(streams["val_episodes"])
        val_episodes = [
            sample_episode(graph, split.val_classes, config.n, config.k, config.m,
                           val_rng, phase="val")
            for _ in range(config.eval_episodes)
        ]
    val_noise_rng = np.random.default_rng(streams["val_noise"])

    best_acc = -1.0
    best_snapshot = None
    best_episode = 0
    for index in range(1, config.episodes + 1):
        episode = sample_episode(graph, split.train_classes, config.n, config.k,
                                 config.m, episode_rng, phase="train")
        metrics.episode_log.append((
            episode.classes,
            episode.support_nodes.tolist(),
            episode.query_nodes.tolist(),
        ))
        loss_value, sigma_values = _train_step(graph, episode, store, config, ws, noise_rng)
        metrics.loss_trace.append(loss_value)
        if sigma_values is not None:
            metrics.sigma_mean_trace.append(float(sigma_values.mean()))
            metrics.sigma_max_trace.append(float(sigma_values.max()))
        if loss_value > DIVERGENCE_LOSS:
            raise RuntimeError(
                f"training diverged at episode {index}: loss {loss_value:.3e} "
                f"(backbone={config.backbone}, lr={config.learning_rate})"
            )
        if do_eval and index % config.eval_every == 0:
            accs = evaluate_episodes(graph, val_episodes, store, config, ws,
                                     val_noise_rng, config.T_train)
            acc = float(np.mean(accs))
            metrics.eval_points.append({"episode": index, "val_accuracy": acc})
            log.info("episode %d: loss %.4f, val accuracy %.4f", index, loss_value, acc)
            if acc > best_acc:
                best_acc = acc
                best_snapshot = store.snapshot()
                best_episode = index

    if best_snapshot is not None:
        store.restore(best_snapshot)
        metrics.best_episode = best_episode
        metrics.best_val_accuracy = best_acc
    else:
        metrics.best_episode = config.episodes
    metrics.wall_clock_seconds = time.perf_counter() - start
    return store, metrics


def meta_test(
    graph: SparseGraph,
    split: ClassSplit,
    store: ParamStore,
    config: RunConfig,
    ws: EncoderWorkspace | None = None,
) -> RunMetrics:
    """Evaluate frozen parameters on novel-class episodes.

    No parameter updates and no fine-tuning happen here; with a shared seed
    the sampled test episodes are identical across runs, so per-episode
    accuracies of two models are directly comparable.
    """
    config.validate()
    start = time.perf_counter()
    streams = derive_seed_streams(config.seed)
    test_rng = np.random.default_rng(streams["test_episodes"])
    noise_rng = np.random.default_rng(streams["test_noise"])
    ws = ws if ws is not None else EncoderWorkspace(graph)
    episodes = [
        sample_episode(graph, split.test_classes, config.n, config.k, config.m,
                       test_rng, phase="test")
        for _ in range(config.eval_episodes)
    ]
    accs = evaluate_episodes(graph, episodes, store, config, ws, noise_rng, config.T_test)
    metrics = RunMetrics(config=config.to_dict())
    metrics.test_episode_accuracies = [float(a) for a in accs]
    metrics.test_accuracy = float(np.mean(accs))
    metrics.test_stderr = (
        float(np.std(accs, ddof=1) / np.sqrt(len(accs))) if len(accs) > 1 else 0.0
    )
    metrics.wall_clock_seconds = time.perf_counter() - start
    return metrics


def train_and_test(graph: SparseGraph, split: ClassSplit, config: RunConfig):
    """Train, then meta-test the selected checkpoint; one merged metrics."""
    store, metrics = train(graph, split, config)
    test_metrics = meta_test(graph, split, store, config)
    metrics.test_accuracy = test_metrics.test_accuracy
    metrics.test_stderr = test_metrics.test_stderr
    metrics.test_episode_accuracies = test_metrics.test_episode_accuracies
    metrics.wall_clock_seconds += test_metrics.wall_clock_seconds
    return store, metrics


# ---------------------------------------------------------------------------
# sweeps and paired comparison
# ---------------------------------------------------------------------------

SWEEP_OUT_DIM = 64  # large enough for every partition count in the sweep


def _sweep_worker(args) -> dict:
    graph, split, config_payload = args
    config = RunConfig.from_dict(config_payload)
    _, metrics = train_and_test(graph, split, config)
    return {
        "L": config.L,
        "test_accuracy": metrics.test_accuracy,
        "test_stderr": metrics.test_stderr,
        "best_val_accuracy": metrics.best_val_accuracy,
    }


def sensitivity_sweep(
    graph: SparseGraph,
    split: ClassSplit,
    base_config: RunConfig,
    L_values: list[int],
    jobs: int = 1,
) -> list[dict]:
    """Independent train+test per partition count, shared episode seed.

    The sweep forces out_dim to SWEEP_OUT_DIM so every requested partition
    count divides the embedding width.
    """
    tasks = []
    for L in L_values:
        config = replace(base_config, L=L, out_dim=SWEEP_OUT_DIM, ugn_enabled=True)
        config.validate()
        tasks.append((graph, split, config.to_dict()))
    if jobs > 1:
        import multiprocessing

        with multiprocessing.Pool(min(jobs, len(tasks))) as pool:
            return pool.map(_sweep_worker, tasks)
    return [_sweep_worker(task) for task in tasks]


@dataclass
class PairedComparison:
    """Baseline vs uncertainty-head accuracies over shared episode streams."""

    backbone: str
    seeds: list[int]
    baseline_accuracies: list[float]
    ugn_accuracies: list[float]

    @property
    def differences(self) -> np.ndarray:
        return np.asarray(self.ugn_accuracies) - np.asarray(self.baseline_accuracies)

    @property
    def mean_difference(self) -> float:
        return float(self.differences.mean())

    def one_sided_p_value(self) -> float:
        """Paired t-test of improvement > 0; degenerate spread handled."""
        diffs = self.differences
        if np.allclose(diffs.std(ddof=1) if len(diffs) > 1 else 0.0, 0.0):
            return 0.0 if diffs.mean() > 0 else 1.0
        return float(stats.ttest_rel(self.ugn_accuracies, self.baseline_accuracies,
                                     alternative="greater").pvalue)


def paired_comparison(
    graph: SparseGraph,
    split: ClassSplit,
    config: RunConfig,
    seeds: list[int],
) -> PairedComparison:
    """Train baseline and uncertainty-head models on identical episode
    streams for every seed; collect meta-test accuracies pairwise."""
    base_accs, ugn_accs = [], []
    for seed in seeds:
        _, base_metrics = train_and_test(graph, split,
                                         replace(config, seed=seed, ugn_enabled=False))
        _, ugn_metrics = train_and_test(graph, split,
                                        replace(config, seed=seed, ugn_enabled=True))
        base_accs.append(base_metrics.test_accuracy)
        ugn_accs.append(ugn_metrics.test_accuracy)
        log.info("seed %d: baseline %.4f vs ugn %.4f", seed,
                 base_accs[-1], ugn_accs[-1])
    return PairedComparison(
        backbone=config.backbone,
        seeds=list(seeds),
        baseline_accuracies=base_accs,
        ugn_accuracies=ugn_accs,
    )


def comparison_report(title: str, results: dict[str, PairedComparison]) -> str:
    """Accuracy table (in %) for baseline and uncertainty-head rows, one
    column per few-shot setting."""
    settings = list(results)
    backbone = results[settings[0]].backbone if settings else "?"
    width = max(16, *(len(s) + 4 for s in settings)) if settings else 16
    lines = [title, ""]
    header = f"{'model':<14}" + "".join(f"{s:>{width}}" for s in settings)
    lines.append(header)
    lines.append("-" * len(header))
    base_row = f"{backbone:<14}"
    ugn_row = f"{'ugn-' + backbone:<14}"
    for s in settings:
        r = results[s]
        base_row += f"{100 * np.mean(r.baseline_accuracies):>{width}.1f}"
        ugn_row += f"{100 * np.mean(r.ugn_accuracies):>{width}.1f}"
    lines.extend([base_row, ugn_row, ""])
    for s in settings:
        r = results[s]
        lines.append(
            f"{s}: mean improvement {100 * r.mean_difference:+.2f} pts "
            f"over {len(r.seeds)} paired seeds, one-sided p={r.one_sided_p_value():.4f}"
        )
    return "\n".join(lines)
