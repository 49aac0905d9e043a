"""Policy search over gate policies and the evaluation experiments.

The base net is frozen. Each image is classified over ``T + 1`` passes:
pass 0 runs the plain net, and every later pass applies the gates chosen
by the policy from the previous pass's observation. Candidate policies are
scored with a boosted log-loss on the final pass and optimized by SNES.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import policy as pol
from . import snes
from .dataio import Dataset
from .maxoutnet import MaxoutNet, forward
from .numerics import DimensionError, NumericalError, RngStream
from .policy import PolicyParams, act, observe

log = logging.getLogger(__name__)


@dataclass
class DasNetConfig:
    steps: int = 5
    batch_size: int = 128
    population: int = 50
    lambda_correct: float = 0.005
    lambda_misclassified: float = 1.0
    lambda_l2: float = 0.005
    squared_l2: bool = False
    max_generations: int = 2000
    val_interval: int = 10
    patience: int = 10
    sigma0: float = 0.05
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.population < 2:
            raise ValueError("need steps >= 1, batch_size >= 1 and population >= 2")
        if not self.lambda_misclassified >= self.lambda_correct > 0:
            raise ValueError("need lambda_misclassified >= lambda_correct > 0")


# --------------------------------------------------------------------------
# Episodes


@dataclass
class BasePass:
    """Policy-independent pass 0 of a batch, reusable across candidates."""

    observation: np.ndarray
    probs: np.ndarray
    first_layer: np.ndarray


def base_pass(net: MaxoutNet, images: np.ndarray) -> BasePass:
    trace = forward(net, images)
    return BasePass(observe(trace), trace.probs, trace.layers[0])


@dataclass
class EpisodeTrace:
    """Per-pass observations, gates and class probabilities, stacked on axis 0."""

    observations: np.ndarray  # (T+1, B, dim O)
    actions: np.ndarray  # (T+1, B, dim A); actions[0] is all ones
    probs: np.ndarray  # (T+1, B, C)
    labels: np.ndarray | None = None

    @property
    def steps(self) -> int:
        return len(self.probs) - 1

    @property
    def prediction(self) -> np.ndarray:
        return np.argmax(self.probs[-1], axis=-1)


def run_episode(
    net: MaxoutNet,
    params: PolicyParams,
    images: np.ndarray,
    steps: int,
    base: BasePass | None = None,
    labels=None,
) -> EpisodeTrace:
    """Classify ``images`` (single or batch) with ``steps`` gated passes after pass 0."""
    x = np.asarray(images, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    params.check(net)
    if base is None:
        base = base_pass(net, x)
    obs, acts, probs = [base.observation], [np.ones((len(x), net.gate_dimension))], [base.probs]
    for _ in range(steps):
        gates = act(params, obs[-1])
        trace = forward(net, x, gates, first_layer=base.first_layer)
        obs.append(observe(trace))
        acts.append(gates)
        probs.append(trace.probs)
    ep = EpisodeTrace(np.stack(obs), np.stack(acts), np.stack(probs), labels)
    if single:
        ep = EpisodeTrace(ep.observations[:, 0], ep.actions[:, 0], ep.probs[:, 0], labels)
    return ep


# --------------------------------------------------------------------------
# Loss and fitness


def boosted_loss(probs, label: int, lambda_correct: float, lambda_misclassified: float) -> float:
    """``-lambda * ln(probs[label])`` with lambda chosen by whether ``argmax(probs) == label``."""
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < len(probs):
        raise ValueError(f"label {label} outside [0, {len(probs)})")
    weight = lambda_correct if int(np.argmax(probs)) == label else lambda_misclassified
    return float(-weight * np.log(max(probs[label], 1e-300)))


def boosted_losses(probs: np.ndarray, labels: np.ndarray, lambda_correct: float, lambda_misclassified: float) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= probs.shape[-1]:
        raise ValueError("label out of range")
    correct = np.argmax(probs, axis=-1) == labels
    weight = np.where(correct, lambda_correct, lambda_misclassified)
    picked = np.maximum(probs[np.arange(len(labels)), labels], 1e-300)
    return -weight * np.log(picked)


@dataclass
class FitnessRecord:
    index: int
    losses: np.ndarray
    cumulative: float
    regularization: float
    total: float
    failed: bool = False


def regularization(params: PolicyParams, config: DasNetConfig) -> float:
    norm = float(np.linalg.norm(params.flat))
    return config.lambda_l2 * (norm**2 if config.squared_l2 else norm)


def evaluate_candidate(
    net: MaxoutNet,
    params: PolicyParams,
    images: np.ndarray,
    labels: np.ndarray,
    config: DasNetConfig,
    index: int = 0,
    base: BasePass | None = None,
) -> FitnessRecord:
    """Cumulative boosted loss over the batch plus the L2 penalty on the policy weights."""
    ep = run_episode(net, params, images, config.steps, base)
    losses = boosted_losses(ep.probs[-1], labels, config.lambda_correct, config.lambda_misclassified)
    cumulative = float(np.sum(losses))
    reg = regularization(params, config)
    total = cumulative + reg
    failed = not np.isfinite(total)
    if failed:
        total = float("inf")
    return FitnessRecord(index, losses, cumulative, reg, total, failed)


# --------------------------------------------------------------------------
# Evaluation helpers


def _chunks(data: Dataset, size: int):
    for i in range(0, len(data), size):
        yield data.images[i : i + size], data.labels[i : i + size]


def step_probabilities(net: MaxoutNet, params: PolicyParams, data: Dataset, steps: int, chunk: int = 250) -> np.ndarray:
    """Class probabilities at every pass, shaped ``(steps+1, count, C)``."""
    out = []
    for xb, _ in _chunks(data, chunk):
        ep = run_episode(net, params, xb, steps)
        if not (np.all(np.isfinite(ep.probs)) and np.all(np.isfinite(ep.observations))):
            raise NumericalError("non-finite activations during episode")
        out.append(ep.probs)
    return np.concatenate(out, axis=1)


def policy_accuracy(net: MaxoutNet, params: PolicyParams, data: Dataset, steps: int) -> float:
    probs = step_probabilities(net, params, data, steps)
    return float(np.mean(np.argmax(probs[-1], axis=-1) == data.labels))


def dynamics_sweep(net: MaxoutNet, params: PolicyParams, data: Dataset, max_steps: int) -> list[float]:
    """Accuracy when classifying from pass ``t`` for every ``t`` in ``0..max_steps``."""
    probs = step_probabilities(net, params, data, max_steps)
    return [float(np.mean(np.argmax(p, axis=-1) == data.labels)) for p in probs]


def final_gates(net: MaxoutNet, params: PolicyParams, data: Dataset, steps: int, chunk: int = 250) -> np.ndarray:
    return np.concatenate([run_episode(net, params, xb, steps).actions[-1] for xb, _ in _chunks(data, chunk)])


# --------------------------------------------------------------------------
# Policy search


@dataclass
class TrainState:
    dist: snes.SearchDistribution
    best_mu: np.ndarray
    best_val: float
    initial_val: float
    bad_evals: int = 0
    history: list[dict] = field(default_factory=list)
    stopped: bool = False


def _write_atomic(path: Path, writer) -> None:
    tmp = path.with_name(path.name + ".tmp")
    writer(tmp)
    os.replace(tmp, path)


def _save_state(directory: Path, state: TrainState, config: DasNetConfig, net: MaxoutNet) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    next_stream = RngStream(config.seed, 2 * state.dist.generation + 1)
    _write_atomic(directory / "snes.ckpt", lambda p: snes.save(state.dist, p, config.population, next_stream))
    _write_atomic(directory / "best.dpol", lambda p: pol.save(PolicyParams.from_flat(state.best_mu, net), p))
    meta = {
        "config": asdict(config),
        "best_val": state.best_val,
        "initial_val": state.initial_val,
        "bad_evals": state.bad_evals,
        "stopped": state.stopped,
        "history": state.history,
    }
    _write_atomic(directory / "trainer.json", lambda p: p.write_text(json.dumps(meta, indent=1)))


def _load_state(directory: Path, net: MaxoutNet) -> TrainState:
    dist, _, _ = snes.load(directory / "snes.ckpt")
    best = pol.load(directory / "best.dpol")
    best.check(net)
    meta = json.loads((directory / "trainer.json").read_text())
    return TrainState(dist, best.flat.copy(), meta["best_val"], meta["initial_val"],
                      meta["bad_evals"], meta["history"], meta["stopped"])


def train_policy(
    net: MaxoutNet,
    train: Dataset,
    val: Dataset | None,
    config: DasNetConfig,
    checkpoint_dir=None,
    resume: bool = False,
    max_generations: int | None = None,
) -> tuple[PolicyParams, list[dict]]:
    """Evolve the gate policy with SNES; the net is never modified.

    Every generation draws one batch of ``config.batch_size`` training
    images, shared by all candidates. Every ``config.val_interval``
    generations the distribution mean is scored on ``val`` and the best
    mean so far is kept; the search stops after ``config.patience``
    evaluations without improvement or at ``config.max_generations``.
    ``max_generations`` (if given) caps this call only, which lets a run be
    split across checkpoints.

    Returns the best mean as a policy and one history row per generation.
    """
    dim_a, dim_o = net.gate_dimension, pol.observation_dimension(net)
    d = dim_a * dim_o
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if resume:
        if ckpt is None or not (ckpt / "snes.ckpt").is_file():
            raise FileNotFoundError(f"no checkpoint to resume in {ckpt}")
        state = _load_state(ckpt, net)
        if state.dist.dim != d:
            raise DimensionError(f"checkpoint dimension {state.dist.dim} does not match net ({d})")
    else:
        dist = snes.SearchDistribution.isotropic(np.zeros(d), config.sigma0)
        initial = policy_accuracy(net, PolicyParams.from_flat(dist.mu, net), val, config.steps) if val is not None and len(val) else float("nan")
        state = TrainState(dist, dist.mu.copy(), initial, initial)
        log.info("initial validation accuracy %.4f", initial)

    n = min(config.batch_size, len(train))
    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    stop_at = config.max_generations
    if max_generations is not None:
        stop_at = min(stop_at, state.dist.generation + max_generations)
    try:
        while not state.stopped and state.dist.generation < stop_at:
            g = state.dist.generation
            idx = RngStream(config.seed, 2 * g).permutation(len(train))[:n]
            images, labels = train.images[idx], train.labels[idx]
            batch = snes.sample(state.dist, config.population, RngStream(config.seed, 2 * g + 1))
            base = base_pass(net, images)

            def score(i):
                theta = PolicyParams.from_flat(batch.params[i], net)
                return evaluate_candidate(net, theta, images, labels, config, i, base)

            rng_i = range(config.population)
            records = list(pool.map(score, rng_i)) if pool else [score(i) for i in rng_i]
            totals = np.array([r.total for r in records])
            finite = np.isfinite(totals)
            costs = np.where(finite, totals, np.finfo(np.float64).max)
            state.dist = snes.update(state.dist, batch, costs)

            row = {
                "generation": g,
                "mean_cost": float(np.mean(totals[finite])) if finite.any() else float("nan"),
                "best_cost": float(np.min(totals[finite])) if finite.any() else float("nan"),
                "reg_mean": float(np.mean([r.regularization for r in records])),
                "val_acc": None,
            }
            done = state.dist.generation >= config.max_generations
            if val is not None and (state.dist.generation % config.val_interval == 0 or done):
                acc = policy_accuracy(net, PolicyParams.from_flat(state.dist.mu, net), val, config.steps)
                row["val_acc"] = acc
                if acc > state.best_val:
                    state.best_val, state.best_mu, state.bad_evals = acc, state.dist.mu.copy(), 0
                else:
                    state.bad_evals += 1
                    if state.bad_evals >= config.patience:
                        state.stopped = True
            elif val is None:
                state.best_mu = state.dist.mu.copy()
            state.history.append(row)
            log.info("generation %d: mean %.4f best %.4f val %s", g, row["mean_cost"], row["best_cost"], row["val_acc"])
            if ckpt is not None:
                _save_state(ckpt, state, config, net)
    finally:
        if pool:
            pool.shutdown()
    return PolicyParams.from_flat(state.best_mu, net), state.history


# --------------------------------------------------------------------------
# Gate probe


def knn_predict(train_x, train_y, test_x, k: int, classes: int, chunk: int = 64) -> np.ndarray:
    """Euclidean k-NN majority vote.

    All training points tied with the k-th smallest distance vote, and vote
    ties go to the lowest class index.
    """
    train_x, test_x = np.asarray(train_x, float), np.asarray(test_x, float)
    train_y = np.asarray(train_y, dtype=np.int64)
    if k > len(train_x):
        raise ValueError(f"k={k} exceeds the {len(train_x)} training samples")
    preds = np.empty(len(test_x), dtype=np.int64)
    for s in range(0, len(test_x), chunk):
        diff = test_x[s : s + chunk, None, :] - train_x[None, :, :]
        dist = np.sum(diff * diff, axis=-1)
        kth = np.partition(dist, k - 1, axis=1)[:, k - 1 : k]
        for r, row in enumerate(dist <= kth):
            preds[s + r] = np.argmax(np.bincount(train_y[row], minlength=classes))
    return preds


def logistic_regression(train_x, train_y, classes: int, tol: float = 1e-6, max_epochs: int = 500):
    """Multinomial logistic regression by full-batch gradient descent.

    Features are standardized with the training statistics. Returns a
    ``predict(x) -> labels`` function.
    """
    x = np.asarray(train_x, float)
    y = np.asarray(train_y, dtype=np.int64)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std == 0] = 1.0

    def design(a):
        z = (np.asarray(a, float) - mean) / std
        return np.hstack([z, np.ones((len(z), 1))])

    xd = design(x)
    onehot = np.eye(classes)[y]
    # Softmax cross-entropy has curvature at most half the top eigenvalue of X^T X / n.
    lip = 0.5 * np.linalg.eigvalsh(xd.T @ xd / len(xd))[-1]
    step = 1.0 / max(lip, 1e-12)
    w = np.zeros((xd.shape[1], classes))
    prev = np.inf
    for _ in range(max_epochs):
        logits = xd @ w
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        loss = -np.mean(np.log(np.maximum(p[np.arange(len(y)), y], 1e-300)))
        if abs(prev - loss) < tol:
            break
        prev = loss
        w -= step * (xd.T @ (p - onehot) / len(xd))

    def predict(a):
        return np.argmax(design(a) @ w, axis=1)

    return predict


@dataclass
class ProbeResult:
    knn: float
    logreg: float
    majority: float


def probe_gates(
    net: MaxoutNet, params: PolicyParams, train: Dataset, test: Dataset, steps: int, k: int = 15
) -> ProbeResult:
    """How well the final-pass gates alone predict the class."""
    if k > len(train):
        raise ValueError(f"k={k} exceeds the {len(train)} training samples")
    ftr = final_gates(net, params, train, steps)
    fte = final_gates(net, params, test, steps)
    knn = knn_predict(ftr, train.labels, fte, k, train.classes)
    lr = logistic_regression(ftr, train.labels, train.classes)(fte)
    majority = int(np.argmax(np.bincount(train.labels, minlength=train.classes)))
    return ProbeResult(
        float(np.mean(knn == test.labels)),
        float(np.mean(lr == test.labels)),
        float(np.mean(test.labels == majority)),
    )


# --------------------------------------------------------------------------
# Emphasis report


@dataclass
class EmphasisReport:
    rows: list[tuple[int, int, float, float, float]]  # layer, map, step 0, step T, delta
    probs: np.ndarray  # (T+1, C)


def emphasis_report(net: MaxoutNet, params: PolicyParams, image: np.ndarray, steps: int) -> EmphasisReport:
    """Per-map change of mean activation between pass 0 and pass ``steps``."""
    ep = run_episode(net, params, image, steps)
    rows = []
    for layer, sl in enumerate(net.gate_slices):
        start, last = ep.observations[0][sl], ep.observations[-1][sl]
        for j, (a, b) in enumerate(zip(start, last)):
            rows.append((layer, j, float(a), float(b), float(b - a)))
    return EmphasisReport(rows, ep.probs)


# --------------------------------------------------------------------------
# CSV output


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_history_csv(history: list[dict], path) -> None:
    keys = ["generation", "mean_cost", "best_cost", "reg_mean", "val_acc"]
    write_csv(path, keys, ([h[k] for k in keys] for h in history))


def write_dynamics_csv(accuracies: list[float], path) -> None:
    write_csv(path, ["step", "accuracy"], enumerate(accuracies))


def write_probe_csv(result: ProbeResult, path) -> None:
    write_csv(path, ["method", "accuracy"], [
        ("knn15", result.knn), ("logistic_regression", result.logreg), ("majority_class", result.majority),
    ])


def write_emphasis_csv(report: EmphasisReport, path, probs_path=None) -> None:
    write_csv(path, ["layer", "map", "mean_step0", "mean_stepT", "delta"], report.rows)
    if probs_path is not None:
        classes = report.probs.shape[-1]
        write_csv(probs_path, ["step"] + [f"class{c}" for c in range(classes)],
                  ([t, *map(float, p)] for t, p in enumerate(report.probs)))
