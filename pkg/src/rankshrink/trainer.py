"""Synthetic sequence data and desk-scale supervised training.

The data generator samples a first-order symbol chain, holds each symbol for
a random segment length, and emits Gaussian frames around per-symbol means.
Training is plain momentum SGD on mean frame cross-entropy with exponential
learning-rate decay and global-norm gradient clipping; everything is
deterministic given the seeds.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import RejectedInputError, TrainingFailureError
from .nnet.network import (
    Params,
    copy_params,
    frame_accuracy,
    init_params,
    loss_and_gradients,
    param_arrays,
)
from .nnet.spec import NetworkSpec

DATASET_FORMAT_VERSION = 1


@dataclass(frozen=True)
class SyntheticTask:
    """Generative model for labelled frame sequences.

    ``means`` is (num_symbols, feature_dim); ``variances`` one scalar per
    symbol. Frames are ``means[s] + noise_scale * sqrt(variances[s]) * N(0, I)``.
    ``transition`` is row-stochastic over symbols; segment lengths are uniform
    in [min_segment, max_segment].
    """

    num_symbols: int
    feature_dim: int
    means: np.ndarray
    variances: np.ndarray
    transition: np.ndarray
    min_segment: int = 3
    max_segment: int = 8
    noise_scale: float = 0.5
    seed: int = 0

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        variances = np.asarray(self.variances, dtype=np.float64)
        transition = np.asarray(self.transition, dtype=np.float64)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "variances", variances)
        object.__setattr__(self, "transition", transition)
        if means.shape != (self.num_symbols, self.feature_dim):
            raise RejectedInputError(
                f"means must be ({self.num_symbols}, {self.feature_dim})")
        if variances.shape != (self.num_symbols,) or np.any(variances < 0):
            raise RejectedInputError("variances must be non-negative, one per symbol")
        if transition.shape != (self.num_symbols, self.num_symbols):
            raise RejectedInputError("transition must be square over symbols")
        if np.any(transition < 0) or np.any(np.abs(transition.sum(axis=1) - 1.0) > 1e-12):
            raise RejectedInputError("transition rows must sum to 1 within 1e-12")
        if not 1 <= self.min_segment <= self.max_segment:
            raise RejectedInputError("segment lengths must satisfy 1 <= min <= max")
        if self.noise_scale < 0:
            raise RejectedInputError("noise_scale must be non-negative")


def standard_task(num_symbols: int = 8, feature_dim: int = 20, seed: int = 0,
                  noise_scale: float = 0.5, mean_scale: float = 2.0,
                  min_segment: int = 3, max_segment: int = 8) -> SyntheticTask:
    """Task with well-separated random means and no symbol self-transitions."""
    rng = np.random.default_rng(seed)
    means = mean_scale * rng.standard_normal((num_symbols, feature_dim))
    variances = np.ones(num_symbols)
    if num_symbols > 1:
        transition = np.full((num_symbols, num_symbols), 1.0 / (num_symbols - 1))
        np.fill_diagonal(transition, 0.0)
    else:
        transition = np.ones((1, 1))
    return SyntheticTask(
        num_symbols=num_symbols, feature_dim=feature_dim, means=means,
        variances=variances, transition=transition, min_segment=min_segment,
        max_segment=max_segment, noise_scale=noise_scale, seed=seed,
    )


@dataclass(frozen=True)
class Sequence:
    frames: np.ndarray   # (T, feature_dim)
    labels: np.ndarray   # (T,) int32 per-frame symbol
    symbols: np.ndarray  # (S,) int32 segment-level symbol sequence


@dataclass
class Dataset:
    task: SyntheticTask
    sequences: list[Sequence]

    @property
    def feature_dim(self) -> int:
        return self.task.feature_dim

    @property
    def num_symbols(self) -> int:
        return self.task.num_symbols

    def pairs(self):
        return [(s.frames, s.labels) for s in self.sequences]

    def total_frames(self) -> int:
        return sum(s.frames.shape[0] for s in self.sequences)


def generate(task: SyntheticTask, num_sequences: int, frames_per_sequence: int) -> Dataset:
    """Sample a dataset; bit-identical for identical task parameters."""
    if num_sequences < 1 or frames_per_sequence < 1:
        raise RejectedInputError("num_sequences and frames_per_sequence must be positive")
    rng = np.random.default_rng(task.seed)
    stds = np.sqrt(task.variances)
    sequences = []
    for _ in range(num_sequences):
        labels = np.empty(frames_per_sequence, dtype=np.int32)
        segments = []
        pos = 0
        symbol = int(rng.integers(task.num_symbols))
        while pos < frames_per_sequence:
            length = int(rng.integers(task.min_segment, task.max_segment + 1))
            length = min(length, frames_per_sequence - pos)
            labels[pos:pos + length] = symbol
            segments.append(symbol)
            pos += length
            symbol = int(rng.choice(task.num_symbols, p=task.transition[symbol]))
        noise = rng.standard_normal((frames_per_sequence, task.feature_dim))
        frames = task.means[labels] + task.noise_scale * stds[labels, None] * noise
        sequences.append(Sequence(
            frames=frames, labels=labels, symbols=np.asarray(segments, dtype=np.int32)))
    return Dataset(task=task, sequences=sequences)


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch_size: int = 8
    learning_rate: float = 0.05
    lr_decay: float = 0.999
    momentum: float = 0.9
    clip_norm: float = 5.0
    seed: int = 0
    eval_every: int = 50

    def __post_init__(self):
        if self.steps < 0:
            raise RejectedInputError("steps must be >= 0")
        if self.batch_size < 1 or self.eval_every < 1:
            raise RejectedInputError("batch_size and eval_every must be positive")
        if not (self.learning_rate >= 0 and 0 < self.lr_decay <= 1.0):
            raise RejectedInputError("learning_rate must be >= 0 and lr_decay in (0, 1]")
        if not 0 <= self.momentum < 1:
            raise RejectedInputError("momentum must be in [0, 1)")
        if not (np.isfinite(self.clip_norm) and self.clip_norm > 0):
            raise RejectedInputError("clip_norm must be positive and finite")


@dataclass
class TrainResult:
    params: Params
    history: list[tuple[int, float]]  # (step, mean dataset loss)
    diverged: bool = False


def _trimmed_targets(spec: NetworkSpec, labels: np.ndarray) -> np.ndarray:
    left, right = spec.context()
    return labels[left:len(labels) - right] if right else labels[left:]


def dataset_loss(params: Params, spec: NetworkSpec, dataset: Dataset) -> float:
    """Frame-weighted mean cross-entropy over the whole dataset."""
    total = 0.0
    frames_seen = 0
    for seq in dataset.sequences:
        targets = _trimmed_targets(spec, seq.labels)
        loss, _ = loss_and_gradients(params, spec, seq.frames, targets)
        total += loss * targets.shape[0]
        frames_seen += targets.shape[0]
    return total / frames_seen


def _clip_gradients(grads: Params, clip_norm: float) -> float:
    arrays = param_arrays(grads)
    total = 0.0
    for arr in arrays:
        total += float(np.sum(arr * arr))
    norm = float(np.sqrt(total))
    if norm > clip_norm:
        # Slight shave below the bound so the post-clip norm can never round
        # above it.
        scale = clip_norm / norm / (1.0 + 1e-12)
        for arr in arrays:
            arr *= scale
    return norm


def _check_dataset(spec: NetworkSpec, dataset: Dataset) -> None:
    if not dataset.sequences:
        raise RejectedInputError("dataset is empty")
    if dataset.feature_dim != spec.feature_dim:
        raise RejectedInputError(
            f"dataset feature_dim {dataset.feature_dim} != spec {spec.feature_dim}")
    if dataset.num_symbols != spec.num_targets:
        raise RejectedInputError(
            f"dataset has {dataset.num_symbols} symbols but spec expects "
            f"{spec.num_targets} targets")
    min_frames = spec.min_frames()
    for idx, seq in enumerate(dataset.sequences):
        if seq.frames.shape[0] < min_frames:
            raise RejectedInputError(
                f"sequence {idx} has {seq.frames.shape[0]} frames; the network "
                f"needs at least {min_frames}")


def _run_training(params: Params, spec: NetworkSpec, config: TrainConfig,
                  dataset: Dataset) -> TrainResult:
    rng = np.random.default_rng(config.seed)
    arrays = param_arrays(params)
    velocity = [np.zeros_like(a) for a in arrays]

    initial = dataset_loss(params, spec, dataset)
    history = [(0, initial)]
    last_finite = copy_params(params)
    high_loss_evals = 0

    for step in range(1, config.steps + 1):
        idx = rng.integers(0, len(dataset.sequences), size=config.batch_size)
        batch_grads = None
        batch_frames = 0
        batch_loss = 0.0
        for i in idx:
            seq = dataset.sequences[int(i)]
            targets = _trimmed_targets(spec, seq.labels)
            loss, grads = loss_and_gradients(params, spec, seq.frames, targets)
            weight = targets.shape[0]
            batch_loss += loss * weight
            batch_frames += weight
            garrs = param_arrays(grads)
            if batch_grads is None:
                batch_grads = grads
                for arr in garrs:
                    arr *= weight
            else:
                for acc, arr in zip(param_arrays(batch_grads), garrs):
                    acc += weight * arr
        batch_loss /= batch_frames
        if not np.isfinite(batch_loss):
            raise TrainingFailureError(
                f"training loss became non-finite at step {step}",
                checkpoint=last_finite, history=history)
        for arr in param_arrays(batch_grads):
            arr /= batch_frames
        _clip_gradients(batch_grads, config.clip_norm)

        lr = config.learning_rate * (config.lr_decay ** (step - 1))
        for weight_arr, vel, grad in zip(arrays, velocity, param_arrays(batch_grads)):
            vel *= config.momentum
            vel -= lr * grad
            weight_arr += vel

        if step % config.eval_every == 0 or step == config.steps:
            loss = dataset_loss(params, spec, dataset)
            history.append((step, loss))
            if not np.isfinite(loss):
                raise TrainingFailureError(
                    f"evaluation loss became non-finite at step {step}",
                    checkpoint=last_finite, history=history)
            if loss > 10.0 * initial:
                high_loss_evals += 1
                if high_loss_evals >= 3:
                    raise TrainingFailureError(
                        f"loss exceeded 10x the initial value for 3 consecutive "
                        f"evaluations (step {step})",
                        checkpoint=last_finite, history=history)
            else:
                high_loss_evals = 0
                last_finite = copy_params(params)
    return TrainResult(params=params, history=history)


def train(spec: NetworkSpec, config: TrainConfig, dataset: Dataset) -> TrainResult:
    """Train from random initialization (init seed = ``config.seed``)."""
    _check_dataset(spec, dataset)
    params = init_params(spec, config.seed)
    return _run_training(params, spec, config, dataset)


def fine_tune(params: Params, spec: NetworkSpec, config: TrainConfig,
              dataset: Dataset) -> TrainResult:
    """Continue training from existing parameters (left untouched)."""
    _check_dataset(spec, dataset)
    return _run_training(copy_params(params), spec, config, dataset)


def accuracy(params: Params, spec: NetworkSpec, dataset: Dataset) -> float:
    """Frame accuracy against context-trimmed labels."""
    return frame_accuracy(params, spec, dataset.pairs())


@dataclass
class StabilityRecord:
    name: str
    diverged: bool
    divergence_step: int | None
    plateaued: bool
    final_loss: float
    history: list[tuple[int, float]]


def compare_stability(specs: dict[str, NetworkSpec], config: TrainConfig,
                      dataset: Dataset) -> dict[str, StabilityRecord]:
    """Train each candidate on identical data/seed and log failure modes.

    A run plateaus when its final loss has not improved at least 5% over the
    initial loss. Divergence is whatever ``train`` raises on.
    """
    out = {}
    for name, spec in specs.items():
        try:
            result = train(spec, config, dataset)
            history = result.history
            diverged = False
            step = None
        except TrainingFailureError as exc:
            history = exc.history
            diverged = True
            step = history[-1][0] if history else None
        initial = history[0][1]
        final = history[-1][1]
        plateaued = not diverged and final > 0.95 * initial
        out[name] = StabilityRecord(
            name=name, diverged=diverged, divergence_step=step,
            plateaued=plateaued, final_loss=final, history=history)
    return out


# Dataset files: one JSON header line, then per-sequence binary blocks of
# little-endian float64 frames, int32 frame labels and int32 segment symbols.

def save_dataset(dataset: Dataset, path) -> None:
    task = dataset.task
    header = {
        "format_version": DATASET_FORMAT_VERSION,
        "num_sequences": len(dataset.sequences),
        "task": {
            "num_symbols": task.num_symbols,
            "feature_dim": task.feature_dim,
            "means": task.means.tolist(),
            "variances": task.variances.tolist(),
            "transition": task.transition.tolist(),
            "min_segment": task.min_segment,
            "max_segment": task.max_segment,
            "noise_scale": task.noise_scale,
            "seed": task.seed,
        },
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        for seq in dataset.sequences:
            fh.write(struct.pack("<II", seq.frames.shape[0], seq.symbols.shape[0]))
            fh.write(np.ascontiguousarray(seq.frames, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(seq.labels, dtype="<i4").tobytes())
            fh.write(np.ascontiguousarray(seq.symbols, dtype="<i4").tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise RejectedInputError(f"malformed dataset header: {exc}") from exc
        if header.get("format_version") != DATASET_FORMAT_VERSION:
            raise RejectedInputError(
                f"unsupported dataset format_version {header.get('format_version')!r}")
        t = header["task"]
        task = SyntheticTask(
            num_symbols=int(t["num_symbols"]), feature_dim=int(t["feature_dim"]),
            means=np.asarray(t["means"]), variances=np.asarray(t["variances"]),
            transition=np.asarray(t["transition"]),
            min_segment=int(t["min_segment"]), max_segment=int(t["max_segment"]),
            noise_scale=float(t["noise_scale"]), seed=int(t["seed"]))
        feature_dim = task.feature_dim
        sequences = []
        for _ in range(int(header["num_sequences"])):
            raw = fh.read(8)
            if len(raw) != 8:
                raise RejectedInputError("dataset file truncated")
            t_len, s_len = struct.unpack("<II", raw)
            frames = np.frombuffer(fh.read(8 * t_len * feature_dim), dtype="<f8")
            frames = frames.astype(np.float64).reshape(t_len, feature_dim)
            labels = np.frombuffer(fh.read(4 * t_len), dtype="<i4").astype(np.int32)
            symbols = np.frombuffer(fh.read(4 * s_len), dtype="<i4").astype(np.int32)
            if labels.shape[0] != t_len or symbols.shape[0] != s_len:
                raise RejectedInputError("dataset file truncated")
            sequences.append(Sequence(frames=frames, labels=labels, symbols=symbols))
    return Dataset(task=task, sequences=sequences)


def stationary_distribution(transition: np.ndarray, iterations: int = 10_000) -> np.ndarray:
    """Stationary distribution of a row-stochastic matrix by power iteration."""
    transition = np.asarray(transition, dtype=np.float64)
    pi = np.full(transition.shape[0], 1.0 / transition.shape[0])
    for _ in range(iterations):
        nxt = pi @ transition
        if np.max(np.abs(nxt - pi)) < 1e-15:
            pi = nxt
            break
        pi = nxt
    return pi / pi.sum()
