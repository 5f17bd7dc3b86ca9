import numpy as np
import pytest

from rankshrink.compress import SvdPolicy, compress_network
from rankshrink.errors import RejectedInputError, TrainingFailureError
from rankshrink.nnet import (
    NetworkSpec,
    init_params,
    make_output,
    make_tdnn,
    toy_spec,
)
from rankshrink.nnet.network import param_arrays
from rankshrink.trainer import (
    SyntheticTask,
    TrainConfig,
    accuracy,
    compare_stability,
    dataset_loss,
    fine_tune,
    generate,
    load_dataset,
    save_dataset,
    standard_task,
    train,
    _clip_gradients,
)

from oracles import logistic_regression_accuracy, power_iteration_stationary


def tiny_task(**kwargs):
    defaults = dict(num_symbols=4, feature_dim=6, seed=0, noise_scale=0.3)
    defaults.update(kwargs)
    return standard_task(**defaults)


def linear_spec(feature_dim, num_targets):
    return NetworkSpec(feature_dim, (
        make_tdnn(feature_dim, 16, (0,)),
        make_output(16, num_targets),
    ), num_targets)


class TestGenerate:
    def test_deterministic_bit_identical(self):
        task = tiny_task()
        a = generate(task, 5, 40)
        b = generate(task, 5, 40)
        for sa, sb in zip(a.sequences, b.sequences):
            assert sa.frames.tobytes() == sb.frames.tobytes()
            assert np.array_equal(sa.labels, sb.labels)
            assert np.array_equal(sa.symbols, sb.symbols)

    def test_noise_free_data_is_nearest_mean_separable(self):
        task = tiny_task(noise_scale=0.0)
        dataset = generate(task, 10, 50)
        for seq in dataset.sequences:
            dists = np.linalg.norm(
                seq.frames[:, None, :] - task.means[None, :, :], axis=2)
            assert np.array_equal(dists.argmin(axis=1), seq.labels)

    def test_labels_consistent_with_segments(self):
        dataset = generate(tiny_task(), 20, 60)
        for seq in dataset.sequences:
            changes = np.flatnonzero(np.diff(seq.labels)) + 1
            boundaries = np.concatenate([[0], changes])
            # The no-self-transition default means segments == label runs.
            assert np.array_equal(seq.labels[boundaries], seq.symbols)

    def test_symbol_marginals_match_stationary_distribution(self):
        rng = np.random.default_rng(99)
        raw = rng.uniform(0.1, 1.0, size=(5, 5))
        transition = raw / raw.sum(axis=1, keepdims=True)
        task = SyntheticTask(
            num_symbols=5, feature_dim=4,
            means=rng.standard_normal((5, 4)), variances=np.ones(5),
            transition=transition, min_segment=2, max_segment=6,
            noise_scale=0.2, seed=11)
        frames_per_seq = 1000
        dataset = generate(task, 100, frames_per_seq)  # 1e5 frames
        labels = np.concatenate([s.labels for s in dataset.sequences])
        counts = np.bincount(labels, minlength=5)
        freq = counts / labels.shape[0]
        pi = power_iteration_stationary(transition)
        num_segments = sum(len(s.symbols) for s in dataset.sequences)
        lengths = np.arange(task.min_segment, task.max_segment + 1)
        length_factor = np.mean(lengths**2) / np.mean(lengths) ** 2
        sigma = np.sqrt(length_factor * pi * (1 - pi) / num_segments)
        assert np.all(np.abs(freq - pi) <= 3.0 * sigma)

    def test_rejects_bad_sizes(self):
        with pytest.raises(RejectedInputError):
            generate(tiny_task(), 0, 10)

    def test_transition_rows_validated(self):
        task = tiny_task()
        bad = task.transition.copy()
        bad[0, 0] += 0.5
        with pytest.raises(RejectedInputError):
            SyntheticTask(num_symbols=task.num_symbols, feature_dim=task.feature_dim,
                          means=task.means, variances=task.variances,
                          transition=bad)


class TestDatasetIO:
    def test_round_trip_bit_exact(self, tmp_path):
        dataset = generate(tiny_task(), 7, 30)
        path = tmp_path / "data.bin"
        save_dataset(dataset, path)
        loaded = load_dataset(path)
        assert loaded.task.num_symbols == dataset.task.num_symbols
        assert np.array_equal(loaded.task.means, dataset.task.means)
        assert np.array_equal(loaded.task.transition, dataset.task.transition)
        assert len(loaded.sequences) == 7
        for a, b in zip(dataset.sequences, loaded.sequences):
            assert a.frames.tobytes() == b.frames.tobytes()
            assert np.array_equal(a.labels, b.labels)
            assert np.array_equal(a.symbols, b.symbols)

    def test_truncated_file_rejected(self, tmp_path):
        dataset = generate(tiny_task(), 3, 30)
        path = tmp_path / "data.bin"
        save_dataset(dataset, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-40])
        with pytest.raises(RejectedInputError):
            load_dataset(path)


class TestTrain:
    def test_zero_learning_rate_is_identity(self):
        task = tiny_task()
        dataset = generate(task, 4, 30)
        spec = linear_spec(task.feature_dim, task.num_symbols)
        config = TrainConfig(steps=20, learning_rate=0.0, seed=3, eval_every=10)
        result = train(spec, config, dataset)
        reference = init_params(spec, 3)
        for mine, theirs in zip(param_arrays(result.params), param_arrays(reference)):
            assert mine.tobytes() == theirs.tobytes()

    def test_separable_task_reaches_high_accuracy(self):
        task = tiny_task(noise_scale=0.2)
        dataset = generate(task, 30, 40)
        # Independent check that the task is linearly separable to >95%.
        frames = np.concatenate([s.frames for s in dataset.sequences])
        labels = np.concatenate([s.labels for s in dataset.sequences])
        assert logistic_regression_accuracy(frames, labels, task.num_symbols) > 0.95
        spec = linear_spec(task.feature_dim, task.num_symbols)
        config = TrainConfig(steps=500, batch_size=4, learning_rate=0.1, seed=1)
        result = train(spec, config, dataset)
        assert accuracy(result.params, spec, dataset) > 0.95

    def test_loss_history_and_improvement(self):
        task = tiny_task()
        dataset = generate(task, 10, 30)
        spec = linear_spec(task.feature_dim, task.num_symbols)
        config = TrainConfig(steps=100, eval_every=20, learning_rate=0.1, seed=0)
        result = train(spec, config, dataset)
        steps = [s for s, _ in result.history]
        assert steps == [0, 20, 40, 60, 80, 100]
        assert result.history[-1][1] <= result.history[0][1]

    def test_initial_loss_near_log_num_symbols(self):
        task = standard_task(num_symbols=8, feature_dim=20, seed=5)
        dataset = generate(task, 10, 60)
        spec = toy_spec(20, 8, tdnn_dim=24, cell_dim=12, proj_dim=4)
        params = init_params(spec, 2)
        initial = dataset_loss(params, spec, dataset)
        assert abs(initial - np.log(8)) < 0.1 * np.log(8)

    def test_deterministic_given_seed(self):
        task = tiny_task()
        dataset = generate(task, 6, 30)
        spec = linear_spec(task.feature_dim, task.num_symbols)
        config = TrainConfig(steps=40, seed=9, eval_every=40)
        a = train(spec, config, dataset)
        b = train(spec, config, dataset)
        for mine, theirs in zip(param_arrays(a.params), param_arrays(b.params)):
            assert mine.tobytes() == theirs.tobytes()
        assert a.history == b.history

    def test_clip_contract(self):
        task = tiny_task()
        dataset = generate(task, 4, 30)
        spec = linear_spec(task.feature_dim, task.num_symbols)
        params = init_params(spec, 0)
        from rankshrink.nnet.network import loss_and_gradients
        seq = dataset.sequences[0]
        left, right = spec.context()
        targets = seq.labels[left:len(seq.labels) - right] if right else seq.labels[left:]
        _, grads = loss_and_gradients(params, spec, seq.frames, targets)
        clip = 1e-3
        pre_norm = _clip_gradients(grads, clip)
        assert pre_norm > clip
        post = np.sqrt(sum(float(np.sum(g * g)) for g in param_arrays(grads)))
        assert post <= clip

    def test_divergence_carries_checkpoint(self):
        task = tiny_task()
        dataset = generate(task, 4, 30)
        spec = linear_spec(task.feature_dim, task.num_symbols)
        config = TrainConfig(steps=200, learning_rate=1e6, clip_norm=1e12,
                             seed=0, eval_every=1)
        with np.errstate(all="ignore"), pytest.raises(TrainingFailureError) as info:
            train(spec, config, dataset)
        assert info.value.checkpoint is not None
        assert len(info.value.history) >= 1
        for arr in param_arrays(info.value.checkpoint):
            assert np.isfinite(arr).all()

    def test_spec_dataset_mismatch_rejected(self):
        task = tiny_task()
        dataset = generate(task, 4, 30)
        wrong = linear_spec(task.feature_dim + 1, task.num_symbols)
        with pytest.raises(RejectedInputError):
            train(wrong, TrainConfig(steps=1), dataset)


class TestFineTune:
    def test_zero_steps_identity(self):
        task = tiny_task()
        dataset = generate(task, 4, 30)
        spec = linear_spec(task.feature_dim, task.num_symbols)
        params = init_params(spec, 7)
        result = fine_tune(params, spec, TrainConfig(steps=0), dataset)
        for mine, theirs in zip(param_arrays(result.params), param_arrays(params)):
            assert mine.tobytes() == theirs.tobytes()
        assert result.params is not params  # caller's params untouched

    def test_lossless_compression_keeps_initial_loss(self):
        task = tiny_task()
        dataset = generate(task, 8, 30)
        spec = toy_spec(task.feature_dim, task.num_symbols,
                        tdnn_dim=10, cell_dim=8, proj_dim=3)
        result = train(spec, TrainConfig(steps=60, eval_every=30, seed=4), dataset)
        new_params, new_spec, _ = compress_network(
            result.params, spec,
            SvdPolicy(energy_threshold=1.0, shrinkage_threshold=10.0))
        before = dataset_loss(result.params, spec, dataset)
        after = dataset_loss(new_params, new_spec, dataset)
        assert abs(before - after) < 1e-6

    def test_fine_tune_improves_after_lossy_compression(self):
        task = tiny_task(noise_scale=0.3)
        dataset = generate(task, 20, 40)
        spec = toy_spec(task.feature_dim, task.num_symbols,
                        tdnn_dim=16, cell_dim=8, proj_dim=3)
        base = train(spec, TrainConfig(steps=250, eval_every=50, seed=2,
                                       learning_rate=0.08), dataset)
        new_params, new_spec, _ = compress_network(
            base.params, spec, SvdPolicy(energy_threshold=0.8,
                                         shrinkage_threshold=10.0))
        damaged = dataset_loss(new_params, new_spec, dataset)
        tuned = fine_tune(new_params, new_spec,
                          TrainConfig(steps=120, eval_every=40, seed=2,
                                      learning_rate=0.05), dataset)
        assert tuned.history[-1][1] <= damaged


class TestStabilityHarness:
    def test_records_both_candidates(self):
        task = tiny_task()
        dataset = generate(task, 8, 36)
        lstm_spec = toy_spec(task.feature_dim, task.num_symbols,
                             tdnn_dim=10, cell_dim=6, proj_dim=2)
        from rankshrink.nnet import make_factorized, make_relu
        plain = NetworkSpec(task.feature_dim, (
            make_factorized(task.feature_dim, 10, (-1, 0, 1), 4),
            make_relu(10),
            make_factorized(10, 10, (-3, 0, 3), 4),
            make_relu(10),
            make_output(10, task.num_symbols),
        ), task.num_symbols)
        config = TrainConfig(steps=40, eval_every=20, seed=0)
        records = compare_stability(
            {"interleaved-lstm": lstm_spec, "pure-factorized": plain},
            config, dataset)
        assert set(records) == {"interleaved-lstm", "pure-factorized"}
        for record in records.values():
            assert record.history
            assert isinstance(record.diverged, bool)
            assert isinstance(record.plateaued, bool)
