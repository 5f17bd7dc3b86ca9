import numpy as np
import pytest

from rankshrink.errors import RejectedInputError
from rankshrink.nnet import (
    LayerKind,
    NetworkSpec,
    Model,
    backward,
    build_preset,
    forward,
    init_params,
    layer_flop_count,
    layer_names,
    layer_param_count,
    load_model,
    loss_and_gradients,
    make_factorized,
    make_lstmp,
    make_output,
    make_relu,
    make_tdnn,
    param_count,
    save_model,
    spec_from_dict,
    spec_to_dict,
    toy_spec,
    validate_params,
)
from rankshrink.nnet.network import (
    AffineParams,
    FactorizedAffineParams,
    _forward_all,
    _lstmp_forward,
    param_arrays,
)
from rankshrink import linalg

from oracles import finite_difference_gradients

rng = np.random.default_rng(7)


def small_lstm_tdnn(feature_dim=5, num_targets=4):
    layers = (
        make_tdnn(feature_dim, 6, (-1, 0, 1)),
        make_relu(6),
        make_lstmp(6, 5, 2, 2),
        make_output(4, num_targets),
    )
    return NetworkSpec(feature_dim=feature_dim, layers=layers, num_targets=num_targets)


class TestPresets:
    def test_baseline_first_layer(self):
        spec = build_preset("baseline", 60, 5968)
        first = spec.layers[0]
        assert first.input_dim == 300
        assert first.output_dim == 1024
        assert first.splice.offsets == (-2, -1, 0, 1, 2)

    def test_narrow_first_splice_variant(self):
        spec = build_preset("lstm-tdnn-1", 60, 5968)
        assert spec.layers[0].input_dim == 180
        assert spec.layers[0].splice.offsets == (-1, 0, 1)
        base = build_preset("baseline", 60, 5968)
        for mine, theirs in zip(spec.layers[1:], base.layers[1:]):
            assert mine == theirs

    def test_single_frame_tail_variant(self):
        spec = build_preset("lstm-tdnn-2", 60, 5968)
        tdnn = [l for l in spec.layers if l.kind is LayerKind.TDNN_AFFINE]
        assert tdnn[7].splice.offsets == (0,)
        assert tdnn[7].input_dim == 512
        assert tdnn[8].splice.offsets == (0,)
        assert tdnn[8].input_dim == 1024

    def test_layer_sequence_shape(self):
        spec = build_preset("baseline", 60, 5968)
        kinds = [l.kind for l in spec.layers if l.kind is not LayerKind.RELU]
        expected = ([LayerKind.TDNN_AFFINE] * 3 + [LayerKind.LSTMP]
                    + ([LayerKind.TDNN_AFFINE] * 2 + [LayerKind.LSTMP]) * 3
                    + [LayerKind.OUTPUT])
        assert kinds == expected

    def test_unknown_preset(self):
        with pytest.raises(RejectedInputError):
            build_preset("resnet", 60, 5968)

    def test_layer_names(self):
        spec = build_preset("baseline", 60, 5968)
        names = [n for n in layer_names(spec) if not n.startswith("relu")]
        assert names == ["td1", "td2", "td3", "ls1", "td4", "td5", "ls2",
                         "td6", "td7", "ls3", "td8", "td9", "ls4", "out"]


class TestCounts:
    def test_dense_affine(self):
        layer = make_tdnn(60, 1024, (-2, -1, 0, 1, 2))
        assert layer.input_dim == 300
        assert layer_param_count(layer) == 308_224
        assert layer_flop_count(layer) == 307_200

    def test_factorized_affine(self):
        layer = make_factorized(60, 1024, (-2, -1, 0, 1, 2), 127)
        assert layer_param_count(layer) == 169_172
        assert layer_flop_count(layer) == 127 * 300 + 127 * 1024  # 168,148

    def test_lstmp(self):
        layer = make_lstmp(1024, 1024, 256, 256)
        assert layer_param_count(layer) == 5_774_336

    def test_factorized_beats_dense_iff_under_threshold(self):
        m, n = 64, 96
        dense = make_tdnn(32, m, (-1, 0, 1))
        threshold = m * n / (m + n)  # 38.4
        for k in (8, 24, 38, 39, 60):
            fact = make_factorized(32, m, (-1, 0, 1), k)
            if k < threshold:
                assert layer_flop_count(fact) < layer_flop_count(dense)
            else:
                assert layer_flop_count(fact) >= layer_flop_count(dense)

    def test_full_rank_factorization_never_cheaper_in_params(self):
        spec = toy_spec(10, 6, tdnn_dim=12, cell_dim=8, proj_dim=3)
        full_rank = []
        for layer in spec.layers:
            if layer.kind is LayerKind.TDNN_AFFINE:
                k = min(layer.input_dim, layer.output_dim)
                full_rank.append(make_factorized(
                    layer.input_dim // layer.splice.width_factor,
                    layer.output_dim, layer.splice, k))
            else:
                full_rank.append(layer)
        fact_spec = NetworkSpec(spec.feature_dim, tuple(full_rank), spec.num_targets)
        assert param_count(fact_spec) >= param_count(spec)


class TestForward:
    def test_identity_affine_passes_input_through(self):
        spec = NetworkSpec(4, (make_tdnn(4, 4, (0,)), make_output(4, 3)), 3)
        params = init_params(spec, 0)
        params[0].weight = np.eye(4)
        params[0].bias = np.zeros(4)
        frames = rng.standard_normal((6, 4))
        _, caches = _forward_all(params, spec, frames)
        hidden = caches[1]["s"]  # input reaching the output layer
        assert np.max(np.abs(hidden - frames)) < 1e-15

    def test_output_is_log_softmax(self):
        spec = small_lstm_tdnn()
        params = init_params(spec, 1)
        logp = forward(params, spec, rng.standard_normal((9, 5)))
        assert logp.shape == (7, 4)
        assert np.allclose(np.exp(logp).sum(axis=1), 1.0, atol=1e-12)

    def test_factorized_full_rank_matches_dense(self):
        spec = NetworkSpec(6, (
            make_tdnn(6, 8, (-1, 0, 1)),
            make_relu(8),
            make_output(8, 5),
        ), 5)
        params = init_params(spec, 3)
        factors = linalg.svd(params[0].weight)
        a, b = linalg.truncate(factors, min(params[0].weight.shape))
        fact_spec = NetworkSpec(6, (
            make_factorized(6, 8, (-1, 0, 1), min(params[0].weight.shape)),
            make_relu(8),
            make_output(8, 5),
        ), 5)
        fact_params = [
            FactorizedAffineParams(factor_in=b, factor_out=a,
                                   bias=params[0].bias.copy()),
            None,
            AffineParams(params[2].weight.copy(), params[2].bias.copy()),
        ]
        frames = rng.standard_normal((10, 6))
        assert np.max(np.abs(forward(params, spec, frames)
                             - forward(fact_params, fact_spec, frames))) < 1e-6

    def test_lstmp_zero_input_zero_biases_gives_zero(self):
        layer = make_lstmp(4, 3, 2, 1)
        spec = NetworkSpec(4, (layer, make_output(3, 2)), 2)
        params = init_params(spec, 5)
        out, _ = _lstmp_forward(params[0], layer, np.zeros((8, 4)))
        assert np.max(np.abs(out)) == 0.0

    def test_too_short_input_names_context(self):
        spec = toy_spec(5, 3, tdnn_dim=6, cell_dim=4, proj_dim=2)
        params = init_params(spec, 0)
        with pytest.raises(RejectedInputError, match=str(spec.min_frames())):
            forward(params, spec, rng.standard_normal((spec.min_frames() - 1, 5)))

    def test_context_trimming_length(self):
        spec = toy_spec(5, 3, tdnn_dim=6, cell_dim=4, proj_dim=2)
        params = init_params(spec, 0)
        t = spec.min_frames() + 7
        logp = forward(params, spec, rng.standard_normal((t, 5)))
        assert logp.shape[0] == t - spec.total_context

    def test_batch_forward_matches_per_utterance(self):
        spec = toy_spec(5, 3, tdnn_dim=8, cell_dim=6, proj_dim=2)
        params = init_params(spec, 6)
        frames = rng.standard_normal((4, spec.min_frames() + 9, 5))
        from rankshrink.nnet.network import forward_batch
        batched = forward_batch(params, spec, frames)
        for b in range(4):
            single = forward(params, spec, frames[b])
            assert np.max(np.abs(batched[b] - single)) < 1e-10

    def test_batch_forward_validates_shape(self):
        spec = toy_spec(5, 3, tdnn_dim=8, cell_dim=6, proj_dim=2)
        params = init_params(spec, 6)
        from rankshrink.nnet.network import forward_batch
        with pytest.raises(RejectedInputError):
            forward_batch(params, spec, rng.standard_normal((4, 30, 6)))

    def test_dimension_chaining_random_specs(self):
        for seed in range(5):
            local = np.random.default_rng(seed)
            width = int(local.integers(3, 9))
            spec = toy_spec(width, int(local.integers(2, 6)),
                            tdnn_dim=int(local.integers(4, 10)),
                            cell_dim=int(local.integers(3, 8)),
                            proj_dim=int(local.integers(1, 3)))
            params = init_params(spec, seed)
            t = spec.min_frames() + int(local.integers(0, 10))
            logp = forward(params, spec, local.standard_normal((t, width)))
            assert logp.shape == (t - spec.total_context, spec.num_targets)


def relative_gradient_error(analytic, numeric):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = max(np.max(np.abs(a)), np.max(np.abs(n)), 1e-6)
        worst = max(worst, np.max(np.abs(a - n)) / denom)
    return worst


def check_gradients(spec, seed, step=1e-4, tol=1e-4):
    params = init_params(spec, seed)
    local = np.random.default_rng(seed + 1000)
    for entry, layer in zip(params, spec.layers):
        if layer.kind is LayerKind.LSTMP:
            entry.peepholes += 0.2 * local.standard_normal(entry.peepholes.shape)
    t = spec.min_frames() + 6
    frames = local.standard_normal((t, spec.feature_dim))
    targets = local.integers(0, spec.num_targets, size=t - spec.total_context)

    def loss_fn():
        loss, _ = loss_and_gradients(params, spec, frames, targets)
        return loss

    _, grads = loss_and_gradients(params, spec, frames, targets)
    numeric = finite_difference_gradients(loss_fn, param_arrays(params), step=step)
    return relative_gradient_error(param_arrays(grads), numeric)


class TestBackward:
    def test_three_layer_toy_matches_finite_differences(self):
        spec = NetworkSpec(4, (
            make_tdnn(4, 5, (-1, 0, 1)),
            make_relu(5),
            make_output(5, 3),
        ), 3)
        assert check_gradients(spec, seed=11) < 1e-4

    def test_lstmp_matches_finite_differences(self):
        spec = small_lstm_tdnn()
        assert check_gradients(spec, seed=3) < 1e-4

    def test_factorized_everything_matches_finite_differences(self):
        spec = NetworkSpec(4, (
            make_factorized(4, 6, (-1, 0, 1), 3),
            make_relu(6),
            make_lstmp(6, 4, 2, 1, gate_bottleneck_dim=3, proj_bottleneck_dim=2),
            make_output(3, 3, bottleneck_dim=2),
        ), 3)
        assert check_gradients(spec, seed=8) < 1e-4

    def test_saturated_softmax_gives_tiny_gradient(self):
        spec = NetworkSpec(3, (make_tdnn(3, 3, (0,)), make_output(3, 3)), 3)
        params = init_params(spec, 2)
        params[0].weight = np.eye(3)
        params[1].weight = 50.0 * np.eye(3)
        frames = np.eye(3)[rng.integers(0, 3, size=6)] + 0.01 * rng.standard_normal((6, 3))
        logp = forward(params, spec, frames)
        targets = logp.argmax(axis=1)
        grads = backward(params, spec, frames, targets)
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in param_arrays(grads)))
        assert norm < 1e-3

    def test_duplicated_batch_mean_gradient_unchanged(self):
        spec = small_lstm_tdnn()
        params = init_params(spec, 4)
        frames = rng.standard_normal((10, 5))
        targets = rng.integers(0, 4, size=10 - spec.total_context)
        _, grads = loss_and_gradients(params, spec, frames, targets)
        singles = param_arrays(grads)
        # frame-weighted mean over the duplicated pair
        doubled = [(g + g2) / 2.0 for g, g2 in zip(
            singles, param_arrays(loss_and_gradients(params, spec, frames, targets)[1]))]
        for a, b in zip(singles, doubled):
            assert np.max(np.abs(a - b)) < 1e-10

    def test_bad_target_index_rejected(self):
        spec = small_lstm_tdnn()
        params = init_params(spec, 0)
        frames = rng.standard_normal((10, 5))
        targets = np.full(10 - spec.total_context, 4)  # == num_targets
        with pytest.raises(RejectedInputError):
            backward(params, spec, frames, targets)

    def test_wrong_target_length_rejected(self):
        spec = small_lstm_tdnn()
        params = init_params(spec, 0)
        with pytest.raises(RejectedInputError):
            backward(params, spec, rng.standard_normal((10, 5)), np.zeros(10, dtype=int))


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        spec = toy_spec(6, 4, tdnn_dim=8, cell_dim=6, proj_dim=2)
        params = init_params(spec, 9)
        model = Model(spec=spec, params=params, seed=9, metadata={"steps": 12})
        path = tmp_path / "model.json"
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.seed == 9
        assert loaded.metadata == {"steps": 12}
        assert spec_to_dict(loaded.spec) == spec_to_dict(spec)
        for mine, theirs in zip(param_arrays(params), param_arrays(loaded.params)):
            assert mine.tobytes() == theirs.tobytes()

    def test_spec_dict_round_trip(self):
        for name in ("baseline", "lstm-tdnn-1", "lstm-tdnn-2", "svd-default"):
            spec = build_preset(name, 60, 5968)
            assert spec_from_dict(spec_to_dict(spec)) == spec

    def test_validate_params_catches_shape_drift(self):
        spec = small_lstm_tdnn()
        params = init_params(spec, 0)
        validate_params(params, spec)
        params[0].weight = params[0].weight[:, :-1]
        with pytest.raises(RejectedInputError):
            validate_params(params, spec)
