import numpy as np
import pytest

from openlid.corpus import Manifest
from openlid.errors import CorruptFileError, FormatError, NumericError
from openlid.features import FeatureMatrix
from openlid.models import (
    NAMED_CONFIGS, CrnnConfig, CrnnModel, TdnnConfig, TdnnModel, TrainConfig,
    build_crnn, build_named, build_tdnn, load_checkpoint, make_batches,
    predict_utterance, save_checkpoint, train,
)
from openlid.neural import max_rel_error, softmax_cross_entropy

from conftest import record

TINY_CRNN = CrnnConfig(conv_channels=(1, 1), lstm_hidden=4, attention_dim=4, n_classes=3)
TINY_TDNN = TdnnConfig(layer_dims=(8, 8, 8, 8, 16, 3))


def model_grad_oracle(model, x, label, seed, max_coords=60):
    """Finite differences through the whole model against its backward pass."""
    params = model.params()
    for p in params:
        p.zero_grad()

    def loss_fn(compute_grads=False):
        logits = model.forward(x)
        loss, dlogits = softmax_cross_entropy(logits, label)
        if compute_grads:
            model.backward(dlogits)
        return loss

    loss_fn(compute_grads=True)
    analytic = {p.name: p.grad.copy() for p in params}
    rng = np.random.default_rng(seed)
    return max_rel_error(loss_fn, params, rng, analytic=analytic, max_coords=max_coords)


class TestCrnnShapes:
    def test_bilstm_input_width_formula(self):
        for d in (5, 6, 9):
            model = build_crnn(CrnnConfig(conv_channels=(2, 4), lstm_hidden=3,
                                          attention_dim=4, n_classes=7), d, seed=0)
            assert model.lstm_input_dim == 4 * (d - 2) + d

    def test_forward_gives_finite_class_logits(self):
        model = build_crnn(CrnnConfig(), 6, seed=0)
        x = np.random.default_rng(0).standard_normal((20, 6)).astype(np.float32)
        logits = model.forward(x)
        assert logits.shape == (7,)
        assert np.all(np.isfinite(logits))

    def test_attention_weights_sum_to_one(self):
        model = build_crnn(TINY_CRNN, 5, seed=0)
        for seed in range(5):
            x = np.random.default_rng(seed).standard_normal((12, 5)).astype(np.float32)
            model.forward(x)
            assert abs(model.last_alpha.sum() - 1.0) <= 1e-6
            assert np.all(model.last_alpha >= 0.0)

    def test_too_few_frames_rejected(self):
        model = build_crnn(TINY_CRNN, 5, seed=0)
        with pytest.raises(ValueError, match="3"):
            model.forward(np.zeros((2, 5), dtype=np.float32))

    def test_too_narrow_input_rejected(self):
        with pytest.raises(ValueError):
            build_crnn(TINY_CRNN, 2, seed=0)

    def test_end_to_end_gradients(self):
        model = CrnnModel(TINY_CRNN, 5, seed=1, dtype=np.float64)
        x = np.random.default_rng(2).standard_normal((6, 5))
        err = model_grad_oracle(model, x, label=1, seed=3)
        assert err <= 1e-3


class TestTdnnShapes:
    def test_paper_receptive_field_is_15(self):
        model = build_tdnn(TdnnConfig(), 6, seed=0)
        assert model.min_frames == 15

    def test_minimum_enforced_with_clear_error(self):
        model = build_tdnn(TdnnConfig(), 6, seed=0)
        with pytest.raises(ValueError, match="15"):
            model.forward(np.zeros((14, 6), dtype=np.float32))

    def test_exactly_minimum_gives_one_frame(self):
        model = build_tdnn(TINY_TDNN, 5, seed=0)
        model.forward(np.random.default_rng(0).standard_normal((15, 5)).astype(np.float32))
        assert model.last_frame_logits.shape[0] == 1
        assert model.output_frame_count(15) == 1

    def test_hundred_frames_give_86(self):
        model = build_tdnn(TINY_TDNN, 5, seed=0)
        assert model.output_frame_count(100) == 86

    def test_end_to_end_gradients(self):
        # seed chosen so every ReLU preactivation stays clear of the kink
        # under the +-1e-3 probes of the finite-difference oracle
        model = TdnnModel(TINY_TDNN, 5, seed=2, dtype=np.float64)
        for p in model.params():
            if p.name.endswith(".b"):
                p.value += 0.5
        x = np.random.default_rng(110).standard_normal((18, 5))
        err = model_grad_oracle(model, x, label=2, seed=3)
        assert err <= 1e-3

    def test_named_configs(self):
        assert NAMED_CONFIGS["tdnn-paper"].layer_dims == (512, 512, 512, 512, 1500, 7)
        assert NAMED_CONFIGS["tdnn-desk"].layer_dims == (64, 64, 64, 64, 128, 7)
        assert isinstance(NAMED_CONFIGS["crnn-paper"], CrnnConfig)
        with pytest.raises(ValueError, match="unknown model"):
            build_named("mlp", 6)


def plan_manifest(n_frames_by_id, lang="lang00"):
    return Manifest([
        record(uid, duration=1.0, lang=lang) for uid in n_frames_by_id
    ])


class TestMakeBatches:
    def _features(self, n_frames_by_id, dim=4):
        rng = np.random.default_rng(0)
        return {uid: FeatureMatrix(rng.standard_normal((t, dim)))
                for uid, t in n_frames_by_id.items()}

    def test_tail_kept_when_above_minimum(self):
        frames = {"a": 350}
        plan = make_batches(self._features(frames), plan_manifest(frames), 300, 4, 0,
                            min_frames=15)
        spans = [(start, end) for _, start, end, _ in plan.chunks]
        assert spans == [(0, 300), (300, 350)]

    def test_tail_below_minimum_dropped(self):
        frames = {"a": 310}
        plan = make_batches(self._features(frames), plan_manifest(frames), 300, 4, 0,
                            min_frames=15)
        assert [(s, e) for _, s, e, _ in plan.chunks] == [(0, 300)]

    def test_short_utterance_skipped_with_counter(self):
        frames = {"a": 10, "b": 40}
        plan = make_batches(self._features(frames), plan_manifest(frames), 300, 4, 0,
                            min_frames=15)
        assert plan.skipped == 1
        assert [c[0] for c in plan.chunks] == ["b"]

    def test_same_seed_same_order(self):
        frames = {f"u{i}": 60 for i in range(20)}
        feats = self._features(frames)
        manifest = plan_manifest(frames)
        a = make_batches(feats, manifest, 30, 4, seed=5, min_frames=15)
        b = make_batches(feats, manifest, 30, 4, seed=5, min_frames=15)
        order_a = [id(batch) and tuple((x.shape, l) for x, l in batch) for batch in a.epoch(2)]
        order_b = [id(batch) and tuple((x.shape, l) for x, l in batch) for batch in b.epoch(2)]
        assert order_a == order_b

    def test_epochs_shuffle_differently(self):
        frames = {f"u{i}": 31 for i in range(40)}
        feats = self._features(frames)
        plan = make_batches(feats, plan_manifest(frames), 31, 40, seed=5, min_frames=15)
        first = [l for _, l in next(iter(plan.epoch(0)))]
        ids_epoch0 = [c for batch in plan.epoch(0) for c in (x.sum() for x, _ in batch)]
        ids_epoch1 = [c for batch in plan.epoch(1) for c in (x.sum() for x, _ in batch)]
        assert ids_epoch0 != ids_epoch1

    def test_labels_index_sorted_class_names(self):
        manifest = Manifest([
            record("a", lang="zz"), record("b", lang="aa"), record("c", lang="mm"),
        ])
        feats = self._features({"a": 40, "b": 40, "c": 40})
        plan = make_batches(feats, manifest, 40, 4, 0, min_frames=15)
        assert plan.class_names == ("aa", "mm", "zz")
        by_id = {uid: label for uid, _, _, label in plan.chunks}
        assert by_id == {"a": 2, "b": 0, "c": 1}

    def test_chunk_below_model_minimum_rejected(self):
        with pytest.raises(ValueError, match="minimum"):
            make_batches({}, Manifest(), 10, 4, 0, min_frames=15)


def separable_plan(n_classes=2, dim=5, per_class=6, frames=40, seed=0):
    rng = np.random.default_rng(seed)
    feats, records = {}, []
    for c in range(n_classes):
        center = np.zeros(dim)
        center[c] = 3.0
        for i in range(per_class):
            uid = f"l{c}_u{i}"
            feats[uid] = FeatureMatrix(center + 0.3 * rng.standard_normal((frames, dim)))
            records.append(record(uid, duration=1.0, lang=f"lang{c:02d}"))
    return feats, Manifest(records)


class TestTrain:
    def test_loss_descends_on_separable_data(self):
        feats, manifest = separable_plan()
        model = build_tdnn(TdnnConfig(layer_dims=(8, 8, 8, 8, 16, 2)), 5, seed=0)
        plan = make_batches(feats, manifest, 40, 4, seed=0, min_frames=model.min_frames)
        history = train(model, plan, TrainConfig(epochs=12, learning_rate=0.01, seed=0))
        assert history[-1] < history[0]

    def test_zero_learning_rate_is_fixed_point(self):
        feats, manifest = separable_plan()
        model = build_tdnn(TINY_TDNN, 5, seed=0)
        plan = make_batches(feats, manifest, 40, 4, seed=0, min_frames=model.min_frames)
        before = [p.value.copy() for p in model.params()]
        train(model, plan, TrainConfig(epochs=2, learning_rate=0.0, seed=0))
        for p, b in zip(model.params(), before):
            assert np.array_equal(p.value, b)

    def test_same_seed_identical_history(self):
        feats, manifest = separable_plan()
        histories = []
        for _ in range(2):
            model = build_tdnn(TINY_TDNN, 5, seed=3)
            plan = make_batches(feats, manifest, 40, 4, seed=3, min_frames=model.min_frames)
            histories.append(train(model, plan, TrainConfig(epochs=3, seed=3)))
        assert histories[0] == histories[1]

    def test_nan_loss_aborts_with_coordinates(self):
        feats, manifest = separable_plan(per_class=2)
        bad = feats["l0_u0"].data.copy()  # bypass FeatureMatrix finite check
        bad[3, 2] = np.inf  # rides through the ReLU stack into the logits
        feats["l0_u0"] = bad
        model = build_tdnn(TINY_TDNN, 5, seed=0)
        plan = make_batches(feats, manifest, 40, 4, seed=0, min_frames=model.min_frames)
        with np.errstate(invalid="ignore"), pytest.raises(NumericError, match=r"epoch 0, batch 0"):
            train(model, plan, TrainConfig(epochs=1, seed=0))

    def test_repeated_batch_monotone_after_epoch_2(self):
        for seed in range(5):
            feats, manifest = separable_plan(per_class=2, seed=seed)
            model = build_tdnn(TINY_TDNN, 5, seed=seed)
            plan = make_batches(feats, manifest, 40, 8, seed=seed, min_frames=model.min_frames)
            history = train(model, plan, TrainConfig(epochs=8, learning_rate=0.01, seed=seed))
            diffs = np.diff(history[1:])
            assert np.all(diffs <= 1e-9), (seed, history)


class TestPredict:
    def test_probabilities_sum_to_one(self):
        model = build_tdnn(TINY_TDNN, 5, seed=0)
        x = np.random.default_rng(0).standard_normal((30, 5)).astype(np.float32)
        probs = predict_utterance(model, x)
        assert probs.shape == (3,)
        assert abs(probs.sum() - 1.0) <= 1e-6
        assert np.all(probs > 0) and np.all(probs < 1)

    def test_periodic_duplication_keeps_mean_pooling_fixed(self):
        # period 14 divides the receptive field minus one, so valid output
        # frames cover whole periods and the time mean is unchanged
        model = build_tdnn(TINY_TDNN, 5, seed=0)
        base = np.random.default_rng(1).standard_normal((14, 5)).astype(np.float32)
        once = predict_utterance(model, np.tile(base, (3, 1)))
        twice = predict_utterance(model, np.tile(base, (6, 1)))
        assert np.max(np.abs(once - twice)) <= 1e-5

    def test_too_short_input_names_minimum(self):
        model = build_tdnn(TINY_TDNN, 5, seed=0)
        with pytest.raises(ValueError, match="15"):
            predict_utterance(model, np.zeros((10, 5), dtype=np.float32))

    def test_overfit_single_utterance(self):
        rng = np.random.default_rng(0)
        x = FeatureMatrix(rng.standard_normal((40, 5)))
        manifest = Manifest([record("only", duration=1.0, lang="lang01")])
        feats = {"only": x}
        model = build_tdnn(TdnnConfig(layer_dims=(8, 8, 8, 8, 16, 3)), 5, seed=0)
        plan = make_batches(feats, manifest, 40, 1, seed=0,
                            min_frames=model.min_frames, class_names=["lang00", "lang01", "lang02"])
        train(model, plan, TrainConfig(epochs=30, learning_rate=0.05, momentum=0.9, seed=0))
        probs = predict_utterance(model, x)
        assert int(np.argmax(probs)) == 1


class TestCheckpoint:
    def _trained_model(self, seed=0):
        model = build_tdnn(TINY_TDNN, 5, seed=seed)
        return model

    def test_roundtrip_predictions_bitwise(self, tmp_path):
        model = self._trained_model()
        x = np.random.default_rng(0).standard_normal((25, 5)).astype(np.float32)
        want = predict_utterance(model, x)
        path = save_checkpoint(model, tmp_path / "m.lidm",
                               train_meta={"seed": 0, "loss_history": [1.0, 0.5]})
        loaded, header = load_checkpoint(path)
        assert header["train_meta"]["loss_history"] == [1.0, 0.5]
        got = predict_utterance(loaded, x)
        assert np.array_equal(want, got)
        for a, b in zip(model.params(), loaded.params()):
            assert np.array_equal(a.value, b.value)

    def test_crnn_roundtrip(self, tmp_path):
        model = build_crnn(TINY_CRNN, 5, seed=0)
        x = np.random.default_rng(0).standard_normal((9, 5)).astype(np.float32)
        want = predict_utterance(model, x)
        path = save_checkpoint(model, tmp_path / "m.lidm")
        loaded, _ = load_checkpoint(path)
        assert np.array_equal(want, predict_utterance(loaded, x))

    def test_wrong_magic(self, tmp_path):
        (tmp_path / "m.lidm").write_bytes(b"NOPE" + bytes(64))
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(tmp_path / "m.lidm")

    def test_truncated_blob_no_partial_model(self, tmp_path):
        model = self._trained_model()
        path = save_checkpoint(model, tmp_path / "m.lidm")
        path.write_bytes(path.read_bytes()[:-1])
        with pytest.raises(CorruptFileError, match="truncated"):
            load_checkpoint(path)

    def test_kind_header_mismatch(self, tmp_path):
        model = self._trained_model()
        path = save_checkpoint(model, tmp_path / "m.lidm")
        blob = bytearray(path.read_bytes())
        blob[8] = 0  # claim crnn while the JSON header still says tdnn
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="kind"):
            load_checkpoint(path)

    def test_save_is_deterministic(self, tmp_path):
        model = self._trained_model()
        p1 = save_checkpoint(model, tmp_path / "a.lidm", train_meta={"seed": 1})
        p2 = save_checkpoint(model, tmp_path / "b.lidm", train_meta={"seed": 1})
        assert p1.read_bytes() == p2.read_bytes()
