"""Similarity windows, LSTM forward oracle, training loop, checkpoints."""

import json

import numpy as np
import pytest

from sweep4d.breath import RespiratoryLabeling, ncc
from sweep4d.errors import ConfigError, DataError
from sweep4d.srnn import (
    BiLstmModel,
    SimilarityWindow,
    TrainConfig,
    bilstm_forward,
    build_windows,
    inference_windows,
    predict_states,
    train_srnn,
)
from sweep4d.volume import SliceStack


def make_stack(T=30, ny=6, nx=6, seed=0):
    rng = np.random.default_rng(seed)
    return SliceStack(
        data=rng.random((T, ny, nx)).astype(np.float32),
        dx=1.0,
        dy=1.0,
        z_positions=np.arange(T) * 0.1,
        acq_times=np.arange(T) * 0.49,
        slice_thickness=4.0,
    )


def sym_window(W, off, seed=0, jitter=0.0):
    """Valid similarity matrix: unit diagonal, constant off-diagonal."""
    rng = np.random.default_rng(seed)
    m = np.full((W, W), off)
    if jitter:
        noise = rng.normal(scale=jitter, size=(W, W))
        m += noise + noise.T
    np.fill_diagonal(m, 1.0)
    return np.clip(m, -1.0, 1.0 - 1e-9) if off < 1 else m


class TestSimilarityWindow:
    def test_rejects_nonsquare(self):
        with pytest.raises(DataError):
            SimilarityWindow(matrix=np.ones((3, 4)), last_slice_index=0)

    def test_rejects_asymmetric(self):
        m = sym_window(4, 0.5)
        m[0, 1] += 0.1
        with pytest.raises(DataError):
            SimilarityWindow(matrix=m, last_slice_index=0)

    def test_rejects_nonunit_diagonal(self):
        m = sym_window(4, 0.5)
        m[2, 2] = 0.9
        with pytest.raises(DataError):
            SimilarityWindow(matrix=m, last_slice_index=0)


class TestBuildWindows:
    def test_entries_are_pairwise_ncc(self):
        stack = make_stack(T=12)
        wins = build_windows(stack, None, W=12, stride=11)
        m = wins[0].matrix
        for i in range(12):
            for j in range(12):
                expected = 1.0 if i == j else ncc(stack.data[i], stack.data[j])
                assert m[i, j] == pytest.approx(expected, abs=1e-6)

    def test_count_and_labels_with_stride(self):
        stack = make_stack(T=30)
        states = np.arange(30) % 5
        lab = RespiratoryLabeling.from_states(states, 5, "ground_truth")
        wins = build_windows(stack, lab, W=10, stride=4)
        starts = list(range(0, 30 - 10 + 1, 4))
        assert len(wins) == len(starts)
        for w, s in zip(wins, starts):
            assert w.last_slice_index == s + 9
            assert w.label == states[s + 9]

    def test_default_stride_overlaps_one_slice(self):
        wins = build_windows(make_stack(T=30), None, W=10)
        assert [w.last_slice_index for w in wins] == [9, 18, 27]

    def test_short_stack_rejected(self):
        with pytest.raises(DataError):
            build_windows(make_stack(T=5), None, W=10)


class TestInferenceWindows:
    def test_full_windows_match_training_blocks(self):
        stack = make_stack(T=25)
        x = inference_windows(stack, W=8)
        assert x.shape == (25, 8, 8)
        ref = build_windows(stack, None, W=8, stride=1)
        for w in ref:
            np.testing.assert_allclose(x[w.last_slice_index], w.matrix,
                                       atol=1e-12)

    def test_start_windows_mirror_padded(self):
        stack = make_stack(T=25)
        x = inference_windows(stack, W=8)
        # window ending at slice 0 uses slices |−7..0| = 7..0
        idx = np.abs(np.arange(-7, 1))
        sub = stack.subset(np.sort(np.unique(idx)))
        full = inference_windows(sub, W=8)  # same slices, plain order
        m = x[0]
        assert m.shape == (8, 8)
        # mirrored window is the reversed-order gram of slices 0..7
        np.testing.assert_allclose(m, full[7][::-1, ::-1], atol=1e-12)


def unrolled_lstm_oracle(model, x):
    """Single-layer bidirectional LSTM written out in plain numpy."""
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    mu, sd = x.mean(), x.std()
    xs = (x - mu) / (sd + 1e-8)
    W = xs.shape[0]
    H = model.hidden
    outs = {}
    for direction, order in (("f", range(W)), ("b", range(W - 1, -1, -1))):
        Wx = model.params[f"l0{direction}_Wx"].data
        Wh = model.params[f"l0{direction}_Wh"].data
        b = model.params[f"l0{direction}_bias"].data
        h = np.zeros(H)
        c = np.zeros(H)
        hs = [None] * W
        for t in order:
            gates = xs[t] @ Wx + h @ Wh + b
            i, f, g, o = (sig(gates[:H]), sig(gates[H:2 * H]),
                          np.tanh(gates[2 * H:3 * H]), sig(gates[3 * H:]))
            c = f * c + i * g
            h = o * np.tanh(c)
            hs[t] = h
        outs[direction] = hs
    head_in = np.concatenate([outs["f"][-1], outs["b"][0]])
    return head_in @ model.params["head_W"].data + model.params["head_b"].data


class TestForward:
    def test_matches_hand_unrolled_oracle(self):
        model = BiLstmModel(input_dim=6, hidden=3, layers=1, num_states=4,
                            seed=5)
        m = sym_window(6, 0.4, seed=1, jitter=0.1)
        win = SimilarityWindow(matrix=m, last_slice_index=5)
        np.testing.assert_allclose(bilstm_forward(model, win),
                                   unrolled_lstm_oracle(model, m), atol=1e-10)

    def test_input_standardization_makes_forward_affine_invariant(self):
        model = BiLstmModel(input_dim=5, hidden=4, layers=2, num_states=3)
        x = np.random.default_rng(2).random((3, 5, 5))
        a = model.forward(x).data
        b = model.forward(2.5 * x - 0.7).data
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_row_order_matters(self):
        model = BiLstmModel(input_dim=8, hidden=4, layers=1, num_states=3)
        m = sym_window(8, 0.3, seed=3, jitter=0.15)
        a = model.forward(m[None]).data
        b = model.forward(m[::-1, ::-1].copy()[None]).data
        assert np.abs(a - b).max() > 1e-6

    def test_batch_equals_single(self):
        model = BiLstmModel(input_dim=5, hidden=3, layers=2, num_states=4)
        x = np.random.default_rng(4).random((4, 5, 5))
        batch = model.forward(x).data
        for i in range(4):
            np.testing.assert_allclose(model.forward(x[i:i + 1]).data[0],
                                       batch[i], atol=1e-10)

    def test_wrong_input_dim_rejected(self):
        model = BiLstmModel(input_dim=5, hidden=3, layers=1, num_states=2)
        with pytest.raises(DataError):
            model.forward(np.zeros((1, 4, 4)))


def toy_windows(n_per_class=20, W=6, seed=0):
    """Separable 2-class set built from synthetic slice vectors.

    Class 0 slices drift steadily (similarity decays with index distance);
    class 1 slices alternate between two poses (checkerboard similarity).
    The patterns differ in shape, not just offset, so they survive the
    model's per-window standardization.
    """
    rng = np.random.default_rng(seed)
    wins = []
    for i in range(n_per_class):
        for label in (0, 1):
            u = rng.normal(size=16)
            v = rng.normal(size=16)
            steps = np.arange(W) if label == 0 else np.arange(W) % 2
            z = u[None] + 0.5 * steps[:, None] * v[None]
            z += 0.02 * rng.normal(size=(W, 16))
            z /= np.linalg.norm(z, axis=1, keepdims=True)
            m = z @ z.T
            np.fill_diagonal(m, 1.0)
            wins.append(SimilarityWindow(matrix=np.clip(m, -1, 1),
                                         last_slice_index=W - 1 + i,
                                         label=label))
    return wins


class TestTraining:
    CFG = dict(num_states=2, window=6, hidden=8, layers=1, epochs=25,
               lr=0.05, seed=0)

    def test_learns_separable_toy_problem(self):
        model, hist = train_srnn(toy_windows(), TrainConfig(**self.CFG))
        assert hist["best_val_accuracy"] == 1.0
        x = np.stack([w.matrix for w in toy_windows(seed=99)])
        y = np.array([w.label for w in toy_windows(seed=99)])
        preds = np.argmax(model.forward(x).data, axis=1)
        assert np.mean(preds == y) >= 0.95

    def test_training_is_deterministic(self):
        _, h1 = train_srnn(toy_windows(), TrainConfig(**self.CFG))
        _, h2 = train_srnn(toy_windows(), TrainConfig(**self.CFG))
        assert h1["losses"] == h2["losses"]
        assert h1["val_accuracy"] == h2["val_accuracy"]

    def test_diverging_lr_is_halved(self):
        cfg = dict(self.CFG, lr=100.0, epochs=12, lr_probe_epochs=3,
                   max_lr_halvings=14)
        _, hist = train_srnn(toy_windows(n_per_class=6), TrainConfig(**cfg))
        assert len(hist["lr_sweep"]) > 1
        assert hist["lr"] < 100.0
        assert not hist["lr_sweep"][0]["stable"]

    def test_unrecoverable_lr_raises(self):
        from sweep4d.errors import NumericError

        cfg = dict(self.CFG, lr=1e6, epochs=6, lr_probe_epochs=3,
                   max_lr_halvings=1)
        with pytest.raises(NumericError):
            with np.errstate(over="ignore"):
                train_srnn(toy_windows(n_per_class=6), TrainConfig(**cfg))

    def test_unlabeled_windows_rejected(self):
        wins = build_windows(make_stack(T=12), None, W=6, stride=3)
        with pytest.raises(DataError):
            train_srnn(wins, TrainConfig(**self.CFG))

    def test_single_class_rejected(self):
        wins = [w for w in toy_windows() if w.label == 0]
        with pytest.raises(DataError):
            train_srnn(wins, TrainConfig(**self.CFG))

    def test_bad_config_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(lr=-1.0)
        with pytest.raises(ConfigError):
            TrainConfig(window=1)
        with pytest.raises(ConfigError):
            TrainConfig(lr_decay="linear")


class TestCheckpoint:
    def test_round_trip_preserves_predictions(self, tmp_path):
        model = BiLstmModel(input_dim=6, hidden=4, layers=2, num_states=3,
                            seed=7)
        model.save(tmp_path / "m")
        back = BiLstmModel.load(tmp_path / "m")
        x = np.random.default_rng(8).random((5, 6, 6))
        # weights are stored in 32-bit floats, so logits agree to that level
        np.testing.assert_allclose(back.forward(x).data,
                                   model.forward(x).data, atol=1e-5)
        for n, p in model.params.items():
            np.testing.assert_array_equal(
                back.params[n].data, p.data.astype("<f4").astype(np.float64))

    def test_missing_files_rejected(self, tmp_path):
        with pytest.raises(DataError):
            BiLstmModel.load(tmp_path / "absent")

    def test_version_mismatch_rejected(self, tmp_path):
        model = BiLstmModel(input_dim=4, hidden=2, layers=1, num_states=2)
        model.save(tmp_path / "m")
        meta = json.loads((tmp_path / "m.json").read_text())
        meta["version"] = 99
        (tmp_path / "m.json").write_text(json.dumps(meta))
        with pytest.raises(DataError):
            BiLstmModel.load(tmp_path / "m")

    def test_truncated_payload_rejected(self, tmp_path):
        model = BiLstmModel(input_dim=4, hidden=2, layers=1, num_states=2)
        model.save(tmp_path / "m")
        raw = (tmp_path / "m.f32").read_bytes()
        (tmp_path / "m.f32").write_bytes(raw[:-8])
        with pytest.raises(DataError):
            BiLstmModel.load(tmp_path / "m")


class TestPredictStates:
    def test_labels_every_slice_deterministically(self):
        model = BiLstmModel(input_dim=8, hidden=4, layers=1, num_states=5)
        stack = make_stack(T=20)
        lab1 = predict_states(model, stack, W=8)
        lab2 = predict_states(model, stack, W=8)
        assert lab1.T == 20
        assert lab1.source == "srnn"
        assert lab1.num_states == 5
        np.testing.assert_array_equal(lab1.states, lab2.states)
