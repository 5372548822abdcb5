import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avaffect import autodiff as ad
from avaffect import training as tr
from avaffect.exceptions import DimensionError, InputError


def pred64(values):
    return ad.constant(np.asarray(values, dtype=np.float64))


class TestLoss:
    def test_bce_at_half_is_ln2(self):
        loss = tr.compute_loss(pred64([0.5]), [1.0], "binary")
        assert loss.item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_bce_point_nine(self):
        loss = tr.compute_loss(pred64([0.9]), [1.0], "binary")
        assert loss.item() == pytest.approx(-math.log(0.9), abs=1e-12)

    def test_mse_zero_when_equal(self):
        loss = tr.compute_loss(pred64([0.2, 0.7, 0.5]), [0.2, 0.7, 0.5], "traits")
        assert loss.item() == 0.0

    def test_mse_value(self):
        loss = tr.compute_loss(pred64([0.5, 0.5]), [0.0, 1.0], "traits")
        assert loss.item() == pytest.approx(0.25)

    def test_target_out_of_range_rejected(self):
        with pytest.raises(InputError):
            tr.compute_loss(pred64([0.5]), [1.5], "binary")

    def test_bce_gradient_matches_closed_form(self):
        p = ad.parameter(np.array([0.3]), dtype=np.float64)
        loss = tr.compute_loss(p, [1.0], "binary")
        ad.backward(loss)
        # d/dp of -log(p) = -1/p
        np.testing.assert_allclose(p.grad, [-1.0 / 0.3], rtol=1e-10)


class TestAdam:
    def test_zero_gradient_leaves_parameters_unchanged(self):
        p = ad.parameter(np.array([1.0, 2.0]), dtype=np.float64)
        opt = tr.Adam({"p": p}, lr=0.1)
        p.grad = np.zeros(2)
        opt.step()
        np.testing.assert_array_equal(p.data, [1.0, 2.0])

    def test_first_step_magnitude_is_lr(self):
        g = np.array([0.37, -5.0, 1e-3])
        p = ad.parameter(np.zeros(3), dtype=np.float64)
        opt = tr.Adam({"p": p}, lr=0.01)
        p.grad = g.copy()
        opt.step()
        expected = -0.01 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(p.data, expected, rtol=1e-12)
        np.testing.assert_allclose(np.abs(p.data), 0.01, rtol=1e-4)

    def test_sign_symmetric_updates_cancel(self):
        """Two parameters fed +g and -g drift symmetrically: their sum stays put."""
        g = np.array([0.7, 0.01, 3.0])
        p_plus = ad.parameter(np.ones(3), dtype=np.float64)
        p_minus = ad.parameter(np.ones(3), dtype=np.float64)
        opt = tr.Adam({"a": p_plus, "b": p_minus}, lr=0.05)
        for _ in range(2):
            p_plus.grad = g.copy()
            p_minus.grad = -g.copy()
            opt.step()
        drift = (p_plus.data - 1.0) + (p_minus.data - 1.0)
        assert np.max(np.abs(drift)) <= 1e-9

    def test_non_finite_gradient_rejected(self):
        p = ad.parameter(np.zeros(2), dtype=np.float64)
        opt = tr.Adam({"p": p}, lr=0.1)
        p.grad = np.array([np.nan, 0.0])
        with pytest.raises(InputError):
            opt.step()

    def test_functional_step_matches_reference(self):
        rng = np.random.default_rng(0)
        value = rng.normal(size=4)
        m = np.zeros(4)
        v = np.zeros(4)
        ref = value.copy()
        grads = [rng.normal(size=4) for _ in range(5)]
        # textbook reference
        m_ref, v_ref = np.zeros(4), np.zeros(4)
        for t, g in enumerate(grads, start=1):
            tr.adam_step(value, g, m, v, t, lr=0.01)
            m_ref = 0.9 * m_ref + 0.1 * g
            v_ref = 0.999 * v_ref + 0.001 * g * g
            ref -= 0.01 * (m_ref / (1 - 0.9**t)) / (np.sqrt(v_ref / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(value, ref, rtol=1e-12)


class TestEarlyStopping:
    def test_five_consecutive_increases_stop(self):
        assert tr.early_stop_update([1.0, 1.1, 1.2, 1.3, 1.4, 1.5]) is True

    def test_four_increases_then_decrease_continues(self):
        assert tr.early_stop_update([1.0, 1.1, 1.2, 1.3, 1.4, 1.35]) is False

    def test_single_epoch_continues(self):
        assert tr.early_stop_update([1.0]) is False

    def test_fires_exactly_on_fifth_increase_never_earlier(self):
        losses = [2.0, 1.5, 1.0]  # warmup decreases
        for bump in range(1, 6):
            losses.append(losses[-1] + 0.1)
            fired = tr.early_stop_update(losses)
            assert fired == (bump == 5), f"after {bump} increases: {fired}"

    def test_plateau_is_not_an_increase(self):
        assert tr.early_stop_update([1.0, 1.1, 1.2, 1.3, 1.3, 1.4]) is False

    def test_empty_history_rejected(self):
        with pytest.raises(InputError):
            tr.early_stop_update([])

    def test_pure_function_of_history(self):
        history = [0.9, 1.0, 1.1, 1.2, 1.3, 1.4]
        assert tr.early_stop_update(history) == tr.early_stop_update(list(history))


def brute_force_confusion(preds, labels, threshold=0.5):
    tp = fp = tn = fn = 0
    for p, y in zip(preds, labels):
        decided = 1 if p >= threshold else 0
        if decided == 1 and y == 1:
            tp += 1
        elif decided == 1 and y == 0:
            fp += 1
        elif decided == 0 and y == 0:
            tn += 1
        else:
            fn += 1
    accuracy = (tp + tn) / len(preds)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return accuracy, f1


class TestMetrics:
    def test_perfect_predictions(self):
        accuracy, f1 = tr.classification_metrics([0.9, 0.1, 0.8], [1, 0, 1])
        assert accuracy == 1.0 and f1 == 1.0

    def test_all_positive_predictions_half_positive_labels(self):
        accuracy, f1 = tr.classification_metrics([0.6, 0.7, 0.9, 0.8], [1, 0, 1, 0])
        assert accuracy == 0.5
        assert f1 == pytest.approx(2.0 / 3.0)

    def test_no_positives_anywhere_gives_zero_f1(self):
        accuracy, f1 = tr.classification_metrics([0.1, 0.2], [0, 0])
        assert accuracy == 1.0 and f1 == 0.0

    def test_threshold_tie_goes_positive(self):
        accuracy, _ = tr.classification_metrics([0.5], [1])
        assert accuracy == 1.0

    def test_empty_rejected(self):
        with pytest.raises(InputError):
            tr.classification_metrics([], [])

    def test_against_brute_force_1000_instances(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            n = int(rng.integers(1, 30))
            preds = rng.uniform(size=n)
            labels = rng.integers(0, 2, size=n)
            ours = tr.classification_metrics(preds, labels)
            ref = brute_force_confusion(preds, labels)
            assert abs(ours[0] - ref[0]) < 1e-12
            assert abs(ours[1] - ref[1]) < 1e-12

    def test_mean_accuracy_perfect_is_exactly_one(self):
        preds = np.array([[0.3, 0.8], [0.1, 0.5]])
        np.testing.assert_array_equal(tr.mean_accuracy(preds, preds), [1.0, 1.0])

    def test_mean_accuracy_single_sample(self):
        out = tr.mean_accuracy(np.array([[0.5]]), np.array([[0.6]]))
        assert out[0] == pytest.approx(0.9, abs=1e-12)

    def test_mean_accuracy_maximal_error(self):
        labels = np.array([[0.0, 1.0]])
        np.testing.assert_allclose(tr.mean_accuracy(1.0 - labels, labels), [0.0, 0.0])

    def test_mean_accuracy_against_brute_force(self):
        rng = np.random.default_rng(43)
        for _ in range(1000):
            n, t = int(rng.integers(1, 12)), int(rng.integers(1, 6))
            preds = rng.uniform(size=(n, t))
            labels = rng.uniform(size=(n, t))
            ours = tr.mean_accuracy(preds, labels)
            ref = [1.0 - sum(abs(labels[i, j] - preds[i, j]) for i in range(n)) / n
                   for j in range(t)]
            np.testing.assert_allclose(ours, ref, atol=1e-12)

    def test_mean_accuracy_shape_mismatch(self):
        with pytest.raises(DimensionError):
            tr.mean_accuracy(np.zeros((2, 3)), np.zeros((3, 2)))


class TestSplit:
    def test_split_is_deterministic(self):
        samples = list(range(20))
        a = tr.split_validation(samples, 0.25, seed=1)
        b = tr.split_validation(samples, 0.25, seed=1)
        assert a == b

    def test_split_partitions(self):
        samples = list(range(20))
        train, val = tr.split_validation(samples, 0.25, seed=2)
        assert sorted(train + val) == samples
        assert len(val) == 5

    def test_zero_fraction_validates_on_train(self):
        samples = list(range(4))
        train, val = tr.split_validation(samples, 0.0, seed=3)
        assert train == samples and val == samples


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.01, 10.0), min_size=1, max_size=30), st.integers(1, 7))
def test_early_stop_matches_specification(losses, patience):
    expected = (len(losses) > patience
                and all(losses[-i] > losses[-i - 1] for i in range(1, patience + 1)))
    assert tr.early_stop_update(losses, patience) == expected


def _memorization_setup(tmp_path, train_size=16):
    from avaffect import data as dt
    from avaffect import mfcc
    from avaffect import model as mdl
    from avaffect.encoders import FramePreprocessSpec

    spec = dt.SyntheticSpec(mode="xor", n_segments=3, tokens_per_modality=2,
                            latent_dim=16, noise=0.3, train_size=train_size,
                            test_size=1, seed=8)
    ds = dt.generate_synthetic(spec, tmp_path)
    records = dt.load_manifest(ds.train_manifest)
    cfg = mdl.ModelConfig(variant="SA-CA", n_segments=3, d_model=16, d_hidden=32, heads=2)
    samples = dt.load_dataset(records, cfg, str(tmp_path))
    geom = dt.manifest_geometry(records, cfg, mfcc.MfccConfig(), FramePreprocessSpec())
    return cfg, geom, samples


def test_memorization_loss_descends_smoothly(tmp_path):
    """16-sample full-batch descent: < 5% violating steps per 50-step window."""
    from avaffect import model as mdl

    cfg, geom, samples = _memorization_setup(tmp_path)
    params = mdl.init_model_params(cfg, geom, seed=0)
    opt = tr.Adam(mdl.named_parameters(params), lr=3e-3)
    targets = np.stack([s.label for s in samples])
    losses = []
    for _ in range(100):
        opt.zero_grad()
        out = mdl.forward_batch(samples, cfg, params)
        loss = tr.compute_loss(out.prediction, targets, "binary")
        ad.backward(loss)
        opt.step()
        losses.append(loss.item())
    losses = np.array(losses)
    assert losses.min() < 0.05
    for start in range(0, len(losses) - 49):
        window = losses[start : start + 50]
        violations = int(np.sum(window[1:] > window[:-1]))
        assert violations <= 2, f"{violations} increases in window at {start}"


def test_grid_search_parallel_matches_sequential(tmp_path):
    from avaffect import model as mdl

    cfg, geom, samples = _memorization_setup(tmp_path, train_size=24)
    train_cfg = tr.TrainConfig(max_epochs=3, patience=5, batch_size=8,
                               lr_grid=(1e-3, 3e-3), seed=1, val_fraction=0.25)
    sequential = tr.grid_search(cfg, geom, samples, train_cfg, jobs=1)
    parallel = tr.grid_search(cfg, geom, samples, train_cfg, jobs=2)
    assert sequential.best.lr == parallel.best.lr
    seq_named = mdl.named_parameters(sequential.params)
    par_named = mdl.named_parameters(parallel.params)
    for name in seq_named:
        np.testing.assert_array_equal(seq_named[name].data, par_named[name].data)
