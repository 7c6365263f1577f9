import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize
from sklearn.linear_model import LogisticRegression

from fedsnow.errors import ConfigError, DimensionError, EmptyDataError, IoError, SchemaError
from fedsnow.model import (
    AttackConfig,
    ClassWeighting,
    Dataset,
    ModelKind,
    TrainConfig,
    WeightVector,
    class_weights,
    evaluate,
    flip_labels,
    load_csv,
    make_synthetic,
    train_local,
    train_test_split,
    training_loss,
)


def _reference_logistic(data: Dataset, l2: float) -> WeightVector:
    """Independent oracle: L-BFGS on the same regularized logistic loss."""
    x, y = data.features, data.labels

    def loss(theta):
        z = x @ theta[:-1] + theta[-1]
        return np.mean(np.logaddexp(0, z) - y * z) + 0.5 * l2 * theta[:-1] @ theta[:-1]

    res = minimize(loss, np.zeros(x.shape[1] + 1), method="L-BFGS-B", options={"maxiter": 10_000, "gtol": 1e-10})
    return WeightVector.from_array(res.x, len(data))


class TestDataset:
    def test_rejects_label_count_mismatch(self):
        with pytest.raises(DimensionError):
            Dataset(np.zeros((3, 2)), np.zeros(2))

    def test_rejects_non_binary_labels(self):
        with pytest.raises(SchemaError):
            Dataset(np.zeros((2, 1)), np.array([0, 2]))

    def test_rejects_zero_features(self):
        with pytest.raises(DimensionError):
            Dataset(np.zeros((2, 0)), np.array([0, 1]))


class TestTrainLocal:
    def test_separable_set_matches_reference_oracle(self, separable_2d):
        cfg = TrainConfig(learning_rate=0.1, epochs=50, l2_penalty=0.0)
        w = train_local(separable_2d, WeightVector.zeros(2), cfg)
        acc = evaluate(w, separable_2d).accuracy
        ref = _reference_logistic(separable_2d, l2=1e-3)
        ref_acc = evaluate(ref, separable_2d).accuracy
        assert acc > 0.95
        assert ref_acc > 0.95
        assert abs(acc - ref_acc) < 0.04

    def test_converges_to_oracle_optimum_with_l2(self, separable_2d):
        cfg = TrainConfig(learning_rate=1.0, epochs=4000, l2_penalty=0.1)
        w = train_local(separable_2d, WeightVector.zeros(2), cfg)
        ref = _reference_logistic(separable_2d, l2=0.1)
        np.testing.assert_allclose(w.as_array(), ref.as_array(), atol=1e-4)

    def test_zero_epochs_rejected_at_construction(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0)
        with pytest.raises(ConfigError):
            TrainConfig(learning_rate=0.0)

    @pytest.mark.parametrize("label", [0, 1])
    def test_one_class_balanced_predicts_that_class(self, label):
        rng = np.random.default_rng(0)
        data = Dataset(rng.normal(size=(50, 3)), np.full(50, label))
        cfg = TrainConfig(learning_rate=0.5, epochs=200, l2_penalty=0.0, class_weighting="balanced")
        w = train_local(data, WeightVector.zeros(3), cfg)
        assert evaluate(w, data).accuracy == 1.0

    def test_sample_count_and_determinism(self, separable_2d):
        cfg = TrainConfig(learning_rate=0.1, epochs=5, batch_size=16, seed=11)
        a = train_local(separable_2d, WeightVector.zeros(2), cfg)
        b = train_local(separable_2d, WeightVector.zeros(2), cfg)
        assert a == b
        assert a.sample_count == 400 and a.is_finite()
        c = train_local(separable_2d, WeightVector.zeros(2), TrainConfig(learning_rate=0.1, epochs=5, batch_size=16, seed=12))
        assert a != c

    def test_errors(self, separable_2d):
        with pytest.raises(DimensionError):
            train_local(separable_2d, WeightVector.zeros(3), TrainConfig())
        empty = Dataset(np.zeros((0, 2)), np.zeros(0))
        with pytest.raises(EmptyDataError):
            train_local(empty, WeightVector.zeros(2), TrainConfig())

    @pytest.mark.parametrize("kind", list(ModelKind))
    def test_loss_non_increasing_below_stability_threshold(self, separable_2d, kind):
        # full-batch steps; for logistic loss lr < 8 / max||x||^2 guarantees descent
        lr = 0.05 if kind is ModelKind.LOGISTIC_REGRESSION else 0.01
        cfg = TrainConfig(learning_rate=lr, epochs=1, l2_penalty=0.01, model_kind=kind)
        w = WeightVector.zeros(2)
        losses = [training_loss(w, separable_2d, cfg)]
        for _ in range(60):
            w = train_local(separable_2d, w, cfg)
            losses.append(training_loss(w, separable_2d, cfg))
        if kind is ModelKind.LOGISTIC_REGRESSION:
            assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
        else:
            assert losses[-1] < losses[0]

    def test_hinge_model_learns(self, separable_2d):
        cfg = TrainConfig(learning_rate=0.05, epochs=30, l2_penalty=0.001, model_kind="sgd_hinge", batch_size=8)
        w = train_local(separable_2d, WeightVector.zeros(2), cfg)
        assert evaluate(w, separable_2d).accuracy > 0.95

    def test_balanced_weights_inverse_to_frequency(self):
        labels = np.array([0] * 8 + [1] * 2)
        s = class_weights(labels, ClassWeighting.BALANCED)
        assert s[0] == pytest.approx(10 / 16) and s[-1] == pytest.approx(10 / 4)
        assert s[labels == 0].sum() == pytest.approx(s[labels == 1].sum())


class TestEvaluate:
    def test_perfect_classifier(self, separable_2d):
        w = WeightVector([1.5, -1.0], 0.2)
        assert evaluate(w, separable_2d).accuracy == 1.0

    def test_always_zero_on_all_ones(self):
        data = Dataset(np.ones((10, 2)), np.ones(10))
        m = evaluate(WeightVector([0.0, 0.0], -1.0), data)
        assert m.accuracy == 0.0 and m.recall[1] == 0.0

    def test_random_weights_on_random_labels_near_chance(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            data = Dataset(rng.normal(size=(1000, 4)), rng.integers(0, 2, 1000))
            w = WeightVector(rng.normal(size=4), rng.normal())
            assert 0.4 <= evaluate(w, data).accuracy <= 0.6

    def test_dimension_mismatch(self, separable_2d):
        with pytest.raises(DimensionError):
            evaluate(WeightVector.zeros(5), separable_2d)

    def test_permutation_invariant(self, separable_2d):
        w = WeightVector([1.0, -0.3], 0.1)
        perm = np.random.default_rng(1).permutation(len(separable_2d))
        assert evaluate(w, separable_2d).accuracy == evaluate(w, separable_2d.subset(perm)).accuracy


class TestFlipLabels:
    def test_forty_percent_of_hundred(self):
        data = make_synthetic(100, 2, seed=1)
        flipped = flip_labels(data, 4, seed=9)
        assert int((flipped.labels != data.labels).sum()) == 40
        np.testing.assert_array_equal(flipped.features, data.features)

    def test_zero_is_identity(self):
        data = make_synthetic(50, 2, seed=1)
        assert flip_labels(data, 0, seed=3) == data

    @given(st.integers(0, 8), st.integers(1, 300), st.integers(0, 2**32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_exact_count_and_involution(self, proportion, n, seed):
        rng = np.random.default_rng(n)
        data = Dataset(rng.normal(size=(n, 1)), rng.integers(0, 2, n))
        once = flip_labels(data, proportion, seed)
        expected = int(np.floor(n * proportion / 10 + 0.5))
        assert int((once.labels != data.labels).sum()) == expected
        assert flip_labels(once, proportion, seed) == data

    @pytest.mark.parametrize("bad", [-1, 9, 10])
    def test_out_of_range(self, bad):
        with pytest.raises(ConfigError):
            flip_labels(make_synthetic(10, 1), bad, 0)
        with pytest.raises(ConfigError):
            AttackConfig(proportion=bad)


class TestSynthetic:
    def test_well_separated_is_learnable_by_reference(self):
        data = make_synthetic(1000, 2, class_sep=5.0, seed=0)
        ref = LogisticRegression().fit(data.features, data.labels)
        assert ref.score(data.features, data.labels) > 0.99

    def test_imbalance(self):
        data = make_synthetic(1000, 3, imbalance_ratio=0.1, seed=4)
        assert abs(int(data.labels.sum()) - 100) <= 1

    def test_deterministic(self):
        a, b = make_synthetic(200, 4, seed=5), make_synthetic(200, 4, seed=5)
        assert a.features.tobytes() == b.features.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()

    @pytest.mark.parametrize("kw", [dict(n_samples=1), dict(n_features=0), dict(imbalance_ratio=1.0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            make_synthetic(**kw)

    def test_split_is_disjoint_cover(self):
        data = make_synthetic(101, 2, seed=2)
        tr, te = train_test_split(data, 0.25, seed=1)
        assert len(tr) + len(te) == 101 and len(te) == 25
        rows = {r.tobytes() for r in np.vstack([tr.features, te.features])}
        assert len(rows) == 101


class TestLoadCsv:
    def test_one_hot_width(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,color,b,label\n1,red,5,0\n2,blue,5,1\n3,red,5,1\n")
        data = load_csv(p, "label")
        assert data.n_features == 2 + 2
        # category order = first appearance: red, blue
        np.testing.assert_array_equal(data.features[:, 1:3], [[1, 0], [0, 1], [1, 0]])
        np.testing.assert_allclose(data.features[:, 0], [0, 0.5, 1])
        # constant column scales to zero
        np.testing.assert_array_equal(data.features[:, 3], 0)
        np.testing.assert_array_equal(data.labels, [0, 1, 1])

    def test_non_binary_label(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("x,label\n1,0\n2,2\n")
        with pytest.raises(SchemaError):
            load_csv(p, "label")

    def test_positive_label_mapping(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("cap,class\nx,e\nb,p\nx,p\n")
        data = load_csv(p, "class", positive_label="p")
        np.testing.assert_array_equal(data.labels, [0, 1, 1])
        p.write_text("cap,class\nx,e\nb,p\nx,q\n")
        with pytest.raises(SchemaError):
            load_csv(p, "class", positive_label="p")

    def test_ordinal_encoding(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("c,label\nlo,0\nmid,1\nhi,1\n")
        np.testing.assert_allclose(load_csv(p, "label", "ordinal").features[:, 0], [0, 0.5, 1])

    def test_missing_file(self, tmp_path):
        with pytest.raises(IoError):
            load_csv(tmp_path / "nope.csv", "label")

    def test_missing_label_column(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("x,y\n1,0\n")
        with pytest.raises(SchemaError):
            load_csv(p, "label")
