import numpy as np
import pytest

from scroll import (
    ClassIdError,
    LinearHead,
    NccState,
    NoClassError,
    RidgeState,
    ShapeError,
    load_state,
    save_state,
)


def unit_rows(rng, n, d):
    rows = rng.standard_normal((n, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def brute_force_ncc(state, x):
    # Independent scan: squared distance to every seen prototype.
    best, best_d = None, None
    for y in range(state.class_count):
        if state.counts[y] == 0:
            continue
        d = float(np.sum((x - state.prototypes[y]) ** 2))
        if best is None or d < best_d:
            best, best_d = y, d
    return best


def brute_force_linear(head, x):
    best, best_s = 0, None
    for y in range(head.class_count):
        s = float(np.dot(head.weights[y], x) + head.biases[y])
        if best_s is None or s > best_s:
            best, best_s = y, s
    return best


class TestNccUpdate:
    def test_first_sample_becomes_prototype(self):
        s = NccState(2, 2)
        s.update(np.array([1.0, 0.0]), 0)
        np.testing.assert_array_equal(s.prototypes[0], [1.0, 0.0])
        assert s.counts[0] == 1

    def test_prototype_is_running_mean(self):
        rng = np.random.default_rng(1)
        xs = unit_rows(rng, 3, 4)
        s = NccState(1, 4)
        for x in xs:
            s.update(x, 0)
        assert np.abs(s.prototypes[0] - xs.mean(axis=0)).max() <= 1e-12

    def test_no_cross_class_interference(self):
        rng = np.random.default_rng(2)
        s = NccState(2, 3)
        s.update(unit_rows(rng, 1, 3)[0], 1)
        before = s.prototypes[1].copy()
        for x in unit_rows(rng, 5, 3):
            s.update(x, 0)
        np.testing.assert_array_equal(s.prototypes[1], before)

    def test_batch_update_matches_sequential(self):
        rng = np.random.default_rng(3)
        xs = unit_rows(rng, 40, 6)
        ys = rng.integers(0, 4, 40)
        a = NccState(4, 6).update_batch(xs, ys)
        b = NccState(4, 6)
        for x, y in zip(xs, ys):
            b.update(x, y)
        assert np.abs(a.prototypes - b.prototypes).max() < 1e-12
        np.testing.assert_array_equal(a.counts, b.counts)

    def test_class_id_out_of_range(self):
        with pytest.raises(ClassIdError):
            NccState(2, 2).update(np.array([1.0, 0.0]), 2)


class TestNccPredict:
    def test_exact_prototype_hit(self):
        s = NccState(2, 2)
        s.update(np.array([1.0, 0.0]), 0)
        s.update(np.array([0.0, 1.0]), 1)
        assert s.predict(np.array([1.0, 0.0])) == 0

    def test_tie_goes_to_smaller_id(self):
        s = NccState(2, 2)
        s.update(np.array([1.0, 0.0]), 0)
        s.update(np.array([0.0, 1.0]), 1)
        q = np.array([1.0, 1.0]) / np.sqrt(2.0)
        assert s.predict(q) == 0

    def test_agrees_with_brute_force(self):
        rng = np.random.default_rng(4)
        s = NccState(5, 8)
        s.update_batch(unit_rows(rng, 60, 8), rng.integers(0, 5, 60))
        queries = unit_rows(rng, 100, 8)
        preds = s.predict_batch(queries)
        for x, p in zip(queries, preds):
            assert p == brute_force_ncc(s, x)

    def test_unseen_class_excluded(self):
        s = NccState(3, 2)
        s.update(np.array([0.0, 1.0]), 2)
        # class 0 prototype is the zero vector but unseen; nearest must be 2
        assert s.predict(np.array([0.1, 0.1])) == 2

    def test_empty_state_raises(self):
        with pytest.raises(NoClassError):
            NccState(3, 2).predict(np.array([1.0, 0.0]))


class TestRidgeUpdate:
    def test_single_sample_statistics(self):
        s = RidgeState(2, 2, lam=1.0)
        s.update(np.array([1.0, 0.0]), 0)
        np.testing.assert_array_equal(s.cov, [[1.0, 0.0], [0.0, 0.0]])
        np.testing.assert_array_equal(s.class_sums[0], [1.0, 0.0])
        np.testing.assert_array_equal(s.class_sums[1], [0.0, 0.0])
        assert s.seen == 1

    def test_update_order_commutes(self):
        rng = np.random.default_rng(5)
        x1, x2 = unit_rows(rng, 2, 3)
        a = RidgeState(2, 3).update(x1, 0).update(x2, 1)
        b = RidgeState(2, 3).update(x2, 1).update(x1, 0)
        assert np.abs(a.cov - b.cov).max() <= 1e-12
        assert np.abs(a.class_sums - b.class_sums).max() <= 1e-12

    def test_cov_matches_dense_product(self):
        rng = np.random.default_rng(6)
        xs = unit_rows(rng, 50, 7)
        ys = rng.integers(0, 3, 50)
        s = RidgeState(3, 7)
        for x, y in zip(xs, ys):
            s.update(x, y)
        assert np.abs(s.cov - xs.T @ xs).max() <= 1e-10

    def test_batch_update_matches_sequential(self):
        rng = np.random.default_rng(7)
        xs = unit_rows(rng, 30, 5)
        ys = rng.integers(0, 2, 30)
        a = RidgeState(2, 5).update_batch(xs, ys)
        b = RidgeState(2, 5)
        for x, y in zip(xs, ys):
            b.update(x, y)
        assert np.abs(a.cov - b.cov).max() <= 1e-12
        assert np.abs(a.class_sums - b.class_sums).max() <= 1e-12


class TestRidgeSolve:
    def test_single_sample_closed_form(self):
        # (e1 e1^T + I) w = e1  =>  w = e1 / 2
        s = RidgeState(1, 2, lam=1.0).update(np.array([1.0, 0.0]), 0)
        head = s.solve()
        np.testing.assert_allclose(head.weights[0], [0.5, 0.0], atol=1e-15)
        np.testing.assert_array_equal(head.biases, [0.0])

    def test_unseen_class_gets_zero_row(self):
        rng = np.random.default_rng(8)
        s = RidgeState(3, 4)
        s.update_batch(unit_rows(rng, 20, 4), np.zeros(20, dtype=int))
        head = s.solve()
        np.testing.assert_array_equal(head.weights[1], np.zeros(4))
        np.testing.assert_array_equal(head.weights[2], np.zeros(4))

    def test_matches_batch_closed_form(self):
        # Oracle: solve (X^T X + lam * N * I) W = X^T Y densely from scratch.
        rng = np.random.default_rng(9)
        for _ in range(5):
            n, d, k = int(rng.integers(20, 200)), int(rng.integers(3, 20)), 4
            lam = float(rng.uniform(0.1, 2.0))
            xs = unit_rows(rng, n, d)
            ys = rng.integers(0, k, n)
            onehot = np.eye(k)[ys]
            expected = np.linalg.solve(
                xs.T @ xs + lam * n * np.eye(d), xs.T @ onehot
            ).T
            state = RidgeState(k, d, lam).update_batch(xs, ys)
            solved = state.solve().weights
            rel = np.linalg.norm(solved - expected) / np.linalg.norm(expected)
            assert rel < 1e-8


class TestNccToLinear:
    def test_unit_prototypes(self):
        s = NccState(2, 2)
        s.update(np.array([1.0, 0.0]), 0)
        s.update(np.array([0.0, 1.0]), 1)
        head = s.to_linear_head()
        np.testing.assert_array_equal(head.weights, [[1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_allclose(head.biases, [-0.5, -0.5])

    def test_zero_prototype_maps_to_zero(self):
        s = NccState(2, 3)
        s.update(np.array([0.0, 1.0, 0.0]), 1)
        head = s.to_linear_head()
        np.testing.assert_array_equal(head.weights[0], np.zeros(3))
        assert head.biases[0] == 0.0

    def test_equivalent_to_distance_rule(self):
        # Oracle: the distance-based prediction itself.
        rng = np.random.default_rng(10)
        s = NccState(6, 16)
        s.update_batch(unit_rows(rng, 300, 16), rng.integers(0, 6, 300))
        head = s.to_linear_head()
        queries = unit_rows(rng, 1000, 16)
        np.testing.assert_array_equal(
            head.predict_batch(queries), s.predict_batch(queries)
        )


class TestLinearPredict:
    def test_identity_head(self):
        head = LinearHead(np.eye(3), np.zeros(3))
        assert head.predict(np.array([0.0, 1.0, 0.0])) == 1

    def test_all_zero_head_ties_to_class_zero(self):
        head = LinearHead(np.zeros((4, 2)), np.zeros(4))
        assert head.predict(np.array([0.3, -0.2])) == 0

    def test_agrees_with_brute_force(self):
        rng = np.random.default_rng(11)
        head = LinearHead(rng.standard_normal((5, 6)), rng.standard_normal(5))
        for x in rng.standard_normal((50, 6)):
            assert head.predict(x) == brute_force_linear(head, x)

    def test_shape_mismatch(self):
        head = LinearHead(np.eye(3), np.zeros(3))
        with pytest.raises(ShapeError):
            head.predict(np.array([1.0, 2.0]))


class TestPermutationInvariance:
    def test_states_and_heads_agree_across_orderings(self):
        rng = np.random.default_rng(12)
        xs = unit_rows(rng, 200, 10)
        ys = rng.integers(0, 5, 200)
        perm = rng.permutation(200)

        ncc_a = NccState(5, 10).update_batch(xs, ys)
        ncc_b = NccState(5, 10)
        for i in perm:
            ncc_b.update(xs[i], ys[i])
        assert np.abs(ncc_a.prototypes - ncc_b.prototypes).max() < 1e-9

        ridge_a = RidgeState(5, 10).update_batch(xs, ys)
        ridge_b = RidgeState(5, 10)
        for i in perm:
            ridge_b.update(xs[i], ys[i])
        assert np.abs(ridge_a.cov - ridge_b.cov).max() < 1e-9
        assert np.abs(ridge_a.class_sums - ridge_b.class_sums).max() < 1e-9

        ha, hb = ridge_a.solve(), ridge_b.solve()
        rel = np.linalg.norm(ha.weights - hb.weights) / np.linalg.norm(ha.weights)
        assert rel < 1e-8

        queries = unit_rows(rng, 500, 10)
        np.testing.assert_array_equal(ha.predict_batch(queries), hb.predict_batch(queries))
        np.testing.assert_array_equal(
            ncc_a.predict_batch(queries), ncc_b.predict_batch(queries)
        )


class TestCheckpoints:
    def test_ncc_round_trip(self, tmp_path):
        rng = np.random.default_rng(13)
        s = NccState(3, 4).update_batch(unit_rows(rng, 12, 4), rng.integers(0, 3, 12))
        path = tmp_path / "state.bin"
        save_state(s, path)
        loaded = load_state(path)
        assert isinstance(loaded, NccState)
        np.testing.assert_array_equal(loaded.prototypes, s.prototypes)
        np.testing.assert_array_equal(loaded.counts, s.counts)

    def test_ridge_round_trip(self, tmp_path):
        rng = np.random.default_rng(14)
        s = RidgeState(3, 4, lam=0.7).update_batch(
            unit_rows(rng, 12, 4), rng.integers(0, 3, 12)
        )
        path = tmp_path / "state.bin"
        save_state(s, path)
        loaded = load_state(path)
        assert isinstance(loaded, RidgeState)
        assert loaded.lam == s.lam and loaded.seen == s.seen
        np.testing.assert_array_equal(loaded.cov, s.cov)
        np.testing.assert_array_equal(loaded.class_sums, s.class_sums)
        np.testing.assert_array_equal(loaded.solve().weights, s.solve().weights)
