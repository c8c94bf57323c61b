"""Tests for mining, DomAlign, focal loss and weighted-CE weights."""

import numpy as np
import pytest
from scipy.special import log_softmax

from dgadr.config import LossConfig
from dgadr.data import Dataset, Minibatch
from dgadr.exceptions import LossError
from dgadr.gradcheck import near_kink
from dgadr.losses import (
    combined_loss,
    cosine_distance,
    cosine_distance_matrix,
    domalign_loss,
    domalign_terms,
    focal_loss,
    mine_batch,
    mine_hard_negatives,
    mine_hard_positives,
    weighted_ce_weights,
)
from dgadr.model import forward, init_model


def _unit(angle: float) -> list[float]:
    return [np.cos(angle), np.sin(angle)]


def _oracle(distances, candidates, count):
    order = sorted(np.flatnonzero(candidates), key=lambda j: (distances[j], j))
    return np.array(order[:count], dtype=int)


class TestCosineDistance:
    """Test the pairwise cosine distance."""

    @pytest.mark.parametrize(
        ("a", "b", "expected"),
        [
            ((1.0, 0.0), (0.0, 1.0), 1.0),
            ((3.0, 4.0), (3.0, 4.0), 0.0),
            ((1.0, 0.0), (-1.0, 0.0), 2.0),
        ],
    )
    def test_hand_cases(self, a, b, expected):
        """Test orthogonal, identical and antipodal vectors."""
        value = cosine_distance(np.array(a), np.array(b))
        assert value == pytest.approx(expected, abs=1e-12)

    def test_zero_norm(self, caplog):
        """Test that a zero vector is treated as orthogonal, with a warning."""
        assert cosine_distance(np.zeros(2), np.array([1.0, 0.0])) == 1.0
        assert "Zero-norm" in caplog.text

    def test_matrix_matches_pairwise(self, rng):
        """Test the matrix form against the scalar form."""
        features = rng.standard_normal((5, 3))
        matrix = cosine_distance_matrix(features)
        for i in range(5):
            for j in range(5):
                assert matrix[i, j] == pytest.approx(
                    cosine_distance(features[i], features[j]), abs=1e-12
                )


class TestMining:
    """Test hard positive and negative mining."""

    def test_same_domain_positive(self):
        """Test that a positive from the query's own domain is allowed."""
        features = np.array([[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]])
        labels = np.array([0, 0, 1])
        domains = np.array([0, 0, 1])
        np.testing.assert_array_equal(
            mine_hard_positives(0, features, labels, domains, 5), [1]
        )

    def test_empty_negatives_invalidates_query(self):
        """Test that a domain holding only the query's class has no negatives."""
        features = np.array([[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]])
        labels = np.array([0, 0, 1])
        domains = np.array([0, 0, 1])
        assert mine_hard_negatives(0, features, labels, domains, 5).size == 0
        assert not mine_batch(features, labels, domains, 5)[0].valid

    def test_fewer_candidates_than_count(self):
        """Test that with fewer than C candidates all are taken, nearest first."""
        features = np.array([[1.0, 0.0], _unit(np.arccos(0.1)), _unit(np.arccos(0.8))])
        labels = np.array([0, 1, 1])
        domains = np.array([0, 0, 0])
        distances = cosine_distance_matrix(features)
        assert distances[0, 2] == pytest.approx(0.2)
        assert distances[0, 1] == pytest.approx(0.9)
        np.testing.assert_array_equal(
            mine_hard_negatives(0, features, labels, domains, 5), [2, 1]
        )

    def test_ties_go_to_lower_index(self):
        """Test the tie-break on an explicit distance matrix."""
        distances = np.array(
            [
                [0.0, 0.4, 0.4, 0.1],
                [0.4, 0.0, 0.3, 0.3],
                [0.4, 0.3, 0.0, 0.3],
                [0.1, 0.3, 0.3, 0.0],
            ]
        )
        features = np.ones((4, 2))
        labels = np.array([0, 0, 0, 1])
        domains = np.zeros(4, dtype=int)
        positives = mine_hard_positives(
            0, features, labels, domains, 1, distances=distances
        )
        np.testing.assert_array_equal(positives, [1])

    def test_query_never_its_own_positive(self, rng):
        """Test that j != i even though the self-distance is zero."""
        features = rng.standard_normal((6, 3))
        labels = np.zeros(6, dtype=int)
        domains = np.zeros(6, dtype=int)
        for i in range(6):
            assert i not in mine_hard_positives(i, features, labels, domains, 5)

    def test_cross_domain_scope_drops_own_domain(self):
        """Test that same-domain positives are excluded under the cross-domain scope."""
        features = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.5, 0.5]])
        labels = np.array([0, 0, 1, 0])
        domains = np.array([0, 0, 0, 1])
        np.testing.assert_array_equal(
            mine_hard_positives(0, features, labels, domains, 5), [1, 3]
        )
        np.testing.assert_array_equal(
            mine_hard_positives(
                0, features, labels, domains, 5, scope="cross_domain"
            ),
            [3],
        )
        results = mine_batch(features, labels, domains, 5, scope="cross_domain")
        assert results[3].positives.size == 2
        assert not results[3].valid

    def test_cross_domain_scope_without_other_domains(self):
        """Test that a single-domain batch has no valid query under the scope."""
        features = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]])
        labels = np.array([0, 0, 1])
        domains = np.zeros(3, dtype=int)
        cfg = LossConfig(positive_scope="cross_domain")
        output = domalign_loss(features, labels, domains, cfg)
        assert output.value == 0.0
        assert output.parts["valid_queries"] == 0.0

    def test_batch_too_small(self):
        """Test that mining needs two samples."""
        with pytest.raises(LossError, match="at least 2"):
            mine_hard_positives(0, np.ones((1, 2)), np.array([0]), np.array([0]), 5)

    @pytest.mark.parametrize("scope", ["any", "cross_domain"])
    def test_exhaustive_sort_oracle(self, scope):
        """Test 500 random batches (with ties) against a brute-force sort."""
        rng = np.random.default_rng(7)
        for _ in range(500):
            size = int(rng.integers(2, 17))
            labels = rng.integers(0, int(rng.integers(1, 6)), size)
            domains = rng.integers(0, int(rng.integers(1, 5)), size)
            # small integer grid: duplicates and ties are common
            features = rng.integers(-2, 3, (size, 3)).astype(float)
            count = int(rng.integers(1, 6))
            distances = cosine_distance_matrix(features)
            results = mine_batch(
                features, labels, domains, count, distances=distances, scope=scope
            )
            for i, result in enumerate(results):
                same_class = labels == labels[i]
                positives = same_class.copy()
                positives[i] = False
                if scope == "cross_domain":
                    positives &= domains != domains[i]
                negatives = (domains == domains[i]) & ~same_class
                np.testing.assert_array_equal(
                    result.positives, _oracle(distances[i], positives, count)
                )
                np.testing.assert_array_equal(
                    result.negatives, _oracle(distances[i], negatives, count)
                )
                np.testing.assert_array_equal(
                    mine_hard_positives(
                        i, features, labels, domains, count, scope=scope
                    ),
                    result.positives,
                )


class TestDomAlign:
    """Test the DomAlign hinge and its feature gradient."""

    def _batch(self, positive_cos: float, negative_cos: float):
        # only query 0 has both a positive (other domain) and a negative
        features = np.array(
            [
                [1.0, 0.0],
                _unit(np.arccos(positive_cos)),
                _unit(-np.arccos(negative_cos)),
            ]
        )
        labels = np.array([0, 0, 1])
        domains = np.array([0, 1, 0])
        return features, labels, domains

    def test_active_hinge_value(self):
        """Test margin 0.1, D_p 0.5, D_n 0.3 gives 0.3."""
        features, labels, domains = self._batch(0.5, 0.7)
        terms = domalign_terms(features, labels, domains, 5)
        np.testing.assert_array_equal(terms.valid, [True, False, False])
        assert terms.positive_distance[0] == pytest.approx(0.5)
        assert terms.negative_distance[0] == pytest.approx(0.3)
        output = domalign_loss(features, labels, domains, LossConfig(margin=0.1))
        assert output.value == pytest.approx(0.3, abs=1e-12)
        assert output.d_logits is None
        assert output.parts["valid_queries"] == 1.0

    def test_inactive_hinge(self):
        """Test margin 0.1, D_p 0.3, D_n 0.5 gives zero loss and gradient."""
        features, labels, domains = self._batch(0.7, 0.5)
        output = domalign_loss(features, labels, domains, LossConfig(margin=0.1))
        assert output.value == 0.0
        assert not output.d_features.any()

    def test_no_valid_query(self):
        """Test that a batch without valid queries has zero loss."""
        features = np.array([[1.0, 0.0], [0.0, 1.0]])
        labels = np.array([0, 1])
        output = domalign_loss(features, labels, np.array([0, 1]), LossConfig())
        assert output.value == 0.0
        assert output.parts["valid_queries"] == 0.0

    def test_scale_invariance(self, rng):
        """Test that positive rescaling of every row changes nothing."""
        features = rng.standard_normal((10, 4))
        labels = rng.integers(0, 3, 10)
        domains = rng.integers(0, 2, 10)
        cfg = LossConfig(hard_count=3)
        base = domalign_terms(features, labels, domains, 3)
        scaled = domalign_terms(3.7 * features, labels, domains, 3)
        for a, b in zip(base.mining, scaled.mining):
            np.testing.assert_array_equal(a.positives, b.positives)
            np.testing.assert_array_equal(a.negatives, b.negatives)
        value = domalign_loss(features, labels, domains, cfg).value
        scaled_value = domalign_loss(3.7 * features, labels, domains, cfg).value
        assert scaled_value == pytest.approx(value, abs=1e-12)

    def test_feature_gradient_matches_finite_differences(self):
        """Test dLoss/dZ on a random 10-sample batch away from kinks."""
        cfg = LossConfig(hard_count=2)
        for seed in range(100):
            rng = np.random.default_rng(seed)
            batch = Minibatch(
                rng.standard_normal((10, 4)),
                np.array([0, 1, 2, 0, 1, 0, 1, 2, 0, 1]),
                np.array([0, 0, 0, 0, 0, 1, 1, 1, 1, 1]),
            )
            output = domalign_loss(batch.features, batch.labels, batch.domains, cfg)
            if output.value > 0 and not near_kink(batch.features, batch, cfg):
                break
        else:
            pytest.fail("no kink-free batch found")

        epsilon = 1e-5
        numeric = np.zeros_like(batch.features)
        for index in np.ndindex(*batch.features.shape):
            plus = batch.features.copy()
            minus = batch.features.copy()
            plus[index] += epsilon
            minus[index] -= epsilon
            numeric[index] = (
                domalign_loss(plus, batch.labels, batch.domains, cfg).value
                - domalign_loss(minus, batch.labels, batch.domains, cfg).value
            ) / (2 * epsilon)
        analytic = output.d_features
        scale = max(np.abs(analytic).max(), np.abs(numeric).max())
        assert np.abs(analytic - numeric).max() / scale < 1e-4


class TestFocalLoss:
    """Test the focal loss."""

    def test_hand_value(self):
        """Test logits (0, 0), label 0, gamma 2 gives 0.25 ln 2."""
        output = focal_loss(np.zeros((1, 2)), np.array([0]), LossConfig(gamma=2.0))
        assert output.value == pytest.approx(0.25 * np.log(2.0), abs=1e-12)
        assert output.value == pytest.approx(0.17329, abs=1e-5)
        assert output.d_features is None

    def test_gamma_zero_is_cross_entropy(self, rng):
        """Test that gamma 0 equals mean softmax cross-entropy."""
        logits = 3 * rng.standard_normal((20, 4))
        labels = rng.integers(0, 4, 20)
        expected = -np.mean(log_softmax(logits, axis=1)[np.arange(20), labels])
        value = focal_loss(logits, labels, LossConfig(gamma=0.0)).value
        assert abs(value - expected) < 1e-12

    def test_confident_correct_is_zero(self):
        """Test that saturated correct logits give no loss."""
        output = focal_loss(np.array([[50.0, -50.0]]), np.array([0]), LossConfig())
        assert output.value == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("gamma", [0.0, 0.5, 2.0])
    def test_logit_gradient(self, rng, gamma):
        """Test dLoss/dLogits against central differences."""
        logits = rng.standard_normal((6, 3))
        labels = rng.integers(0, 3, 6)
        cfg = LossConfig(gamma=gamma)
        analytic = focal_loss(logits, labels, cfg).d_logits
        numeric = np.zeros_like(logits)
        for index in np.ndindex(*logits.shape):
            plus = logits.copy()
            minus = logits.copy()
            plus[index] += 1e-6
            minus[index] -= 1e-6
            up = focal_loss(plus, labels, cfg).value
            down = focal_loss(minus, labels, cfg).value
            numeric[index] = (up - down) / 2e-6
        np.testing.assert_allclose(analytic, numeric, atol=1e-7)

    def test_weighted_lookup(self):
        """Test that a weight table scales each sample's term."""
        source = Dataset(np.zeros((4, 2)), [0, 1, 1, 1], [0, 0, 0, 0], num_classes=2)
        table = weighted_ce_weights(source)
        cfg = LossConfig(gamma=0.0)
        logits = np.zeros((2, 2))
        weighted = focal_loss(
            logits, np.array([0, 1]), cfg, domains=np.array([0, 0]), weights=table
        )
        assert weighted.value == pytest.approx((1.0 + 1.0 / 3.0) / 2 * np.log(2.0))

    def test_label_out_of_range(self):
        """Test that labels >= L are rejected."""
        with pytest.raises(LossError, match="labels"):
            focal_loss(np.zeros((1, 2)), np.array([2]), LossConfig())

    def test_single_class(self):
        """Test that one logit column is rejected."""
        with pytest.raises(LossError, match="2 classes"):
            focal_loss(np.zeros((1, 1)), np.array([0]), LossConfig())

    def test_weights_need_domains(self, tiny_dataset):
        """Test that a weight table without domains is rejected."""
        table = weighted_ce_weights(tiny_dataset)
        with pytest.raises(LossError, match="domain"):
            focal_loss(np.zeros((1, 2)), np.array([0]), LossConfig(), weights=table)


class TestWeightTable:
    """Test weighted-CE weights."""

    def _two_domains(self, scale: int = 1) -> Dataset:
        labels = [0] * 8 + [1] * 2 + [0] * 1 + [1] * 4
        domains = [0] * 10 + [1] * 5
        labels = np.repeat(labels, scale)
        domains = np.repeat(domains, scale)
        return Dataset(np.zeros((labels.size, 2)), labels, domains, num_classes=2)

    def test_hand_example(self):
        """Test domains (8, 2) and (1, 4) give {A: (0.125, 0.5), B: (1.0, 0.25)}."""
        table = weighted_ce_weights(self._two_domains())
        assert table.lookup(0, 0) == pytest.approx(0.125)
        assert table.lookup(1, 0) == pytest.approx(0.5)
        assert table.lookup(0, 1) == pytest.approx(1.0)
        assert table.lookup(1, 1) == pytest.approx(0.25)
        assert table.domain_weights == pytest.approx({0: 0.5, 1: 1.0})

    def test_scale_free(self):
        """Test that multiplying every count by 10 leaves the table unchanged."""
        base = weighted_ce_weights(self._two_domains())
        scaled = weighted_ce_weights(self._two_domains(10))
        assert scaled.weights == pytest.approx(base.weights)

    def test_single_balanced_domain(self):
        """Test that one balanced domain gives all ones."""
        source = Dataset(np.zeros((6, 2)), [0, 1, 2, 0, 1, 2], [3] * 6, num_classes=3)
        table = weighted_ce_weights(source)
        assert set(table.weights.values()) == {1.0}

    def test_bounds(self, small_dataset):
        """Test 0 < w <= 1 and the rarest class per domain reaching 1."""
        table = weighted_ce_weights(small_dataset)
        assert all(0 < w <= 1 for w in table.weights.values())
        for domain in small_dataset.domain_ids:
            per_domain = [v for (_, d), v in table.class_weights.items() if d == domain]
            assert max(per_domain) == 1.0

    def test_absent_class_has_no_entry(self):
        """Test that lookup fails for a class missing from a domain."""
        source = Dataset(np.zeros((3, 2)), [0, 0, 1], [0, 0, 1], num_classes=2)
        table = weighted_ce_weights(source)
        with pytest.raises(LossError, match="class 1 in domain 0"):
            table.lookup(1, 0)

    def test_csv(self, temp_dir):
        """Test the class,domain,weight export."""
        path = temp_dir / "weights.csv"
        weighted_ce_weights(self._two_domains()).to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "class,domain,weight"
        assert lines[1:] == ["0,0,0.125", "0,1,1", "1,0,0.5", "1,1,0.25"]


class TestCombinedLoss:
    """Test focal + alpha * DomAlign."""

    def _trace(self):
        rng = np.random.default_rng(3)
        model = init_model([4, 8, 6, 3], "tanh", seed=3)
        features = rng.standard_normal((12, 4))
        labels = np.tile([0, 1, 2], 4)
        domains = np.repeat([0, 1], 6)
        return forward(model, features), labels, domains

    def test_alpha_zero_is_focal(self):
        """Test that alpha 0 is focal alone with no feature gradient."""
        trace, labels, domains = self._trace()
        output = combined_loss(trace, labels, domains, LossConfig(alpha=0.0))
        focal = focal_loss(trace.logits, labels, LossConfig())
        assert output.value == focal.value
        assert output.d_features is None
        np.testing.assert_array_equal(output.d_logits, focal.d_logits)

    def test_linear_in_alpha(self):
        """Test value(2) - value(0) == 2 * DomAlign."""
        trace, labels, domains = self._trace()
        at_two = combined_loss(trace, labels, domains, LossConfig(alpha=2.0))
        at_zero = combined_loss(trace, labels, domains, LossConfig(alpha=0.0))
        align = domalign_loss(trace.features, labels, domains, LossConfig())
        assert at_two.value - at_zero.value == pytest.approx(2 * align.value, abs=1e-12)
        np.testing.assert_allclose(at_two.d_features, 2 * align.d_features)

    def test_parts_decompose(self):
        """Test focal + aligned == value."""
        trace, labels, domains = self._trace()
        output = combined_loss(trace, labels, domains, LossConfig())
        parts = output.parts
        assert parts["focal"] + parts["aligned"] == pytest.approx(output.value)
        assert output.parts["aligned"] == pytest.approx(10.0 * output.parts["domalign"])
