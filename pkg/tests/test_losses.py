"""InfoNCE closed forms and weighted aggregation."""

import math

import numpy as np
import pytest
import torch

from mqir.losses import (aggregate_similarity, ensemble_similarity,
                         infonce_loss, total_loss, uniform_infonce_value)

from oracles import infonce_ref


def t64(data):
    return torch.tensor(data, dtype=torch.float64)


class TestInfoNCE:
    def test_single_pair_exactly_zero(self):
        assert float(infonce_loss(t64([[0.37]]), 40.0)) == 0.0

    def test_uniform_matrix_closed_form(self):
        for n in (2, 3, 5):
            sim = torch.full((n, n), 0.3, dtype=torch.float64)
            val = float(infonce_loss(sim, 7.0))
            assert abs(val - uniform_infonce_value(n)) < 1e-12
        assert abs(uniform_infonce_value(2) - 1.38629) < 1e-5

    def test_identity_matrix_value(self):
        val = float(infonce_loss(t64([[1.0, 0.0], [0.0, 1.0]]), 1.0))
        expected = -2 * math.log(math.e / (math.e + 1))
        assert abs(val - expected) < 1e-12
        assert abs(val - 0.62652) < 1e-5

    def test_nonnegative(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(1, 6))
            sim = t64(rng.uniform(-1, 1, (n, n)))
            assert float(infonce_loss(sim, 40.0)) >= 0.0

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        sim = t64(rng.uniform(-1, 1, (4, 4)))
        a = float(infonce_loss(sim, 11.0))
        b = float(infonce_loss(sim + 0.73, 11.0))
        assert abs(a - b) < 1e-10

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        sim = rng.uniform(-1, 1, (5, 5))
        perm = rng.permutation(5)
        a = float(infonce_loss(t64(sim), 9.0))
        b = float(infonce_loss(t64(sim[np.ix_(perm, perm)]), 9.0))
        assert abs(a - b) < 1e-10

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            n = int(rng.integers(1, 7))
            sim = rng.uniform(-1, 1, (n, n))
            assert abs(float(infonce_loss(t64(sim), 40.0))
                       - infonce_ref(sim, 40.0)) < 1e-9

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError, match="square"):
            infonce_loss(t64([[1.0, 2.0]]), 1.0)
        with pytest.raises(ValueError, match="non-finite"):
            infonce_loss(t64([[float("nan")]]), 1.0)
        with pytest.raises(ValueError, match="tau"):
            infonce_loss(t64([[0.0]]), 0.0)


class TestTotalLoss:
    def test_local_only(self):
        assert float(total_loss(3.0, 99.0, 99.0, alpha=1.0, beta=0.0)) == 3.0

    def test_convex_combination(self):
        assert abs(total_loss(1.0, 1.0, 1.0, 0.4, 0.4) - 1.0) < 1e-12

    def test_arithmetic(self):
        assert abs(total_loss(3.0, 6.0, 9.0, 1 / 3, 1 / 3) - 6.0) < 1e-12

    def test_invalid_weights(self):
        with pytest.raises(ValueError, match="exceed"):
            total_loss(1.0, 1.0, 1.0, 0.7, 0.7)
        with pytest.raises(ValueError, match="nonnegative"):
            total_loss(1.0, 1.0, 1.0, -0.1, 0.5)


class TestAggregation:
    def test_all_ones(self):
        assert abs(aggregate_similarity(1.0, 1.0, 1.0, 0.4, 0.4) - 1.0) < 1e-12

    def test_global_passthrough(self):
        assert aggregate_similarity(9.0, 9.0, 0.5, 0.0, 0.0) == 0.5

    def test_arithmetic(self):
        val = aggregate_similarity(0.5, 2.0, -1.0, 0.4, 0.4)
        assert abs(val - 0.8) < 1e-12

    def test_ensemble(self):
        assert ensemble_similarity(0.0, 0.0) == 0.0
        assert ensemble_similarity(1.0, 2.0) == 3.0

    def test_argmax_invariant_to_positive_scaling(self):
        rng = np.random.default_rng(4)
        s1 = rng.standard_normal(10)
        s2 = rng.standard_normal(10)
        base = np.argmax(s1 + s2)
        scaled = np.argmax(3.7 * s1 + 3.7 * s2)
        assert base == scaled
