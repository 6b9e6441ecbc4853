import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from moddragon.benchstats import (ResultMatrix, aligned_ranks, finner_posthoc,
                                  friedman_aligned_ranks, performance_profile)

from .oracles import brute_profile, two_sided_normal_p


def _brute_grid(values, taus):
    return np.array([brute_profile(values, tau) for tau in taus])


# 4 problems x 3 models; row-centred values and their joint midranks:
#   [-1, 0, 1]   -> [3.5, 7, 9.5]
#   [-1, -1, 2]  -> [3.5, 3.5, 11.5]
#   [-2, 2, 0]   -> [1, 11.5, 7]
#   [1, -1, 0]   -> [9.5, 3.5, 7]
HAND_VALUES = [[1, 2, 3], [2, 2, 5], [0, 4, 2], [3, 1, 2]]
HAND_RANKS = [[3.5, 7, 9.5], [3.5, 3.5, 11.5], [1, 11.5, 7], [9.5, 3.5, 7]]
# T = 2 * (17.5^2 + 25.5^2 + 35^2 - 12 * 13^2) / (12*13*25/6 - 1522.5/3) = 307 / 142.5
HAND_T = 307 / 142.5

matrices = st.tuples(st.integers(2, 12), st.integers(2, 5)).flatmap(
    lambda s: arrays(np.float64, s, elements=st.floats(0, 100, allow_nan=False)))


def _rm(values, models=None):
    values = np.asarray(values, dtype=float)
    return ResultMatrix.from_array(values, models or [f"m{j}" for j in range(values.shape[1])])


class TestProfile:

    def test_single_model(self, rng):
        prof = performance_profile(_rm(rng.uniform(0.1, 5, size=(10, 1))), [1, 1.5, 10])
        np.testing.assert_array_equal(prof.rho, 1.0)

    def test_symmetric_two_by_two(self):
        prof = performance_profile(_rm([[1, 2], [2, 1]]), [1, 2])
        np.testing.assert_array_equal(prof.rho, [[0.5, 0.5], [1.0, 1.0]])

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force(self, seed):
        r = np.random.default_rng(seed)
        v = r.uniform(0, 10, size=(50, 4))
        taus = np.concatenate([[1.0], r.uniform(1, 6, 30)])
        prof = performance_profile(_rm(v), taus)
        np.testing.assert_array_equal(prof.rho, _brute_grid(v, np.sort(taus)))

    def test_default_grid_hits_every_step(self, rng):
        v = rng.uniform(0.5, 3, size=(20, 3))
        prof = performance_profile(_rm(v))
        np.testing.assert_array_equal(prof.rho, _brute_grid(v, prof.taus))
        np.testing.assert_array_equal(prof.rho[-1], 1.0)

    def test_zero_best(self):
        prof = performance_profile(_rm([[0.0, 0.0], [0.0, 1e-3]]), [1, 1e6])
        np.testing.assert_array_equal(prof.rho[0], [1.0, 0.5])

    @settings(max_examples=80, deadline=None)
    @given(matrices)
    def test_monotone_and_best_covers(self, v):
        prof = performance_profile(_rm(v))
        assert np.all(np.diff(prof.rho, axis=0) >= 0)
        assert prof.counts[0].sum() >= v.shape[0]
        np.testing.assert_array_equal(prof.rho, prof.counts / v.shape[0])
        assert np.all((0 <= prof.rho) & (prof.rho <= 1))

    def test_csv_layout(self):
        prof = performance_profile(_rm([[1, 2], [2, 1]], ["a", "b"]), [1, 2])
        lines = prof.to_csv().splitlines()
        assert lines[0] == "tau,a,b" and len(lines) == 3
        np.testing.assert_array_equal(prof.for_model("b"), [0.5, 1.0])

    def test_validation(self):
        with pytest.raises(ValueError):
            ResultMatrix.from_array(np.zeros((0, 2)))
        with pytest.raises(ValueError):
            ResultMatrix.from_array([[1.0, -1.0]])
        with pytest.raises(ValueError):
            ResultMatrix.from_array([[1.0, np.inf]])
        with pytest.raises(ValueError):
            performance_profile(_rm([[1, 2]]), [0.5])


class TestFinner:

    def test_degenerate_p(self):
        assert finner_posthoc([0.0]).adjusted[0] == 0.0 and finner_posthoc([0.0]).reject[0]
        res = finner_posthoc([1.0])
        assert res.adjusted[0] == 1.0 and not res.reject[0]

    def test_closed_form(self):
        res = finner_posthoc([0.5, 0.01, 0.2], ["c", "a", "b"], 3)
        want = [1 - 0.99**3, 1 - 0.8**1.5, 0.5]
        np.testing.assert_allclose(res.adjusted, want, rtol=0, atol=1e-15)
        assert res.models == ("a", "b", "c")
        np.testing.assert_array_equal(res.reject, [True, False, False])

    def test_step_down_max(self):
        # second raw adjustment 1 - 0.95 is smaller than the first, so it is lifted
        res = finner_posthoc([0.04, 0.05], k_comparisons=2)
        assert res.adjusted[1] == res.adjusted[0] == pytest.approx(1 - 0.96**2)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=10))
    def test_monotone_bounded(self, p):
        res = finner_posthoc(p)
        assert np.all(np.diff(res.adjusted) >= 0)
        assert np.all((0 <= res.adjusted) & (res.adjusted <= 1))
        assert np.all(res.adjusted >= res.raw - 1e-15)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            finner_posthoc([1.5])


class TestFriedmanAligned:

    def test_hand_instance(self):
        rep = friedman_aligned_ranks(_rm(HAND_VALUES, ["A", "B", "C"]))
        np.testing.assert_array_equal(aligned_ranks(HAND_VALUES), HAND_RANKS)
        np.testing.assert_allclose(rep.rank_sums, [17.5, 25.5, 35.0], rtol=0, atol=1e-12)
        np.testing.assert_allclose(rep.avg_aligned_rank, [4.375, 6.375, 8.75], rtol=0, atol=1e-12)
        assert rep.statistic == pytest.approx(HAND_T, abs=1e-12)
        assert rep.control == "A"
        se = math.sqrt(2.5)
        assert rep.z["B"] == pytest.approx(2 / se, abs=1e-12)
        pb, pc = two_sided_normal_p(2 / se), two_sided_normal_p(4.375 / se)
        np.testing.assert_allclose(rep.comparisons.raw, [pc, pb], rtol=0, atol=1e-12)
        np.testing.assert_allclose(rep.comparisons.adjusted, [1 - (1 - pc) ** 2, pb], rtol=0, atol=1e-12)

    def test_small_two_row_instance(self):
        # aligned [[-1, 0, 1], [-1, 1, 0]] -> midranks [[1.5, 3.5, 5.5], [1.5, 5.5, 3.5]]
        rep = friedman_aligned_ranks(_rm([[1, 2, 3], [1, 3, 2]]))
        np.testing.assert_array_equal(aligned_ranks([[1, 2, 3], [1, 3, 2]]), [[1.5, 3.5, 5.5], [1.5, 5.5, 3.5]])
        assert rep.statistic == pytest.approx(48 / 17.5, abs=1e-12)

    def test_identical_columns(self, rng):
        col = rng.uniform(0, 5, size=(7, 1))
        rep = friedman_aligned_ranks(_rm(np.hstack([col, col])))
        assert rep.statistic == 0.0
        assert rep.avg_aligned_rank[0] == rep.avg_aligned_rank[1]

    @settings(max_examples=60, deadline=None)
    @given(matrices)
    def test_rank_sum_identity(self, v):
        N = v.size
        assert aligned_ranks(v).sum() == N * (N + 1) / 2

    def test_row_shift_invariance(self, rng):
        v = rng.integers(0, 20, size=(15, 4)).astype(float)
        shifted = v + rng.integers(0, 50, size=(15, 1))
        np.testing.assert_array_equal(aligned_ranks(v), aligned_ranks(shifted))

    def test_thousand_problem_shape(self, rng):
        base = rng.uniform(0, 1, size=(1000, 1))
        v = base + np.array([0.0, 0.1, 0.2, 0.3]) + rng.normal(0, 0.05, size=(1000, 4))
        rep = friedman_aligned_ranks(_rm(np.abs(v)))
        assert np.all((1 <= rep.avg_aligned_rank) & (rep.avg_aligned_rank <= 4000))
        assert list(np.argsort(rep.avg_aligned_rank)) == [0, 1, 2, 3]
        assert rep.control == "m0"

    def test_report_rows(self):
        rep = friedman_aligned_ranks(_rm(HAND_VALUES, ["A", "B", "C"]))
        rows = rep.rows()
        assert [r[0] for r in rows] == ["A", "B", "C"]
        assert rows[0][2] is None and rows[0][3] == "-"
        assert {r[3] for r in rows} <= {"Reject", "Fail to reject", "-"}
        csv = rep.to_csv().splitlines()
        assert csv[0] == "model,far,p_finner,null_hypothesis" and len(csv) == 4
        assert "FAR statistic" in rep.to_text()

    def test_too_small(self):
        with pytest.raises(ValueError):
            friedman_aligned_ranks(_rm([[1.0, 2.0]]))
