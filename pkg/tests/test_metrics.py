import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import spearmanr

from edasca.metrics import (
    GeCurve,
    attack_subsets,
    boxplot_stats,
    guessing_entropy,
    guessing_entropy_from_scores,
    q_tge,
    rank_trajectory,
)
from edasca.poi import PoiCandidate
from edasca.sim import SimConfig, simulate
from edasca.templates import TemplateModel, attack, build_templates, rank_of_key
from edasca.traces import LeakageModel, label_traces

LEAKS = [12, 31, 47, 68, 85]


@pytest.fixture(scope="module")
def unprotected():
    prof = simulate(SimConfig(2000, 100, LEAKS, noise_sigma=1.0, seed=1), "unprotected")
    pool = simulate(SimConfig(1000, 100, LEAKS, noise_sigma=1.0, fixed_key=0x2B, seed=2), "unprotected")
    model = build_templates(prof, label_traces(prof, "hamming_weight"), PoiCandidate.from_indices(LEAKS, 100))
    return model, pool


def test_key_independent_model_all_ties_rank_zero():
    model = TemplateModel(np.zeros((9, 1)), np.eye(1), PoiCandidate(np.ones(1, bool)),
                          LeakageModel.HAMMING_WEIGHT)
    pool = simulate(SimConfig(50, 1, [0], noise_sigma=1.0, fixed_key=0, seed=3), "unprotected")
    curve = guessing_entropy(model, pool, 20, 5, seed=0)
    assert np.all(curve.mean_rank == 0)


def test_uniform_ranks_average_to_midpoint():
    # independent per-trace scores make the rank of any key uniform on 0..255
    rng = np.random.default_rng(4)
    scores = rng.normal(size=(20_000, 256))
    curve = guessing_entropy_from_scores(scores, 0x2B, 10, 1000, seed=5)
    assert abs(curve.final_ranks.mean() - 127.5) <= 3


def test_reps_one_equals_single_attack(unprotected):
    model, pool = unprotected
    curve = guessing_entropy(model, pool, 40, 1, seed=6)
    idx = attack_subsets(pool.n_traces, 40, 1, 6)[0]
    expected = [rank_of_key(attack(model, pool.subset(idx[:t])), 0x2B) for t in range(1, 41)]
    assert curve.mean_rank.tolist() == expected


def test_deterministic(unprotected):
    model, pool = unprotected
    a = guessing_entropy(model, pool, 30, 10, seed=7)
    b = guessing_entropy(model, pool, 30, 10, seed=7)
    assert a.to_csv() == b.to_csv()


def test_rank_decreases_with_traces():
    prof = simulate(SimConfig(2000, 20, [3, 9], noise_sigma=3.0, seed=8), "unprotected")
    pool = simulate(SimConfig(2000, 20, [3, 9], noise_sigma=3.0, fixed_key=0x11, seed=9), "unprotected")
    model = build_templates(prof, label_traces(prof, "hamming_weight"), PoiCandidate.from_indices([3, 9], 20))
    curve = guessing_entropy(model, pool, 100, 10, seed=10)
    rho = spearmanr(np.arange(1, 101), curve.mean_rank).statistic
    assert rho < 0


def test_pool_too_small(unprotected):
    model, pool = unprotected
    with pytest.raises(ValueError):
        guessing_entropy(model, pool, 1001, 1, seed=0)


def test_variable_key_pool_rejected(unprotected):
    model, _ = unprotected
    pool = simulate(SimConfig(20, 100, LEAKS, seed=11), "unprotected")
    with pytest.raises(ValueError, match="single key"):
        guessing_entropy(model, pool, 5, 1, seed=0)


class TestSubsets:
    def test_disjoint_when_pool_allows(self):
        subsets = attack_subsets(100, 10, 10, seed=1)
        assert len(np.unique(np.concatenate(subsets))) == 100

    def test_overflow_reps_draw_fresh(self):
        subsets = attack_subsets(25, 10, 4, seed=1)
        assert len(np.unique(np.concatenate(subsets[:2]))) == 20
        assert all(len(np.unique(s)) == 10 for s in subsets)


def test_rank_trajectory_tie_rule():
    scores = np.zeros((3, 256))
    scores[:, 5] = 1.0
    assert rank_trajectory(scores, 7).tolist() == [7, 7, 7]
    assert rank_trajectory(scores, 5).tolist() == [0, 0, 0]


@pytest.mark.parametrize("curve,expected", [
    ([5, 2, 0, 0, 0], 3),
    ([3, 0, 1, 0, 0], 4),
    ([2, 1, 1], None),
    ([0, 0], 1),
    ([1, 0], 2),
])
def test_q_tge(curve, expected):
    assert q_tge(GeCurve(curve, 1, [curve[-1]])) == expected


class TestBoxplot:
    def test_constant(self):
        b = boxplot_stats([0, 0, 0, 0])
        assert (b.median, b.q3 - b.q1, b.outliers) == (0, 0, [])

    def test_odd_small(self):
        b = boxplot_stats([1, 2, 3, 4, 5])
        assert (b.median, b.q1, b.q3) == (3, 2, 4)
        assert (b.whisker_low, b.whisker_high) == (1, 5)

    def test_outlier(self):
        b = boxplot_stats([0] * 9 + [200])
        assert b.outliers == [200]
        assert b.whisker_high == 0

    def test_empty(self):
        with pytest.raises(ValueError):
            boxplot_stats([])

    @given(st.lists(st.floats(0, 255), min_size=1, max_size=40))
    def test_invariants(self, values):
        b = boxplot_stats(values)
        assert b.q1 <= b.median <= b.q3
        iqr = b.q3 - b.q1
        assert b.whisker_low >= b.q1 - 1.5 * iqr - 1e-9
        assert b.whisker_high <= b.q3 + 1.5 * iqr + 1e-9
        assert all(o < b.whisker_low or o > b.whisker_high for o in b.outliers)


def test_curve_serialization():
    c = GeCurve([3.0, 0.5], 2, [0, 1])
    assert c.to_csv() == "t,mean_rank\n1,3.0\n2,0.5\n"
    assert '"final_ranks": [0.0, 1.0]' in c.to_json()
