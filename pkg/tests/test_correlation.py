import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from corrprune import correlation as corr
from corrprune import nn


def naive_rho(x, y):
    """Direct transcription of the correlation definition (the test oracle)."""
    mx, my = np.mean(x), np.mean(y)
    cov = np.mean((x - mx) * (y - my))
    sx = np.sqrt(np.mean((x - mx) ** 2))
    sy = np.sqrt(np.mean((y - my) ** 2))
    return cov / (sx * sy)


def naive_corr_matrix(rows):
    m = rows.shape[0]
    out = np.ones((m, m))
    for i in range(m):
        for j in range(m):
            if i != j:
                out[i, j] = naive_rho(rows[i], rows[j])
    return out


# ---------------------------------------------------------------------------
# flatten_filters

def test_flatten_lenet_conv1_shape():
    layer = nn.he_conv(np.random.default_rng(0), 20, 1, 5, 5)
    fm = corr.flatten_filters(layer, layer_index=0)
    assert fm.rows.shape == (20, 25)


def test_flatten_degenerate_1x1():
    layer = nn.Conv2D(np.array([[[[2.0]]], [[[3.0]]]]), np.zeros(2))
    fm = corr.flatten_filters(layer)
    assert fm.rows.shape == (2, 1)
    assert fm.rows[:, 0].tolist() == [2.0, 3.0]


def test_flatten_index_arithmetic():
    w = np.zeros((1, 2, 3, 3))
    w[0, 1, 0, 2] = 42.0  # channel 1, row 0, col 2 -> 1*9 + 0*3 + 2 = 11
    fm = corr.flatten_filters(nn.Conv2D(w, np.zeros(1)))
    assert fm.rows[0, 11] == 42.0
    assert np.count_nonzero(fm.rows) == 1


def test_flatten_rejects_non_conv():
    with pytest.raises(TypeError):
        corr.flatten_filters(nn.Dense(np.zeros((2, 2)), np.zeros(2)))


# ---------------------------------------------------------------------------
# pearson_rho

def test_rho_self_correlation():
    x = np.array([1.0, 2.0, 5.0, -3.0])
    assert corr.pearson_rho(x, x) == 1.0


def test_rho_zero_by_symmetry():
    x = np.array([1.0, -1.0, 1.0, -1.0])
    y = np.array([1.0, 1.0, -1.0, -1.0])
    assert corr.pearson_rho(x, y) == pytest.approx(0.0, abs=1e-15)


def test_rho_hand_value():
    x = np.array([1.0, 2.0, 3.0])
    y = np.array([1.0, 2.0, 4.0])
    assert corr.pearson_rho(x, y) == pytest.approx(9.0 / np.sqrt(84.0), abs=1e-12)


def test_rho_constant_vector_raises():
    with pytest.raises(corr.DegenerateFilterError):
        corr.pearson_rho(np.ones(5), np.arange(5.0))


def test_rho_matches_naive_oracle():
    rng = np.random.default_rng(17)
    for _ in range(20):
        x = rng.normal(size=40)
        y = rng.normal(size=40)
        assert corr.pearson_rho(x, y) == pytest.approx(naive_rho(x, y), abs=1e-13)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**20), scale=st.floats(0.01, 100.0),
       shift=st.floats(-50.0, 50.0))
def test_rho_scale_shift_invariance(seed, scale, shift):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=16)
    y = rng.normal(size=16)
    base = corr.pearson_rho(x, y)
    assert corr.pearson_rho(scale * x + shift, y) == pytest.approx(base, abs=1e-12)
    assert corr.pearson_rho(-scale * x + shift, y) == pytest.approx(-base, abs=1e-12)


# ---------------------------------------------------------------------------
# corr_matrix

def test_corr_matrix_diagonal_and_symmetry():
    rng = np.random.default_rng(5)
    c = corr.corr_matrix(rng.normal(size=(8, 30)))
    assert np.array_equal(np.diag(c), np.ones(8))
    assert np.abs(c - c.T).max() < 1e-12


def test_corr_matrix_two_rows_matches_scalar():
    rng = np.random.default_rng(6)
    rows = rng.normal(size=(2, 25))
    c = corr.corr_matrix(rows)
    assert c[0, 1] == pytest.approx(corr.pearson_rho(rows[0], rows[1]), abs=1e-14)


def test_corr_matrix_matches_naive_oracle():
    rng = np.random.default_rng(7)
    for shape in [(4, 10), (12, 64), (32, 96)]:
        rows = rng.normal(size=shape)
        assert np.abs(corr.corr_matrix(rows) - naive_corr_matrix(rows)).max() < 1e-12


def test_corr_matrix_degenerate_reports_index():
    rows = np.random.default_rng(8).normal(size=(4, 10))
    rows[2] = 3.0
    with pytest.raises(corr.DegenerateFilterError) as exc:
        corr.corr_matrix(rows)
    assert exc.value.index == 2


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**20))
def test_ranked_rho_multiset_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    rows = rng.normal(size=(6, 12))
    perm = rng.permutation(6)
    base = sorted(p.rho for p in corr.rank_pairs(corr.corr_matrix(rows)))
    shuffled = sorted(p.rho for p in corr.rank_pairs(corr.corr_matrix(rows[perm])))
    assert np.allclose(base, shuffled, atol=1e-12)


# ---------------------------------------------------------------------------
# rank_pairs

def test_rank_pairs_given_values():
    c = np.eye(4)
    c[1, 2] = c[2, 1] = 0.9
    c[1, 3] = c[3, 1] = 0.2
    c[2, 3] = c[3, 2] = -0.5
    # restrict to filters 1..3 by slicing
    ranked = corr.rank_pairs(c[1:, 1:])
    assert [(p.a, p.b) for p in ranked[:3]] == [(0, 1), (0, 2), (1, 2)]


def test_rank_pairs_tie_breaks_lexicographic():
    c = np.eye(4)
    c[0, 3] = c[3, 0] = 0.5
    c[1, 2] = c[2, 1] = 0.5
    ranked = corr.rank_pairs(c)
    top_two = [(p.a, p.b) for p in ranked[:2]]
    assert top_two == [(0, 3), (1, 2)]


def test_rank_pairs_count():
    c = corr.corr_matrix(np.random.default_rng(1).normal(size=(7, 9)))
    assert len(corr.rank_pairs(c)) == 7 * 6 // 2


# ---------------------------------------------------------------------------
# select_episode

def conv_with_rows(rows):
    rows = np.asarray(rows, dtype=np.float64)
    c_out, k = rows.shape
    return nn.Conv2D(rows.reshape(c_out, 1, 1, k), np.zeros(c_out))


def test_select_greedy_disjoint_trace():
    # engineered correlations: (1,2)=0.9, (1,3)=0.8, (3,4)=0.7, rest low
    pairs = [
        corr.CorrPair(0, 1, 2, 0.9),
        corr.CorrPair(0, 1, 3, 0.8),
        corr.CorrPair(0, 3, 4, 0.7),
        corr.CorrPair(0, 0, 4, 0.1),
    ]
    picked = corr.greedy_disjoint(pairs, quota=2)
    assert [(p.a, p.b) for p in picked] == [(1, 2), (3, 4)]


def test_select_episode_zero_quota_everywhere():
    net = nn.lenet5(np.random.default_rng(0), conv_filters=(4, 6), hidden=16)
    ep = corr.select_episode(net, {i: 0 for i in net.conv_indices()})
    assert ep.is_empty()


def test_select_episode_min_filter_floor():
    rows = np.random.default_rng(2).normal(size=(2, 9))
    net = nn.Network([conv_with_rows(rows)], (1, 1, 9))
    with pytest.raises(corr.QuotaError):
        corr.select_episode(net, {0: 2})


def test_select_episode_partial_flag():
    # 3 filters allow only one disjoint pair; quota 2 is feasible by the
    # floor rule (leaves 1 filter) but cannot be filled
    rows = np.random.default_rng(3).normal(size=(3, 9))
    net = nn.Network([conv_with_rows(rows)], (1, 1, 9))
    ep = corr.select_episode(net, {0: 2})
    assert ep.partial
    assert ep.num_pairs() == 1


def test_select_episode_respects_quotas_and_disjointness():
    net = nn.lenet5(np.random.default_rng(4), conv_filters=(8, 10), hidden=16)
    i1, i2 = net.conv_indices()
    ep = corr.select_episode(net, {i1: 3, i2: 4}, index=2)
    assert ep.index == 2
    for layer_index, pairs in ep.pairs_by_layer.items():
        seen = [f for p in pairs for f in (p.a, p.b)]
        assert len(seen) == len(set(seen))
    assert len(ep.pairs_by_layer[i1]) == 3
    assert len(ep.pairs_by_layer[i2]) == 4


def test_degenerate_filters_rank_bottom_not_fatal():
    rng = np.random.default_rng(5)
    rows = rng.normal(size=(5, 9))
    rows[1] = 0.0  # constant filter
    ranked, dead = corr.layer_ranked_pairs(conv_with_rows(rows), 0)
    assert dead == [1]
    assert len(ranked) == 10
    tail = ranked[-4:]
    assert all(p.a == 1 or p.b == 1 for p in tail)
    assert all(p.rho == -1.0 for p in tail)
