import numpy as np
import pytest

import tracemine.selection as sel
from tracemine.errors import DataError
from tracemine.graph import FEATURE_NAMES, feature_table
from tracemine.selection import (
    SelectionResult,
    extra_trees_importance,
    pca_scores,
    pca_spectrum,
    rfe_linear_rank,
    select_targets,
    standardize,
)
from tracemine.synth import SynthSpec, generate_synthetic_trace


def test_standardize_two_values():
    z, mean, std = standardize(np.array([[1.0], [3.0]]))
    assert z[:, 0].tolist() == [-1.0, 1.0]
    assert mean[0] == 2 and std[0] == 1


def test_standardize_constant_column_flagged():
    z, _, std = standardize(np.array([[5.0, 1], [5.0, 2], [5.0, 4]]))
    assert z[:, 0].tolist() == [0, 0, 0] and std[0] == 0 and std[1] > 0


def test_standardize_idempotent(rng):
    z, _, _ = standardize(rng.normal(size=(30, 4)))
    z2, _, _ = standardize(z)
    np.testing.assert_allclose(z2, z, atol=1e-9)
    assert np.all(np.abs(z.mean(axis=0)) < 1e-9)
    np.testing.assert_allclose(z.var(axis=0), 1)


def test_standardize_needs_two_rows():
    with pytest.raises(DataError):
        standardize(np.ones((1, 3)))


def test_pca_constant_second_feature_scores_lower(rng):
    x = np.column_stack([rng.normal(size=40), np.zeros(40)])
    z, _, _ = standardize(x)
    s = pca_scores(z)
    assert s[0] > s[1]


def test_pca_correlated_pair_equal(rng):
    a = rng.normal(size=50)
    z, _, _ = standardize(np.column_stack([a, 2 * a + 1, rng.normal(size=50)]))
    s = pca_scores(z)
    assert abs(s[0] - s[1]) < 1e-9


def test_pca_clamps_components(rng):
    z, _, _ = standardize(rng.normal(size=(20, 3)))
    np.testing.assert_allclose(pca_scores(z, n_components=10), pca_scores(z, n_components=3))


def _power_eigenvalues(c, iters=5000):
    """Eigenvalues of a symmetric PSD matrix by power iteration with deflation."""
    c = c.copy()
    out = []
    v0 = np.linspace(1, 2, c.shape[0])
    for _ in range(c.shape[0]):
        v = v0 / np.linalg.norm(v0)
        for _ in range(iters):
            w = c @ v
            nw = np.linalg.norm(w)
            if nw < 1e-14:
                break
            v = w / nw
        lam = float(v @ c @ v)
        out.append(lam)
        c = c - lam * np.outer(v, v)
    return sorted(out, reverse=True)


def test_pca_spectrum_against_power_iteration(rng):
    mix = rng.normal(size=(4, 4))
    z, _, _ = standardize(rng.normal(size=(60, 4)) @ mix)
    vals, vecs = pca_spectrum(z)
    np.testing.assert_allclose(vals, _power_eigenvalues(np.cov(z.T)), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(vecs.T @ vecs, np.eye(4), atol=1e-10)


def test_pca_sign_flip_invariant(rng):
    z, _, _ = standardize(rng.normal(size=(30, 3)) @ rng.normal(size=(3, 3)))
    np.testing.assert_allclose(pca_scores(-z), pca_scores(z), atol=1e-12)


def test_extra_trees_signal_beats_noise(rng):
    x = rng.normal(size=(500, 2))
    imp = extra_trees_importance(x, x[:, 0].copy(), seed=0)
    assert imp[0] > imp[1]


def test_extra_trees_constant_target(rng):
    imp = extra_trees_importance(rng.normal(size=(50, 3)), np.full(50, 7.0))
    assert imp.tolist() == [0, 0, 0]


def test_extra_trees_needs_two_samples():
    with pytest.raises(DataError):
        extra_trees_importance(np.ones((1, 2)), np.ones(1))


def _best_split_tree_importance(x, y, max_depth=12, min_leaf=5):
    """Greedy regression tree trying every feature and every midpoint threshold."""
    imp = np.zeros(x.shape[1])

    def grow(idx, depth):
        if depth >= max_depth or len(idx) < 2 * min_leaf:
            return
        yy = y[idx]
        sse = ((yy - yy.mean()) ** 2).sum()
        best = (0.0, None, None)
        for f in range(x.shape[1]):
            vals = np.unique(x[idx, f])
            for a, b in zip(vals[:-1], vals[1:]):
                left = x[idx, f] <= (a + b) / 2
                nl = left.sum()
                if nl < min_leaf or len(idx) - nl < min_leaf:
                    continue
                yl, yr = yy[left], yy[~left]
                gain = sse - ((yl - yl.mean()) ** 2).sum() - ((yr - yr.mean()) ** 2).sum()
                if gain > best[0] + 1e-12:
                    best = (gain, f, left)
        if best[1] is None:
            return
        imp[best[1]] += best[0]
        grow(idx[best[2]], depth + 1)
        grow(idx[~best[2]], depth + 1)

    grow(np.arange(len(y)), 0)
    return imp / imp.sum()


def test_extra_trees_ordering_matches_exhaustive_tree(rng):
    x = rng.normal(size=(50, 2))
    y = x[:, 0] + 0.1 * x[:, 1]
    ours = extra_trees_importance(x, y, seed=3)
    ref = _best_split_tree_importance(x, y)
    assert np.argmax(ours) == np.argmax(ref) == 0
    assert ours[0] > ours[1] and ref[0] > ref[1]


def test_extra_trees_seeded(rng):
    x = rng.normal(size=(80, 4))
    y = x @ [1.0, 0.5, 0, 0]
    np.testing.assert_array_equal(extra_trees_importance(x, y, seed=5), extra_trees_importance(x, y, seed=5))


def test_rfe_drops_unused_feature_first(rng):
    x = rng.normal(size=(40, 2))
    rank = rfe_linear_rank(x, 3 * x[:, 0])
    assert rank.tolist() == [1, 2]


def test_rfe_single_feature(rng):
    assert rfe_linear_rank(rng.normal(size=(10, 1)), rng.normal(size=10)).tolist() == [1]


def _rfe_normal_equations(x, y, ridge=1e-8):
    xc, yc = x - x.mean(0), y - y.mean()
    alive = list(range(x.shape[1]))
    rank = {}
    while alive:
        a = xc[:, alive]
        coef = np.linalg.solve(a.T @ a + ridge * np.eye(len(alive)), a.T @ yc)
        drop = alive[int(np.argmin(np.abs(coef)))]
        rank[drop] = len(alive)
        alive.remove(drop)
    return [rank[i] for i in range(x.shape[1])]


def test_rfe_matches_normal_equations(rng):
    for _ in range(10):
        x = rng.normal(size=(60, 6))
        y = x @ rng.normal(size=6) + 0.1 * rng.normal(size=60)
        assert rfe_linear_rank(x, y).tolist() == _rfe_normal_equations(x, y)


def _fake_techniques(monkeypatch, pca, trees, rfe_rank):
    monkeypatch.setattr(sel, "pca_scores", lambda z: np.asarray(pca, float))
    monkeypatch.setattr(sel, "extra_trees_importance", lambda z, y, **kw: np.asarray(trees, float))
    monkeypatch.setattr(sel, "rfe_linear_rank", lambda z, y: np.asarray(rfe_rank))


def test_vote_agreeing_techniques_give_five(monkeypatch, rng):
    names = [f"f{i:02d}" for i in range(20)]
    s = np.arange(20, 0, -1.0)
    _fake_techniques(monkeypatch, s, s, np.arange(1, 21))
    res = select_targets(rng.normal(size=(30, 20)), rng.normal(size=30), names)
    assert res.chosen_targets == names[:5]


def test_vote_disjoint_techniques_give_fifteen(monkeypatch, rng):
    names = [f"f{i:02d}" for i in range(20)]
    pca = np.where(np.arange(20) < 5, 10.0, 0.0)
    trees = np.where((np.arange(20) >= 5) & (np.arange(20) < 10), 10.0, 0.0)
    rfe = np.concatenate([np.arange(6, 16), np.arange(1, 6), np.arange(16, 21)])
    _fake_techniques(monkeypatch, pca, trees, rfe)
    res = select_targets(rng.normal(size=(30, 20)), rng.normal(size=30), names)
    assert len(res.chosen_targets) == 15


def _synth_features(seed=0):
    jobs, _ = generate_synthetic_trace(SynthSpec(n_families=20, recurrences_per_family=3, n_noise_jobs=60), seed)
    return feature_table(jobs)


def test_instance_count_driving_runtime_is_chosen(rng):
    x = _synth_features()
    col = FEATURE_NAMES.index("total_instance_num")
    y = 0.8 * x[:, col] + rng.normal(scale=0.05 * x[:, col].std(), size=len(x))
    res = select_targets(x, y, FEATURE_NAMES, seed=0)
    assert "total_instance_num" in res.chosen_targets
    assert res.rankings["rfe"][0] == "total_instance_num"


def test_vote_invariant_under_column_reordering(rng):
    x = _synth_features(1)
    y = x[:, 0] * 3 + rng.normal(size=len(x))
    perm = rng.permutation(20)
    a = select_targets(x, y, FEATURE_NAMES, seed=4)
    b = select_targets(x[:, perm], y, [FEATURE_NAMES[i] for i in perm], seed=4)
    assert a.to_dict() == b.to_dict()


def test_vote_deterministic_and_roundtrip(tmp_path, rng):
    x = _synth_features(2)
    y = rng.normal(size=len(x))
    a = select_targets(x, y, FEATURE_NAMES, seed=9)
    b = select_targets(x, y, FEATURE_NAMES, seed=9)
    assert a == b
    assert 5 <= len(a.chosen_targets) <= 15
    a.save(tmp_path / "s.json")
    assert SelectionResult.load(tmp_path / "s.json") == a


def test_vote_rejects_runtime_column(rng):
    with pytest.raises(DataError):
        select_targets(rng.normal(size=(5, 2)), rng.normal(size=5), ["a", "runtime_s"])
