import math

import numpy as np
import pytest

from tracemine.encoder import (
    EncoderModel,
    GraphBatch,
    TrainConfig,
    batch_objective,
    dropout_mask,
    encode_all,
    euclidean,
    forward,
    forward_batch,
    init_model,
    mine_triplets,
    quantile_labels,
    read_embeddings,
    train,
    triplet_loss,
    write_embeddings,
)
from tracemine.errors import ConfigError, DataError
from tracemine.graph import permute_nodes

from conftest import make_graph, random_dag, random_permutation_map


def test_init_same_seed_identical():
    a, b = init_model(3), init_model(3)
    assert all(np.array_equal(p, q) for p, q in zip(a.params(), b.params()))


def test_init_different_seeds_differ():
    a, b = init_model(3), init_model(4)
    assert any(not np.array_equal(p, q) for p, q in zip(a.params(), b.params()))


def test_init_glorot_bounds_and_zero_bias():
    m = init_model(0, in_dim=3, hidden_dim=8, n_layers=2, max_degree=4)
    assert np.abs(m.self_w[0]).max() <= math.sqrt(6 / 11)
    assert np.abs(m.neigh_w[1]).max() <= math.sqrt(6 / 16)
    assert all(np.all(b == 0) for b in m.bias)


def test_zero_max_degree_single_bucket(rng):
    m = init_model(0, hidden_dim=4, n_layers=2, max_degree=0)
    assert m.self_w[0].shape == (1, 3, 4)
    g = random_dag(rng, 8, 0.4)
    batch = GraphBatch.from_graphs([g], m)
    assert [d for d, _ in batch.buckets] == [0]


def test_zero_weights_zero_embedding(rng):
    m = EncoderModel(3, 5, 4, 10)
    emb = forward(m, random_dag(rng, 7)).vector
    assert emb.tolist() == [0.0] * 5


def test_hand_computed_two_node_graph():
    m = EncoderModel(1, 1, 1, 10)
    m.self_w[0][1] = [[0.5]]
    m.neigh_w[0][1] = [[-2.0]]
    m.bias[0][1] = [0.25]
    g = make_graph(2, [(1, 2)])
    batch = GraphBatch([np.array([[1.0], [3.0]])], [np.array([[0, 1]])], 10)
    out, _ = forward_batch(m, batch)
    # node 1: 0.5*1 - 2*3 + 0.25 = -5.25; node 2: 0.5*3 - 2*1 + 0.25 = -0.25
    expected = (math.expm1(-5.25) + math.expm1(-0.25)) / 2
    assert out[0, 0] == pytest.approx(expected, abs=1e-12)
    assert g.n == 2


def test_dimension_mismatch_raises():
    m = init_model(0, in_dim=2, hidden_dim=4, n_layers=1)
    with pytest.raises(DataError):
        forward(m, make_graph(3))


def _fitted_model(rng, graphs, **kw):
    m = init_model(int(rng.integers(1000)), **kw)
    m.fit_scaler(graphs)
    return m


def test_eval_embedding_permutation_invariant(rng):
    for _ in range(10):
        g = random_dag(rng, int(rng.integers(2, 25)), 0.3)
        m = _fitted_model(rng, [g], hidden_dim=16)
        h = permute_nodes(g, random_permutation_map(rng, g))
        np.testing.assert_allclose(forward(m, h).vector, forward(m, g).vector, atol=1e-9, rtol=0)


def test_encode_all_repeatable_and_duplicates(rng):
    graphs = [random_dag(rng, 10, name=f"j{i}") for i in range(5)]
    graphs.append(graphs[2])
    m = _fitted_model(rng, graphs, hidden_dim=8)
    a, b = encode_all(m, graphs), encode_all(m, graphs)
    assert np.array_equal(a, b)
    assert np.array_equal(a[2], a[5])
    np.testing.assert_allclose(a[1], forward(m, graphs[1]).vector, atol=1e-12)


def test_dropout_preserves_expectation(rng):
    g = random_dag(rng, 12, 0.3)
    m = _fitted_model(rng, [g], hidden_dim=64)
    clean = forward(m, g).vector
    masks = dropout_mask(np.random.default_rng(0), (20000, 64), 0.5)
    mean = (clean * masks).mean(axis=0)
    assert np.linalg.norm(mean - clean) / np.linalg.norm(clean) < 0.02
    assert set(np.unique(masks)) == {0.0, 2.0}


def test_quantile_labels_two_bins():
    assert quantile_labels(np.arange(1, 11), 2).tolist() == [0] * 5 + [1] * 5


def test_quantile_labels_constant():
    assert quantile_labels([4.0] * 6, 3).tolist() == [0] * 6


def test_quantile_labels_thousand_values(rng):
    counts = np.bincount(quantile_labels(rng.uniform(size=1000), 10), minlength=10)
    assert np.all(np.abs(counts - 100) <= 1)


def test_quantile_labels_rejects_single_bin():
    with pytest.raises(ConfigError):
        quantile_labels([1, 2], 1)


def test_euclidean_examples():
    assert euclidean([0, 0], [3, 4]) == 5
    assert euclidean([1, 2], [1, 2]) == 0
    with pytest.raises(DataError):
        euclidean([1, 2], [1, 2, 3])


def _brute_triplets(emb, labels, eps):
    n = len(labels)
    d = [[euclidean(emb[i], emb[j]) for j in range(n)] for i in range(n)]
    out = set()
    for a in range(n):
        pos = [p for p in range(n) if p != a and labels[p] == labels[a]]
        neg = [q for q in range(n) if labels[q] != labels[a]]
        if not pos or not neg:
            continue
        hard_neg = min(d[a][q] for q in neg)
        hard_pos = max(d[a][p] for p in pos)
        kept_p = [p for p in pos if d[a][p] > hard_neg - eps]
        kept_n = [q for q in neg if d[a][q] < hard_pos + eps]
        out.update((a, p, q) for p in kept_p for q in kept_n)
    return out


def test_mining_matches_brute_force(rng):
    for _ in range(20):
        emb = rng.normal(size=(12, 3))
        labels = rng.integers(0, 3, 12)
        got = {tuple(t) for t in mine_triplets(emb, labels, 0.1).tolist()}
        assert got == _brute_triplets(emb, labels, 0.1)


def test_mining_separated_clusters_nearly_empty(rng):
    emb = np.vstack([rng.normal(scale=0.01, size=(5, 2)), 10 + rng.normal(scale=0.01, size=(5, 2))])
    assert len(mine_triplets(emb, [0] * 5 + [1] * 5, 0.1)) == 0


def test_mining_keeps_mislabeled_point(rng):
    emb = np.vstack([rng.normal(scale=0.01, size=(5, 2)), 10 + rng.normal(scale=0.01, size=(5, 2))])
    labels = [0] * 5 + [1] * 5
    labels[1] = 1
    t = mine_triplets(emb, labels, 0.1)
    assert len(t) > 0 and np.any(t == 1)


def test_mining_single_label_empty(rng):
    assert len(mine_triplets(rng.normal(size=(6, 2)), [3] * 6, 0.1)) == 0


def test_triplet_loss_examples():
    emb = np.array([[0.0], [0.0], [0.5]])
    assert triplet_loss([(0, 1, 2)], emb, 0.1) == 0
    emb = np.array([[0.0], [0.5], [-0.5]])
    assert triplet_loss([(0, 1, 2)], emb, 0.1) == pytest.approx(0.1)
    emb = np.array([[0.0], [0.0], [0.5], [0.5], [-0.7]])
    # terms: max(0, 0 - 0.5 + 0.1) = 0 and max(0, 0.5 - 0.7 + 0.5) = 0.3
    assert triplet_loss([(0, 1, 2), (0, 3, 4)], emb, 0.5) == pytest.approx(0.15)
    assert triplet_loss([], emb, 0.1) == 0


def test_triplet_loss_monotone_in_positive_distance(rng):
    for _ in range(200):
        emb = rng.normal(size=(3, 4))
        before = triplet_loss([(0, 1, 2)], emb, 0.2)
        closer = emb.copy()
        closer[1] = emb[0] + rng.uniform(0, 1) * (emb[1] - emb[0])
        assert triplet_loss([(0, 1, 2)], closer, 0.2) <= before + 1e-15


def _tiny_setup(rng, hidden=1, layers=1, max_degree=3):
    graphs = [random_dag(rng, int(rng.integers(2, 7)), 0.5, name=f"g{i}") for i in range(6)]
    m = init_model(int(rng.integers(100)), hidden_dim=hidden, n_layers=layers, max_degree=max_degree)
    m.fit_scaler(graphs)
    for b in m.bias:
        b += rng.normal(scale=0.3, size=b.shape)
    labels = np.column_stack([[0, 0, 1, 1, 2, 2], [0, 1, 0, 1, 0, 1]])
    return m, GraphBatch.from_graphs(graphs, m), labels


@pytest.mark.parametrize("hidden, layers", [(1, 1), (3, 2)])
def test_gradients_match_finite_differences(rng, hidden, layers):
    cfg = TrainConfig(margin=0.5, weight_decay=1e-2, dropout_p=0.0)
    h = 1e-5
    for _ in range(3):
        m, batch, labels = _tiny_setup(rng, hidden, layers)
        loss, grads, mined = batch_objective(m, batch, labels, cfg)
        assert loss > 0
        for p, g in zip(m.params(), grads):
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + h
                up = batch_objective(m, batch, labels, cfg, mined=mined, with_grad=False)[0]
                p[idx] = old - h
                down = batch_objective(m, batch, labels, cfg, mined=mined, with_grad=False)[0]
                p[idx] = old
                fd = (up - down) / (2 * h)
                assert abs(fd - g[idx]) <= max(1e-4 * max(abs(fd), abs(g[idx])), 1e-7), (idx, fd, g[idx])


def test_gradients_with_dropout_mask(rng):
    cfg = TrainConfig(margin=0.5, weight_decay=0.0)
    m, batch, labels = _tiny_setup(rng, hidden=4, layers=1)
    mask = dropout_mask(rng, (6, 4), 0.5)
    _, grads, mined = batch_objective(m, batch, labels, cfg, mask=mask)
    p = m.neigh_w[0]
    h = 1e-5
    for idx in list(np.ndindex(p.shape))[:12]:
        old = p[idx]
        p[idx] = old + h
        up = batch_objective(m, batch, labels, cfg, mask=mask, mined=mined, with_grad=False)[0]
        p[idx] = old - h
        down = batch_objective(m, batch, labels, cfg, mask=mask, mined=mined, with_grad=False)[0]
        p[idx] = old
        assert abs((up - down) / (2 * h) - grads[1][idx]) <= 1e-6


def _family_graphs(rng, n_each=12):
    graphs, inst = [], []
    for fam, scale in ((0, 5), (1, 80)):
        for k in range(n_each):
            n = 10
            attrs = np.column_stack([np.full(n, 100.0) * (1 + 0.05 * rng.uniform(-1, 1, n)),
                                     np.full(n, 1.0), np.maximum(1, np.round(scale * rng.uniform(0.9, 1.1, n)))])
            g = make_graph(n, [(i, i + 1) for i in range(1, n)], f"f{fam}_{k}", attrs)
            graphs.append(g)
            inst.append(attrs[:, 2].sum())
    return graphs, np.array(inst)[:, None]


def test_zero_learning_rate_changes_nothing(rng):
    graphs, targets = _family_graphs(rng, 6)
    m = init_model(1, hidden_dim=8, n_layers=2)
    m.fit_scaler(graphs)
    cfg = TrainConfig(learning_rate=0.0, max_epochs=3, patience=5, hidden_dim=8, n_layers=2, batch_size=8)
    out, hist = train(m, graphs, targets, graphs, targets, cfg)
    assert all(np.array_equal(p, q) for p, q in zip(out.params(), m.params()))
    assert len(set(hist.val_loss)) == 1


def test_training_separates_two_families(rng):
    graphs, targets = _family_graphs(rng)
    m = init_model(2, hidden_dim=16, n_layers=2)
    m.fit_scaler(graphs)
    cfg = TrainConfig(learning_rate=1e-2, max_epochs=40, patience=10, batch_size=16, hidden_dim=16,
                      n_layers=2, n_label_bins=2, seed=2)
    val_idx = np.r_[0:3, 12:15]
    tr_idx = np.setdiff1d(np.arange(24), val_idx)
    out, hist = train(m, [graphs[i] for i in tr_idx], targets[tr_idx],
                      [graphs[i] for i in val_idx], targets[val_idx], cfg)
    emb = encode_all(out, graphs)
    d = np.linalg.norm(emb[:, None] - emb[None], axis=2)
    fam = np.repeat([0, 1], 12)
    same = (fam[:, None] == fam[None]) & ~np.eye(24, dtype=bool)
    assert np.median(d[~same & ~np.eye(24, dtype=bool)]) > np.median(d[same])
    assert hist.best_epoch >= 0


def test_model_and_embedding_roundtrip(tmp_path, rng):
    graphs = [random_dag(rng, 8, name=f"j{i}") for i in range(4)]
    m = _fitted_model(rng, graphs, hidden_dim=6, n_layers=2)
    m.save(tmp_path / "model.json")
    back = EncoderModel.load(tmp_path / "model.json")
    assert np.array_equal(encode_all(back, graphs), encode_all(m, graphs))
    emb = encode_all(m, graphs)
    write_embeddings(tmp_path / "e.csv", [g.job_name for g in graphs], emb)
    names, again = read_embeddings(tmp_path / "e.csv")
    assert names == ["j0", "j1", "j2", "j3"] and np.array_equal(again, emb)


def test_bad_model_format(tmp_path):
    d = init_model(0, hidden_dim=2, n_layers=1).to_dict()
    d["format"] = "other"
    with pytest.raises(DataError):
        EncoderModel.from_dict(d)
