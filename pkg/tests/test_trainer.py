import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment
from scipy.stats import binomtest

from mcqcodec.cascade import CascadeConfig, encode_cascade, reconstruction_error
from mcqcodec.quantizer import MultiCodebook, SamplerConfig, quantize_hard
from mcqcodec.trainer import (GmmSpec, TrainConfig, TrainingDiverged, as_corpus,
                              cascade_loss_and_grad, dead_code_report, init_codebooks, kmeanspp,
                              lloyd, sample_gmm, train, train_gumbel_st, train_kmeans)

CORNERS = np.array([[5.0, 5.0], [5.0, -5.0], [-5.0, 5.0], [-5.0, -5.0]])


def _four_clusters(count=100_000, seed=0):
    spec = GmmSpec(np.full(4, 0.25), CORNERS, np.ones((4, 2)))
    return sample_gmm(spec, count, seed)


def _matched_error(books):
    cw = books.level(0)[0].astype(np.float64)
    dist = np.linalg.norm(cw[:, None] - CORNERS[None], axis=-1)
    rows, cols = linear_sum_assignment(dist)
    return dist[rows, cols].max()


def test_gmm_spec_validation():
    with pytest.raises(ValueError):
        GmmSpec([0.5, 0.6], [[0.0], [1.0]], [[1.0], [1.0]])
    with pytest.raises(ValueError):
        GmmSpec([1.0], [[0.0]], [[0.0]])
    with pytest.raises(ValueError):
        GmmSpec([0.5, 0.5], [[0.0], [1.0]], [[1.0]])


def test_gmm_degenerate_component():
    data, labels = sample_gmm(GmmSpec([1.0], [[3.0, -1.0]], [[1e-12, 1e-12]]), 1000)
    np.testing.assert_allclose(data, np.broadcast_to([3.0, -1.0], data.shape), atol=1e-4)
    assert np.all(labels == 0)


def test_gmm_sample_statistics():
    weights = np.array([0.5, 0.3, 0.2])
    means = np.array([[0.0, 0.0], [4.0, 1.0], [-3.0, 6.0]])
    variances = np.array([[1.0, 2.0], [0.5, 0.5], [3.0, 1.0]])
    n = 100_000
    data, labels = sample_gmm(GmmSpec(weights, means, variances), n, seed=3)
    counts = np.bincount(labels, minlength=3)
    assert np.all(np.abs(counts - n * weights) < 3 * np.sqrt(n * weights * (1 - weights)))
    for k in range(3):
        sel = data[labels == k]
        assert np.all(np.abs(sel.mean(0) - means[k]) < 3 * np.sqrt(variances[k] / sel.shape[0]))


def test_config_validation_and_schedules():
    with pytest.raises(ValueError):
        TrainConfig(algorithm="adam")
    with pytest.raises(ValueError):
        TrainConfig(levels=2, ks=[4])
    with pytest.raises(ValueError):
        TrainConfig(lr_initial=0.0)
    with pytest.raises(ValueError):
        TrainConfig(temp_final=-1.0)
    cfg = TrainConfig(lr_initial=1.0, lr_final=0.01, temp_initial=1.0, temp_final=0.1)
    assert cfg.lr_at(0.0) == 1.0 and abs(cfg.lr_at(1.0) - 0.01) < 1e-15
    np.testing.assert_allclose(cfg.lr_at(0.5), 0.505)
    np.testing.assert_allclose([cfg.temperature_at(p) for p in (0, 0.5, 1)], [1.0, 0.1 ** 0.5, 0.1])


def test_corpus_forms():
    a = np.zeros((5, 2))
    assert as_corpus(a)[0].shape == (5, 1, 1, 2)
    assert as_corpus(np.zeros((4, 4, 3)))[0].shape == (1, 4, 4, 3)
    mixed = as_corpus([np.zeros((4, 4, 3)), np.zeros((2, 4, 4, 3)), np.zeros((2, 2, 3))])
    assert sorted(c.shape for c in mixed) == [(1, 2, 2, 3), (3, 4, 4, 3)]
    with pytest.raises(ValueError):
        as_corpus([])


def test_random_sample_init_is_permutation():
    data = np.random.default_rng(0).normal(size=(16, 3))
    books = init_codebooks(data, 1, 1, [16], "random-sample", seed=1)
    got = books.level(0)[0].astype(np.float64)
    order = np.lexsort(got.T)
    ref = data.astype(np.float32).astype(np.float64)
    np.testing.assert_array_equal(got[order], ref[np.lexsort(ref.T)])


def test_identical_data_gives_identical_codewords(caplog):
    data = np.ones((20, 2))
    with caplog.at_level("WARNING"):
        books = init_codebooks(data, 1, 1, [4], "kmeans++")
    assert np.all(books.level(0) == 1.0)
    assert "duplicate" in caplog.text
    assert len(books.duplicates()) == 6


def test_init_errors():
    with pytest.raises(ValueError):
        init_codebooks(np.zeros((3, 2)), 1, 1, [4])
    with pytest.raises(ValueError):
        init_codebooks(np.zeros((30, 2)), 1, 1, [4], "furthest-first")


def test_kmeanspp_seeds_one_per_cluster():
    data, _ = _four_clusters(20_000, seed=1)
    hits = 0
    for trial in range(100):
        seeds = kmeanspp(data, 4, np.random.default_rng(trial))
        nearest = np.argmin(((seeds[:, None] - CORNERS[None]) ** 2).sum(-1), axis=1)
        hits += len(set(nearest.tolist())) == 4
    assert hits >= 99


def test_init_level_two_sees_residuals():
    rng = np.random.default_rng(2)
    corpus = [rng.normal(size=(8, 8, 4)) for _ in range(10)]
    books = init_codebooks(corpus, 2, 2, [8, 4], "kmeans++", seed=0)
    assert books.ks == [8, 4]
    # residual scale is below the raw data scale
    assert np.abs(books.level(1)).mean() < np.abs(books.level(0)).mean()


def _toy(seed=0, shape=(1, 10, 1, 4)):
    rng = np.random.default_rng(seed)
    return rng.normal(size=shape)


def _fd_check(y, tables, tau, step=1e-4):
    _, grads = cascade_loss_and_grad(y, tables, tau, mode="soft")
    for level, table in enumerate(tables):
        fd = np.zeros_like(table)
        for idx in np.ndindex(table.shape):
            plus = [t.copy() for t in tables]
            minus = [t.copy() for t in tables]
            plus[level][idx] += step
            minus[level][idx] -= step
            fd[idx] = (cascade_loss_and_grad(y, plus, tau, mode="soft")[0]
                       - cascade_loss_and_grad(y, minus, tau, mode="soft")[0]) / (2 * step)
        rel = np.linalg.norm(grads[level] - fd) / np.linalg.norm(fd)
        assert rel < 1e-4, (level, rel)


def test_soft_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    _fd_check(_toy(3), [rng.normal(size=(2, 3, 2))], tau=0.7)


def test_soft_gradient_through_cascade():
    rng = np.random.default_rng(4)
    y = _toy(4, shape=(2, 4, 6, 4))
    _fd_check(y, [rng.normal(size=(2, 3, 2)), rng.normal(size=(2, 2, 2)) * 0.3], tau=1.3)


def test_st_forward_is_hard_quantization():
    rng = np.random.default_rng(5)
    y = rng.normal(size=(3, 8, 8, 4))
    books = MultiCodebook([rng.normal(size=(2, 6, 2)), rng.normal(size=(2, 4, 2))])
    tables = [books.level(i).astype(np.float64) for i in range(2)]
    loss, _ = cascade_loss_and_grad(y, tables, 1e-9, mode="st", rng=np.random.default_rng(0))
    ref = sum(reconstruction_error(g, books)["total"] for g in y) / (3 * 64)
    np.testing.assert_allclose(loss, ref, rtol=1e-12)


def test_st_gradient_is_probability_weighted():
    rng = np.random.default_rng(6)
    y = rng.normal(size=(1, 5, 1, 2))
    table = rng.normal(size=(1, 3, 2))
    loss, (g,) = cascade_loss_and_grad(y, [table], 1e-9, mode="st", rng=np.random.default_rng(1))
    # at tau -> 0 the weights are one-hot on the nearest codeword
    _, codes = quantize_hard(y[0], table)
    expected = np.zeros_like(table)
    q = table[0][codes[..., 0]]
    for (i, j), k in np.ndenumerate(codes[..., 0]):
        expected[0, k] += -2 * (y[0, i, j] - q[i, j]) / 5
    np.testing.assert_allclose(g, expected, atol=1e-12)
    with pytest.raises(ValueError):
        cascade_loss_and_grad(y, [table], 1.0, mode="st")


def test_k1_converges_to_mean():
    data, _ = _four_clusters(100_000, seed=2)
    data = data + np.array([4.0, -3.0])
    cfg = TrainConfig(ks=[1], epochs=30, batch_size=data.shape[0], seed=0)
    res = train_gumbel_st(data, cfg)
    word = res.books.level(0)[0, 0].astype(np.float64)
    mean = data.mean(0)
    assert np.linalg.norm(word - mean) / np.linalg.norm(mean) < 1e-3
    assert [row["epoch"] for row in res.trace] == list(range(30))


@pytest.mark.parametrize("algorithm", ["gumbel-st", "kmeans"])
def test_gmm_means_recovered(algorithm):
    data, _ = _four_clusters()
    kw = dict(epochs=10, batch_size=1000) if algorithm == "gumbel-st" else dict(epochs=50)
    res = train(data, TrainConfig(ks=[4], algorithm=algorithm, seed=0, **kw))
    assert _matched_error(res.books) < 0.15


def test_lloyd_fixed_point_and_monotone():
    data, labels = _four_clusters(5000, seed=4)
    optimal = np.stack([data[labels == k].mean(0) for k in range(4)])
    # a converged solution is a fixed point
    converged, _ = lloyd(data, optimal, 100)
    again, inertia = lloyd(data, converged, 1)
    np.testing.assert_array_equal(again, converged)
    rng = np.random.default_rng(5)
    _, inertia = lloyd(data, data[rng.choice(5000, 4, replace=False)], 50)
    assert np.all(np.diff(inertia) <= 1e-9 * inertia[0])


def test_kmeans_trace_is_monotone_per_book():
    rng = np.random.default_rng(6)
    corpus = [rng.normal(size=(8, 8, 4)) for _ in range(12)]
    res = train_kmeans(corpus, TrainConfig(levels=2, groups=2, ks=[8, 4], algorithm="kmeans", epochs=30))
    for key in {(r["level"], r["group"]) for r in res.trace}:
        vals = [r["inertia"] for r in res.trace if (r["level"], r["group"]) == key]
        assert np.all(np.diff(vals) <= 1e-9 * vals[0])


def test_empty_cluster_reseeded():
    data = np.concatenate([np.zeros((50, 2)), np.ones((50, 2)) * 10])
    start = np.array([[0.0, 0.0], [10.0, 10.0], [100.0, 100.0]])
    centroids, _ = lloyd(data, start, 1)
    assert not np.any(np.all(centroids == [100.0, 100.0], axis=1))
    kept, _ = lloyd(data, start, 1, reseed_empty=False)
    np.testing.assert_array_equal(kept[2], [100.0, 100.0])


def test_dead_code_report_examples():
    stacks = [[np.zeros((4, 4, 1), int)]]
    report = dead_code_report(stacks, [1])
    assert report["usage"][(0, 0)].tolist() == [16] and report["dead"][(0, 0)] == []
    table = np.random.default_rng(7).normal(size=(1, 6, 2))
    grid = np.broadcast_to(table[0], (3, 6, 2)).copy()
    _, codes = quantize_hard(grid, table)
    assert dead_code_report([[codes]], [6])["dead"][(0, 0)] == []
    report = dead_code_report([[np.array([[[0], [2]]])]], [4])
    assert report["dead"][(0, 0)] == [1, 3]


def _skewed_data(seed):
    grid = np.array([(x, y) for x in (-8, 0, 8) for y in (-8, 0, 8) if (x, y) != (0, 0)], float)
    spec = GmmSpec(np.array([0.72] + [0.04] * 7), grid, np.ones((8, 2)))
    return sample_gmm(spec, 4000, seed)[0]


def _dead_count(data, books):
    _, codes = quantize_hard(data[:, None, :], books.level(0))
    return len(dead_code_report([[codes]], [8])["dead"][(0, 0)])


def test_gumbel_leaves_fewer_dead_codes_than_kmeans():
    wins = 0
    for seed in range(10):
        data = _skewed_data(seed)
        rng = np.random.default_rng(seed)
        # every codeword starts far outside the data
        bad = np.array([[20.0 + i, 20.0] for i in range(8)]) + rng.normal(0, 0.1, (8, 2))
        init = MultiCodebook([bad[None]])
        km = train(data, TrainConfig(ks=[8], algorithm="kmeans", epochs=50, reseed_empty=False,
                                     seed=seed), init).books
        gs = train(data, TrainConfig(ks=[8], epochs=20, batch_size=64, lr_initial=0.5,
                                     temp_initial=1000.0, temp_final=0.1, seed=seed), init).books
        wins += _dead_count(data, gs) < _dead_count(data, km)
    assert wins > 5


def test_high_temperature_picks_are_near_uniform():
    rng = np.random.default_rng(8)
    data = rng.normal(size=(400, 16, 2))
    data = (data - data.mean()) / data.std()
    books = init_codebooks(data.reshape(-1, 2), 1, 1, [8], seed=0)
    cfg = CascadeConfig.for_books(books, SamplerConfig(100.0, 0, "gumbel"))
    codes, _, _ = encode_cascade(data, books, cfg)
    counts = np.bincount(codes[0].ravel(), minlength=8)
    assert counts.max() / counts.min() < 1.2
    # and each count is consistent with p = 1/8
    assert binomtest(int(counts.min()), counts.sum(), 1 / 8).pvalue > 1e-4


def test_divergence_guard():
    data, _ = _four_clusters(2000, seed=9)
    data = data + 50.0
    cfg = TrainConfig(ks=[1], epochs=10, batch_size=2000, lr_initial=5.0, lr_final=5.0)
    with pytest.raises(TrainingDiverged):
        train_gumbel_st(data, cfg)


def test_training_is_reproducible():
    rng = np.random.default_rng(10)
    corpus = [rng.normal(size=(8, 8, 4)) for _ in range(8)]
    cfg = TrainConfig(levels=2, groups=2, ks=[8, 4], epochs=3, batch_size=4, seed=5)
    a = train(corpus, cfg)
    b = train(corpus, cfg)
    assert a.books.digest() == b.books.digest()
    assert a.trace == b.trace
    c = train(corpus, TrainConfig(levels=2, groups=2, ks=[8, 4], epochs=3, batch_size=4, seed=6))
    assert c.books.digest() != a.books.digest()


def test_duplicates_perturbed_after_training():
    data = np.concatenate([np.zeros((30, 2)), np.ones((30, 2))])
    init = MultiCodebook([np.array([[[0.0, 0.0], [5.0, 5.0], [5.0, 5.0]]])])
    res = train_kmeans(data, TrainConfig(ks=[3], algorithm="kmeans", epochs=5, reseed_empty=False), init)
    assert res.flagged == [(0, 0, 2)]
    assert res.books.duplicates() == []
