import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from saftlab import merge, nn
from saftlab.merge import MergeConfig, task_vector


def vectors(seed, n=50, k=3, base_scale=1.0, tau_scale=1.0):
    rng = np.random.default_rng(seed)
    theta_0 = base_scale * rng.normal(size=n)
    thetas = [theta_0 + tau_scale * rng.normal(size=n) for _ in range(k)]
    return theta_0, thetas, [task_vector(t, theta_0, f"t{i}") for i, t in enumerate(thetas)]


def test_task_vector_examples():
    tau = task_vector(np.array([2.0, 0.0]), np.array([1.0, 1.0]))
    assert np.array_equal(tau.values, [1.0, -1.0])
    theta = np.random.default_rng(0).normal(size=5)
    assert np.all(task_vector(theta, theta).values == 0)


def test_task_vector_errors():
    with pytest.raises(ValueError):
        task_vector(np.zeros(3), np.zeros(4))


@pytest.mark.parametrize("scales", [(1.0, 1.0), (1e-3, 1.0), (1.0, 1e-3), (1e3, 1e-5), (1e-3, 1e3)])
def test_reconstruction_bit_exact(scales):
    theta_0, thetas, taus = vectors(1, n=20_000, base_scale=scales[0], tau_scale=scales[1])
    for theta, tau in zip(thetas, taus):
        # The stored difference is the plain floating-point difference ...
        assert np.array_equal(tau.values, theta - theta_0)
        # ... and a unit-coefficient merge returns the fine-tuned model exactly.
        assert np.array_equal(merge.merge_arithmetic(theta_0, [tau], [1.0]), theta)
        assert np.array_equal(merge.ties_merge(theta_0, [tau], 1.0, 0.0), theta)


def test_compensation_needed():
    # Mixed magnitudes where plain addition of the rounded difference misses theta_t.
    rng = np.random.default_rng(2)
    theta_0, theta = 1e-3 * rng.normal(size=20_000), rng.normal(size=20_000)
    tau = task_vector(theta, theta_0)
    assert np.any(theta_0 + tau.values != theta)
    assert np.array_equal(merge.merge_arithmetic(theta_0, [tau], [1.0]), theta)


def test_arithmetic_zero_alpha_is_base():
    theta_0, _, taus = vectors(3)
    assert np.array_equal(merge.merge_arithmetic(theta_0, taus, [0.0] * 3), theta_0)


def test_average_examples():
    a = np.array([0.0, 2.0])
    assert np.array_equal(merge.merge_average([a, a[::-1].copy()]), [1.0, 1.0])
    assert np.array_equal(merge.merge_average([a, a, a]), a)
    with pytest.raises(ValueError):
        merge.merge_average([])
    with pytest.raises(ValueError):
        merge.merge_average([np.zeros(2), np.zeros(3)])


@pytest.mark.parametrize("seed", range(5))
def test_average_equals_arithmetic_one_over_t(seed):
    theta_0, thetas, taus = vectors(seed, k=seed + 1)
    T = len(taus)
    avg = merge.merge_average(thetas)
    arith = merge.merge_arithmetic(theta_0, taus, [1.0 / T] * T)
    assert np.max(np.abs(avg - arith)) <= 1e-15


def test_base_mismatch_rejected():
    theta_0, _, taus = vectors(4)
    other = task_vector(np.ones(50), np.zeros(50))
    with pytest.raises(merge.BaseMismatch):
        merge.merge_arithmetic(theta_0, [taus[0], other], [1.0, 1.0])
    with pytest.raises(merge.BaseMismatch):
        merge.ties_merge(theta_0, [other], 1.0, 0.5)
    with pytest.raises(ValueError):
        merge.merge_arithmetic(theta_0, taus, [1.0])


def test_arithmetic_linearity():
    theta_0, _, taus = vectors(5)
    k = 4.0  # power of two, so k * tau and k * alpha are exact
    alphas = [0.3, -0.7, 1.1]
    a = merge.merge_arithmetic(theta_0, [t.scaled(k) for t in taus], alphas)
    b = merge.merge_arithmetic(theta_0, taus, [k * x for x in alphas])
    assert np.array_equal(a, b)


def test_ties_hand_example():
    theta_0 = np.zeros(4)
    tau1 = merge.TaskVector(np.array([1.0, -0.2, 0.05, 0.0]), merge.params_digest(theta_0), "a")
    tau2 = merge.TaskVector(np.array([-0.9, 0.3, 0.0, 0.5]), merge.params_digest(theta_0), "b")
    t1, t2 = merge.trim(tau1.values, 0.5), merge.trim(tau2.values, 0.5)
    assert np.array_equal(t1, [1.0, -0.2, 0.0, 0.0])
    assert np.array_equal(t2, [-0.9, 0.0, 0.0, 0.5])
    assert np.array_equal(merge.elect_signs(np.stack([t1, t2])), [1.0, -1.0, 1.0, 1.0])
    out = merge.ties_merge(theta_0, [tau1, tau2], 1.0, 0.5)
    assert np.array_equal(out, [1.0, -0.2, 0.0, 0.5])


def test_trim_ties_prune_lower_index_first():
    assert np.array_equal(merge.trim(np.array([0.5, -0.5, 0.5, 2.0]), 0.5), [0.0, 0.0, 0.5, 2.0])


def test_count_election():
    trimmed = np.array([[1.0], [-0.1], [-0.1]])
    assert merge.elect_signs(trimmed, "mass")[0] == 1.0
    assert merge.elect_signs(trimmed, "count")[0] == -1.0
    with pytest.raises(ValueError):
        merge.elect_signs(trimmed, "vote")


def test_ties_sign_consistent_mean():
    rng = np.random.default_rng(6)
    theta_0 = rng.normal(size=30)
    signs = rng.choice([-1.0, 1.0], size=30)
    mags = rng.uniform(0.1, 1.0, size=(3, 30))
    taus = [merge.TaskVector(signs * m, merge.params_digest(theta_0)) for m in mags]
    out = merge.ties_merge(theta_0, taus, 1.0, 0.0)
    assert np.allclose(out - theta_0, np.mean(signs * mags, axis=0), atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 40)),
              elements=st.floats(-10, 10, allow_subnormal=False)),
       st.sampled_from([0.0, 0.3, 0.5, 0.7, 0.9]))
def test_property_ties_sparsity_and_signs(mat, prune):
    theta_0 = np.zeros(mat.shape[1])
    n = mat.shape[1]
    k = int(np.floor(prune * n))
    for row in mat:
        trimmed = merge.trim(row, prune)
        # Exactly k entries are zeroed by the trim (some may have been zero already).
        kept = np.argsort(np.abs(row), kind="stable")[k:]
        assert np.array_equal(trimmed[kept], row[kept])
        assert np.count_nonzero(trimmed) == np.count_nonzero(row[kept])
        if np.all(row != 0):
            assert np.count_nonzero(trimmed) == n - k
    taus = [merge.TaskVector(r, merge.params_digest(theta_0)) for r in mat]
    out = merge.ties_merge(theta_0, taus, 1.0, prune)
    trimmed = np.stack([merge.trim(r, prune) for r in mat])
    signs = merge.elect_signs(trimmed)
    nz = out != 0
    assert np.all(np.sign(out[nz]) == signs[nz])


def test_merge_config_validation():
    with pytest.raises(ValueError):
        MergeConfig("arithmetic")
    with pytest.raises(ValueError):
        MergeConfig("ties", alpha=1.0)
    with pytest.raises(ValueError):
        MergeConfig("ties", alpha=1.0, prune_fraction=1.0)
    with pytest.raises(ValueError):
        MergeConfig("fisher")


def test_default_grids():
    assert merge.DEFAULT_ALPHA_GRID == (0.1, 0.3, 0.5, 0.7, 0.9, 1.0)
    assert merge.DEFAULT_PRUNE_GRID == (0.7, 0.8, 0.9)


def search_setup():
    spec = nn.ModelSpec((2, 2))
    theta_0 = np.zeros(spec.n_params)
    ft = nn.pack([(np.array([[1.0, 0.0], [0.0, 1.0]]), np.zeros(2))])
    tau = task_vector(ft, theta_0, "t")
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    return spec, theta_0, tau, nn.TaskDataset(x, [0, 1], "val")


def test_search_ties_to_smaller_alpha():
    spec, theta_0, tau, val = search_setup()
    # Any positive alpha classifies perfectly, so the smallest wins.
    r = merge.coefficient_search(theta_0, [tau], "arithmetic", [val], spec)
    assert r.config.alpha == 0.1
    assert len(r.table) == 6 and all(row["score"] == 1.0 for row in r.table)
    r = merge.coefficient_search(theta_0, [tau], "ties", [val], spec, prune_grid=(0.9, 0.0))
    assert (r.config.alpha, r.config.prune_fraction) == (0.1, 0.0)


def test_search_singleton_grid_and_average():
    spec, theta_0, tau, val = search_setup()
    r = merge.coefficient_search(theta_0, [tau], "arithmetic", [val], spec, alpha_grid=(0.4,))
    assert r.config.alpha == 0.4
    assert np.array_equal(r.params, merge.merge_arithmetic(theta_0, [tau], [0.4]))
    r = merge.coefficient_search(theta_0, [tau], "average", [val], spec)
    assert r.config.method == "average" and len(r.table) == 1


def test_search_errors_and_determinism():
    spec, theta_0, tau, val = search_setup()
    with pytest.raises(ValueError):
        merge.coefficient_search(theta_0, [tau], "arithmetic", [val], spec, alpha_grid=())
    with pytest.raises(ValueError):
        merge.coefficient_search(theta_0, [tau], "arithmetic", [], spec)
    a = merge.coefficient_search(theta_0, [tau], "ties", [val], spec)
    b = merge.coefficient_search(theta_0, [tau], "ties", [val], spec)
    assert a.config == b.config and a.table == b.table


def test_search_scores_mean_accuracy():
    theta_0 = np.zeros(6)
    spec = nn.ModelSpec((2, 2))
    _, _, tau, val = search_setup()
    bad = nn.TaskDataset(np.array([[1.0, 0.0]]), [1], "val")
    r = merge.coefficient_search(theta_0, [tau, tau], "arithmetic", [val, bad], spec, alpha_grid=(1.0,))
    assert r.table[0]["score"] == 0.5 and r.table[0]["per_task"] == [1.0, 0.0]
