import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import brute_force_partition, margin_separated, same_partition, spherical_cost

from vqtoken.quantizer import (
    ClusterAssignment,
    QuantizerConfig,
    QuantizerError,
    assignment_cost,
    cluster_cohesion,
    cosine_sim,
    kmeans_adaptive,
    kmeans_fixed,
    quantize,
)
from vqtoken.tensor_ops import FlopCounter
from vqtoken.token_grid import SynthConfig, clip_layout, synthesize_clip


def fixed(k, seed=0, **kw):
    return QuantizerConfig(mode="fixed", k=k, seed=seed, **kw)


def adaptive(seed=0, **kw):
    kw = {"tau": 0.95, "k_min": 2, "k_max": 64, **kw}
    return QuantizerConfig(mode="adaptive", seed=seed, **kw)


# --- cosine ----------------------------------------------------------------


def test_cosine_examples():
    assert cosine_sim([1, 0], [1, 0]) == 1.0
    assert cosine_sim([1, 0], [0, 1]) == 0.0
    assert cosine_sim([1, 1], [1, 0]) == pytest.approx(0.7071, abs=1e-4)


def test_cosine_zero_guard():
    assert cosine_sim([0, 0], [1, 2]) == 0.0
    assert cosine_sim([0, 0], [0, 0]) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_cosine_range_and_symmetry(a, b):
    c = cosine_sim(a, b)
    assert -1.0 <= c <= 1.0
    assert c == pytest.approx(cosine_sim(b, a), abs=1e-15)


# --- config ----------------------------------------------------------------


def test_config_validation():
    with pytest.raises(QuantizerError):
        QuantizerConfig(mode="other")
    with pytest.raises(QuantizerError):
        QuantizerConfig(k=0)
    with pytest.raises(QuantizerError):
        QuantizerConfig(mode="adaptive", k_min=5, k_max=4)
    with pytest.raises(QuantizerError):
        QuantizerConfig(mode="adaptive", tau=1.0)
    with pytest.raises(QuantizerError):
        QuantizerConfig(max_iters=0)


# --- fixed mode ------------------------------------------------------------


def test_k_equals_n_is_identity():
    x = np.random.default_rng(0).normal(size=(6, 3))
    a = kmeans_fixed(x, fixed(6))
    assert sorted(a.assignments.tolist()) == list(range(6))
    assert a.final_cost == pytest.approx(0.0, abs=1e-15)
    assert assignment_cost(x, a) == pytest.approx(0.0, abs=1e-15)


def test_k_one_single_cluster():
    x = np.random.default_rng(1).normal(size=(9, 3))
    a = kmeans_fixed(x, fixed(1))
    assert (a.assignments == 0).all() and a.k == 1


def test_four_token_example_matches_brute_force():
    x = np.array([(1, 0), (0.99, 0.05), (0, 1), (0.05, 0.99)])
    a = kmeans_fixed(x, fixed(2))
    assert same_partition(a.assignments, [0, 0, 1, 1])
    best, labels = brute_force_partition(x, 2)
    assert same_partition(labels, [0, 0, 1, 1])
    assert assignment_cost(x, a) == pytest.approx(best, abs=1e-12)


def test_identical_tokens_cost_zero():
    x = np.tile([[0.3, -1.2, 2.0]], (5, 1))
    a = kmeans_fixed(x, fixed(1))
    assert assignment_cost(x, a) == pytest.approx(0.0, abs=1e-15)


def test_assignment_cost_matches_loop_oracle():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(10, 4))
    labels = np.array([0, 1, 2] * 3 + [0])
    a = ClusterAssignment(labels, 3)
    assert assignment_cost(x, a) == pytest.approx(spherical_cost(x, labels, 3), abs=1e-14)


def test_errors():
    with pytest.raises(QuantizerError):
        kmeans_fixed(np.ones((3, 2)), fixed(4))
    with pytest.raises(QuantizerError):
        kmeans_fixed(np.array([[1.0, np.inf]]), fixed(1))
    with pytest.raises(QuantizerError):
        kmeans_fixed(np.zeros((0, 2)), fixed(1))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 30), st.integers(1, 6), st.integers(0, 10_000))
def test_partition_valid_and_monotone(n, k, seed):
    k = min(k, n)
    x = np.random.default_rng(seed).normal(size=(n, 3))
    a = kmeans_fixed(x, fixed(k, seed=seed))
    a.validate()
    members = a.member_sets
    assert sorted(np.concatenate(members).tolist()) == list(range(n))
    for j, s in enumerate(members):
        assert (a.assignments[s] == j).all()
    assert np.all(np.diff(a.cost_history) <= 1e-12)
    assert a.final_cost == pytest.approx(assignment_cost(x, a), abs=1e-12)


def test_duplicates_keep_k_exact():
    # fewer distinct points than clusters forces the empty-cluster repair
    x = np.array([[1.0, 0.0]] * 4 + [[0.0, 1.0]] * 4)
    a = kmeans_fixed(x, fixed(3))
    a.validate()
    assert a.k == 3


def test_determinism():
    x = np.random.default_rng(4).normal(size=(40, 5))
    a = kmeans_fixed(x, fixed(5, seed=7))
    b = kmeans_fixed(x, fixed(5, seed=7))
    assert np.array_equal(a.assignments, b.assignments)


@pytest.mark.parametrize("seed", range(10))
def test_local_optimum_vs_restarts(seed):
    x, _ = margin_separated(seed, 8, 3)
    best_restart = min(assignment_cost(x, kmeans_fixed(x, fixed(3, seed=1000 + r))) for r in range(50))
    a = kmeans_fixed(x, fixed(3, seed=seed))
    assert assignment_cost(x, a) <= best_restart + 1e-9


@pytest.mark.parametrize("num_objects", [1, 2, 3, 4, 5])
def test_fixed_k_recovers_ground_truth(num_objects):
    for seed in range(10):
        cfg = SynthConfig(num_objects=num_objects, noise_std=0.0, seed=seed)
        grid, _ = synthesize_clip(cfg)
        a = kmeans_fixed(grid.embeddings, fixed(num_objects + 1, seed=seed))
        assert same_partition(a.assignments, clip_layout(cfg).reshape(-1))


def test_flops_are_counted():
    x = np.random.default_rng(0).normal(size=(20, 4))
    with FlopCounter() as fc:
        kmeans_fixed(x, fixed(3))
    assert fc.by_tag["similarity"] > 0 and fc.by_tag["centroid_update"] > 0


# --- adaptive mode ---------------------------------------------------------


def test_adaptive_three_objects():
    cfg = SynthConfig(num_objects=3, noise_std=0.0, seed=0)
    grid, _ = synthesize_clip(cfg)
    a = kmeans_adaptive(grid.embeddings, adaptive())
    assert a.k == 4
    assert same_partition(a.assignments, clip_layout(cfg).reshape(-1))


def test_adaptive_identical_tokens_no_split():
    x = np.tile([[1.0, 2.0, 3.0]], (12, 1))
    a = kmeans_adaptive(x, adaptive(k_min=3))
    assert a.k == 3


def test_adaptive_tiny_tau_keeps_k_min():
    x = np.random.default_rng(0).normal(size=(30, 4))
    a = kmeans_adaptive(x, adaptive(tau=1e-9, k_min=2))
    assert a.k == 2


def test_adaptive_bounds_and_cohesion():
    x = np.random.default_rng(2).normal(size=(60, 6))
    cfg = adaptive(tau=0.9, k_min=2, k_max=9)
    a = kmeans_adaptive(x, cfg)
    a.validate()
    assert 2 <= a.k <= 9
    if a.k < 9:
        coh = cluster_cohesion(x, a)
        assert (coh[a.sizes() > 1] >= cfg.tau).all()


def test_adaptive_k_min_above_n():
    with pytest.raises(QuantizerError):
        kmeans_adaptive(np.ones((3, 2)), adaptive(k_min=4))


def test_adaptive_k_monotone_in_objects():
    for seed in range(10):
        ks = []
        for o in range(1, 6):
            grid, _ = synthesize_clip(SynthConfig(num_objects=o, noise_std=0.0, seed=seed))
            ks.append(quantize(grid.embeddings, adaptive(seed=seed)).k)
        assert ks == sorted(ks)


def test_adaptive_monotone_cost_within_each_refinement():
    grid, _ = synthesize_clip(SynthConfig(num_objects=4, noise_std=0.3, seed=1))
    a = kmeans_adaptive(grid.embeddings, adaptive())
    assert a.final_cost == pytest.approx(assignment_cost(grid.embeddings, a), abs=1e-12)
