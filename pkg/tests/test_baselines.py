import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vqtoken.baselines import (
    ReducerSpec,
    default_interp_shape,
    factor_target,
    interpolate_tokens,
    merge_schedule,
    merge_tome,
    merge_vidtome,
    prune_tokens,
    reduce_grid,
    saliency,
)
from vqtoken.tensor_ops import ContractError
from vqtoken.token_grid import SynthConfig, TokenGrid, synthesize_clip


def rand_grid(T=2, H=2, W=2, D=4, seed=0):
    rng = np.random.default_rng(seed)
    return TokenGrid(T, H, W, D, rng.normal(size=(T * H * W, D)))


def check_sources(seq, grid, disjoint=True):
    cells = np.concatenate(seq.source_map)
    assert cells.min() >= 0 and cells.max() < grid.n_tokens
    if disjoint:
        assert len(np.unique(cells)) == len(cells)


# --- spec -------------------------------------------------------------------


def test_spec_validation():
    with pytest.raises(ContractError):
        ReducerSpec("bogus", 3)
    with pytest.raises(ContractError):
        ReducerSpec("prune", 0)
    with pytest.raises(ContractError):
        ReducerSpec("prune", ratio=1.5)
    assert ReducerSpec("prune", ratio=0.25).resolve(288) == 72
    with pytest.raises(ContractError):
        ReducerSpec("prune", 300).resolve(288)
    with pytest.raises(ContractError):
        ReducerSpec("prune").resolve(10)


# --- pruning ------------------------------------------------------------------


def test_prune_identity():
    g = rand_grid()
    out = prune_tokens(g, g.n_tokens)
    assert np.array_equal(out.tokens, g.embeddings)


def test_prune_keeps_nonzero():
    g = TokenGrid(1, 1, 2, 2, np.array([[0.0, 0.0], [1.0, 2.0]]))
    out = prune_tokens(g, 1)
    assert np.array_equal(out.tokens, [[1.0, 2.0]])
    assert out.source_map[0].tolist() == [1]


def test_prune_top_k_against_full_sort():
    g = rand_grid(1, 2, 3, 4, seed=3)
    x = g.embeddings
    mean = x.mean(axis=0)
    scores = []
    for t in x:
        cos = t @ mean / (np.linalg.norm(t) * np.linalg.norm(mean))
        scores.append(np.linalg.norm(t) * (1 - cos))
    np.testing.assert_allclose(saliency(g), scores, atol=1e-12)
    assert len(set(np.round(scores, 12))) == 6
    top = sorted(sorted(range(6), key=lambda i: -scores[i])[:3])
    out = prune_tokens(g, 3)
    assert [int(s[0]) for s in out.source_map] == top
    assert np.array_equal(out.tokens, x[top])


def test_prune_ties_to_lower_index():
    g = rand_grid(1, 2, 2, 3)
    out = prune_tokens(g, 2, score=np.ones(4))
    assert [int(s[0]) for s in out.source_map] == [0, 1]


def test_prune_budget_error_and_sentinel():
    g = rand_grid()
    with pytest.raises(ContractError):
        prune_tokens(g, g.n_tokens + 1)
    out = prune_tokens(g, 3)
    cf = out.to_compressed(g)
    assert cf.k == 3
    assert (cf.index_map == 3).sum() == g.n_tokens - 3


# --- merging ------------------------------------------------------------------


def test_merge_identical_pair():
    emb = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.2]])
    g = TokenGrid(1, 2, 2, 2, emb)
    out = merge_tome(g, 3)
    assert out.m == 3
    merged = [s for s in out.source_map if len(s) == 2]
    assert [s.tolist() for s in merged] == [[0, 1]]
    j = next(i for i, s in enumerate(out.source_map) if len(s) == 2)
    assert np.array_equal(out.tokens[j], [1.0, 0.0])


def test_merge_orthogonal_tie_rule():
    g = TokenGrid(1, 2, 2, 4, np.eye(4))
    out = merge_tome(g, 3)
    assert [s.tolist() for s in out.source_map] == [[0, 1], [2], [3]]


def test_vidtome_duplicate_across_frames():
    rng = np.random.default_rng(0)
    emb = np.linalg.qr(rng.normal(size=(8, 8)))[0][:, :4].T  # 4 orthonormal rows
    emb = np.concatenate([emb[:2], emb[2:3], emb[0:1]])  # frame1 cell1 repeats frame0 cell0
    g = TokenGrid(2, 1, 2, 8, emb)
    out = merge_vidtome(g, 3)
    assert [s.tolist() for s in out.source_map if len(s) > 1] == [[0, 3]]


@pytest.mark.parametrize("fn", [merge_tome, merge_vidtome])
def test_merge_identity(fn):
    g = rand_grid()
    out = fn(g, g.n_tokens)
    assert np.array_equal(out.tokens, g.embeddings)


@pytest.mark.parametrize("fn", [merge_tome, merge_vidtome])
def test_eight_to_four_conservation(fn):
    g = rand_grid(2, 2, 2, 5, seed=4)
    out = fn(g, 4)
    assert out.m == 4
    check_sources(out, g)
    for tok, src in zip(out.tokens, out.source_map):
        assert np.abs(tok - g.embeddings[src].mean(axis=0)).max() <= 1e-12


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 4), st.integers(1, 3), st.integers(1, 3),
    st.integers(0, 1000), st.sampled_from(["prune", "tome", "vidtome"]), st.data(),
)
def test_budget_exactness(T, H, W, seed, method, data):
    g = rand_grid(T, H, W, 3, seed)
    m = data.draw(st.integers(1, g.n_tokens))
    out = reduce_grid(g, ReducerSpec(method, m))
    assert out.m == m
    check_sources(out, g)
    if method == "prune":
        for tok, src in zip(out.tokens, out.source_map):
            assert np.array_equal(tok, g.embeddings[src[0]])
    else:
        assert sum(len(s) for s in out.source_map) == g.n_tokens
        for tok, src in zip(out.tokens, out.source_map):
            assert np.abs(tok - g.embeddings[src].mean(axis=0)).max() <= 1e-12


@pytest.mark.parametrize("method", ["prune", "tome", "vidtome"])
def test_reducers_deterministic(method):
    g, _ = synthesize_clip(SynthConfig(seed=1))
    a = reduce_grid(g, ReducerSpec(method, 32))
    b = reduce_grid(g, ReducerSpec(method, 32))
    assert a.tokens.tobytes() == b.tokens.tobytes()
    assert all(np.array_equal(x, y) for x, y in zip(a.source_map, b.source_map))


def test_merge_schedule():
    assert merge_schedule(288, 288) == (0, 0)
    assert merge_schedule(288, 32) == (4, 64)
    assert merge_schedule(8, 4) == (1, 4)


def test_merge_cell_ids_round_trip():
    g, _ = synthesize_clip(SynthConfig(seed=2))
    out = merge_tome(g, 12)
    cf = out.to_compressed(g)
    ids = cf.index_map.reshape(-1)
    for j, src in enumerate(out.source_map):
        assert (ids[src] == j).all()


# --- interpolation ------------------------------------------------------------


def test_interp_identity():
    g = rand_grid(2, 3, 4, 5)
    out = interpolate_tokens(g, (3, 4))
    np.testing.assert_allclose(out.tokens, g.embeddings, atol=0)


def test_interp_constant():
    g = TokenGrid(2, 4, 4, 3, np.tile([0.5, -1.0, 2.0], (32, 1)))
    out = interpolate_tokens(g, (3, 2))
    np.testing.assert_allclose(out.tokens, np.tile([0.5, -1.0, 2.0], (12, 1)), atol=1e-15)


def test_interp_2x2_to_1x1_is_corner_average():
    g = rand_grid(1, 2, 2, 3, seed=6)
    out = interpolate_tokens(g, (1, 1))
    np.testing.assert_allclose(out.tokens[0], g.embeddings.mean(axis=0), atol=1e-15)
    assert out.source_map[0].tolist() == [0, 1, 2, 3]


def test_interp_closed_form_3x3_to_2x2():
    g = rand_grid(1, 3, 3, 2, seed=7)
    out = interpolate_tokens(g, (2, 2))
    # align-corners with 3 -> 2 samples positions 0 and 2: exactly the corners
    np.testing.assert_allclose(out.tokens, g.embeddings[[0, 2, 6, 8]], atol=1e-15)


def test_interp_midpoint_blend():
    g = rand_grid(1, 1, 3, 2, seed=8)
    out = interpolate_tokens(g, (1, 2))
    np.testing.assert_allclose(out.tokens, g.embeddings[[0, 2]], atol=1e-15)
    g = rand_grid(1, 1, 4, 2, seed=8)
    out = interpolate_tokens(g, (1, 3))
    x = g.embeddings
    np.testing.assert_allclose(out.tokens[1], 0.5 * x[1] + 0.5 * x[2], atol=1e-15)


def test_factor_target():
    assert factor_target(9, 6, 6) == (3, 3)
    assert factor_target(6, 6, 6) == (3, 2)
    assert factor_target(4, 2, 8) == (1, 4)
    with pytest.raises(ContractError):
        factor_target(7, 6, 6)
    assert default_interp_shape(6, 6) == (3, 3)
    assert default_interp_shape(5, 3) == (3, 2)


def test_reduce_grid_interp():
    g, _ = synthesize_clip(SynthConfig(seed=0))
    assert reduce_grid(g, ReducerSpec("interp")).m == 72
    assert reduce_grid(g, ReducerSpec("interp", 32)).m == 32
    with pytest.raises(ContractError):
        reduce_grid(g, ReducerSpec("interp", 12))
    with pytest.raises(ContractError):
        reduce_grid(g, ReducerSpec("vq-fixed", 12))
