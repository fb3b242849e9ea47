import itertools
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vqtoken.token_grid import (
    MOTIONS,
    BadMagicError,
    ClipLabel,
    DimensionOverflowError,
    GridFormatError,
    SynthConfig,
    SynthConfigError,
    TokenGrid,
    TruncatedPayloadError,
    VersionMismatchError,
    cell_of,
    clip_layout,
    grid_from_bytes,
    grid_to_bytes,
    linear_index,
    palette,
    read_compressed,
    read_grid,
    synthesize_clip,
    write_compressed,
    write_grid,
)


def random_grid(T=2, H=3, W=3, D=8, seed=0):
    rng = np.random.default_rng(seed)
    # float32-representable values so the on-disk round trip is exact
    emb = rng.normal(size=(T * H * W, D)).astype(np.float32).astype(np.float64)
    return TokenGrid(T, H, W, D, emb)


# --- indexing --------------------------------------------------------------


def test_linear_index_examples():
    assert linear_index(0, 0, 0, 7, 9) == 0
    assert linear_index(1, 0, 1, 2, 2) == 5


def test_linear_index_round_trip_exhaustive():
    T, H, W = 3, 4, 5
    seen = []
    for f, h, w in itertools.product(range(T), range(H), range(W)):
        i = linear_index(f, h, w, H, W, T)
        assert cell_of(i, H, W) == (f, h, w)
        seen.append(i)
    assert sorted(seen) == list(range(T * H * W))


@pytest.mark.parametrize("cell", [(0, 2, 0), (0, 0, 3), (-1, 0, 0), (2, 0, 0)])
def test_linear_index_out_of_range(cell):
    with pytest.raises(IndexError):
        linear_index(*cell, 2, 3, 2)


def test_grid_rows_follow_linearization():
    g = random_grid(T=2, H=3, W=4, D=5)
    vol = g.as_volume()
    for f, h, w in itertools.product(range(2), range(3), range(4)):
        assert np.array_equal(g.token(f, h, w), g.embeddings[f * 12 + h * 4 + w])
        assert np.array_equal(vol[f, h, w], g.token(f, h, w))


def test_grid_validation():
    with pytest.raises(ValueError):
        TokenGrid(2, 2, 2, 3, np.zeros((7, 3)))
    bad = np.zeros((8, 3))
    bad[3, 1] = np.nan
    with pytest.raises(ValueError):
        TokenGrid(2, 2, 2, 3, bad)
    with pytest.raises(ValueError):
        TokenGrid(0, 2, 2, 3, np.zeros((0, 3)))


def test_grid_is_immutable():
    g = random_grid()
    with pytest.raises(ValueError):
        g.embeddings[0, 0] = 1.0


def test_clip_label_range():
    assert ClipLabel("a", 3).class_id == 3
    with pytest.raises(ValueError):
        ClipLabel("a", 4)


# --- file formats ----------------------------------------------------------


def test_grid_file_round_trip(tmp_path):
    g = random_grid(2, 3, 3, 8)
    write_grid(g, tmp_path / "g.vqtk")
    back = read_grid(tmp_path / "g.vqtk")
    assert back.shape == g.shape and back.dim == g.dim
    assert np.array_equal(back.embeddings, g.embeddings)


@settings(max_examples=25, deadline=None)
@given(
    st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 4),
    st.integers(0, 2**32 - 1),
)
def test_grid_bytes_round_trip_bit_exact(T, H, W, D, seed):
    g = random_grid(T, H, W, D, seed)
    assert np.array_equal(grid_from_bytes(grid_to_bytes(g)).embeddings, g.embeddings)


def test_grid_header_layout():
    g = random_grid(2, 3, 4, 5)
    data = grid_to_bytes(g)
    magic, version, dtype, reserved, T, H, W, D = struct.unpack_from("<4sHBB4I", data)
    assert (magic, version, dtype, reserved) == (b"VQTK", 1, 1, 0)
    assert (T, H, W, D) == (2, 3, 4, 5)
    assert len(data) == 24 + 4 * 2 * 3 * 4 * 5
    first = struct.unpack_from("<f", data, 24)[0]
    assert first == np.float32(g.embeddings[0, 0])


def test_bad_magic():
    data = bytearray(grid_to_bytes(random_grid()))
    data[:4] = b"XXXX"
    with pytest.raises(BadMagicError):
        grid_from_bytes(bytes(data))
    with pytest.raises(BadMagicError):
        grid_from_bytes(b"NO")


def test_version_mismatch():
    data = bytearray(grid_to_bytes(random_grid()))
    struct.pack_into("<H", data, 4, 2)
    with pytest.raises(VersionMismatchError):
        grid_from_bytes(bytes(data))


def test_truncated_payload():
    data = grid_to_bytes(random_grid())
    with pytest.raises(TruncatedPayloadError):
        grid_from_bytes(data[:-4])
    with pytest.raises(TruncatedPayloadError):
        grid_from_bytes(data[:10])


def test_dimension_overflow():
    header = struct.pack("<4sHBB4I", b"VQTK", 1, 1, 0, 65536, 65536, 2, 1)
    with pytest.raises(DimensionOverflowError):
        grid_from_bytes(header)
    zero = struct.pack("<4sHBB4I", b"VQTK", 1, 1, 0, 0, 2, 2, 1)
    with pytest.raises(DimensionOverflowError):
        grid_from_bytes(zero)


def test_error_kinds_are_distinct():
    kinds = {BadMagicError, VersionMismatchError, TruncatedPayloadError, DimensionOverflowError}
    assert len(kinds) == 4
    assert all(issubclass(k, GridFormatError) for k in kinds)
    for a, b in itertools.permutations(kinds, 2):
        assert not issubclass(a, b)


def test_compressed_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tokens = rng.normal(size=(3, 4)).astype(np.float32).astype(np.float64)
    ids = rng.integers(0, 3, size=(2, 2, 3))
    ids[0, 0, 0] = 3  # sentinel for a dropped cell
    write_compressed(tokens, ids, tmp_path / "c.vqtc")
    back = read_compressed(tmp_path / "c.vqtc")
    assert back.k == 3
    assert np.array_equal(back.tokens, tokens)
    assert np.array_equal(back.index_map, ids)


def test_compressed_errors(tmp_path):
    path = tmp_path / "c.vqtc"
    with pytest.raises(ValueError):
        write_compressed(np.zeros((2, 3)), np.full((1, 1, 2), 5), path)
    write_compressed(np.zeros((2, 3)), np.zeros((1, 1, 2), dtype=int), path)
    data = path.read_bytes()
    path.write_bytes(data[:-1])
    with pytest.raises(TruncatedPayloadError):
        read_compressed(path)
    path.write_bytes(b"VQTK" + data[4:])
    with pytest.raises(BadMagicError):
        read_compressed(path)
    bad = bytearray(data)
    struct.pack_into("<I", bad, len(bad) - 4, 9)
    path.write_bytes(bytes(bad))
    with pytest.raises(GridFormatError):
        read_compressed(path)


# --- synthetic clips -------------------------------------------------------


def test_synth_config_validation():
    with pytest.raises(SynthConfigError):
        SynthConfig(noise_std=-0.1)
    with pytest.raises(SynthConfigError):
        SynthConfig(object_size=(7, 2))
    with pytest.raises(SynthConfigError):
        SynthConfig(frames=0)
    with pytest.raises(SynthConfigError):
        SynthConfig(motion="diagonal")
    with pytest.raises(SynthConfigError):
        SynthConfig(num_objects=8, palette_size=8)


def test_palette_separation():
    sig = palette(32, 8, 0)
    np.testing.assert_allclose(np.linalg.norm(sig, axis=1), 1.0, atol=1e-12)
    gram = sig @ sig.T
    off = gram[~np.eye(8, dtype=bool)]
    assert np.abs(off).max() <= 0.2


@pytest.mark.parametrize("motion", MOTIONS)
def test_single_object_translates_with_motion(motion):
    cfg = SynthConfig(num_objects=1, motion=motion, noise_std=0.0, seed=3)
    groups = clip_layout(cfg)
    dh, dw = {"left": (0, -1), "right": (0, 1), "up": (-1, 0), "down": (1, 0)}[motion]
    for f in range(cfg.frames - 1):
        assert np.array_equal(np.roll(groups[f], (dh, dw), axis=(0, 1)), groups[f + 1])


def test_right_motion_shifts_cells_by_one_column():
    cfg = SynthConfig(num_objects=1, motion="right", noise_std=0.0, seed=0)
    groups = clip_layout(cfg)
    for f in range(cfg.frames - 1):
        cells = {(h, w) for h, w in zip(*np.nonzero(groups[f] == 1))}
        nxt = {(h, w) for h, w in zip(*np.nonzero(groups[f + 1] == 1))}
        assert {(h, (w + 1) % cfg.width) for h, w in cells} == nxt


def test_noise_free_object_cells_identical():
    cfg = SynthConfig(num_objects=3, noise_std=0.0, seed=5)
    grid, label = synthesize_clip(cfg)
    groups = clip_layout(cfg).reshape(-1)
    emb = grid.embeddings
    for g in np.unique(groups):
        rows = emb[groups == g]
        cos = rows @ rows.T
        np.testing.assert_allclose(cos, 1.0, atol=1e-12)
    assert label.class_id == MOTIONS.index(cfg.motion)


@pytest.mark.parametrize("num_objects", [1, 2, 3, 4, 5])
def test_distinct_vectors_equal_objects_plus_background(num_objects):
    for seed in range(5):
        cfg = SynthConfig(num_objects=num_objects, noise_std=0.0, seed=seed)
        grid, _ = synthesize_clip(cfg)
        assert len(np.unique(grid.embeddings, axis=0)) == num_objects + 1


def test_synth_deterministic():
    cfg = SynthConfig(num_objects=2, noise_std=0.3, seed=11)
    a, _ = synthesize_clip(cfg)
    b, _ = synthesize_clip(cfg)
    assert a.embeddings.tobytes() == b.embeddings.tobytes()


def test_noisy_rows_unit_norm():
    grid, _ = synthesize_clip(SynthConfig(noise_std=0.5, seed=2))
    np.testing.assert_allclose(np.linalg.norm(grid.embeddings, axis=1), 1.0, atol=1e-12)
