"""Video token grids: the (frame, row, col) data model, the VQTK/VQTC binary
formats, and a synthetic moving-object generator standing in for ViT features.

A grid with T frames of H x W cells stores its N = T*H*W embeddings row-major,
row ``i = f*(H*W) + h*W + w``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

PathLike = Union[str, Path]

GRID_MAGIC = b"VQTK"
COMPRESSED_MAGIC = b"VQTC"
FORMAT_VERSION = 1
DTYPE_FLOAT32 = 1
# refuse headers that would describe more than 2**31 float32 values
MAX_VALUES = 2**31

_GRID_HEADER = struct.Struct("<4sHBB4I")
_COMPRESSED_HEADER = struct.Struct("<4sH5I")

MOTIONS = ("left", "right", "up", "down")
_VELOCITY = {"left": (0, -1), "right": (0, 1), "up": (-1, 0), "down": (1, 0)}


class GridFormatError(ValueError):
    """Base class for malformed token files."""


class BadMagicError(GridFormatError):
    pass


class VersionMismatchError(GridFormatError):
    pass


class TruncatedPayloadError(GridFormatError):
    pass


class DimensionOverflowError(GridFormatError):
    pass


class SynthConfigError(ValueError):
    """The synthetic clip configuration cannot be realised."""


def linear_index(f: int, h: int, w: int, H: int, W: int, T: Optional[int] = None) -> int:
    """Row of cell (f, h, w) in a grid with H rows and W columns per frame."""
    if not (0 <= h < H and 0 <= w < W and f >= 0 and (T is None or f < T)):
        raise IndexError(f"cell {(f, h, w)} outside grid T={T} H={H} W={W}")
    return f * (H * W) + h * W + w


def cell_of(i: int, H: int, W: int) -> Tuple[int, int, int]:
    """Inverse of :func:`linear_index`."""
    if i < 0:
        raise IndexError(f"negative row index {i}")
    f, rem = divmod(i, H * W)
    h, w = divmod(rem, W)
    return f, h, w


@dataclass(frozen=True)
class TokenGrid:
    frames: int
    height: int
    width: int
    dim: int
    embeddings: np.ndarray = field(repr=False)

    def __post_init__(self):
        for name in ("frames", "height", "width", "dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        emb = np.array(self.embeddings, dtype=np.float64, copy=True)
        if emb.shape != (self.n_tokens, self.dim):
            raise ValueError(f"embeddings shape {emb.shape} != ({self.n_tokens}, {self.dim})")
        if not np.isfinite(emb).all():
            raise ValueError("embeddings contain non-finite values")
        emb.setflags(write=False)
        object.__setattr__(self, "embeddings", emb)

    @property
    def n_tokens(self) -> int:
        return self.frames * self.height * self.width

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.frames, self.height, self.width

    def token(self, f: int, h: int, w: int) -> np.ndarray:
        return self.embeddings[linear_index(f, h, w, self.height, self.width, self.frames)]

    def as_volume(self) -> np.ndarray:
        """View as a (T, H, W, D) array."""
        return self.embeddings.reshape(self.frames, self.height, self.width, self.dim)


@dataclass(frozen=True)
class ClipLabel:
    clip_id: str
    class_id: int
    num_classes: int = len(MOTIONS)

    def __post_init__(self):
        if not 0 <= self.class_id < self.num_classes:
            raise ValueError(f"class_id {self.class_id} outside [0, {self.num_classes})")


# ---------------------------------------------------------------------------
# binary I/O


def _check_dims(dims, what: str) -> int:
    if any(d < 1 for d in dims):
        raise DimensionOverflowError(f"{what}: zero dimension in {dims}")
    total = 1
    for d in dims:
        total *= d
    if total > MAX_VALUES:
        raise DimensionOverflowError(f"{what}: {dims} describes {total} values (limit {MAX_VALUES})")
    return total


def grid_to_bytes(grid: TokenGrid) -> bytes:
    header = _GRID_HEADER.pack(
        GRID_MAGIC, FORMAT_VERSION, DTYPE_FLOAT32, 0, grid.frames, grid.height, grid.width, grid.dim
    )
    return header + grid.embeddings.astype("<f4").tobytes()


def grid_from_bytes(data: bytes) -> TokenGrid:
    if len(data) < _GRID_HEADER.size:
        if data[:4] != GRID_MAGIC[: len(data[:4])]:
            raise BadMagicError("bad magic")
        raise TruncatedPayloadError(f"header needs {_GRID_HEADER.size} bytes, got {len(data)}")
    magic, version, dtype, _reserved, T, H, W, D = _GRID_HEADER.unpack_from(data)
    if magic != GRID_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {GRID_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"grid format version {version}, expected {FORMAT_VERSION}")
    if dtype != DTYPE_FLOAT32:
        raise GridFormatError(f"unsupported dtype code {dtype}")
    count = _check_dims((T, H, W, D), "grid header")
    payload = memoryview(data)[_GRID_HEADER.size:]
    if len(payload) < 4 * count:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, header declares {4 * count}")
    values = np.frombuffer(payload, dtype="<f4", count=count).astype(np.float64)
    return TokenGrid(T, H, W, D, values.reshape(T * H * W, D))


def write_grid(grid: TokenGrid, path: PathLike) -> None:
    Path(path).write_bytes(grid_to_bytes(grid))


def read_grid(path: PathLike) -> TokenGrid:
    return grid_from_bytes(Path(path).read_bytes())


@dataclass(frozen=True)
class CompressedFile:
    """Contents of a VQTC file: K compressed tokens plus the (T, H, W) id map.

    Ids equal to K are a sentinel for cells that map to no output token.
    """

    tokens: np.ndarray
    index_map: np.ndarray

    @property
    def k(self) -> int:
        return self.tokens.shape[0]


def write_compressed(tokens: np.ndarray, index_map: np.ndarray, path: PathLike) -> None:
    tokens = np.asarray(tokens, dtype=np.float64)
    index_map = np.asarray(index_map)
    if tokens.ndim != 2 or index_map.ndim != 3:
        raise ValueError("tokens must be (K, D) and index_map (T, H, W)")
    K, D = tokens.shape
    if index_map.size and (index_map.min() < 0 or index_map.max() > K):
        raise ValueError("index map ids must lie in [0, K]")
    T, H, W = index_map.shape
    header = _COMPRESSED_HEADER.pack(COMPRESSED_MAGIC, FORMAT_VERSION, K, D, T, H, W)
    body = tokens.astype("<f4").tobytes() + index_map.astype("<u4").tobytes()
    Path(path).write_bytes(header + body)


def read_compressed(path: PathLike) -> CompressedFile:
    data = Path(path).read_bytes()
    if len(data) < _COMPRESSED_HEADER.size:
        if data[:4] != COMPRESSED_MAGIC[: len(data[:4])]:
            raise BadMagicError("bad magic")
        raise TruncatedPayloadError("compressed header truncated")
    magic, version, K, D, T, H, W = _COMPRESSED_HEADER.unpack_from(data)
    if magic != COMPRESSED_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {COMPRESSED_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"compressed format version {version}, expected {FORMAT_VERSION}")
    n_tok = _check_dims((K, D), "codebook")
    n_ids = _check_dims((T, H, W), "index map")
    need = 4 * (n_tok + n_ids)
    body = memoryview(data)[_COMPRESSED_HEADER.size:]
    if len(body) < need:
        raise TruncatedPayloadError(f"payload has {len(body)} bytes, header declares {need}")
    tokens = np.frombuffer(body, dtype="<f4", count=n_tok).astype(np.float64).reshape(K, D)
    ids = np.frombuffer(body, dtype="<u4", count=n_ids, offset=4 * n_tok).astype(np.int64)
    if ids.size and ids.max() > K:
        raise GridFormatError(f"index map id {ids.max()} exceeds K={K}")
    return CompressedFile(tokens, ids.reshape(T, H, W))


# ---------------------------------------------------------------------------
# synthetic clips


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of one synthetic clip.

    Group 0 is the static background.  Object 1 is the target: it carries a
    fixed palette signature and translates one cell per frame in ``motion``
    (with wrap-around).  Objects 2.. are distractors with their own palette
    signatures and independently drawn directions.  ``noise_std`` is the
    expected norm of the Gaussian noise added to each (unit) embedding.
    """

    num_objects: int = 2
    motion: str = "right"
    noise_std: float = 0.15
    seed: int = 0
    frames: int = 8
    height: int = 6
    width: int = 6
    dim: int = 32
    object_size: Tuple[int, int] = (2, 2)
    palette_size: int = 8
    palette_seed: int = 0

    def __post_init__(self):
        if min(self.frames, self.height, self.width, self.dim) < 1:
            raise SynthConfigError("grid dimensions must be >= 1")
        if self.noise_std < 0:
            raise SynthConfigError("noise_std must be >= 0")
        if self.motion not in MOTIONS:
            raise SynthConfigError(f"motion must be one of {MOTIONS}")
        if self.num_objects < 1:
            raise SynthConfigError("num_objects must be >= 1")
        oh, ow = self.object_size
        if oh < 1 or ow < 1 or oh > self.height or ow > self.width:
            raise SynthConfigError(f"object {self.object_size} does not fit a {self.height}x{self.width} frame")
        if self.palette_size > self.dim:
            raise SynthConfigError(f"palette_size {self.palette_size} exceeds dim {self.dim}")
        if self.num_objects > self.palette_size - 1:
            raise SynthConfigError(
                f"{self.num_objects} objects need {self.num_objects + 1} palette entries, have {self.palette_size}"
            )

    @property
    def class_id(self) -> int:
        return MOTIONS.index(self.motion)


@lru_cache(maxsize=32)
def palette(dim: int, size: int, seed: int) -> np.ndarray:
    """``size`` orthonormal signature vectors of length ``dim`` (read-only).

    Row 0 is the background, row 1 the target type, the rest distractor types.
    """
    if size > dim:
        raise SynthConfigError(f"cannot build {size} orthonormal signatures in {dim} dimensions")
    rng = np.random.default_rng([seed, dim, size])
    g = rng.normal(size=(dim, size))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))
    sig = np.ascontiguousarray(q.T)
    sig.setflags(write=False)
    return sig


def _object_cells(top: int, left: int, size: Tuple[int, int], H: int, W: int):
    return {((top + dh) % H, (left + dw) % W) for dh in range(size[0]) for dw in range(size[1])}


def _draw(cfg: SynthConfig):
    rng = np.random.default_rng(cfg.seed)
    T, H, W = cfg.frames, cfg.height, cfg.width
    O = cfg.num_objects

    distractor_types = rng.choice(np.arange(2, cfg.palette_size), size=O - 1, replace=False)
    types = np.concatenate([[0, 1], distractor_types]).astype(np.int64)
    velocities = [_VELOCITY[cfg.motion]]
    for d in rng.integers(0, len(MOTIONS), size=O - 1):
        velocities.append(_VELOCITY[MOTIONS[int(d)]])

    # non-overlapping starting positions at frame 0
    candidates = [(h, w) for h in range(H) for w in range(W)]
    order = rng.permutation(len(candidates))
    starts, taken = [], set()
    for j in order:
        cells = _object_cells(*candidates[j], cfg.object_size, H, W)
        if cells & taken:
            continue
        starts.append(candidates[j])
        taken |= cells
        if len(starts) == O:
            break
    if len(starts) < O:
        raise SynthConfigError(f"cannot place {O} objects of size {cfg.object_size} in {H}x{W}")

    groups = np.zeros((T, H, W), dtype=np.int64)
    # later objects occlude earlier ones where they overlap
    draw_order = [int(j) for j in rng.permutation(O)]
    for f in range(T):
        for obj in draw_order:
            (h0, w0), (vh, vw) = starts[obj], velocities[obj]
            for h, w in _object_cells(h0 + vh * f, w0 + vw * f, cfg.object_size, H, W):
                groups[f, h, w] = obj + 1

    sig = palette(cfg.dim, cfg.palette_size, cfg.palette_seed)
    emb = sig[types[groups.reshape(-1)]].copy()
    if cfg.noise_std > 0:
        emb += rng.normal(0.0, cfg.noise_std / np.sqrt(cfg.dim), size=emb.shape)
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    return groups, types, emb


def clip_layout(cfg: SynthConfig) -> np.ndarray:
    """Ground-truth (T, H, W) group map: 0 background, 1 target, 2.. distractors."""
    return _draw(cfg)[0]


def synthesize_clip(cfg: SynthConfig, clip_id: Optional[str] = None) -> Tuple[TokenGrid, ClipLabel]:
    _, _, emb = _draw(cfg)
    grid = TokenGrid(cfg.frames, cfg.height, cfg.width, cfg.dim, emb)
    return grid, ClipLabel(clip_id if clip_id is not None else f"clip-{cfg.seed}", cfg.class_id)
