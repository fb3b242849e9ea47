"""Codebook, token-hash index map and the VQ-Attention block.

Given a clip and its cluster assignment:

* the codebook holds one centroid (member mean) per cluster,
* the index map records, per (f, h, w) cell, which codebook entry the cell's
  token belongs to,
* the encoder turns the index map into one K x D row per cluster, and
* VQ-Attention uses codebook rows as queries/keys and encoded index-map rows
  as values, adding the result back onto the codebook.

The block is written batch-first (n clips x K rows) with an optional row mask
so clips with different K can share one padded batch.
"""

from __future__ import annotations

import hashlib
import itertools
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .quantizer import ClusterAssignment, QuantizerConfig, quantize
from .tensor_ops import (
    ContractError,
    LinearLayer,
    count_flops,
    StateError,
    matmul,
    mlp_backward,
    mlp_forward,
    row_softmax,
    softmax_backward,
)
from .token_grid import TokenGrid

CLUSTER_POSITIONAL = "cluster-positional"
LITERAL_FLAT = "literal-flat"
VARIANTS = (CLUSTER_POSITIONAL, LITERAL_FLAT)
_VARIANT_CODES = {CLUSTER_POSITIONAL: 0, LITERAL_FLAT: 1}

PARAMS_MAGIC = b"VQTP"
PARAMS_VERSION = 1
_PARAMS_HEADER = struct.Struct("<4sHBBI")
_TENSOR_HEADER = struct.Struct("<II")

LITERAL_HIDDEN_CAP = 4096


class ParamsFormatError(ValueError):
    """A parameter checkpoint is corrupt or inconsistent."""


def _digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


@dataclass(frozen=True)
class Codebook:
    vectors: np.ndarray

    @property
    def k(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class IndexMap:
    ids: np.ndarray
    k: int

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.ids.shape

    def occupancy(self) -> np.ndarray:
        return np.bincount(self.ids.reshape(-1), minlength=self.k)[: self.k]


@dataclass(frozen=True)
class CompressedTokens:
    tokens: np.ndarray
    codebook_hash: str
    index_map_hash: str
    params_hash: str

    @property
    def k(self) -> int:
        return self.tokens.shape[0]


def build_codebook(grid: TokenGrid, assignment: ClusterAssignment) -> Codebook:
    """Centroid (arithmetic mean of member embeddings) of every cluster, in id order."""
    if assignment.n_tokens != grid.n_tokens:
        raise ContractError(f"assignment covers {assignment.n_tokens} tokens, grid has {grid.n_tokens}")
    sizes = np.bincount(assignment.assignments, minlength=assignment.k)
    if (sizes == 0).any():
        raise ContractError(f"cluster {int(np.flatnonzero(sizes == 0)[0])} is empty")
    sums = np.zeros((assignment.k, grid.dim))
    np.add.at(sums, assignment.assignments, grid.embeddings)
    return Codebook(sums / sizes[:, None])


def build_index_map(assignment: ClusterAssignment, T: int, H: int, W: int) -> IndexMap:
    if assignment.n_tokens != T * H * W:
        raise ContractError(f"assignment length {assignment.n_tokens} != T*H*W = {T * H * W}")
    return IndexMap(np.asarray(assignment.assignments, dtype=np.int64).reshape(T, H, W).copy(), assignment.k)


def frequency_triples(count: int) -> List[Tuple[int, int, int]]:
    """Integer (f, h, w) frequency vectors, lowest L1 norm first, one per +/- pair."""
    out = []
    radius = 1
    while len(out) < count:
        out = []
        rng = range(-radius, radius + 1)
        for t in itertools.product(rng, rng, rng):
            if t == (0, 0, 0):
                continue
            first = next(v for v in t if v != 0)
            if first < 0:
                continue
            out.append(t)
        out.sort(key=lambda t: (sum(map(abs, t)), max(map(abs, t)), t))
        radius += 1
    return out[:count]


@lru_cache(maxsize=16)
def positional_encoding(T: int, H: int, W: int, n_freq: int) -> np.ndarray:
    """Fixed sinusoidal table over grid cells, shape (N, 2 * n_freq).

    Columns ``2j`` and ``2j+1`` are ``sin`` and ``cos`` of
    ``2*pi*(a*f/T + b*h/H + c*w/W)`` for the j-th frequency triple (a, b, c).
    Triples mix axes, so a set of cells drifting through space over time has
    a characteristic spectrum.
    """
    triples = frequency_triples(n_freq)
    f, h, w = np.meshgrid(np.arange(T), np.arange(H), np.arange(W), indexing="ij")
    coords = np.stack([f.reshape(-1) / T, h.reshape(-1) / H, w.reshape(-1) / W], axis=1)
    phase = 2.0 * np.pi * coords @ np.asarray(triples, dtype=np.float64).T
    pe = np.empty((T * H * W, 2 * n_freq))
    pe[:, 0::2] = np.sin(phase)
    pe[:, 1::2] = np.cos(phase)
    pe.setflags(write=False)
    return pe


def pooled_positional_spectrum(ids: np.ndarray, k: int, n_freq: int) -> np.ndarray:
    """Per-cluster modulus of the mean positional encoding, shape (k, n_freq).

    Row j is ``|mean over member cells of exp(i*phase)|`` per frequency; it does
    not depend on where the region sits, only on how its cells are arranged
    in space and time.  Empty clusters (and sentinel ids >= k) give zeros.
    """
    T, H, W = ids.shape
    flat = ids.reshape(-1)
    pe = positional_encoding(T, H, W, n_freq)
    valid = flat < k
    counts = np.bincount(flat[valid], minlength=k)
    sums = np.zeros((k, 2 * n_freq))
    np.add.at(sums, flat[valid], pe[valid])
    count_flops(2 * int(valid.sum()) * n_freq, "encoder_pool")
    mean = sums / np.maximum(counts, 1)[:, None]
    return np.sqrt(mean[:, 0::2] ** 2 + mean[:, 1::2] ** 2)


@dataclass
class VQAttnParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    mlp: List[LinearLayer]
    heads: int = 4
    variant: str = CLUSTER_POSITIONAL
    residual: bool = True
    grid_shape: Optional[Tuple[int, int, int, int]] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}")
        D = self.wq.shape[0]
        for name in ("wq", "wk", "wv"):
            if getattr(self, name).shape != (D, D):
                raise ContractError(f"{name} must be {D}x{D}")
        if self.heads < 1 or D % self.heads:
            raise ContractError(f"dim {D} is not divisible by heads={self.heads}")
        if self.variant == LITERAL_FLAT and self.grid_shape is None:
            raise ContractError("literal-flat params need grid_shape=(T, H, W, K)")
        if self.mlp[-1].out_features != self.encoder_out:
            raise ContractError("encoder output width does not match the block shape")

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    @property
    def encoder_out(self) -> int:
        if self.variant == LITERAL_FLAT:
            return self.grid_shape[3] * self.dim
        return self.dim

    @classmethod
    def init(
        cls,
        dim: int,
        heads: int = 4,
        variant: str = CLUSTER_POSITIONAL,
        seed: int = 0,
        grid_shape: Optional[Tuple[int, int, int, int]] = None,
        hidden: Optional[int] = None,
        residual: bool = True,
    ) -> "VQAttnParams":
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(dim)
        wq, wk, wv = (rng.uniform(-bound, bound, size=(dim, dim)) for _ in range(3))
        if variant == LITERAL_FLAT:
            if grid_shape is None:
                raise ContractError("literal-flat params need grid_shape=(T, H, W, K)")
            T, H, W, K = grid_shape
            n_in, n_out = T * H * W, K * dim
            hidden = hidden or min(4 * K * dim, LITERAL_HIDDEN_CAP)
        else:
            n_in, n_out = dim + 1, dim
            hidden = hidden or 2 * dim
        mlp = [LinearLayer.init(n_in, hidden, rng), LinearLayer.init(hidden, n_out, rng)]
        return cls(wq, wk, wv, mlp, heads, variant, residual, grid_shape)

    def named_tensors(self) -> Dict[str, np.ndarray]:
        """Trainable tensors by name; the arrays are the live parameters."""
        out = {"wq": self.wq, "wk": self.wk, "wv": self.wv}
        for i, layer in enumerate(self.mlp):
            out[f"mlp.{i}.weight"] = layer.weight
            out[f"mlp.{i}.bias"] = layer.bias
        return out

    def copy(self) -> "VQAttnParams":
        return VQAttnParams(
            self.wq.copy(),
            self.wk.copy(),
            self.wv.copy(),
            [LinearLayer(l.weight.copy(), l.bias.copy()) for l in self.mlp],
            self.heads,
            self.variant,
            self.residual,
            self.grid_shape,
        )

    def digest(self) -> str:
        return _digest(*self.named_tensors().values())


# ---------------------------------------------------------------------------
# checkpoint I/O


def params_to_bytes(params: VQAttnParams) -> bytes:
    parts = [
        _PARAMS_HEADER.pack(PARAMS_MAGIC, PARAMS_VERSION, _VARIANT_CODES[params.variant], params.heads, params.dim)
    ]
    tensors = dict(params.named_tensors())
    tensors["meta.residual"] = np.array([[1.0 if params.residual else 0.0]])
    if params.grid_shape is not None:
        tensors["meta.grid_shape"] = np.asarray(params.grid_shape, dtype=np.float64)[None, :]
    for name, arr in tensors.items():
        arr2 = np.atleast_2d(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(_TENSOR_HEADER.pack(*arr2.shape))
        parts.append(arr2.astype("<f4").tobytes())
    return b"".join(parts)


def params_from_bytes(data: bytes) -> VQAttnParams:
    if len(data) < _PARAMS_HEADER.size:
        raise ParamsFormatError("checkpoint header truncated")
    magic, version, vcode, heads, dim = _PARAMS_HEADER.unpack_from(data)
    if magic != PARAMS_MAGIC:
        raise ParamsFormatError(f"bad magic {magic!r}")
    if version != PARAMS_VERSION:
        raise ParamsFormatError(f"unsupported checkpoint version {version}")
    codes = {v: k for k, v in _VARIANT_CODES.items()}
    if vcode not in codes:
        raise ParamsFormatError(f"unknown variant code {vcode}")
    pos = _PARAMS_HEADER.size
    tensors: Dict[str, np.ndarray] = {}
    while pos < len(data):
        if pos + 2 > len(data):
            raise ParamsFormatError("truncated tensor name length")
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + nlen + _TENSOR_HEADER.size > len(data):
            raise ParamsFormatError("truncated tensor header")
        try:
            name = data[pos:pos + nlen].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParamsFormatError("tensor name is not valid UTF-8") from exc
        pos += nlen
        rows, cols = _TENSOR_HEADER.unpack_from(data, pos)
        pos += _TENSOR_HEADER.size
        nbytes = 4 * rows * cols
        if pos + nbytes > len(data):
            raise ParamsFormatError(f"tensor {name!r} payload truncated")
        arr = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=pos).astype(np.float64)
        pos += nbytes
        if not np.isfinite(arr).all():
            raise ParamsFormatError(f"tensor {name!r} has non-finite values")
        tensors[name] = arr.reshape(rows, cols)
    try:
        layers = []
        i = 0
        while f"mlp.{i}.weight" in tensors:
            layers.append(LinearLayer(tensors[f"mlp.{i}.weight"], tensors[f"mlp.{i}.bias"].reshape(-1)))
            i += 1
        grid_shape = None
        if "meta.grid_shape" in tensors:
            grid_shape = tuple(int(v) for v in tensors["meta.grid_shape"].reshape(-1))
        residual = bool(tensors.get("meta.residual", np.ones((1, 1)))[0, 0])
        params = VQAttnParams(
            tensors["wq"], tensors["wk"], tensors["wv"], layers, heads, codes[vcode], residual, grid_shape
        )
    except (KeyError, IndexError, ContractError) as exc:
        raise ParamsFormatError(f"inconsistent checkpoint: {exc}") from exc
    if params.dim != dim:
        raise ParamsFormatError(f"header dim {dim} disagrees with tensors ({params.dim})")
    return params


def save_params(params: VQAttnParams, path) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path) -> VQAttnParams:
    return params_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# encoder


def encoder_input(index_map: IndexMap, params: VQAttnParams, allow_empty: bool = False) -> np.ndarray:
    """Per-variant input to the index-map MLP.

    cluster-positional: (K, D+1) rows of [pooled positional spectrum of the
    member cells (D frequencies), |s_k| / N].  literal-flat: the flattened map
    scaled by 1/K.
    """
    T, H, W = index_map.shape
    ids = index_map.ids.reshape(-1)
    K, N = index_map.k, ids.size
    if params.variant == LITERAL_FLAT:
        if params.grid_shape != (T, H, W, K):
            raise ContractError(f"literal-flat params expect (T,H,W,K)={params.grid_shape}, got {(T, H, W, K)}")
        return ids.astype(np.float64) / K
    counts = np.bincount(ids, minlength=K)[:K]
    if not allow_empty and (counts == 0).any():
        raise ContractError(f"cluster {int(np.flatnonzero(counts == 0)[0])} is empty")
    spectrum = pooled_positional_spectrum(index_map.ids, K, params.dim)
    return np.concatenate([spectrum, (counts / N)[:, None]], axis=1)


def encode_index_map(index_map: IndexMap, params: VQAttnParams, *, exact: bool = True) -> np.ndarray:
    """Encoded index map, one D-dimensional row per cluster (K, D)."""
    x = encoder_input(index_map, params)
    out = mlp_forward(params.mlp, x[None], exact=exact, cache=False)
    return out.reshape(index_map.k, params.dim)


# ---------------------------------------------------------------------------
# attention block (batched)


@dataclass
class BlockCache:
    codebook: np.ndarray
    encoded: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn: np.ndarray
    mask: Optional[np.ndarray]
    exact: bool
    encoder_cached: bool = field(default=True)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    n, K, D = x.shape
    return x.reshape(n, K, heads, D // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    n, h, K, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(n, K, h * dh)


def attention_forward(
    params: VQAttnParams,
    codebook: np.ndarray,
    encoded: np.ndarray,
    mask: Optional[np.ndarray] = None,
    *,
    exact: bool = True,
) -> Tuple[np.ndarray, BlockCache]:
    """Multi-head attention with Q = B Wq, K = B Wk, V = M~ Wv, plus the residual B.

    ``codebook`` and ``encoded`` are (n, K, D); ``mask`` (n, K) marks real rows.
    """
    codebook = np.asarray(codebook, dtype=np.float64)
    encoded = np.asarray(encoded, dtype=np.float64)
    if codebook.ndim == 2:
        codebook, encoded = codebook[None], encoded[None]
        mask = None if mask is None else np.asarray(mask)[None]
    if codebook.shape != encoded.shape:
        raise ContractError(f"codebook {codebook.shape} and encoded map {encoded.shape} differ")
    if codebook.shape[-1] != params.dim:
        raise ContractError(f"token dim {codebook.shape[-1]} != params dim {params.dim}")
    h = params.heads
    dh = params.dim // h
    q = _split_heads(matmul(codebook, params.wq, exact=exact, tag="attention"), h)
    k = _split_heads(matmul(codebook, params.wk, exact=exact, tag="attention"), h)
    v = _split_heads(matmul(encoded, params.wv, exact=exact, tag="attention"), h)
    scores = matmul(q, k.transpose(0, 1, 3, 2), exact=exact, tag="attention") / np.sqrt(dh)
    key_mask = None if mask is None else np.asarray(mask, dtype=bool)[:, None, None, :]
    attn = row_softmax(scores, key_mask)
    out = _merge_heads(matmul(attn, v, exact=exact, tag="attention"))
    if params.residual:
        out = codebook + out
    return out, BlockCache(codebook, encoded, q, k, v, attn, mask, exact)


def vq_forward(
    params: VQAttnParams,
    codebook: np.ndarray,
    enc_in: np.ndarray,
    mask: Optional[np.ndarray] = None,
    *,
    exact: bool = True,
) -> Tuple[np.ndarray, BlockCache]:
    """Encoder + attention for a batch.

    ``enc_in`` is (n, K, D+1) for cluster-positional or (n, N) for literal-flat.
    """
    n, K, D = codebook.shape
    encoded = mlp_forward(params.mlp, enc_in, exact=exact, cache=True)
    encoded = encoded.reshape(n, K, D)
    return attention_forward(params, codebook, encoded, mask, exact=exact)


def vq_attention_backward(
    params: VQAttnParams, cache: BlockCache, grad_out: np.ndarray
) -> Dict[str, np.ndarray]:
    """Parameter gradients of the encoder + attention block.

    The codebook and index map are treated as constants (no gradient flows
    into the clustering).
    """
    if cache is None:
        raise StateError("vq_attention_backward needs the cache from a forward pass")
    exact = cache.exact
    g = np.asarray(grad_out, dtype=np.float64).reshape(cache.codebook.shape)
    n, K, D = g.shape
    h = params.heads
    dh = D // h
    g_h = _split_heads(g, h)
    d_attn = matmul(g_h, cache.v.transpose(0, 1, 3, 2), exact=exact)
    d_v = matmul(cache.attn.transpose(0, 1, 3, 2), g_h, exact=exact)
    d_scores = softmax_backward(cache.attn, d_attn) / np.sqrt(dh)
    d_q = matmul(d_scores, cache.k, exact=exact)
    d_k = matmul(d_scores.transpose(0, 1, 3, 2), cache.q, exact=exact)
    d_q, d_k, d_v = (_merge_heads(x).reshape(n * K, D) for x in (d_q, d_k, d_v))
    cb = cache.codebook.reshape(n * K, D)
    grads = {
        "wq": matmul(cb.T, d_q, exact=exact),
        "wk": matmul(cb.T, d_k, exact=exact),
        "wv": matmul(cache.encoded.reshape(n * K, D).T, d_v, exact=exact),
    }
    d_encoded = matmul(d_v, params.wv.T, exact=exact)
    if params.variant == LITERAL_FLAT:
        d_encoded = d_encoded.reshape(n, K * D)
    else:
        d_encoded = d_encoded.reshape(n, K, D)
    layer_grads, _ = mlp_backward(params.mlp, d_encoded, exact=exact)
    for i, (wg, bg) in enumerate(layer_grads):
        grads[f"mlp.{i}.weight"] = wg
        grads[f"mlp.{i}.bias"] = bg
    return grads


# ---------------------------------------------------------------------------
# per-clip API


def vq_attention(codebook: Codebook, encoded: np.ndarray, params: VQAttnParams,
                 index_map: Optional[IndexMap] = None, *, exact: bool = True) -> CompressedTokens:
    out, _ = attention_forward(params, codebook.vectors, encoded, exact=exact)
    imap_hash = _digest(index_map.ids) if index_map is not None else ""
    return CompressedTokens(out[0], _digest(codebook.vectors), imap_hash, params.digest())


def compress_clip(
    grid: TokenGrid,
    cfg: QuantizerConfig,
    params: VQAttnParams,
    variant: Optional[str] = None,
    *,
    exact: bool = True,
) -> Tuple[CompressedTokens, IndexMap, ClusterAssignment]:
    """Quantize -> codebook -> index map -> encode -> attention."""
    if variant is not None and variant != params.variant:
        raise ContractError(f"params were built for {params.variant!r}, not {variant!r}")
    if grid.dim != params.dim:
        raise ContractError(f"grid dim {grid.dim} != params dim {params.dim}")
    assignment = quantize(grid.embeddings, cfg)
    codebook = build_codebook(grid, assignment)
    imap = build_index_map(assignment, grid.frames, grid.height, grid.width)
    encoded = encode_index_map(imap, params, exact=exact)
    return vq_attention(codebook, encoded, params, imap, exact=exact), imap, assignment
