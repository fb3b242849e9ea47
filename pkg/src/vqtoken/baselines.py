"""Comparison reducers that shrink a token grid to an exact budget.

* ``prune_tokens``: keep the m most salient tokens.
* ``merge_tome``: ToMe-style bipartite soft matching inside each frame.
* ``merge_vidtome``: the same matching across pairs of consecutive frames.
* ``interpolate_tokens``: per-frame bilinear resampling (align-corners).

Every reducer returns a ``ReducedSequence`` whose ``source_map`` lists, per
output token, the linear indices of the grid cells it summarises.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .quantizer import normalize_rows
from .tensor_ops import ContractError, count_flops
from .token_grid import CompressedFile, TokenGrid

METHODS = ("prune", "tome", "vidtome", "interp", "vq-fixed", "vq-adaptive")
REDUCERS = ("prune", "tome", "vidtome", "interp")


@dataclass(frozen=True)
class ReducerSpec:
    method: str
    budget: Optional[int] = None
    ratio: Optional[float] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"unknown method {self.method!r}; valid: {', '.join(METHODS)}")
        if self.budget is not None and self.budget < 1:
            raise ContractError("budget must be >= 1")
        if self.ratio is not None and not 0.0 < self.ratio <= 1.0:
            raise ContractError("ratio must lie in (0, 1]")

    def resolve(self, n: int) -> int:
        """Token budget for a grid of n tokens."""
        if self.budget is not None:
            m = self.budget
        elif self.ratio is not None:
            m = max(1, int(round(self.ratio * n)))
        else:
            raise ContractError(f"{self.method} needs a budget or a ratio")
        if m > n:
            raise ContractError(f"budget {m} exceeds N={n}")
        return m


@dataclass
class ReducedSequence:
    tokens: np.ndarray
    source_map: List[np.ndarray]
    method: str
    # per-cell output id (-1 = dropped); built by each reducer
    cell_ids: Optional[np.ndarray] = None

    @property
    def m(self) -> int:
        return self.tokens.shape[0]

    def to_compressed(self, grid: TokenGrid) -> CompressedFile:
        """VQTC payload; cells without an output token get the sentinel id m."""
        ids = np.full(grid.n_tokens, self.m, dtype=np.int64)
        if self.cell_ids is not None:
            keep = self.cell_ids >= 0
            ids[keep] = self.cell_ids[keep]
        return CompressedFile(self.tokens.copy(), ids.reshape(grid.shape))


def _check_budget(grid: TokenGrid, m: int) -> None:
    if not 1 <= m <= grid.n_tokens:
        raise ContractError(f"budget m={m} must lie in [1, N={grid.n_tokens}]")


# ---------------------------------------------------------------------------
# pruning


def saliency(grid: TokenGrid) -> np.ndarray:
    """``||t|| * (1 - cos(t, mean token of its frame))`` per token."""
    x = grid.embeddings
    T = grid.frames
    per = grid.height * grid.width
    norms = np.linalg.norm(x, axis=1)
    frame_mean = x.reshape(T, per, -1).mean(axis=1)
    xn = normalize_rows(x)
    mn = normalize_rows(frame_mean)
    cos = np.einsum("fpd,fd->fp", xn.reshape(T, per, -1), mn).reshape(-1)
    count_flops(4 * x.size, "saliency")
    return norms * (1.0 - cos)


def prune_tokens(grid: TokenGrid, m: int, score: Optional[np.ndarray] = None) -> ReducedSequence:
    """Keep the m highest-saliency tokens (ties to the lower index), in index order."""
    _check_budget(grid, m)
    s = saliency(grid) if score is None else np.asarray(score, dtype=np.float64)
    order = np.argsort(-s, kind="stable")
    keep = np.sort(order[:m])
    cell_ids = np.full(grid.n_tokens, -1, dtype=np.int64)
    cell_ids[keep] = np.arange(m)
    return ReducedSequence(grid.embeddings[keep].copy(), [np.array([i]) for i in keep], "prune", cell_ids)


# ---------------------------------------------------------------------------
# merging


class _MergeState:
    """Running groups: feature sums, sizes, member cells and a frame tag."""

    def __init__(self, grid: TokenGrid):
        per = grid.height * grid.width
        self.sums = [row.copy() for row in grid.embeddings]
        self.sizes = [1] * grid.n_tokens
        self.members = [[i] for i in range(grid.n_tokens)]
        self.frame = [i // per for i in range(grid.n_tokens)]
        self.alive = list(range(grid.n_tokens))

    def mean(self, g: int) -> np.ndarray:
        return self.sums[g] / self.sizes[g]

    def merge(self, src: int, dst: int) -> None:
        self.sums[dst] = self.sums[dst] + self.sums[src]
        self.sizes[dst] += self.sizes[src]
        self.members[dst].extend(self.members[src])

    def finish(self, grid: TokenGrid, method: str) -> ReducedSequence:
        groups = sorted(self.alive, key=lambda g: min(self.members[g]))
        tokens = np.stack([self.mean(g) for g in groups])
        source_map = [np.array(sorted(self.members[g])) for g in groups]
        cell_ids = np.empty(grid.n_tokens, dtype=np.int64)
        for j, src in enumerate(source_map):
            cell_ids[src] = j
        return ReducedSequence(tokens, source_map, method, cell_ids)


def _bipartite_edges(state: _MergeState, src: Sequence[int], dst: Sequence[int]) -> List[Tuple[float, int, int]]:
    """Best destination (by cosine, ties to the first listed) for every source group."""
    if not src or not dst:
        return []
    a = normalize_rows(np.stack([state.mean(g) for g in src]))
    b = normalize_rows(np.stack([state.mean(g) for g in dst]))
    sims = a @ b.T
    count_flops(2 * sims.size * a.shape[1], "matching")
    best = np.argmax(sims, axis=1)
    return [(float(sims[i, best[i]]), src[i], dst[best[i]]) for i in range(len(src))]


def _alternate(groups: Sequence[int]) -> Tuple[List[int], List[int]]:
    return list(groups[0::2]), list(groups[1::2])


def _apply_round(state: _MergeState, edges: List[Tuple[float, int, int]], r: int) -> int:
    # highest similarity first; ties go to the earlier source group
    rank = {g: j for j, g in enumerate(state.alive)}
    edges = sorted(edges, key=lambda e: (-e[0], rank[e[1]]))
    chosen = edges[:r]
    for _, src, dst in chosen:
        state.merge(src, dst)
    gone = {src for _, src, _ in chosen}
    state.alive = [g for g in state.alive if g not in gone]
    return len(chosen)


def _global_edges(state: _MergeState) -> List[Tuple[float, int, int]]:
    return _bipartite_edges(state, *_alternate(state.alive))


def merge_schedule(n: int, m: int) -> Tuple[int, int]:
    """(rounds, r): rounds = ceil(log2(n/m)), r = ceil((n-m)/rounds)."""
    if m >= n:
        return 0, 0
    rounds = max(1, math.ceil(math.log2(n / m)))
    return rounds, math.ceil((n - m) / rounds)


def _merge(grid: TokenGrid, m: int, edge_fn, method: str) -> ReducedSequence:
    _check_budget(grid, m)
    state = _MergeState(grid)
    _, r = merge_schedule(grid.n_tokens, m)
    rnd = 0
    while len(state.alive) > m:
        need = min(r, len(state.alive) - m)
        edges = edge_fn(state, rnd)
        if len(edges) < need:
            # too few candidate pairs inside the windows; match over the whole sequence
            edges = _global_edges(state)
        _apply_round(state, edges, need)
        rnd += 1
    return state.finish(grid, method)


def _frame_edges(state: _MergeState, rnd: int) -> List[Tuple[float, int, int]]:
    edges = []
    for f in sorted(set(state.frame[g] for g in state.alive)):
        src, dst = _alternate([g for g in state.alive if state.frame[g] == f])
        edges.extend(_bipartite_edges(state, src, dst))
    return edges


def _window_edges(state: _MergeState, rnd: int) -> List[Tuple[float, int, int]]:
    frames = sorted(set(state.frame[g] for g in state.alive))
    edges = []
    offset = rnd % 2
    for j in range(offset, len(frames) - 1, 2):
        f0, f1 = frames[j], frames[j + 1]
        src = [g for g in state.alive if state.frame[g] == f0]
        dst = [g for g in state.alive if state.frame[g] == f1]
        edges.extend(_bipartite_edges(state, src, dst))
    return edges


def merge_tome(grid: TokenGrid, m: int, per_frame: bool = True) -> ReducedSequence:
    """Bipartite soft matching; merged tokens are size-weighted means of their sources.

    Each round splits every frame's current tokens into alternating sets A/B,
    links each A token to its most similar B token, and merges the r best
    links overall.  With ``per_frame=False`` the whole sequence is one set.
    """
    edge_fn = _frame_edges if per_frame else (lambda s, rnd: _global_edges(s))
    return _merge(grid, m, edge_fn, "tome")


def merge_vidtome(grid: TokenGrid, m: int) -> ReducedSequence:
    """Temporal merging: tokens of frame f merge into frame f+1 inside 2-frame windows.

    The window pairing alternates between (0,1),(2,3),... and (1,2),(3,4),...
    from round to round so content can travel along the whole clip.
    """
    return _merge(grid, m, _window_edges, "vidtome")


# ---------------------------------------------------------------------------
# interpolation


def default_interp_shape(H: int, W: int) -> Tuple[int, int]:
    return math.ceil(H / 2), math.ceil(W / 2)


def factor_target(target: int, H: int, W: int) -> Tuple[int, int]:
    """Split a per-frame token target into (h', w') with h' <= H, w' <= W.

    Among valid factorisations the one whose aspect ratio is closest to H/W
    wins (ties to the larger h').
    """
    options = [(h, target // h) for h in range(1, H + 1) if target % h == 0 and target // h <= W]
    if not options:
        raise ContractError(f"{target} tokens per frame cannot be arranged as h' x w' within {H}x{W}")
    want = math.log(H / W)
    return min(options, key=lambda hw: (abs(math.log(hw[0] / hw[1]) - want), -hw[0]))


def _axis_weights(n_in: int, n_out: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Align-corners sample positions: lower index, upper index, upper weight."""
    if n_out == 1:
        pos = np.array([(n_in - 1) / 2.0])
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def interpolate_tokens(
    grid: TokenGrid, target_per_frame: Union[int, Tuple[int, int], None] = None
) -> ReducedSequence:
    """Bilinear resampling of each H x W frame to h' x w' (align-corners)."""
    T, H, W = grid.shape
    D = grid.dim
    if target_per_frame is None:
        hp, wp = default_interp_shape(H, W)
    elif isinstance(target_per_frame, tuple):
        hp, wp = target_per_frame
    else:
        hp, wp = factor_target(int(target_per_frame), H, W)
    if not (1 <= hp <= H and 1 <= wp <= W):
        raise ContractError(f"target {hp}x{wp} does not fit in {H}x{W}")
    vol = grid.as_volume()
    hlo, hhi, hw = _axis_weights(H, hp)
    wlo, whi, ww = _axis_weights(W, wp)
    top = vol[:, hlo][:, :, wlo] * (1 - ww)[None, None, :, None] + vol[:, hlo][:, :, whi] * ww[None, None, :, None]
    bot = vol[:, hhi][:, :, wlo] * (1 - ww)[None, None, :, None] + vol[:, hhi][:, :, whi] * ww[None, None, :, None]
    out = top * (1 - hw)[None, :, None, None] + bot * hw[None, :, None, None]
    count_flops(6 * out.size, "interp")
    source_map = []
    cell_ids = np.full(grid.n_tokens, -1, dtype=np.int64)
    j = 0
    for f in range(T):
        for a in range(hp):
            rows = {int(hlo[a])} | ({int(hhi[a])} if hw[a] > 0 else set())
            for b in range(wp):
                cols = {int(wlo[b])} | ({int(whi[b])} if ww[b] > 0 else set())
                cells = sorted(f * H * W + r * W + c for r in rows for c in cols)
                source_map.append(np.array(cells))
                if len(cells) == 1:
                    cell_ids[cells[0]] = j
                j += 1
    return ReducedSequence(out.reshape(-1, D), source_map, "interp", cell_ids)


def reduce_grid(grid: TokenGrid, spec: ReducerSpec) -> ReducedSequence:
    """Dispatch for the non-VQ reducers."""
    if spec.method == "interp":
        if spec.budget is None and spec.ratio is None:
            return interpolate_tokens(grid)
        m = spec.resolve(grid.n_tokens)
        if m % grid.frames:
            raise ContractError(f"interp budget {m} is not a multiple of T={grid.frames}")
        return interpolate_tokens(grid, m // grid.frames)
    m = spec.resolve(grid.n_tokens)
    if spec.method == "prune":
        return prune_tokens(grid, m)
    if spec.method == "tome":
        return merge_tome(grid, m)
    if spec.method == "vidtome":
        return merge_vidtome(grid, m)
    raise ContractError(f"{spec.method} is not a baseline reducer")
