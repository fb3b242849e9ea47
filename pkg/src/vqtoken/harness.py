"""Desk-scale extreme token reduction benchmark.

A synthetic proxy task stands in for video QA: every clip contains a target
object moving in one of four directions plus static background and
distracting objects, and the label is the target's direction.  Each reducer
turns a clip into a short token sequence; a linear probe on the mean of those
tokens measures how much motion information survived.

Runs come in three groups:

* fixed-length: every method at every token budget,
* adaptive-length: methods that choose their own per-clip count,
* ablation: the VQ pipeline with parts removed or randomised.
"""

from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import baselines
from .baselines import ReducerSpec, reduce_grid
from .metrics import (
    ComplexityModel,
    MetricsReport,
    baseline_module_flops,
    config_hash,
    llm_flops,
    measure_wall_clock,
    module_flops,
)
from .quantizer import ClusterAssignment, QuantizerConfig, quantize
from .tensor_ops import ContractError, LinearLayer, NonFiniteLossError, grad_check, row_softmax
from .token_grid import MOTIONS, SynthConfig, TokenGrid, synthesize_clip
from .vq_core import (
    CLUSTER_POSITIONAL,
    LITERAL_FLAT,
    IndexMap,
    VQAttnParams,
    build_codebook,
    build_index_map,
    compress_clip,
    encoder_input,
    vq_attention_backward,
    vq_forward,
)

log = logging.getLogger(__name__)

DEFAULT_BUDGETS = (12, 32, 64)
FIXED_METHODS = ("vq-fixed", "prune", "tome", "vidtome", "interp")
ADAPTIVE_METHODS = ("vq-adaptive", "interp")


class ProtocolError(RuntimeError):
    """Test-split data was touched while fitting."""


class ProbeDivergedError(NonFiniteLossError):
    pass


# ---------------------------------------------------------------------------
# dataset


@dataclass(frozen=True)
class DatasetConfig:
    num_clips: int = 200
    frames: int = 8
    height: int = 6
    width: int = 6
    dim: int = 32
    min_objects: int = 1
    max_objects: int = 3
    noise_std: float = 0.15
    num_classes: int = 4
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(MOTIONS):
            raise ContractError(f"num_classes must lie in [1, {len(MOTIONS)}]")
        if self.num_clips < self.num_classes:
            raise ContractError("need at least one clip per class")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ContractError("need 1 <= min_objects <= max_objects")
        if not 0.0 < self.test_fraction < 1.0:
            raise ContractError("test_fraction must lie in (0, 1)")


@dataclass
class ProxyDataset:
    grids: List[TokenGrid]
    labels: np.ndarray
    clip_ids: List[str]
    train_idx: np.ndarray
    test_idx: np.ndarray
    num_classes: int
    config: dict
    access_log: List[Tuple[str, str, int]] = field(default_factory=list, repr=False)
    _fitting: bool = field(default=False, repr=False)
    _cache: Dict = field(default_factory=dict, repr=False)

    @property
    def dataset_id(self) -> str:
        return config_hash(self.config)

    @property
    def grid_shape(self) -> Tuple[int, int, int, int]:
        g = self.grids[0]
        return g.frames, g.height, g.width, g.dim

    @contextmanager
    def fitting(self):
        """While active, reading the test split raises ``ProtocolError``."""
        prev = self._fitting
        self._fitting = True
        try:
            yield self
        finally:
            self._fitting = prev

    def split(self, name: str) -> np.ndarray:
        if name == "train":
            return self.train_idx
        if name == "test":
            return self.test_idx
        raise ContractError(f"unknown split {name!r}")

    def clips(self, name: str) -> Tuple[np.ndarray, List[TokenGrid], np.ndarray]:
        """(indices, grids, labels) of a split; every access is logged."""
        phase = "fit" if self._fitting else "eval"
        if name == "test" and self._fitting:
            self.access_log.append((phase, name, -1))
            raise ProtocolError("test split accessed while fitting")
        idx = self.split(name)
        self.access_log.extend((phase, name, int(i)) for i in idx)
        return idx, [self.grids[i] for i in idx], self.labels[idx]


def stratified_split(labels: np.ndarray, test_fraction: float, rng: np.random.Generator):
    train, test = [], []
    for c in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == c))
        n_test = int(round(len(members) * test_fraction))
        if len(members) >= 2:
            n_test = min(max(n_test, 1), len(members) - 1)
        test.extend(members[:n_test])
        train.extend(members[n_test:])
    if not train or not test:
        raise ContractError(f"{len(labels)} clips are too few for a train/test split")
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(test, dtype=np.int64))


def build_dataset(cfg: DatasetConfig = DatasetConfig()) -> ProxyDataset:
    """Balanced, seeded proxy dataset with a stratified train/test split."""
    rng = np.random.default_rng(cfg.seed)
    labels = rng.permutation(np.arange(cfg.num_clips) % cfg.num_classes)
    grids, ids = [], []
    for i in range(cfg.num_clips):
        sc = SynthConfig(
            num_objects=int(rng.integers(cfg.min_objects, cfg.max_objects + 1)),
            motion=MOTIONS[labels[i]],
            noise_std=cfg.noise_std,
            seed=int(rng.integers(2**31)),
            frames=cfg.frames,
            height=cfg.height,
            width=cfg.width,
            dim=cfg.dim,
            palette_seed=cfg.seed,
        )
        grid, _ = synthesize_clip(sc)
        grids.append(grid)
        ids.append(f"clip{i:04d}")
    train, test = stratified_split(labels, cfg.test_fraction, rng)
    return ProxyDataset(grids, labels.astype(np.int64), ids, train, test, cfg.num_classes, asdict(cfg))


def dataset_from_clips(
    grids: Sequence[TokenGrid],
    labels: Sequence[int],
    clip_ids: Sequence[str],
    seed: int = 0,
    test_fraction: float = 0.2,
    source: str = "files",
) -> ProxyDataset:
    """Wrap externally loaded clips (e.g. a ``synth`` directory) as a dataset."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(grids) != len(labels) or len(grids) != len(clip_ids):
        raise ContractError("grids, labels and clip ids differ in length")
    shapes = {(g.frames, g.height, g.width, g.dim) for g in grids}
    if len(shapes) != 1:
        raise ContractError(f"clips have mixed shapes: {sorted(shapes)}")
    num_classes = len(MOTIONS)
    rng = np.random.default_rng(seed)
    train, test = stratified_split(labels, test_fraction, rng)
    h = hashlib.sha256()
    for c, l, g in zip(clip_ids, labels, grids):
        h.update(f"{c}:{int(l)}:{g.frames}x{g.height}x{g.width}x{g.dim}".encode())
        h.update(g.embeddings.tobytes())
    digest = h.hexdigest()[:16]
    config = {"source": source, "seed": seed, "test_fraction": test_fraction, "content": digest}
    return ProxyDataset(list(grids), labels, list(clip_ids), train, test, num_classes, config)


# ---------------------------------------------------------------------------
# linear probe


@dataclass
class LinearProbe:
    weight: np.ndarray
    bias: np.ndarray
    tag: str
    mean: np.ndarray
    scale: np.ndarray
    loss_history: List[float] = field(default_factory=list)

    def standardize(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mean) / self.scale

    def logits(self, features: np.ndarray) -> np.ndarray:
        return self.standardize(features) @ self.weight + self.bias

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(features), axis=1)

    def accuracy(self, features: np.ndarray, labels: np.ndarray) -> float:
        """Percent correct."""
        return 100.0 * float(np.mean(self.predict(features) == labels))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean multinomial log-loss and its gradient w.r.t. the logits."""
    p = row_softmax(logits)
    n = labels.shape[0]
    loss = -float(np.mean(np.log(np.maximum(p[np.arange(n), labels], 1e-300))))
    g = p.copy()
    g[np.arange(n), labels] -= 1.0
    return loss, g / n


def train_probe(
    features: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    epochs: int = 500,
    lr: float = 0.1,
    tag: str = "",
) -> LinearProbe:
    """Multinomial logistic regression by full-batch gradient descent.

    Features are centred per dimension and scaled so the mean squared row norm
    is 1; the loss Hessian is then bounded by 1/2, so any lr <= 2 decreases the
    loss monotonically.  Weights start at zero.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    z = (x - mean) / std
    rms = math.sqrt(float(np.mean(np.sum(z * z, axis=1)))) or 1.0
    scale = std * rms
    layer = LinearLayer(np.zeros((x.shape[1], num_classes)), np.zeros(num_classes))
    probe = LinearProbe(layer.weight, layer.bias, tag, mean, scale)
    xs = probe.standardize(x)
    for _ in range(epochs):
        loss, g = cross_entropy(layer.forward(xs), y)
        if not math.isfinite(loss):
            raise ProbeDivergedError(f"probe loss became {loss} (tag={tag!r}, lr={lr}, epochs={epochs})")
        probe.loss_history.append(loss)
        layer.backward(g)
        layer.weight -= lr * layer.weight_grad
        layer.bias -= lr * layer.bias_grad
    probe.weight, probe.bias = layer.weight, layer.bias
    return probe


# ---------------------------------------------------------------------------
# VQ pipeline: batch preparation, joint training, features


@dataclass(frozen=True)
class TrainConfig:
    """Joint training of the VQ block (Adam) and the final probe (plain GD)."""

    epochs: int = 300
    lr: float = 0.003
    init_seed: int = 0
    heads: int = 4
    variant: str = CLUSTER_POSITIONAL
    probe_epochs: int = 500
    probe_lr: float = 0.1


@dataclass(frozen=True)
class AblationSpec:
    """Which VQ parts run: 'on', 'off' or 'rand' (randomised)."""

    name: str
    codebook: str = "on"
    hash: str = "on"
    attn: str = "on"

    def __post_init__(self):
        if self.codebook not in ("on", "rand"):
            raise ContractError("codebook must be 'on' or 'rand'")
        if self.hash not in ("on", "off", "rand") or self.attn not in ("on", "off", "rand"):
            raise ContractError("hash/attn must be 'on', 'off' or 'rand'")
        if (self.hash == "off") != (self.attn == "off"):
            raise ContractError("the hash only reaches the tokens through attention; turn both off together")


DEFAULT_ABLATIONS = (
    AblationSpec("codebook-only", hash="off", attn="off"),
    AblationSpec("rand-attn", attn="rand"),
    AblationSpec("rand-hash", hash="rand"),
    AblationSpec("rand-codebook", codebook="rand"),
    AblationSpec("full"),
)
FULL = DEFAULT_ABLATIONS[-1]


@dataclass
class VQBatch:
    codebooks: np.ndarray
    enc_in: np.ndarray
    mask: np.ndarray
    ks: np.ndarray
    iterations: np.ndarray


def _cluster(dataset: ProxyDataset, i: int, qcfg: QuantizerConfig) -> ClusterAssignment:
    key = ("cluster", i, qcfg)
    if key not in dataset._cache:
        dataset._cache[key] = quantize(dataset.grids[i].embeddings, qcfg)
    return dataset._cache[key]


def _map_parallel(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def prepare_vq_batch(
    dataset: ProxyDataset,
    indices: Sequence[int],
    qcfg: QuantizerConfig,
    template: VQAttnParams,
    ablation: AblationSpec = FULL,
    ablation_seed: int = 0,
    threads: int = 1,
) -> VQBatch:
    """Cluster each clip and stack codebooks / encoder inputs, padded to the largest K."""

    def one(i):
        grid = dataset.grids[i]
        a = _cluster(dataset, i, qcfg)
        cb = build_codebook(grid, a).vectors
        imap = build_index_map(a, grid.frames, grid.height, grid.width)
        rng = np.random.default_rng([ablation_seed, int(i)])
        if ablation.hash == "rand":
            perm = rng.permutation(grid.n_tokens)
            imap = IndexMap(imap.ids.reshape(-1)[perm].reshape(imap.shape), imap.k)
        if ablation.codebook == "rand":
            lo, hi = grid.embeddings.min(axis=0), grid.embeddings.max(axis=0)
            cb = rng.uniform(lo, hi, size=cb.shape)
        return cb, encoder_input(imap, template), a.k, a.iterations

    parts = _map_parallel(one, list(indices), threads)
    n = len(parts)
    kmax = max(p[2] for p in parts)
    D = template.dim
    cbs = np.zeros((n, kmax, D))
    mask = np.zeros((n, kmax), dtype=bool)
    if template.variant == LITERAL_FLAT:
        enc = np.stack([p[1] for p in parts])
    else:
        enc = np.zeros((n, kmax, D + 1))
    for j, (cb, x, k, _) in enumerate(parts):
        cbs[j, :k] = cb
        mask[j, :k] = True
        if template.variant != LITERAL_FLAT:
            enc[j, :k] = x
    ks = np.array([p[2] for p in parts])
    its = np.array([p[3] for p in parts])
    return VQBatch(cbs, enc, mask, ks, its)


def _masked_mean(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return (x * mask[..., None]).sum(axis=1) / mask.sum(axis=1, keepdims=True)


def vq_features(params: Optional[VQAttnParams], batch: VQBatch, exact: bool = False) -> np.ndarray:
    """Mean over each clip's compressed tokens (codebook rows when params is None)."""
    if params is None:
        return _masked_mean(batch.codebooks, batch.mask)
    out, _ = vq_forward(params, batch.codebooks, batch.enc_in, batch.mask, exact=exact)
    return _masked_mean(out, batch.mask)


def vq_probe_loss(
    params: VQAttnParams,
    probe: LinearLayer,
    batch: VQBatch,
    labels: np.ndarray,
    exact: bool = False,
) -> Tuple[float, Dict[str, np.ndarray]]:
    """Cross-entropy of a linear probe on mean-pooled B'; gradients for every tensor."""
    out, cache = vq_forward(params, batch.codebooks, batch.enc_in, batch.mask, exact=exact)
    feat = _masked_mean(out, batch.mask)
    logits = probe.forward(feat, exact=exact)
    loss, g = cross_entropy(logits, labels)
    d_feat = probe.backward(g, exact=exact)
    grads = {"probe.weight": probe.weight_grad, "probe.bias": probe.bias_grad}
    d_out = d_feat[:, None, :] * (batch.mask / batch.mask.sum(axis=1, keepdims=True))[..., None]
    grads.update(vq_attention_backward(params, cache, d_out))
    return loss, grads


class Adam:
    def __init__(self, tensors: Dict[str, np.ndarray], lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.tensors = tensors
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.t = 0

    def step(self, grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.tensors.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def fit_vq(
    params: VQAttnParams, batch: VQBatch, labels: np.ndarray, num_classes: int, cfg: TrainConfig
) -> List[float]:
    """Train the VQ block end to end through a throw-away linear probe.

    Updates ``params`` in place and returns the per-epoch training loss.
    """
    rng = np.random.default_rng(cfg.init_seed + 1)
    probe = LinearLayer.init(params.dim, num_classes, rng)
    tensors = dict(params.named_tensors())
    tensors["probe.weight"] = probe.weight
    tensors["probe.bias"] = probe.bias
    opt = Adam(tensors, cfg.lr)
    history = []
    for _ in range(cfg.epochs):
        loss, grads = vq_probe_loss(params, probe, batch, labels)
        if not math.isfinite(loss):
            raise ProbeDivergedError(f"VQ training loss became {loss} ({cfg})")
        history.append(loss)
        opt.step(grads)
    return history


def init_params(dataset: ProxyDataset, cfg: TrainConfig, k: Optional[int] = None) -> VQAttnParams:
    T, H, W, D = dataset.grid_shape
    grid_shape = None
    if cfg.variant == LITERAL_FLAT:
        if k is None:
            raise ContractError("literal-flat encoder needs a fixed K")
        grid_shape = (T, H, W, k)
    return VQAttnParams.init(D, cfg.heads, cfg.variant, seed=cfg.init_seed, grid_shape=grid_shape)


# ---------------------------------------------------------------------------
# runs


@dataclass
class BenchmarkRun:
    subtask: str
    method: str
    budget: Optional[int]
    dataset_id: str
    accuracy: float
    avg_tokens: float
    train_accuracy: float
    report: MetricsReport
    config: dict

    @property
    def tok_dense(self) -> float:
        return self.report.tokDense

    def ledger_record(self) -> dict:
        rec = asdict(self.report)
        rec.update(
            subtask=self.subtask,
            budget=self.budget,
            avgTokens=self.avg_tokens,
            trainAccuracy=self.train_accuracy,
            datasetId=self.dataset_id,
            config=self.config,
        )
        return rec


def _qcfg_for(method: str, budget: Optional[int], seed: int, adaptive: Optional[QuantizerConfig]) -> QuantizerConfig:
    if method == "vq-adaptive":
        base = adaptive or QuantizerConfig(mode="adaptive")
        return replace(base, seed=seed)
    return QuantizerConfig(mode="fixed", k=int(budget), seed=seed)


def _run_config(dataset, subtask, method, budget, seed, train, qcfg, ablation) -> dict:
    return {
        "subtask": subtask,
        "method": method,
        "budget": budget,
        "dataset": dataset.config,
        "seed": seed,
        "train": asdict(train),
        "quantizer": asdict(qcfg) if qcfg is not None else None,
        "ablation": asdict(ablation) if ablation is not None else None,
    }


def _vq_run(dataset, subtask, method, budget, seed, train, qcfg, ablation, timing, threads) -> BenchmarkRun:
    config = _run_config(dataset, subtask, method, budget, seed, train, qcfg, ablation)
    N = dataset.grids[0].n_tokens
    with dataset.fitting():
        tr_idx, _, tr_y = dataset.clips("train")
        k_fixed = qcfg.k if qcfg.mode == "fixed" else None
        params = init_params(dataset, train, k_fixed)
        tr_batch = prepare_vq_batch(dataset, tr_idx, qcfg, params, ablation, seed, threads)
        if ablation.attn == "on":
            fit_vq(params, tr_batch, tr_y, dataset.num_classes, train)
        use = None if ablation.attn == "off" else params
        tr_feat = vq_features(use, tr_batch)
        probe = train_probe(tr_feat, tr_y, dataset.num_classes, train.probe_epochs, train.probe_lr, tag=method)
    te_idx, te_grids, te_y = dataset.clips("test")
    te_batch = prepare_vq_batch(dataset, te_idx, qcfg, params, ablation, seed, threads)
    acc = probe.accuracy(vq_features(use, te_batch), te_y)
    avg_k = float(te_batch.ks.mean())
    iters = int(round(float(te_batch.iterations.mean())))
    D = params.dim
    model = ComplexityModel(n=N, m=max(1, int(round(avg_k))), d=D, kmeans_iters=iters)
    wall = None
    if timing:
        wall = measure_wall_clock(lambda: compress_clip(te_grids[0], qcfg, params, exact=False))
    report = MetricsReport.build(method, acc, avg_k, N, module_flops(model), llm_flops(model), config, wall)
    return BenchmarkRun(subtask, method, budget, dataset.dataset_id, acc, avg_k,
                        probe.accuracy(tr_feat, tr_y), report, config)


def _baseline_run(dataset, subtask, method, budget, seed, train, timing, threads) -> BenchmarkRun:
    spec = ReducerSpec(method, budget)
    config = _run_config(dataset, subtask, method, budget, seed, train, None, None)
    T, H, W, D = dataset.grid_shape
    N = T * H * W

    def feats(grids):
        reduced = _map_parallel(lambda g: reduce_grid(g, spec), grids, threads)
        return np.stack([r.tokens.mean(axis=0) for r in reduced]), np.array([r.m for r in reduced])

    with dataset.fitting():
        _, tr_grids, tr_y = dataset.clips("train")
        tr_feat, _ = feats(tr_grids)
        probe = train_probe(tr_feat, tr_y, dataset.num_classes, train.probe_epochs, train.probe_lr, tag=method)
    _, te_grids, te_y = dataset.clips("test")
    te_feat, counts = feats(te_grids)
    acc = probe.accuracy(te_feat, te_y)
    avg = float(counts.mean())
    m = int(round(avg))
    wall = measure_wall_clock(lambda: reduce_grid(te_grids[0], spec)) if timing else None
    report = MetricsReport.build(
        method, acc, avg, N, baseline_module_flops(method, N, m, D, T),
        llm_flops(ComplexityModel(n=N, m=m, d=D)), config, wall,
    )
    return BenchmarkRun(subtask, method, budget, dataset.dataset_id, acc, avg,
                        probe.accuracy(tr_feat, tr_y), report, config)


def run_reference(dataset: ProxyDataset, train: TrainConfig = TrainConfig()) -> BenchmarkRun:
    """Probe on the mean of all N uncompressed tokens."""
    config = _run_config(dataset, "reference", "full-tokens", None, 0, train, None, None)
    T, H, W, D = dataset.grid_shape
    N = T * H * W
    with dataset.fitting():
        _, tr_grids, tr_y = dataset.clips("train")
        tr_feat = np.stack([g.embeddings.mean(axis=0) for g in tr_grids])
        probe = train_probe(tr_feat, tr_y, dataset.num_classes, train.probe_epochs, train.probe_lr, tag="reference")
    _, te_grids, te_y = dataset.clips("test")
    acc = probe.accuracy(np.stack([g.embeddings.mean(axis=0) for g in te_grids]), te_y)
    report = MetricsReport.build("full-tokens", acc, N, N, 0, llm_flops(ComplexityModel(n=N, m=N, d=D)), config)
    return BenchmarkRun("reference", "full-tokens", N, dataset.dataset_id, acc, float(N),
                        probe.accuracy(tr_feat, tr_y), report, config)


def run_method(
    dataset: ProxyDataset,
    method: str,
    budget: Optional[int] = None,
    *,
    seed: int = 0,
    train: TrainConfig = TrainConfig(),
    adaptive: Optional[QuantizerConfig] = None,
    ablation: Optional[AblationSpec] = None,
    subtask: Optional[str] = None,
    timing: bool = False,
    threads: int = 1,
) -> BenchmarkRun:
    """One (method, budget) benchmark cell.  ``budget=None`` means the method's own choice."""
    if method in ("vq", "vq-fixed"):
        method = "vq-fixed"
        if budget is None:
            raise ContractError("vq-fixed needs a budget")
    if method in ("vq-fixed", "vq-adaptive"):
        qcfg = _qcfg_for(method, budget, seed, adaptive)
        sub = subtask or ("fixed" if method == "vq-fixed" else "adaptive")
        return _vq_run(dataset, sub, method, budget, seed, replace(train, init_seed=seed), qcfg,
                       ablation or FULL, timing, threads)
    if method not in baselines.REDUCERS:
        raise ContractError(f"unknown method {method!r}; valid: vq, {', '.join(baselines.METHODS)}")
    sub = subtask or ("fixed" if budget is not None else "adaptive")
    return _baseline_run(dataset, sub, method, budget, seed, train, timing, threads)


def budget_feasible(method: str, budget: int, grid_shape: Tuple[int, int, int, int]) -> bool:
    """Whether a method can hit ``budget`` exactly on this grid shape."""
    T, H, W, _ = grid_shape
    if budget > T * H * W:
        return False
    if method != "interp":
        return True
    if budget % T:
        return False
    try:
        baselines.factor_target(budget // T, H, W)
    except ContractError:
        return False
    return True


def run_fixed_length(
    dataset: ProxyDataset,
    budgets: Iterable[int] = DEFAULT_BUDGETS,
    methods: Iterable[str] = FIXED_METHODS,
    *,
    seed: int = 0,
    train: TrainConfig = TrainConfig(),
    timing: bool = False,
    threads: int = 1,
) -> List[BenchmarkRun]:
    """Every method at every budget; cells a method cannot hit exactly are skipped."""
    runs = []
    for method in methods:
        for b in budgets:
            if not budget_feasible(method, b, dataset.grid_shape):
                log.warning("skipping %s at budget %d: not reachable exactly on %s", method, b, dataset.grid_shape)
                continue
            log.info("fixed-length: %s @ %d", method, b)
            runs.append(run_method(dataset, method, b, seed=seed, train=train, subtask="fixed",
                                   timing=timing, threads=threads))
    return runs


def run_adaptive_length(
    dataset: ProxyDataset,
    methods: Iterable[str] = ADAPTIVE_METHODS,
    *,
    seed: int = 0,
    train: TrainConfig = TrainConfig(),
    adaptive: Optional[QuantizerConfig] = None,
    timing: bool = False,
    threads: int = 1,
) -> List[BenchmarkRun]:
    runs = []
    for method in methods:
        if method not in ADAPTIVE_METHODS:
            raise ContractError(f"{method} has no adaptive mode; choose from {ADAPTIVE_METHODS}")
        log.info("adaptive-length: %s", method)
        runs.append(run_method(dataset, method, None, seed=seed, train=train, adaptive=adaptive,
                               subtask="adaptive", timing=timing, threads=threads))
    return runs


def run_ablation(
    dataset: ProxyDataset,
    specs: Sequence[AblationSpec] = DEFAULT_ABLATIONS,
    *,
    k: int = 32,
    seed: int = 0,
    train: TrainConfig = TrainConfig(),
    threads: int = 1,
) -> List[BenchmarkRun]:
    """VQ at fixed K with parts switched off or randomised; token count stays K."""
    runs = []
    for spec in specs:
        log.info("ablation: %s", spec.name)
        run = run_method(dataset, "vq-fixed", k, seed=seed, train=train, ablation=spec,
                         subtask="ablation", threads=threads)
        run.method = f"ablation:{spec.name}"
        run.report = replace(run.report, method=run.method)
        runs.append(run)
    return runs


def rerun(dataset: ProxyDataset, config: dict, threads: int = 1) -> BenchmarkRun:
    """Re-execute a run from its recorded config."""
    train = TrainConfig(**config["train"])
    method = config["method"]
    ablation = AblationSpec(**config["ablation"]) if config.get("ablation") else None
    adaptive = None
    if config.get("quantizer") and config["quantizer"]["mode"] == "adaptive":
        adaptive = QuantizerConfig(**config["quantizer"])
    run = run_method(dataset, method, config["budget"], seed=config["seed"], train=train,
                     adaptive=adaptive, ablation=ablation, subtask=config["subtask"], threads=threads)
    return run


def reference_ceiling_violations(runs: Sequence[BenchmarkRun], reference: BenchmarkRun, slack: float = 2.0):
    """Runs whose accuracy beats the full-token probe by more than ``slack`` points."""
    return [r for r in runs if r.accuracy > reference.accuracy + slack]


# ---------------------------------------------------------------------------
# gradient check of the whole trainable graph


def gradcheck_setup(seed: int = 0, variant: str = CLUSTER_POSITIONAL):
    """Small batch of clips, fresh params and probe for a finite-difference check.

    Grid 2x3x3, D=8, 2 heads.  The cluster-positional batch mixes K=2 and K=3
    clips so the padding mask is exercised; literal-flat needs one K for all.
    """
    rng = np.random.default_rng(seed)
    ks = [3, 3, 3] if variant == LITERAL_FLAT else [2, 3, 3]
    labels = np.array([0, 1, 2])
    ds_grids = []
    for j in range(3):
        sc = SynthConfig(num_objects=2, motion=MOTIONS[labels[j]], noise_std=0.3, seed=int(rng.integers(2**31)),
                         frames=2, height=3, width=3, dim=8, object_size=(1, 1), palette_size=4,
                         palette_seed=seed)
        ds_grids.append(synthesize_clip(sc)[0])
    ds = ProxyDataset(ds_grids, labels, ["a", "b", "c"], np.arange(3), np.arange(0), 4, {"gradcheck": seed})
    grid_shape = (2, 3, 3, 3) if variant == LITERAL_FLAT else None
    params = VQAttnParams.init(8, heads=2, variant=variant, seed=seed, grid_shape=grid_shape)
    parts = [prepare_vq_batch(ds, [j], QuantizerConfig(k=k, seed=seed), params) for j, k in enumerate(ks)]
    kmax = max(ks)
    n = len(parts)
    cbs = np.zeros((n, kmax, 8))
    mask = np.zeros((n, kmax), dtype=bool)
    enc = np.zeros((n, 2 * 3 * 3)) if variant == LITERAL_FLAT else np.zeros((n, kmax, 9))
    for j, p in enumerate(parts):
        k = p.ks[0]
        cbs[j, :k] = p.codebooks[0, :k]
        mask[j, :k] = True
        if variant == LITERAL_FLAT:
            enc[j] = p.enc_in[0]
        else:
            enc[j, :k] = p.enc_in[0, :k]
    batch = VQBatch(cbs, enc, mask, np.array(ks), np.zeros(n, dtype=np.int64))
    # Central differences are meaningless across a ReLU kink, so redraw the
    # parameters (deterministically) until every hidden pre-activation is well
    # clear of zero.
    attempt = 0
    while _kink_distance(params, batch) < KINK_MARGIN:
        attempt += 1
        params = VQAttnParams.init(8, heads=2, variant=variant, seed=[seed, attempt], grid_shape=grid_shape)
    probe = LinearLayer.init(8, 4, rng)
    return params, probe, batch, labels


KINK_MARGIN = 1e-3


def _kink_distance(params: VQAttnParams, batch: VQBatch) -> float:
    """Smallest |pre-activation| over the encoder's hidden units (real rows only)."""
    h = batch.enc_in
    dist = np.inf
    for layer in params.mlp[:-1]:
        z = h @ layer.weight + layer.bias
        live = z if params.variant == LITERAL_FLAT else z[batch.mask]
        dist = min(dist, float(np.abs(live).min()))
        h = np.maximum(z, 0.0)
    return dist


def vq_gradcheck(
    seed: int = 0, variant: str = CLUSTER_POSITIONAL, corrupt: Optional[str] = None, exact: bool = False
):
    """Finite-difference check of encoder + attention + probe.

    ``corrupt`` names a tensor whose analytic gradient is deliberately scaled
    by 1.5 (a negative control for the checker itself).
    """

    params, probe, batch, labels = gradcheck_setup(seed, variant)
    tensors = dict(params.named_tensors())
    tensors["probe.weight"] = probe.weight
    tensors["probe.bias"] = probe.bias
    if corrupt is not None and corrupt not in tensors:
        raise ContractError(f"unknown tensor {corrupt!r}; have {sorted(tensors)}")

    def f(_):
        loss, grads = vq_probe_loss(params, probe, batch, labels, exact=exact)
        if corrupt is not None:
            grads = dict(grads)
            grads[corrupt] = grads[corrupt] * 1.5
        return loss, grads

    return grad_check(f, tensors, seed=seed)
