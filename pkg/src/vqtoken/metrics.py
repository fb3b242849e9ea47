"""TokDense, analytic cost models and wall-clock timing.

Flop counts treat a multiply-add as two operations.  ``module_flops`` mirrors
the operations the VQ pipeline actually performs; the per-term constants are
checked against ``tensor_ops.FlopCounter`` traces in the tests.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from statistics import median
from typing import Callable, Dict, Optional

from .baselines import merge_schedule
from .tensor_ops import ContractError


def tok_dense(accuracy: float, token_count: float) -> float:
    """Accuracy (percent) per retained token."""
    if not token_count > 0:
        raise ContractError(f"token count must be positive, got {token_count}")
    return accuracy / token_count


def token_percent(m: float, n: float) -> float:
    return 100.0 * m / n


@dataclass(frozen=True)
class ComplexityModel:
    n: int
    m: int
    d: int
    layers: int = 24
    kmeans_iters: int = 25
    k: Optional[int] = None
    heads: int = 4
    encoder_hidden: Optional[int] = None

    def __post_init__(self):
        if not self.n >= self.m >= 1:
            raise ContractError(f"need n >= m >= 1, got n={self.n}, m={self.m}")
        if self.d < 1 or self.layers < 1:
            raise ContractError("d and layers must be >= 1")
        if self.kmeans_iters < 0:
            raise ContractError("kmeans_iters must be >= 0")

    @property
    def clusters(self) -> int:
        return self.m if self.k is None else self.k

    @property
    def hidden(self) -> int:
        return 2 * self.d if self.encoder_hidden is None else self.encoder_hidden


def module_flops_breakdown(model: ComplexityModel) -> Dict[str, int]:
    """Per-stage flop counts of one compress_clip call (cluster-positional encoder).

    clustering  2nKd (seeding) + per iteration 2nKd (similarities) + 2nd
                (centroid sums) + 2nd (cost)
    encoder     2nd (positional pooling) + 2K((d+1)h + hd) (two-layer MLP)
    attention   6Kd^2 (Q, K, V projections) + 4K^2 d (scores and mixing)
    """
    n, K, d, it, h = model.n, model.clusters, model.d, model.kmeans_iters, model.hidden
    return {
        "clustering": 2 * n * K * d * (it + 1) + 4 * n * d * it,
        "encoder": 2 * n * d + 2 * K * ((d + 1) * h + h * d),
        "attention": 6 * K * d * d + 4 * K * K * d,
    }


def module_flops(model: ComplexityModel) -> int:
    return sum(module_flops_breakdown(model).values())


def llm_flops(model: ComplexityModel) -> int:
    """Order-of-magnitude proxy for the downstream model: 2 m^2 d L."""
    return 2 * model.m * model.m * model.d * model.layers


def baseline_module_flops(method: str, n: int, m: int, d: int, frames: int = 1) -> int:
    """Rough cost of the comparison reducers, same conventions as module_flops.

    prune   6nd (norms, frame means, cosines)
    tome    per round L^2 d / (2F): A/B similarity inside each of F frames
    vidtome per round L^2 d / F: source frame against destination frame
    interp  6md (four-tap blend per output token)
    """
    if method == "prune":
        return 6 * n * d
    if method == "interp":
        return 6 * m * d
    if method in ("tome", "vidtome"):
        _, r = merge_schedule(n, m)
        live, total = n, 0
        div = 2 * frames if method == "tome" else frames
        while live > m:
            total += live * live * d // div
            live -= min(r, live - m)
        return total
    raise ContractError(f"no baseline cost model for {method!r}")


def measure_wall_clock(thunk: Callable[[], object], repeats: int = 5, warmup: int = 1) -> float:
    """Median runtime of ``thunk`` in milliseconds after ``warmup`` untimed calls."""
    if repeats < 1:
        raise ContractError("repeats must be >= 1")
    for _ in range(warmup):
        thunk()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        thunk()
        times.append((time.perf_counter() - t0) * 1000.0)
    return median(times)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class MetricsReport:
    tokenCount: float
    tokenPercent: float
    accuracy: float
    tokDense: float
    moduleFlops: int
    llmFlops: int
    wallClockMs: Optional[float]
    method: str
    configHash: str

    @classmethod
    def build(
        cls,
        method: str,
        accuracy: float,
        token_count: float,
        n: int,
        module: int,
        llm: int,
        config: dict,
        wall_ms: Optional[float] = None,
    ) -> "MetricsReport":
        return cls(
            tokenCount=token_count,
            tokenPercent=token_percent(token_count, n),
            accuracy=accuracy,
            tokDense=tok_dense(accuracy, token_count),
            moduleFlops=int(module),
            llmFlops=int(llm),
            wallClockMs=wall_ms,
            method=method,
            configHash=config_hash(config),
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)


def append_ledger(path, record: dict) -> None:
    """Append one JSON object as a line."""
    with open(Path(path), "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record) + "\n")
