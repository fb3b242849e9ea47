"""Small dense kernel: matmul, softmax, ReLU MLPs with hand-written backward
passes, and a central-difference gradient checker.

Arrays are plain float64 ``numpy.ndarray`` objects. Functions accept leading
batch dimensions where that is cheap to support.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np


class ContractError(ValueError):
    """Shapes or values violate an operation's precondition."""


class StateError(RuntimeError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class NonFiniteLossError(FloatingPointError):
    """A perturbed evaluation during gradient checking produced a non-finite loss."""


# Optional flop counter; see ``count_flops``.
_FLOP_COUNTERS: List["FlopCounter"] = []


class FlopCounter:
    """Context manager that tallies floating-point operations reported by kernels.

    A multiply-add counts as two flops.  Nested counters all receive counts.
    """

    def __init__(self):
        self.total = 0
        self.by_tag: Dict[str, int] = {}

    def add(self, n: int, tag: str = "matmul") -> None:
        self.total += int(n)
        self.by_tag[tag] = self.by_tag.get(tag, 0) + int(n)

    def __enter__(self):
        _FLOP_COUNTERS.append(self)
        return self

    def __exit__(self, *exc):
        _FLOP_COUNTERS.remove(self)
        return False


def count_flops(n: int, tag: str = "misc") -> None:
    for c in _FLOP_COUNTERS:
        c.add(n, tag)


def _as_float(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def matmul(a: np.ndarray, b: np.ndarray, *, exact: bool = True, tag: str = "matmul") -> np.ndarray:
    """Matrix product over the last two axes.

    With ``exact=True`` every output element is accumulated in ascending order
    of the inner index, starting from zero, so the result is bit-identical to
    a naive triple loop and independent of BLAS threading.  ``exact=False``
    hands the product to numpy/BLAS, which is much faster but may fuse or
    reorder the accumulation.
    """
    a = _as_float(a)
    b = _as_float(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    inner = a.shape[-1]
    rows, cols = a.shape[-2], b.shape[-1]
    batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    if _FLOP_COUNTERS:
        count_flops(2 * int(np.prod(batch, dtype=np.int64)) * rows * inner * cols, tag)
    if not exact:
        return a @ b
    out = np.zeros(batch + (rows, cols))
    if inner == 0:
        return out
    tmp = np.empty_like(out)
    for k in range(inner):
        np.multiply(a[..., :, k, None], b[..., k, None, :], out=tmp)
        out += tmp
    return out


def row_softmax(a: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Softmax along the last axis, stabilised by subtracting the row maximum.

    ``mask`` (broadcastable to ``a``, True = keep) zeroes excluded entries; a row
    must keep at least one entry.
    """
    a = _as_float(a)
    if mask is None:
        shifted = a - a.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    if not mask.any(axis=-1).all():
        raise ContractError("row_softmax: a row has every entry masked out")
    masked = np.where(mask, a, -np.inf)
    shifted = masked - masked.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. softmax inputs given the softmax output and upstream grad."""
    return probs * (grad - (grad * probs).sum(axis=-1, keepdims=True))


ACTIVATIONS = ("relu", "identity")


@dataclass
class LinearLayer:
    """Affine map ``x @ weight + bias`` with weight of shape (in, out)."""

    weight: np.ndarray
    bias: np.ndarray
    cached_input: Optional[np.ndarray] = field(default=None, repr=False)
    cached_preact: Optional[np.ndarray] = field(default=None, repr=False)
    weight_grad: Optional[np.ndarray] = field(default=None, repr=False)
    bias_grad: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.weight = _as_float(self.weight)
        self.bias = _as_float(self.bias).reshape(-1)
        if self.weight.ndim != 2:
            raise ContractError(f"weight must be 2-D, got shape {self.weight.shape}")
        if self.bias.shape[0] != self.weight.shape[1]:
            raise ContractError(
                f"bias length {self.bias.shape[0]} does not match weight out-dim {self.weight.shape[1]}"
            )

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator) -> "LinearLayer":
        # centred uniform scaled by 1/sqrt(fan-in)
        bound = 1.0 / np.sqrt(n_in)
        w = rng.uniform(-bound, bound, size=(n_in, n_out))
        b = rng.uniform(-bound, bound, size=(n_out,))
        return cls(w, b)

    def forward(self, x: np.ndarray, *, exact: bool = True, cache: bool = True) -> np.ndarray:
        x = _as_float(x)
        if x.shape[-1] != self.in_features:
            raise ContractError(f"input width {x.shape[-1]} != layer in-dim {self.in_features}")
        out = matmul(x, self.weight, exact=exact) + self.bias
        if cache:
            self.cached_input = x
        return out

    def backward(self, grad_out: np.ndarray, *, exact: bool = True) -> np.ndarray:
        if self.cached_input is None:
            raise StateError("LinearLayer.backward called before a caching forward pass")
        x = self.cached_input
        x2 = x.reshape(-1, x.shape[-1])
        g2 = grad_out.reshape(-1, grad_out.shape[-1])
        self.weight_grad = matmul(x2.T, g2, exact=exact)
        self.bias_grad = g2.sum(axis=0)
        return matmul(grad_out, self.weight.T, exact=exact)


def mlp_forward(
    layers: Sequence[LinearLayer],
    x: np.ndarray,
    activation: str = "relu",
    *,
    exact: bool = True,
    cache: bool = True,
) -> np.ndarray:
    """Affine + activation on every hidden layer; the last layer is affine only."""
    if activation not in ACTIVATIONS:
        raise ContractError(f"unknown activation {activation!r}")
    if not layers:
        raise ContractError("mlp_forward needs at least one layer")
    for prev, nxt in zip(layers, layers[1:]):
        if prev.out_features != nxt.in_features:
            raise ContractError(
                f"chained layer dims inconsistent: {prev.out_features} -> {nxt.in_features}"
            )
    h = _as_float(x)
    last = len(layers) - 1
    for i, layer in enumerate(layers):
        z = layer.forward(h, exact=exact, cache=cache)
        if i < last and activation == "relu":
            if cache:
                layer.cached_preact = z
            h = np.maximum(z, 0.0)
        else:
            if cache:
                layer.cached_preact = None
            h = z
    return h


def mlp_backward(
    layers: Sequence[LinearLayer],
    upstream: np.ndarray,
    activation: str = "relu",
    *,
    exact: bool = True,
) -> Tuple[List[Tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Backpropagate ``upstream`` (dLoss/dOutput) through a cached MLP.

    Returns ``([(weight_grad, bias_grad) per layer], input_grad)``; the grads are
    also stored on each layer.
    """
    if any(layer.cached_input is None for layer in layers):
        raise StateError("mlp_backward called before a caching mlp_forward")
    g = _as_float(upstream)
    last = len(layers) - 1
    for i in range(last, -1, -1):
        layer = layers[i]
        if i < last and activation == "relu":
            if layer.cached_preact is None:
                raise StateError("missing cached pre-activation; rerun forward with cache=True")
            g = g * (layer.cached_preact > 0)
        g = layer.backward(g, exact=exact)
    return [(layer.weight_grad, layer.bias_grad) for layer in layers], g


@dataclass
class GradCheckReport:
    max_rel_error: float
    param_count: int
    per_param_errors: List[Tuple[str, float]]

    @property
    def worst(self) -> Tuple[str, float]:
        return max(self.per_param_errors, key=lambda t: t[1])

    def passed(self, tol: float = 1e-5) -> bool:
        return self.max_rel_error <= tol

    def format(self) -> str:
        lines = [f"{name:<24s} {err:.3e}" for name, err in self.per_param_errors]
        lines.append(f"{'max':<24s} {self.max_rel_error:.3e}  ({self.param_count} scalars)")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``|a - n| / max(|a|, |n|, 1e-8)`` with Euclidean norms over the tensor."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
    return float(np.linalg.norm(a - n) / denom)


def grad_check(
    f: Callable[[Dict[str, np.ndarray]], Tuple[float, Dict[str, np.ndarray]]],
    params: Dict[str, np.ndarray],
    seed: int = 0,
    step: float = 1e-5,
    max_entries: Optional[int] = None,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``f(params)`` must return ``(loss, grads)`` where ``grads`` has one array per
    entry of ``params``.  Parameters are perturbed in place and restored.  When
    ``max_entries`` is set, at most that many entries per tensor are probed,
    chosen with ``seed``; the relative error is then taken over those entries.
    """
    rng = np.random.default_rng(seed)
    loss, grads = f(params)
    if not np.isfinite(loss):
        raise NonFiniteLossError(f"loss is not finite at the unperturbed point: {loss}")
    analytic = {k: np.array(grads[k], dtype=np.float64, copy=True) for k in params}
    per_param = []
    count = 0
    for name, p in params.items():
        if analytic[name].shape != p.shape:
            raise ContractError(f"gradient for {name!r} has shape {analytic[name].shape}, expected {p.shape}")
        if not p.flags.c_contiguous:
            raise ContractError(f"parameter {name!r} must be C-contiguous")
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            lp, _ = f(params)
            flat[i] = orig - step
            lm, _ = f(params)
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NonFiniteLossError(
                    f"non-finite loss when perturbing {name}[{tuple(int(v) for v in np.unravel_index(i, p.shape))}] by +/-{step}"
                )
            numeric[j] = (lp - lm) / (2.0 * step)
        per_param.append((name, relative_error(analytic[name].reshape(-1)[idx], numeric)))
        count += idx.size
    max_err = max((e for _, e in per_param), default=0.0)
    return GradCheckReport(max_err, count, per_param)
