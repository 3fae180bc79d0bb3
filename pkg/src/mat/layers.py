"""Attention and feed-forward layers with branch averaging and drop masks.

Stochastic layers take ``rng``, any object with ``uniform(branch, head=None)``
returning a draw in [0, 1). A branch (or head) is kept when its draw is at
least ``rho`` and survivors are scaled by ``1 / (1 - rho)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor

MASK_NEG = -1e9
DROP_MODES = ("branch", "head")


class LayerDraws(Protocol):
    def uniform(self, branch: int, head: Optional[int] = None) -> float: ...


@dataclass(frozen=True)
class FixedDraws:
    """Every draw returns ``value``; ``layer()`` returns itself so it also
    serves as a whole-model draw source."""

    value: float

    def uniform(self, branch: int, head: Optional[int] = None) -> float:
        return self.value

    def layer(self, index: int) -> "FixedDraws":
        return self


@dataclass(frozen=True)
class TableDraws:
    """Draws looked up from ``values[branch]`` or ``values[branch][head]``."""

    values: Sequence

    def uniform(self, branch: int, head: Optional[int] = None) -> float:
        row = self.values[branch]
        if head is None or np.ndim(row) == 0:
            return float(row)
        return float(row[head])


@dataclass
class HeadParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor

    def __post_init__(self):
        if not (self.wq.shape == self.wk.shape == self.wv.shape) or self.wq.ndim != 2:
            raise DimensionError(
                f"head projections disagree: {self.wq.shape}, {self.wk.shape}, {self.wv.shape}")


@dataclass
class BranchParams:
    heads: list
    w_out: Optional[Tensor] = None

    def parameters(self) -> list:
        ps = [w for h in self.heads for w in (h.wq, h.wk, h.wv)]
        if self.w_out is not None:
            ps.append(self.w_out)
        return ps


@dataclass
class BranchSet:
    branches: list
    rho: float = 0.0
    mode: str = "branch"
    training: bool = False

    def __post_init__(self):
        if len(self.branches) < 1:
            raise ConfigError("a branch set needs at least one branch")
        if not 0.0 <= self.rho < 1.0:
            raise ConfigError(f"drop rate must lie in [0, 1), got {self.rho}")
        if self.mode not in DROP_MODES:
            raise ConfigError(f"drop mode must be one of {DROP_MODES}, got {self.mode!r}")
        n_heads = {len(b.heads) for b in self.branches}
        if len(n_heads) != 1:
            raise ConfigError("all branches must have the same number of heads")

    @property
    def n_heads(self) -> int:
        return len(self.branches[0].heads)


@dataclass
class FfnParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __post_init__(self):
        d, dh = self.w1.shape
        if self.b1.shape != (dh,) or self.w2.shape != (dh, d) or self.b2.shape != (d,):
            raise DimensionError(
                f"ffn shapes inconsistent: w1 {self.w1.shape}, b1 {self.b1.shape}, "
                f"w2 {self.w2.shape}, b2 {self.b2.shape}")

    def parameters(self) -> list:
        return [self.w1, self.b1, self.w2, self.b2]


def keep_factor(u: float, rho: float) -> float:
    return (1.0 if u >= rho else 0.0) / (1.0 - rho)


def draw_branch_masks(bset: BranchSet, rng: Optional[LayerDraws], mode: Optional[str] = None) -> np.ndarray:
    """Keep/scale factors: shape ``(N_a,)`` in branch mode, ``(N_a, M)`` in head mode."""
    mode = mode or bset.mode
    n, m = len(bset.branches), bset.n_heads
    shape = (n,) if mode == "branch" else (n, m)
    if not bset.training:
        return np.ones(shape)
    if rng is None:
        raise ContractError("training-mode layers need a draw source")
    if mode == "branch":
        return np.array([keep_factor(rng.uniform(i), bset.rho) for i in range(n)])
    return np.array([[keep_factor(rng.uniform(i, j), bset.rho) for j in range(m)]
                     for i in range(n)])


def check_mask(mask: np.ndarray) -> None:
    if (mask <= MASK_NEG / 2).all(axis=-1).any():
        raise ContractError("attention mask has a fully masked row")


def causal_mask(t: int) -> np.ndarray:
    return np.triu(np.full((t, t), MASK_NEG), k=1)


def scaled_dot_attn(Q: Tensor, K: Tensor, V: Tensor, mask: Optional[np.ndarray] = None,
                    return_weights: bool = False):
    """``softmax(Q K^T / sqrt(width) + mask) V`` over the last two axes."""
    if K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"attn: keys {K.shape} and values {V.shape} differ in length")
    if Q.shape[-1] != K.shape[-1]:
        raise DimensionError(f"attn: queries {Q.shape} and keys {K.shape} differ in width")
    scores = T.divide(T.matmul(Q, T.transpose(K)), math.sqrt(Q.shape[-1]))
    if mask is not None:
        check_mask(mask)
        scores = T.add(scores, mask.astype(scores.dtype, copy=False))
    weights = T.softmax_rows(scores)
    out = T.matmul(weights, V)
    return (out, weights) if return_weights else out


def _project(x: Tensor, ws: list, m: int) -> Tensor:
    y = T.matmul(x, ws[0] if m == 1 else T.concat_lastdim(ws))
    # (..., t, d) -> (..., m, t, d/m)
    y = T.reshape(y, y.shape[:-1] + (m, y.shape[-1] // m))
    return T.swapaxes(y, -3, -2)


def multi_head_attn(Q: Tensor, K: Tensor, V: Tensor, branch: BranchParams,
                    mask: Optional[np.ndarray] = None,
                    head_factors: Optional[np.ndarray] = None) -> Tensor:
    """Concatenation of per-head attentions, each with its own projections.

    ``head_factors`` (length M) scales each head's output inside the concat.
    """
    d = Q.shape[-1]
    m = len(branch.heads)
    if d % m:
        raise ConfigError(f"width {d} is not divisible by {m} heads")
    q = _project(Q, [h.wq for h in branch.heads], m)
    k = _project(K, [h.wk for h in branch.heads], m)
    v = _project(V, [h.wv for h in branch.heads], m)
    if mask is not None:
        mask = np.expand_dims(mask, -3)
    o = scaled_dot_attn(q, k, v, mask)
    if head_factors is not None and not np.all(head_factors == 1.0):
        o = T.mul(o, np.asarray(head_factors, dtype=o.dtype).reshape(m, 1, 1))
    o = T.swapaxes(o, -3, -2)
    o = T.reshape(o, o.shape[:-2] + (d,))
    if branch.w_out is not None:
        o = T.matmul(o, branch.w_out)
    return o


def _average_with_residual(residual: Tensor, terms: list) -> Tensor:
    live = [t for t in terms if t is not None]
    if not live:
        return residual
    zeros = None
    full = []
    for t in terms:
        if t is None:
            if zeros is None:
                zeros = Tensor(np.zeros(live[0].shape, dtype=live[0].dtype))
            t = zeros
        full.append(t)
    return T.add(residual, T.mean_over_list(full))


def multi_branch_attn(Q: Tensor, K: Tensor, V: Tensor, bset: BranchSet,
                      mask: Optional[np.ndarray] = None, rng: Optional[LayerDraws] = None,
                      residual: Optional[Tensor] = None) -> Tensor:
    """``residual + mean_i factor_i * multi_head_attn(Q, K, V; branch_i)``.

    ``residual`` defaults to ``Q``. Factors are all 1 outside training.
    """
    factors = draw_branch_masks(bset, rng, mode="branch")
    m = bset.n_heads
    terms = []
    for branch, f in zip(bset.branches, factors):
        if f == 0.0:
            terms.append(None)
            continue
        terms.append(multi_head_attn(Q, K, V, branch, mask, np.full(m, f)))
    return _average_with_residual(Q if residual is None else residual, terms)


def drop_head_attn(Q: Tensor, K: Tensor, V: Tensor, bset: BranchSet,
                   mask: Optional[np.ndarray] = None, rng: Optional[LayerDraws] = None,
                   residual: Optional[Tensor] = None) -> Tensor:
    """Like :func:`multi_branch_attn` with one keep decision per (branch, head)."""
    factors = draw_branch_masks(bset, rng, mode="head")
    terms = []
    for branch, row in zip(bset.branches, factors):
        if not row.any():
            terms.append(None)
            continue
        terms.append(multi_head_attn(Q, K, V, branch, mask, row))
    return _average_with_residual(Q if residual is None else residual, terms)


def attention_layer(Q, K, V, bset: BranchSet, mask=None, rng=None, residual=None) -> Tensor:
    fn = drop_head_attn if bset.mode == "head" else multi_branch_attn
    return fn(Q, K, V, bset, mask, rng, residual)


def ffn(x: Tensor, params: FfnParams) -> Tensor:
    if x.shape[-1] != params.w1.shape[0]:
        raise DimensionError(f"ffn: input {x.shape} does not match w1 {params.w1.shape}")
    h = T.relu(T.add(T.matmul(x, params.w1), params.b1))
    return T.add(T.matmul(h, params.w2), params.b2)


def residual_ffn_drop(x: Tensor, params: FfnParams, rho: float, rng: Optional[LayerDraws],
                      training: bool, residual: Optional[Tensor] = None) -> Tensor:
    """``residual + factor * ffn(x)`` with one keep draw for the layer."""
    residual = x if residual is None else residual
    f = 1.0
    if training:
        if rng is None:
            raise ContractError("training-mode layers need a draw source")
        f = keep_factor(rng.uniform(0), rho)
    if f == 0.0:
        return residual
    y = ffn(x, params)
    if f != 1.0:
        y = T.scale(y, f)
    return T.add(residual, y)


def multi_branch_ffn(x: Tensor, branches: Sequence[FfnParams], rho: float,
                     rng: Optional[LayerDraws], training: bool,
                     residual: Optional[Tensor] = None) -> Tensor:
    """``residual + mean_i factor_i * ffn(x; branch_i)``."""
    if len(branches) < 1:
        raise ConfigError("multi-branch FFN needs at least one branch")
    shapes = {tuple(p.shape for p in b.parameters()) for b in branches}
    if len(shapes) != 1:
        raise DimensionError("FFN branches must share parameter shapes")
    if training and rng is None:
        raise ContractError("training-mode layers need a draw source")
    terms = []
    for i, params in enumerate(branches):
        f = keep_factor(rng.uniform(i), rho) if training else 1.0
        if f == 0.0:
            terms.append(None)
            continue
        y = ffn(x, params)
        terms.append(y if f == 1.0 else T.scale(y, f))
    return _average_with_residual(x if residual is None else residual, terms)


def sinusoidal_positions(t: int, d: int) -> np.ndarray:
    """Interleaved sin/cos table: even columns sin, odd columns cos."""
    if d % 2:
        raise ConfigError(f"positional width must be even, got {d}")
    pos = np.arange(t, dtype=np.float64)[:, None]
    freq = np.power(10000.0, -np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.empty((t, d))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe
