"""Finite-difference checks of every layer op at random binary64 points."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import layers as L
from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

OPS = ("attn", "multi-head", "multi-branch", "ffn", "ffn-drop", "multi-branch-ffn",
       "drop-head", "layer_norm")
TOLERANCE = 1e-4
MAX_WIDTH = 16


@dataclass(frozen=True)
class GradCheckSettings:
    d_model: int = 8
    heads: int = 2
    branches: int = 2
    d_ffn: int = 12
    ffn_branches: int = 2
    rho: float = 0.3
    seq_len: int = 3
    points: int = 5
    h: float = 1e-5
    seed: int = 0

    def validate(self) -> "GradCheckSettings":
        if self.d_model > MAX_WIDTH or self.d_ffn > 4 * MAX_WIDTH:
            raise ConfigError(f"grad-check needs d_model <= {MAX_WIDTH} and d_ffn <= {4 * MAX_WIDTH}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by heads {self.heads}")
        if min(self.heads, self.branches, self.ffn_branches, self.seq_len, self.points) < 1:
            raise ConfigError("grad-check counts must be >= 1")
        return self


class _Case:
    """Random inputs for one op at one point, plus the scalar probe."""

    def __init__(self, op: str, s: GradCheckSettings, rng: np.random.Generator):
        self.op, self.s, self.rng = op, s, rng
        self.inputs: list = []

    def t(self, *shape, scale: float = 1.0) -> Tensor:
        x = Tensor(self.rng.normal(0.0, scale, size=shape), requires_grad=True)
        self.inputs.append(x)
        return x

    def heads(self, m: int, width: int) -> L.BranchParams:
        s = self.s
        return L.BranchParams([L.HeadParams(self.t(s.d_model, width, scale=0.5),
                                            self.t(s.d_model, width, scale=0.5),
                                            self.t(s.d_model, width, scale=0.5))
                               for _ in range(m)])

    def ffn_params(self) -> L.FfnParams:
        s = self.s
        return L.FfnParams(self.t(s.d_model, s.d_ffn, scale=0.5), self.t(s.d_ffn),
                           self.t(s.d_ffn, s.d_model, scale=0.5), self.t(s.d_model))

    def draws(self, per_head: bool) -> L.TableDraws:
        s = self.s
        shape = (s.branches, s.heads) if per_head else (max(s.branches, s.ffn_branches),)
        u = self.rng.uniform(size=shape)
        # keep at least one term alive so the probe is not trivially flat
        u.flat[0] = max(u.flat[0], s.rho)
        return L.TableDraws(u.tolist())


def _build(op: str, s: GradCheckSettings, rng: np.random.Generator):
    c = _Case(op, s, rng)
    d, n = s.d_model, s.seq_len
    dk = d // s.heads
    mask = L.causal_mask(n)
    if op == "attn":
        Q, K, V = c.t(n, dk), c.t(n, dk), c.t(n, dk)
        fn = lambda: L.scaled_dot_attn(Q, K, V, mask)
    elif op == "multi-head":
        Q, K, V = c.t(n, d), c.t(n + 1, d), c.t(n + 1, d)
        branch = c.heads(s.heads, dk)
        fn = lambda: L.multi_head_attn(Q, K, V, branch)
    elif op in ("multi-branch", "drop-head"):
        Q = c.t(n, d)
        branches = [c.heads(s.heads, dk) for _ in range(s.branches)]
        mode = "head" if op == "drop-head" else "branch"
        bset = L.BranchSet(branches, s.rho, mode, training=True)
        draws = c.draws(per_head=op == "drop-head")
        layer = L.drop_head_attn if op == "drop-head" else L.multi_branch_attn
        fn = lambda: layer(Q, Q, Q, bset, mask, draws)
    elif op in ("ffn", "ffn-drop"):
        x = c.t(n, d)
        params = c.ffn_params()
        if op == "ffn":
            fn = lambda: L.ffn(x, params)
        else:
            draws = L.FixedDraws(max(rng.uniform(), s.rho))
            fn = lambda: L.residual_ffn_drop(x, params, s.rho, draws, True)
        c.relu_inputs = (x, [params])
    elif op == "multi-branch-ffn":
        x = c.t(n, d)
        branches = [c.ffn_params() for _ in range(s.ffn_branches)]
        draws = c.draws(per_head=False)
        fn = lambda: L.multi_branch_ffn(x, branches, s.rho, draws, True)
        c.relu_inputs = (x, branches)
    elif op == "layer_norm":
        x, g, b = c.t(n, d), c.t(d), c.t(d)
        fn = lambda: T.layer_norm(x, g, b)
    else:
        raise ConfigError(f"unknown op {op!r}")
    out_shape = fn().shape
    weights = rng.normal(size=out_shape)
    return c, lambda *_: T.total(T.mul(fn(), weights))


def _relu_margin_ok(c: _Case, h: float) -> bool:
    relu_inputs = getattr(c, "relu_inputs", None)
    if relu_inputs is None:
        return True
    x, branches = relu_inputs
    return all(np.abs(x.data @ p.w1.data + p.b1.data).min() > 10 * h for p in branches)


def check_op(op: str, s: GradCheckSettings, rng: np.random.Generator) -> float:
    """Worst relative error over ``s.points`` random points."""
    worst = 0.0
    for _ in range(s.points):
        for _attempt in range(1000):
            case, f = _build(op, s, rng)
            if _relu_margin_ok(case, s.h):
                break
        else:
            raise RuntimeError(f"{op}: no probe point clear of the relu kink")
        worst = max(worst, T.grad_check(f, case.inputs, s.h).max_error)
    return worst


def run_all(s: GradCheckSettings, ops=OPS) -> dict:
    """``{op: max relative error}`` for each op, in order."""
    s.validate()
    rng = np.random.default_rng(s.seed)
    return {op: check_op(op, s, rng) for op in ops}


def format_table(results: dict, tolerance: float = TOLERANCE) -> str:
    lines = [f"{'op':<18} {'max_rel_error':>14}  status"]
    for op, err in results.items():
        lines.append(f"{op:<18} {err:>14.3e}  {'ok' if err < tolerance else 'FAIL'}")
    return "\n".join(lines)


def timed_run(s: GradCheckSettings) -> tuple:
    start = time.perf_counter()
    results = run_all(s)
    return results, time.perf_counter() - start
