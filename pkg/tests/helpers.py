"""Shared builders and oracles for the test suite."""

import math

import numpy as np

from mat import layers as L
from mat.layers import BranchParams, BranchSet, FfnParams, HeadParams
from mat.model import ModelConfig
from mat.tensor import Tensor
from mat.training import MaskSchedule


def t64(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def random_branch(rng, d, m, scale=0.5):
    w = d // m
    return BranchParams([HeadParams(*(t64(rng.normal(0, scale, (d, w))) for _ in range(3)))
                         for _ in range(m)])


def random_ffn(rng, d, dh, scale=0.5):
    return FfnParams(t64(rng.normal(0, scale, (d, dh))), t64(rng.normal(0, scale, dh)),
                     t64(rng.normal(0, scale, (dh, d))), t64(rng.normal(0, scale, d)))


def attn_oracle(Q, K, V, mask=None):
    """Row-by-row softmax and weighted sum with plain Python floats."""
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    out = np.zeros((Q.shape[0], V.shape[1]))
    for i in range(Q.shape[0]):
        scores = []
        for j in range(K.shape[0]):
            s = sum(Q[i, c] * K[j, c] for c in range(Q.shape[1])) / math.sqrt(Q.shape[1])
            if mask is not None:
                s += mask[i, j]
            scores.append(s)
        top = max(scores)
        e = [math.exp(s - top) for s in scores]
        z = sum(e)
        for j in range(K.shape[0]):
            out[i] += (e[j] / z) * V[j]
    return out


def ffn_oracle(x, p):
    h = np.maximum(x @ p.w1.data + p.b1.data, 0.0)
    return h @ p.w2.data + p.b2.data


def monte_carlo(layer_fn, key_fn, n, seed=11):
    """Mean and standard error of ``layer_fn(rng)`` over ``n`` scheduled draws.

    Outputs are memoised per keep pattern ``key_fn(rng)``; the layer is a
    pure function of its factors, so this only saves time.
    """
    cache, total, total_sq = {}, 0.0, 0.0
    for step in range(n):
        rng = MaskSchedule(seed, step).layer(0)
        key = key_fn(rng)
        if key not in cache:
            cache[key] = layer_fn(rng).data
        y = cache[key]
        total = total + y
        total_sq = total_sq + y * y
    mean = total / n
    var = np.maximum(total_sq / n - mean * mean, 0.0) * n / (n - 1)
    return mean, np.sqrt(var / n)


class StochasticLayers:
    """One instance of each stochastic layer on fixed binary64 inputs."""

    def __init__(self, seed=5, d=8, m=2, n_a=2, dh=12, n_f=2, t=3):
        rng = np.random.default_rng(seed)
        self.d, self.m, self.n_a, self.n_f = d, m, n_a, n_f
        self.x = t64(rng.normal(size=(t, d)))
        self.mem = t64(rng.normal(size=(t + 1, d)))
        self.mask = L.causal_mask(t)
        self.branches = [random_branch(rng, d, m) for _ in range(n_a)]
        self.ffns = [random_ffn(rng, d, dh) for _ in range(n_f)]

    def bset(self, rho, mode="branch", training=True):
        return BranchSet(self.branches, rho, mode, training)

    def run(self, name, rho, rng, training=True):
        x = self.x
        if name == "multi-branch":
            return L.multi_branch_attn(x, self.mem, self.mem, self.bset(rho, "branch", training), None, rng)
        if name == "drop-head":
            return L.drop_head_attn(x, x, x, self.bset(rho, "head", training), self.mask, rng)
        if name == "ffn-drop":
            return L.residual_ffn_drop(x, self.ffns[0], rho, rng, training)
        if name == "multi-branch-ffn":
            return L.multi_branch_ffn(x, self.ffns, rho, rng, training)
        raise KeyError(name)

    def key(self, name, rho, rng):
        if name == "multi-branch":
            return tuple(L.draw_branch_masks(self.bset(rho), rng, "branch"))
        if name == "drop-head":
            return tuple(L.draw_branch_masks(self.bset(rho, "head"), rng, "head").ravel())
        n = 1 if name == "ffn-drop" else self.n_f
        return tuple(L.keep_factor(rng.uniform(i), rho) for i in range(n))

    NAMES = ("multi-branch", "drop-head", "ffn-drop", "multi-branch-ffn")


def tree_walk_count(model):
    """Count parameters by walking the assembled block structure."""
    seen = {}

    def add(t):
        if t is not None:
            seen[id(t)] = t.data.size

    add(model.src_embed)
    add(model.tgt_embed)
    for block in model.encoder + model.decoder:
        sets = [block.self_attn] + ([block.cross_attn] if hasattr(block, "cross_attn") else [])
        for bset in sets:
            for br in bset.branches:
                add(br.w_out)
                for h in br.heads:
                    add(h.wq), add(h.wk), add(h.wv)
        for f in block.ffn:
            for t in (f.w1, f.b1, f.w2, f.b2):
                add(t)
        for ln in (block.ln1, block.ln2, getattr(block, "ln3", None)):
            for t in ln or ():
                add(t)
    for ln in (model.enc_final, model.dec_final):
        for t in ln or ():
            add(t)
    return sum(seen.values())


def random_config(rng):
    m = int(rng.choice([1, 2, 4]))
    vocab = int(rng.integers(5, 40))
    share = bool(rng.integers(2))
    return ModelConfig(branches=int(rng.integers(1, 5)), heads=m, d_model=m * 2 * int(rng.integers(1, 5)),
                       d_ffn=int(rng.integers(1, 40)), ffn_branches=int(rng.integers(1, 4)),
                       enc_layers=int(rng.integers(1, 4)), dec_layers=int(rng.integers(1, 4)),
                       src_vocab=vocab if share else vocab + 3, tgt_vocab=vocab,
                       share_embeddings=share, output_projection=bool(rng.integers(2)),
                       pre_norm=bool(rng.integers(2)))
