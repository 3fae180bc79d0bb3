"""Multi-branch encoder-decoder model: configuration, parameters, forward pass."""

from __future__ import annotations

import dataclasses
import math
import re
from dataclasses import dataclass
from typing import Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, InitError, InputError
from .layers import (BranchParams, BranchSet, FfnParams, HeadParams, attention_layer,
                     causal_mask, multi_branch_ffn, sinusoidal_positions, MASK_NEG)
from .tensor import Tensor

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
N_SPECIAL = 4

# Settings that are not configurable but are recorded with every checkpoint.
FIXED_KEYS = {
    "pad_id": str(PAD_ID),
    "bos_id": str(BOS_ID),
    "eos_id": str(EOS_ID),
    "unk_id": str(UNK_ID),
    "init": "xavier_uniform",
    "ln_eps": repr(T.LN_EPS),
}


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def parse_value(kind, text: str):
    """Parse ``text`` as the dataclass field type ``kind`` (int/float/bool/str)."""
    if kind in (bool, "bool"):
        return _parse_bool(text)
    if kind in (int, "int"):
        return int(text)
    if kind in (float, "float"):
        return float(text)
    return text.strip()


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass(frozen=True)
class ModelConfig:
    branches: int = 1
    heads: int = 4
    d_model: int = 32
    d_ffn: int = 64
    ffn_branches: int = 1
    enc_layers: int = 2
    dec_layers: int = 2
    rho: float = 0.0
    drop_mode: str = "branch"
    src_vocab: int = 16
    tgt_vocab: int = 16
    share_embeddings: bool = True
    output_projection: bool = False
    pre_norm: bool = False
    max_len: int = 64

    def problems(self) -> list:
        out = []
        for name in ("branches", "heads", "d_model", "d_ffn", "ffn_branches",
                     "enc_layers", "dec_layers", "max_len"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.heads >= 1 and self.d_model % self.heads:
            out.append(f"d_model {self.d_model} is not divisible by heads {self.heads}")
        if self.d_model % 2:
            out.append(f"d_model {self.d_model} must be even for positional encodings")
        if not 0.0 <= self.rho < 1.0:
            out.append(f"rho must lie in [0, 1), got {self.rho}")
        if self.drop_mode not in ("branch", "head"):
            out.append(f"drop_mode must be 'branch' or 'head', got {self.drop_mode!r}")
        for name in ("src_vocab", "tgt_vocab"):
            if getattr(self, name) <= N_SPECIAL:
                out.append(f"{name} must exceed the {N_SPECIAL} special tokens")
        if self.share_embeddings and self.src_vocab != self.tgt_vocab:
            out.append("share_embeddings needs src_vocab == tgt_vocab")
        return out

    def validate(self) -> "ModelConfig":
        problems = self.problems()
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(problems))
        return self

    def to_text(self) -> str:
        lines = [f"{f.name}={format_value(getattr(self, f.name))}"
                 for f in dataclasses.fields(self)]
        lines += [f"{k}={v}" for k, v in FIXED_KEYS.items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, sep, raw = line.partition("=")
            if not sep:
                raise ConfigError(f"malformed config line {line!r}")
            if key in FIXED_KEYS:
                if raw != FIXED_KEYS[key]:
                    raise ConfigError(f"{key}={raw} is not supported (expected {FIXED_KEYS[key]})")
                continue
            if key not in kinds:
                raise ConfigError(f"unknown key {key!r}")
            values[key] = parse_value(kinds[key], raw)
        return cls(**values)


@dataclass
class EncoderBlock:
    self_attn: BranchSet
    ln1: tuple
    ffn: list
    ln2: tuple
    layer_ids: tuple  # mask-schedule indices of (self_attn, ffn)


@dataclass
class DecoderBlock:
    self_attn: BranchSet
    ln1: tuple
    cross_attn: BranchSet
    ln2: tuple
    ffn: list
    ln3: tuple
    layer_ids: tuple  # (self_attn, cross_attn, ffn)


# ----------------------------------------------------------------------------
# parameter layout


def _attn_specs(prefix: str, cfg: ModelConfig) -> list:
    d, m = cfg.d_model, cfg.heads
    out = []
    for i in range(cfg.branches):
        for j in range(m):
            for w in ("wq", "wk", "wv"):
                out.append((f"{prefix}.b{i}.h{j}.{w}", (d, d // m), "attn"))
        if cfg.output_projection:
            out.append((f"{prefix}.b{i}.wo", (d, d), "proj"))
    return out


def _ffn_specs(prefix: str, cfg: ModelConfig) -> list:
    d, dh = cfg.d_model, cfg.d_ffn
    out = []
    for i in range(cfg.ffn_branches):
        out += [(f"{prefix}.b{i}.w1", (d, dh), "proj"), (f"{prefix}.b{i}.b1", (dh,), "zeros"),
                (f"{prefix}.b{i}.w2", (dh, d), "proj"), (f"{prefix}.b{i}.b2", (d,), "zeros")]
    return out


def _ln_specs(prefix: str, cfg: ModelConfig) -> list:
    return [(f"{prefix}.gain", (cfg.d_model,), "ones"), (f"{prefix}.bias", (cfg.d_model,), "zeros")]


def param_specs(cfg: ModelConfig) -> list:
    """Canonical ``(name, shape, init)`` list for every parameter of ``cfg``."""
    d = cfg.d_model
    specs = []
    if cfg.share_embeddings:
        specs.append(("embed.shared", (cfg.tgt_vocab, d), "embed"))
    else:
        specs += [("embed.src", (cfg.src_vocab, d), "embed"),
                  ("embed.tgt", (cfg.tgt_vocab, d), "embed")]
    for layer in range(cfg.enc_layers):
        p = f"enc.{layer}"
        specs += (_attn_specs(f"{p}.self_attn", cfg) + _ln_specs(f"{p}.ln1", cfg)
                  + _ffn_specs(f"{p}.ffn", cfg) + _ln_specs(f"{p}.ln2", cfg))
    if cfg.pre_norm:
        specs += _ln_specs("enc.final_ln", cfg)
    for layer in range(cfg.dec_layers):
        p = f"dec.{layer}"
        specs += (_attn_specs(f"{p}.self_attn", cfg) + _ln_specs(f"{p}.ln1", cfg)
                  + _attn_specs(f"{p}.cross_attn", cfg) + _ln_specs(f"{p}.ln2", cfg)
                  + _ffn_specs(f"{p}.ffn", cfg) + _ln_specs(f"{p}.ln3", cfg))
    if cfg.pre_norm:
        specs += _ln_specs("dec.final_ln", cfg)
    return specs


def param_count(cfg: ModelConfig) -> int:
    return sum(param_breakdown(cfg).values())


def param_breakdown(cfg: ModelConfig) -> dict:
    """Closed-form parameter totals per component."""
    cfg.validate()
    d, dh = cfg.d_model, cfg.d_ffn
    per_attn = cfg.branches * (3 * d * d + (d * d if cfg.output_projection else 0))
    per_ffn = cfg.ffn_branches * (d * dh + dh + dh * d + d)
    per_ln = 2 * d
    n_attn = cfg.enc_layers + 2 * cfg.dec_layers
    n_ln = 2 * cfg.enc_layers + 3 * cfg.dec_layers + (2 if cfg.pre_norm else 0)
    if cfg.share_embeddings:
        embed = cfg.tgt_vocab * d
    else:
        embed = (cfg.src_vocab + cfg.tgt_vocab) * d
    return {
        "embeddings": embed,
        "attention": n_attn * per_attn,
        "ffn": (cfg.enc_layers + cfg.dec_layers) * per_ffn,
        "layer_norm": n_ln * per_ln,
    }


def _init_array(kind: str, shape: tuple, cfg: ModelConfig, rng: np.random.Generator) -> np.ndarray:
    d = cfg.d_model
    if kind == "attn":
        # each head is a column slice of a d x d projection; use that matrix's fan
        bound = math.sqrt(6.0 / (d + d))
        return rng.uniform(-bound, bound, size=shape)
    if kind == "proj":
        bound = math.sqrt(6.0 / (shape[0] + shape[1]))
        return rng.uniform(-bound, bound, size=shape)
    if kind == "embed":
        return rng.normal(0.0, d ** -0.5, size=shape)
    if kind == "ones":
        return np.ones(shape)
    return np.zeros(shape)


# ----------------------------------------------------------------------------
# model


class Model:
    """Parameters of one model, arranged into encoder and decoder blocks."""

    def __init__(self, cfg: ModelConfig, arrays: dict, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        specs = param_specs(cfg)
        missing = [n for n, _, _ in specs if n not in arrays]
        extra = sorted(set(arrays) - {n for n, _, _ in specs})
        if missing or extra:
            raise ConfigError(f"parameter table mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        self.params: dict = {}
        for name, shape, _ in specs:
            arr = np.asarray(arrays[name])
            if arr.shape != shape:
                raise ConfigError(f"parameter {name} has shape {arr.shape}, expected {shape}")
            self.params[name] = Tensor(arr.astype(dtype, copy=True), requires_grad=True, name=name)
        self._assemble()

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def _assemble(self) -> None:
        cfg, p = self.cfg, self.params
        if cfg.share_embeddings:
            self.src_embed = self.tgt_embed = p["embed.shared"]
        else:
            self.src_embed, self.tgt_embed = p["embed.src"], p["embed.tgt"]
        ids = iter(range(10**6))
        self.encoder = [
            EncoderBlock(self._bset(f"enc.{l}.self_attn"), self._ln(f"enc.{l}.ln1"),
                         self._ffn(f"enc.{l}.ffn"), self._ln(f"enc.{l}.ln2"),
                         (next(ids), next(ids)))
            for l in range(cfg.enc_layers)]
        self.decoder = [
            DecoderBlock(self._bset(f"dec.{l}.self_attn"), self._ln(f"dec.{l}.ln1"),
                         self._bset(f"dec.{l}.cross_attn"), self._ln(f"dec.{l}.ln2"),
                         self._ffn(f"dec.{l}.ffn"), self._ln(f"dec.{l}.ln3"),
                         (next(ids), next(ids), next(ids)))
            for l in range(cfg.dec_layers)]
        self.n_stochastic_layers = next(ids)
        self.enc_final = self._ln("enc.final_ln") if cfg.pre_norm else None
        self.dec_final = self._ln("dec.final_ln") if cfg.pre_norm else None

    def _bset(self, prefix: str) -> BranchSet:
        p, cfg = self.params, self.cfg
        branches = []
        for i in range(cfg.branches):
            heads = [HeadParams(p[f"{prefix}.b{i}.h{j}.wq"], p[f"{prefix}.b{i}.h{j}.wk"],
                                p[f"{prefix}.b{i}.h{j}.wv"]) for j in range(cfg.heads)]
            branches.append(BranchParams(heads, p.get(f"{prefix}.b{i}.wo")))
        return BranchSet(branches, cfg.rho, cfg.drop_mode, training=False)

    def _ffn(self, prefix: str) -> list:
        p = self.params
        return [FfnParams(*(p[f"{prefix}.b{i}.{w}"] for w in ("w1", "b1", "w2", "b2")))
                for i in range(self.cfg.ffn_branches)]

    def _ln(self, prefix: str) -> tuple:
        return self.params[f"{prefix}.gain"], self.params[f"{prefix}.bias"]

    def parameters(self) -> list:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def arrays(self) -> dict:
        return {n: t.data for n, t in self.params.items()}

    def astype(self, dtype) -> "Model":
        return Model(self.cfg, self.arrays(), dtype=dtype)

    def with_config(self, **changes) -> "Model":
        """Copy with non-structural config fields (e.g. ``rho``) replaced."""
        return Model(dataclasses.replace(self.cfg, **changes), self.arrays(), dtype=self.dtype)


def build_model(cfg: ModelConfig, seed: Union[int, np.random.Generator] = 0,
                dtype=np.float32) -> Model:
    cfg.validate()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    arrays = {name: _init_array(kind, shape, cfg, rng) for name, shape, kind in param_specs(cfg)}
    return Model(cfg, arrays, dtype=dtype)


# ----------------------------------------------------------------------------
# forward pass


def _check_tokens(ids: np.ndarray, vocab: int, max_len: int, what: str) -> None:
    bad = np.argwhere((ids < 0) | (ids >= vocab))
    if bad.size:
        pos = tuple(int(i) for i in bad[0])
        raise InputError(f"{what} token {int(ids[pos])} at position {pos} is outside vocab {vocab}")
    if ids.shape[-1] > max_len:
        raise InputError(f"{what} length {ids.shape[-1]} exceeds max_len {max_len}")


def _embed(table: Tensor, ids: np.ndarray, pe: np.ndarray) -> Tensor:
    x = T.scale(T.embedding(table, ids), math.sqrt(table.shape[-1]))
    return T.add(x, pe[: ids.shape[-1]].astype(x.dtype))


def _residual_dropout(rng, layer: int, residual: Tensor, out: Tensor, rate: float) -> Tensor:
    keep = rng.dropout_keep(layer, out.shape, rate).astype(out.dtype) / (1.0 - rate)
    return T.add(residual, T.mul(T.sub(out, residual), keep))


def encode(model: Model, src: np.ndarray, training: bool = False, rng=None,
           residual_dropout: float = 0.0):
    """Encoder states and the additive source-padding mask."""
    cfg = model.cfg
    src = np.asarray(src, dtype=np.int64)
    _check_tokens(src, cfg.src_vocab, cfg.max_len, "source")
    pe = sinusoidal_positions(cfg.max_len, cfg.d_model)
    src_mask = np.where(src == PAD_ID, MASK_NEG, 0.0)[..., None, :]
    x = _embed(model.src_embed, src, pe)
    drop = training and residual_dropout > 0
    for block in model.encoder:
        a_id, f_id = block.layer_ids
        sa = _train_set(block.self_attn, training)
        res = x
        h = T.layer_norm(x, *block.ln1) if cfg.pre_norm else x
        x = attention_layer(h, h, h, sa, src_mask, _layer_rng(rng, a_id, training),
                            residual=res if cfg.pre_norm else None)
        if drop:
            x = _residual_dropout(rng, a_id, res, x, residual_dropout)
        if not cfg.pre_norm:
            x = T.layer_norm(x, *block.ln1)
        res = x
        h = T.layer_norm(x, *block.ln2) if cfg.pre_norm else x
        x = multi_branch_ffn(h, block.ffn, cfg.rho, _layer_rng(rng, f_id, training), training,
                             residual=res if cfg.pre_norm else None)
        if drop:
            x = _residual_dropout(rng, f_id, res, x, residual_dropout)
        if not cfg.pre_norm:
            x = T.layer_norm(x, *block.ln2)
    if model.enc_final is not None:
        x = T.layer_norm(x, *model.enc_final)
    return x, src_mask


def decode(model: Model, memory: Tensor, src_mask: np.ndarray, tgt: np.ndarray,
           training: bool = False, rng=None, residual_dropout: float = 0.0) -> Tensor:
    cfg = model.cfg
    tgt = np.asarray(tgt, dtype=np.int64)
    _check_tokens(tgt, cfg.tgt_vocab, cfg.max_len, "target")
    pe = sinusoidal_positions(cfg.max_len, cfg.d_model)
    self_mask = causal_mask(tgt.shape[-1])
    y = _embed(model.tgt_embed, tgt, pe)
    drop = training and residual_dropout > 0
    for block in model.decoder:
        s_id, c_id, f_id = block.layer_ids
        res = y
        h = T.layer_norm(y, *block.ln1) if cfg.pre_norm else y
        y = attention_layer(h, h, h, _train_set(block.self_attn, training), self_mask,
                            _layer_rng(rng, s_id, training), residual=res if cfg.pre_norm else None)
        if drop:
            y = _residual_dropout(rng, s_id, res, y, residual_dropout)
        if not cfg.pre_norm:
            y = T.layer_norm(y, *block.ln1)
        res = y
        h = T.layer_norm(y, *block.ln2) if cfg.pre_norm else y
        y = attention_layer(h, memory, memory, _train_set(block.cross_attn, training), src_mask,
                            _layer_rng(rng, c_id, training), residual=res if cfg.pre_norm else None)
        if drop:
            y = _residual_dropout(rng, c_id, res, y, residual_dropout)
        if not cfg.pre_norm:
            y = T.layer_norm(y, *block.ln2)
        res = y
        h = T.layer_norm(y, *block.ln3) if cfg.pre_norm else y
        y = multi_branch_ffn(h, block.ffn, cfg.rho, _layer_rng(rng, f_id, training), training,
                             residual=res if cfg.pre_norm else None)
        if drop:
            y = _residual_dropout(rng, f_id, res, y, residual_dropout)
        if not cfg.pre_norm:
            y = T.layer_norm(y, *block.ln3)
    if model.dec_final is not None:
        y = T.layer_norm(y, *model.dec_final)
    # output layer tied to the target embedding
    return T.matmul(y, T.transpose(model.tgt_embed))


def forward(model: Model, src, tgt, training: bool = False, rng=None,
            residual_dropout: float = 0.0) -> Tensor:
    """Teacher-forced next-token logits, shape ``tgt.shape + (tgt_vocab,)``.

    ``rng`` must provide ``layer(index)`` returning a per-layer draw source
    when ``training`` is true; it is ignored otherwise.
    """
    memory, src_mask = encode(model, src, training, rng, residual_dropout)
    return decode(model, memory, src_mask, tgt, training, rng, residual_dropout)


def _train_set(bset: BranchSet, training: bool) -> BranchSet:
    return dataclasses.replace(bset, training=True) if training else bset


def _layer_rng(rng, index: int, training: bool):
    if not training:
        return None
    if rng is None:
        raise ConfigError("training-mode forward needs a draw source")
    return rng.layer(index)


# ----------------------------------------------------------------------------
# proximal initialization

_BRANCH_RE = re.compile(r"^((?:enc|dec)\.\d+\.(?:self_attn|cross_attn))\.b(\d+)\.(.*)$")

_MATCH_FIELDS = ("heads", "d_model", "d_ffn", "ffn_branches", "enc_layers", "dec_layers",
                 "src_vocab", "tgt_vocab", "share_embeddings", "output_projection",
                 "pre_norm", "max_len")


def proximal_init(base: Union["Model", object], target: Union[int, ModelConfig],
                  dtype=np.float32) -> Model:
    """Warm-start a multi-branch model from a single-branch one.

    Every attention branch of the result is a verbatim copy of the base
    model's only branch; everything else is copied once. ``base`` is a
    :class:`Model` or a checkpoint (anything with ``config`` and ``params``).
    """
    if isinstance(base, Model):
        base_cfg, base_arrays = base.cfg, base.arrays()
    else:
        base_cfg, base_arrays = base.config, base.params
    if base_cfg.branches != 1:
        raise InitError(f"base must have N_a=1, got branches={base_cfg.branches}")
    if isinstance(target, int):
        target = dataclasses.replace(base_cfg, branches=target)
    for name in _MATCH_FIELDS:
        if getattr(base_cfg, name) != getattr(target, name):
            raise InitError(f"{name} differs: base {getattr(base_cfg, name)}, "
                            f"target {getattr(target, name)}")
    target.validate()
    arrays = {}
    for name, _, _ in param_specs(target):
        m = _BRANCH_RE.match(name)
        src_name = f"{m.group(1)}.b0.{m.group(3)}" if m else name
        arrays[name] = np.array(base_arrays[src_name], copy=True)
    return Model(target, arrays, dtype=dtype)


def proximal_self_test(base: Model, warm: Model, n_inputs: int = 20, seed: int = 0) -> float:
    """Worst ``|warm - base|_inf / max(1, |base|_inf)`` over random eval-mode inputs."""
    cfg = base.cfg
    rng = np.random.default_rng(seed)
    worst = 0.0
    hi = min(cfg.max_len, 16)
    for _ in range(n_inputs):
        src = rng.integers(N_SPECIAL, cfg.src_vocab, size=int(rng.integers(1, hi + 1)))
        tgt = np.concatenate([[BOS_ID], rng.integers(N_SPECIAL, cfg.tgt_vocab,
                                                     size=int(rng.integers(0, hi)))])
        a = forward(base, src, tgt).data.astype(np.float64)
        b = forward(warm, src, tgt).data.astype(np.float64)
        worst = max(worst, float(np.abs(b - a).max() / max(1.0, np.abs(a).max())))
    return worst
