"""Synthetic sequence tasks, batching and greedy decoding."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterator, List, Sequence, Tuple

import numpy as np

from .errors import ConfigError
from .model import BOS_ID, EOS_ID, N_SPECIAL, PAD_ID, Model, decode, encode

TASKS = ("copy", "reverse", "sort_digits")

Pair = Tuple[Tuple[int, ...], Tuple[int, ...]]


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "reverse"
    vocab: int = 16
    min_len: int = 4
    max_len: int = 12
    n_train: int = 20000
    n_valid: int = 500
    n_test: int = 500
    seed: int = 1234

    def validate(self, model_max_len: int = None) -> "TaskSpec":
        problems = []
        if self.kind not in TASKS:
            problems.append(f"task must be one of {TASKS}, got {self.kind!r}")
        if self.vocab <= N_SPECIAL:
            problems.append(f"vocab must exceed the {N_SPECIAL} special tokens, got {self.vocab}")
        if not 1 <= self.min_len <= self.max_len:
            problems.append(f"need 1 <= min_len <= max_len, got {self.min_len}..{self.max_len}")
        if min(self.n_train, self.n_valid, self.n_test) < 0:
            problems.append("sample counts must be non-negative")
        if model_max_len is not None and self.max_len > model_max_len - 2:
            problems.append(f"task max_len {self.max_len} exceeds model max_len - 2 = {model_max_len - 2}")
        if not problems and self.n_possible() < self.n_train + self.n_valid + self.n_test:
            problems.append(f"only {self.n_possible()} distinct sources exist for "
                            f"{self.n_train + self.n_valid + self.n_test} samples")
        if problems:
            raise ConfigError("invalid task: " + "; ".join(problems))
        return self

    def n_possible(self) -> int:
        k = self.vocab - N_SPECIAL
        return sum(k ** n for n in range(self.min_len, self.max_len + 1))


def task_target(kind: str, source: Sequence[int]) -> tuple:
    if kind == "copy":
        return tuple(source)
    if kind == "reverse":
        return tuple(reversed(source))
    if kind == "sort_digits":
        return tuple(sorted(source))
    raise ConfigError(f"unknown task {kind!r}")


def generate_task(spec: TaskSpec) -> tuple:
    """``(train, valid, test)`` lists of (source, target) pairs.

    Sources are distinct across all three splits.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    total = spec.n_train + spec.n_valid + spec.n_test
    seen = set()
    sources = []
    budget = 50 * total + 1000
    while len(sources) < total:
        budget -= 1
        if budget < 0:
            raise ConfigError("could not sample enough distinct sources; widen the task")
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        s = tuple(int(t) for t in rng.integers(N_SPECIAL, spec.vocab, size=n))
        if s in seen:
            continue
        seen.add(s)
        sources.append(s)
    pairs = [(s, task_target(spec.kind, s)) for s in sources]
    a, b = spec.n_train, spec.n_train + spec.n_valid
    return pairs[:a], pairs[a:b], pairs[b:]


def write_pairs(path, pairs: Sequence[Pair]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for src, tgt in pairs:
            fh.write(" ".join(map(str, src)) + "\t" + " ".join(map(str, tgt)) + "\n")


def read_pairs(path) -> List[Pair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            src, sep, tgt = line.partition("\t")
            if not sep:
                raise ConfigError(f"{os.fspath(path)}:{lineno}: expected src<TAB>tgt")
            try:
                pairs.append((tuple(int(t) for t in src.split()), tuple(int(t) for t in tgt.split())))
            except ValueError:
                raise ConfigError(f"{os.fspath(path)}:{lineno}: ids must be decimal integers") from None
    return pairs


@dataclass
class Batch:
    src: np.ndarray      # (B, S), PAD-padded
    tgt_in: np.ndarray   # (B, T), BOS + target
    tgt_out: np.ndarray  # (B, T), target + EOS

    @property
    def weights(self) -> np.ndarray:
        return self.tgt_out != PAD_ID

    @property
    def n_tokens(self) -> int:
        return int(self.weights.sum())


def _pad(rows: Sequence[Sequence[int]]) -> np.ndarray:
    out = np.full((len(rows), max(len(r) for r in rows)), PAD_ID, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


def make_batch(pairs: Sequence[Pair]) -> Batch:
    return Batch(_pad([s for s, _ in pairs]),
                 _pad([(BOS_ID,) + tuple(t) for _, t in pairs]),
                 _pad([tuple(t) + (EOS_ID,) for _, t in pairs]))


def _batch_ranges(pairs: Sequence[Pair], order: np.ndarray, batch_tokens: int) -> Iterator[list]:
    chunk, longest = [], 0
    for i in order:
        src, tgt = pairs[i]
        n = max(len(src), len(tgt) + 1)
        if chunk and max(longest, n) * (len(chunk) + 1) > batch_tokens:
            yield chunk
            chunk, longest = [], 0
        chunk.append(int(i))
        longest = max(longest, n)
    if chunk:
        yield chunk


def train_batches(pairs: Sequence[Pair], batch_tokens: int, seed: int) -> Iterator[Batch]:
    """Endless stream of padded batches, reshuffled each epoch from ``seed``."""
    if not pairs:
        raise ConfigError("no training pairs")
    epoch = 0
    while True:
        order = np.random.default_rng([seed, epoch]).permutation(len(pairs))
        for idx in _batch_ranges(pairs, order, batch_tokens):
            yield make_batch([pairs[i] for i in idx])
        epoch += 1


def eval_batches(pairs: Sequence[Pair], batch_tokens: int = 4096) -> Iterator[Batch]:
    for idx in _batch_ranges(pairs, np.arange(len(pairs)), batch_tokens):
        yield make_batch([pairs[i] for i in idx])


def greedy_decode_batch(model: Model, sources: Sequence[Sequence[int]], max_len: int) -> list:
    """Argmax decoding for a batch of sources; outputs exclude BOS/EOS.

    Ties go to the lowest token id. PAD and BOS are never emitted.
    """
    max_len = min(max_len, model.cfg.max_len - 1)
    src = _pad(sources)
    memory, src_mask = encode(model, src)
    prefix = np.full((len(sources), 1), BOS_ID, dtype=np.int64)
    done = np.zeros(len(sources), dtype=bool)
    outputs = [[] for _ in sources]
    for _ in range(max_len):
        logits = decode(model, memory, src_mask, prefix).data[:, -1, :].copy()
        logits[:, PAD_ID] = -np.inf
        logits[:, BOS_ID] = -np.inf
        nxt = logits.argmax(axis=-1)
        for i, tok in enumerate(nxt):
            if done[i]:
                continue
            if tok == EOS_ID:
                done[i] = True
            else:
                outputs[i].append(int(tok))
        if done.all():
            break
        nxt = np.where(done, EOS_ID, nxt)
        prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
    return outputs


def greedy_decode(model: Model, source: Sequence[int], max_len: int) -> list:
    return greedy_decode_batch(model, [source], max_len)[0]
