"""Command-line entry point: ``mat {train,eval,proximal-init,grad-check,params}``.

Exit codes: 0 success, 1 runtime failure (divergence, I/O, corrupt files),
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import TaskSpec, generate_task, read_pairs, write_pairs
from .errors import CheckpointError, ConfigError, InitError, MatError, TrainingDiverged
from .gradcheck import TOLERANCE, GradCheckSettings, format_table, timed_run
from .model import (ModelConfig, build_model, format_value, param_breakdown, param_count,
                    parse_value, proximal_init, proximal_self_test)
from .training import TrainConfig, evaluate, train_loop

log = logging.getLogger("mat")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

# run-config key -> (section, field); ``vocab`` sets both model vocabularies
_MODEL_KEYS = [f.name for f in dataclasses.fields(ModelConfig) if f.name not in ("src_vocab", "tgt_vocab")]
_TRAIN_KEYS = [f.name for f in dataclasses.fields(TrainConfig)]
_TASK_KEYS = {"task": "kind", "task_min_len": "min_len", "task_max_len": "max_len",
              "n_train": "n_train", "n_valid": "n_valid", "n_test": "n_test", "data_seed": "seed"}
_GC_KEYS = {"gc_seq_len": "seq_len", "gc_points": "points", "gc_h": "h"}
_PATH_KEYS = ("out_dir", "base_ckpt")


def _field_types(cls) -> dict:
    return {f.name: f.type for f in dataclasses.fields(cls)}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    gradcheck: GradCheckSettings = field(default_factory=GradCheckSettings)
    out_dir: str = "run"
    base_ckpt: str = ""

    def to_text(self) -> str:
        lines = [f"{k}={format_value(getattr(self.model, k))}" for k in _MODEL_KEYS]
        lines.append(f"vocab={self.model.tgt_vocab}")
        lines += [f"{k}={format_value(getattr(self.train, k))}" for k in _TRAIN_KEYS]
        lines += [f"{k}={format_value(getattr(self.task, f))}" for k, f in _TASK_KEYS.items()]
        lines += [f"{k}={format_value(getattr(self.gradcheck, f))}" for k, f in _GC_KEYS.items()]
        lines += [f"{k}={getattr(self, k)}" for k in _PATH_KEYS]
        return "\n".join(lines) + "\n"


def known_keys() -> list:
    return _MODEL_KEYS + ["vocab"] + _TRAIN_KEYS + list(_TASK_KEYS) + list(_GC_KEYS) + list(_PATH_KEYS)


def parse_kv_lines(text: str, source: str = "config") -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        out[key.strip()] = value.strip()
    return out


def build_run_config(raw: dict) -> RunConfig:
    known = set(known_keys())
    unknown = [k for k in raw if k not in known]
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r}")
    m_types, t_types = _field_types(ModelConfig), _field_types(TrainConfig)
    task_types, gc_types = _field_types(TaskSpec), _field_types(GradCheckSettings)
    model, train, task, gc = {}, {}, {}, {}
    try:
        for key, value in raw.items():
            if key in m_types:
                model[key] = parse_value(m_types[key], value)
            elif key == "vocab":
                v = int(value)
                model["src_vocab"] = model["tgt_vocab"] = task["vocab"] = v
            elif key in t_types:
                train[key] = parse_value(t_types[key], value)
            elif key in _TASK_KEYS:
                f = _TASK_KEYS[key]
                task[f] = parse_value(task_types[f], value)
            elif key in _GC_KEYS:
                f = _GC_KEYS[key]
                gc[f] = parse_value(gc_types[f], value)
    except ValueError as exc:
        raise ConfigError(f"bad value: {exc}") from None
    mcfg = ModelConfig(**model).validate()
    tcfg = TrainConfig(**train).validate()
    task.setdefault("vocab", mcfg.tgt_vocab)
    spec = TaskSpec(**task)
    # grad-check keeps its own tiny defaults; only model keys given explicitly carry over
    for key in ("d_model", "heads", "branches", "d_ffn", "ffn_branches", "rho"):
        if key in model:
            gc[key] = model[key]
    if "seed" in train:
        gc["seed"] = train["seed"]
    gsettings = GradCheckSettings(**gc)
    return RunConfig(mcfg, tcfg, spec, gsettings, raw.get("out_dir", "run"), raw.get("base_ckpt", ""))


def load_run_config(path: Optional[str], overrides: list, env=os.environ) -> RunConfig:
    """File values, then ``MAT_SEED``, then ``--set`` overrides."""
    raw = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = parse_kv_lines(fh.read(), path)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    if env.get("MAT_SEED"):
        raw["seed"] = env["MAT_SEED"]
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        raw[key.strip()] = value.strip()
    return build_run_config(raw)


@contextmanager
def run_lock(run_dir: str):
    path = os.path.join(run_dir, ".lock")
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"run directory {run_dir} is locked by another process ({path})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        os.remove(path)


# ----------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    rc = load_run_config(args.config, args.set)
    run_dir = args.out or rc.out_dir
    rc.out_dir = run_dir
    if args.base:
        rc.base_ckpt = args.base
    try:
        os.makedirs(run_dir, exist_ok=True)
        probe = os.path.join(run_dir, ".write-test")
        with open(probe, "w"):
            pass
        os.remove(probe)
    except OSError as exc:
        raise ConfigError(f"run directory {run_dir} is not writable: {exc.strerror}") from None
    rc.task.validate(rc.model.max_len)
    with run_lock(run_dir):
        with open(os.path.join(run_dir, "effective-config.txt"), "w", encoding="utf-8") as fh:
            fh.write(rc.to_text())
        train, valid, test = generate_task(rc.task)
        for name, pairs in (("train", train), ("valid", valid), ("test", test)):
            write_pairs(os.path.join(run_dir, f"{name}.tsv"), pairs)
        if rc.base_ckpt:
            model = proximal_init(load_checkpoint(rc.base_ckpt), rc.model)
        else:
            model = build_model(rc.model, rc.train.seed)
        try:
            result = train_loop(model, train, rc.train, run_dir,
                                on_log=lambda row: print("step={} lr={:.6g} loss={:.6f} token_acc={:.4f}"
                                                         .format(*row), flush=True))
        except TrainingDiverged as exc:
            print(f"error: training diverged at {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        if test:
            report = evaluate(result.model, test)
            with open(os.path.join(run_dir, "report.txt"), "w", encoding="utf-8") as fh:
                fh.write(report.to_text())
            print(report.to_text(), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.data or not os.path.isfile(args.data):
        raise ConfigError(f"data file not found: {args.data}")
    if not args.ckpt:
        raise ConfigError("eval needs --ckpt")
    ckpt = load_checkpoint(args.ckpt)
    # drop masks are training-only: evaluate with rho forced to 0
    model = Checkpoint(dataclasses.replace(ckpt.config, rho=0.0), ckpt.params, ckpt.step).to_model()
    pairs = read_pairs(args.data)
    if not pairs:
        raise ConfigError(f"no examples in {args.data}")
    report = evaluate(model, pairs)
    print(report.to_text(), end="")
    print(report.csv_header())
    print(report.to_csv_row())
    return EXIT_OK


def cmd_proximal_init(args) -> int:
    if not args.base or args.na is None or not args.out:
        raise ConfigError("proximal-init needs --base, --na and --out")
    base = load_checkpoint(args.base)
    target = dataclasses.replace(base.config, branches=args.na)
    if args.set:
        raw = parse_kv_lines("\n".join(args.set), "--set")
        bad = [k for k in raw if k not in ("rho", "drop_mode")]
        if bad:
            raise ConfigError(f"proximal-init only accepts rho and drop_mode overrides, got {bad[0]!r}")
        types = _field_types(ModelConfig)
        target = dataclasses.replace(target, **{k: parse_value(types[k], v) for k, v in raw.items()})
    model = proximal_init(base, target)
    save_checkpoint(model, args.out, base.step)
    diff = proximal_self_test(base.to_model(), model)
    ok = diff < 1e-5
    print(f"self-test max_rel_logit_diff={diff:.3e} {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_grad_check(args) -> int:
    rc = load_run_config(args.config, args.set)
    results, seconds = timed_run(rc.gradcheck)
    print(format_table(results))
    print(f"elapsed {seconds:.1f}s")
    return EXIT_OK if all(e < TOLERANCE for e in results.values()) else EXIT_RUNTIME


def cmd_params(args) -> int:
    rc = load_run_config(args.config, args.set)
    parts = param_breakdown(rc.model)
    for name, n in parts.items():
        print(f"{name:<12} {n}")
    print(f"{'total':<12} {param_count(rc.model)}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mat", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", metavar="PATH")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        return p

    p = common(sub.add_parser("train", help="train a model on a synthetic task"))
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--base", metavar="CKPT", help="warm-start from a single-branch checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a task data file")
    p.add_argument("--ckpt", metavar="CKPT")
    p.add_argument("--data", metavar="PATH")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("proximal-init", help="duplicate attention branches of a base checkpoint")
    p.add_argument("--base", metavar="CKPT")
    p.add_argument("--na", type=int, metavar="N")
    p.add_argument("--out", metavar="PATH")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_proximal_init)

    p = common(sub.add_parser("grad-check", help="finite-difference check of every layer op"))
    p.set_defaults(func=cmd_grad_check)

    p = common(sub.add_parser("params", help="parameter count breakdown"))
    p.set_defaults(func=cmd_params)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, OSError, MatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
