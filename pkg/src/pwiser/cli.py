"""Command-line entry point: ``pwiser <command> ...``.

Commands write their artifacts into a per-run directory (``runs/<command>-<timestamp>``
unless ``--run-dir`` is given) together with a ``MANIFEST`` of SHA-256 hashes.
Training commands take an optional flat ``key=value`` config file plus
``key=value`` overrides on the command line.

Exit codes: 0 ok, 2 config or usage error, 3 numerical failure, 4 IO or data error.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import sys
import time
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path

import numpy as np

from . import __version__
from .data import DEFAULT_VOCAB_SIZE, POLICIES, load_tsv, stats
from .errors import ConfigError, LabelParseError, NumericalError, SchemaError
from .loss import KERNELS, MARGIN_RULES, TARGETS, LossConfig, ScenarioPartition, pwiser
from .metrics import evaluate
from .models import ARCHS, Model, ModelConfig
from .synth import SynthSpec, generate, write_synth
from .trainer import TrainConfig, format_gradcheck, gradcheck, grid_search, train

log = logging.getLogger("pwiser")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4

# hash buckets in the config written next to synthetic data; ample for small vocabularies
SYNTH_VOCAB_SIZE = 10_007


def _ints(text):
    text = text.strip()
    return tuple(int(v) for v in text.split(",")) if text else ()


def _names(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _choice(options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text

    return parse


@dataclass(frozen=True)
class Key:
    default: str
    parse: object
    help: str


# every accepted config key, its default (as written in a config file) and parser
KEYS = {
    "model.arch": Key("mmoe", _choice(ARCHS), "shared_bottom, mmoe, ple or dnn"),
    "model.embed_dim": Key("128", int, "embedding width per field"),
    "model.num_experts": Key("8", int, "experts in MMoE"),
    "model.num_shared_experts": Key("4", int, "shared experts in PLE"),
    "model.num_task_experts": Key("2", int, "task-specific experts per task in PLE"),
    "model.expert_widths": Key("128", _ints, "hidden widths of each expert / the shared bottom"),
    "model.tower_widths": Key("256,128", _ints, "hidden widths of each task tower"),
    "loss.lambda": Key("0.1", float, "weight of the pairwise ranking term (0 = BCE only)"),
    "loss.m1": Key("0.3", float, "margin between click-no-conversion and conversion scores"),
    "loss.m2": Key("0.3", float, "margin between unclicked and conversion scores"),
    "loss.pwiser_target": Key("ctr", _choice(TARGETS), "head ranked by the pairwise term"),
    "loss.kernel": Key("fast", _choice(KERNELS), "pairwise kernel: fast (sorted) or naive"),
    "loss.margin_rule": Key("hinge", _choice(MARGIN_RULES), "pair activity rule"),
    "train.batch_size": Key("2048", int, "minibatch size"),
    "train.lr": Key("0.001", float, "Adam learning rate"),
    "train.weight_decay": Key("1e-06", float, "L2 weight decay on non-bias parameters"),
    "train.epochs": Key("10", int, "training epochs"),
    "train.seed": Key("0", int, "seed for initialization and shuffling"),
    "data.train_path": Key("", str, "training TSV (required for train)"),
    "data.valid_path": Key("", str, "validation TSV (optional)"),
    "data.schema": Key("", _names, "comma-separated feature columns (default: all non-label columns)"),
    "data.policy": Key("coerce", _choice(POLICIES), "conversion-without-click rows: coerce or reject"),
    "data.vocab_size": Key(str(DEFAULT_VOCAB_SIZE), int, "hash buckets per field"),
}


def read_config_file(path) -> dict:
    """Parse a flat ``key=value`` file; ``#`` starts a comment."""
    entries = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            entries[key.strip()] = value.strip()
    return entries


def parse_overrides(items) -> dict:
    entries = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def resolve_config(entries: dict) -> dict:
    """Validate keys and parse values over the defaults; returns key -> parsed value."""
    unknown = sorted(set(entries) - set(KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}", key=unknown[0])
    raw = {k: entries.get(k, spec.default) for k, spec in KEYS.items()}
    parsed = {}
    for key, text in raw.items():
        try:
            parsed[key] = KEYS[key].parse(text)
        except ValueError as exc:
            raise ConfigError(f"{key}={text!r}: {exc}", key=key) from None
    return parsed


def effective_config_text(entries: dict) -> str:
    raw = {k: entries.get(k, spec.default) for k, spec in KEYS.items()}
    return "".join(f"{k}={v}\n" for k, v in raw.items())


def train_config(parsed: dict) -> TrainConfig:
    model = ModelConfig(
        arch=parsed["model.arch"],
        embed_dim=parsed["model.embed_dim"],
        num_experts=parsed["model.num_experts"],
        num_shared_experts=parsed["model.num_shared_experts"],
        num_task_experts=parsed["model.num_task_experts"],
        expert_widths=parsed["model.expert_widths"],
        tower_widths=parsed["model.tower_widths"],
    )
    loss = LossConfig(
        lam=parsed["loss.lambda"],
        m1=parsed["loss.m1"],
        m2=parsed["loss.m2"],
        pwiser_target=parsed["loss.pwiser_target"],
        kernel=parsed["loss.kernel"],
        margin_rule=parsed["loss.margin_rule"],
    )
    return TrainConfig(
        epochs=parsed["train.epochs"],
        batch_size=parsed["train.batch_size"],
        lr=parsed["train.lr"],
        weight_decay=parsed["train.weight_decay"],
        seed=parsed["train.seed"],
        loss=loss,
        model=model,
    )


# -- run directories -----------------------------------------------------------

def make_run_dir(args, command) -> Path:
    if args.run_dir:
        path = Path(args.run_dir)
    else:
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S-%f")
        path = Path(args.runs_root) / f"{command}-{stamp}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(run_dir: Path) -> Path:
    """List every file under ``run_dir`` with its SHA-256, sorted by path."""
    lines = []
    for path in sorted(p for p in run_dir.rglob("*") if p.is_file() and p.name != "MANIFEST"):
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        lines.append(f"{digest}  {path.relative_to(run_dir).as_posix()}\n")
    manifest = run_dir / "MANIFEST"
    manifest.write_text("".join(lines), encoding="utf-8")
    return manifest


# -- commands --------------------------------------------------------------------

def cmd_synth_gen(args) -> int:
    spec = SynthSpec(rows=args.rows, num_fields=args.fields, vocab=args.vocab,
                     noise_rate=args.noise_rate, seed=args.seed)
    out = Path(args.out_dir) if args.out_dir else make_run_dir(args, "synth-gen")
    synth = generate(spec)
    paths = write_synth(out, synth, valid_fraction=args.valid_fraction, seed=args.seed)
    # a starting config: noisy training labels, clean validation labels
    (out / "train.cfg").write_text(
        f"data.train_path={(out / 'train.tsv').resolve()}\n"
        f"data.valid_path={(out / 'valid.clean.tsv').resolve()}\n"
        f"data.vocab_size={SYNTH_VOCAB_SIZE}\n",
        encoding="utf-8",
    )
    paths.append(out / "train.cfg")
    print(f"wrote {len(paths)} files to {out}")
    print("noisy labels:")
    print(stats(synth.noisy).to_text(), end="")
    print("clean labels:")
    print(stats(synth.clean).to_text(), end="")
    print(f"flipped={int(synth.flipped.sum())}")
    write_manifest(out)
    return EXIT_OK


def _load_config(args):
    entries = read_config_file(args.config) if args.config else {}
    entries.update(parse_overrides(args.overrides))
    parsed = resolve_config(entries)
    print("effective config:")
    print(effective_config_text(entries), end="", flush=True)
    return entries, parsed


def _load_data(path, parsed):
    ds, violations = load_tsv(path, schema=parsed["data.schema"] or None,
                              policy=parsed["data.policy"], vocab_size=parsed["data.vocab_size"])
    if violations:
        print(f"{path}: coerced {violations} conversion-without-click row(s)")
    return ds


def _train_inputs(parsed):
    if not parsed["data.train_path"]:
        raise ConfigError("data.train_path is required", key="data.train_path")
    train_data = _load_data(parsed["data.train_path"], parsed)
    valid_data = _load_data(parsed["data.valid_path"], parsed) if parsed["data.valid_path"] else None
    return train_data, valid_data


def cmd_train(args) -> int:
    entries, parsed = _load_config(args)
    cfg = train_config(parsed)
    train_data, valid_data = _train_inputs(parsed)
    run_dir = make_run_dir(args, "train")
    (run_dir / "config.txt").write_text(effective_config_text(entries), encoding="utf-8")
    result = train(train_data, valid_data, cfg, out_dir=run_dir)
    print(result.history_text(), end="")
    if valid_data is not None:
        rep = evaluate(result.model, valid_data)
        (run_dir / "report.txt").write_text(rep.to_text(), encoding="utf-8")
        print("final report:")
        print(rep.to_text(), end="")
    write_manifest(run_dir)
    print(f"artifacts in {run_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = Model.load(args.checkpoint, expect_arch=args.arch)
    vocab = set(model.cfg.field_vocab_sizes)
    if len(vocab) != 1:
        raise ConfigError("checkpoint has unequal per-field vocab sizes; cannot hash TSV input")
    schema = _names(args.schema) or None
    if schema is not None and len(schema) != len(model.cfg.field_vocab_sizes):
        raise ConfigError(f"schema has {len(schema)} fields, checkpoint expects "
                          f"{len(model.cfg.field_vocab_sizes)}", key="data.schema")
    data, _ = load_tsv(args.data, schema=schema, policy=args.policy, vocab_size=vocab.pop())
    if data.features.shape[1] != len(model.cfg.field_vocab_sizes):
        raise ConfigError(f"data has {data.features.shape[1]} feature columns, checkpoint expects "
                          f"{len(model.cfg.field_vocab_sizes)}", key="data.schema")
    rep = evaluate(model, data)
    print(rep.to_text(), end="")
    run_dir = make_run_dir(args, "eval")
    (run_dir / "report.txt").write_text(rep.to_text(), encoding="utf-8")
    write_manifest(run_dir)
    if rep.errors:
        for name, msg in sorted(rep.errors.items()):
            print(f"error: {name}: {msg}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def bench_loss(sizes, reps=3, seed=0, naive_max=None, m1=0.3, m2=0.3):
    """Time both kernels on balanced partitions (n scores in each group).

    Returns one dict per size with mean/min seconds per kernel and the largest
    relative deviation between their values and gradients. The naive kernel is
    skipped (``None``) above ``naive_max``.
    """
    rows = []
    for n in sizes:
        if n < 1:
            raise ValueError("benchmark sizes must be >= 1")
        rng = np.random.default_rng([seed, n])
        part = ScenarioPartition.from_groups(*(rng.uniform(0.0, 1.0, n) for _ in range(3)))
        row = {"n": n}
        results = {}
        for kernel in KERNELS:
            if kernel == "naive" and naive_max is not None and n > naive_max:
                row["naive_mean"] = row["naive_min"] = None
                continue
            times = []
            for _ in range(reps):
                t0 = time.perf_counter()
                results[kernel] = pwiser(part, m1, m2, kernel=kernel)
                times.append(time.perf_counter() - t0)
            row[f"{kernel}_mean"], row[f"{kernel}_min"] = float(np.mean(times)), float(np.min(times))
        if "naive" in results:
            a, b = results["fast"], results["naive"]
            scale = max(abs(b.value), float(np.max(np.abs(b.grad))), 1e-300)
            row["deviation"] = max(abs(a.value - b.value), float(np.max(np.abs(a.grad - b.grad)))) / scale
        else:
            row["deviation"] = None
        rows.append(row)
    return rows


def format_bench(rows) -> str:
    def f(v, fmt):
        return "-" if v is None else format(v, fmt)

    lines = ["n\tnaive_mean_s\tnaive_min_s\tfast_mean_s\tfast_min_s\tspeedup\tmax_rel_dev"]
    for r in rows:
        speedup = r["naive_min"] / r["fast_min"] if r["naive_min"] is not None else None
        lines.append("\t".join([str(r["n"]), f(r["naive_mean"], ".6f"), f(r["naive_min"], ".6f"),
                                f(r["fast_mean"], ".6f"), f(r["fast_min"], ".6f"),
                                f(speedup, ".1f"), f(r["deviation"], ".3e")]))
    return "\n".join(lines) + "\n"


def cmd_bench_loss(args) -> int:
    rows = bench_loss(_ints(args.sizes), reps=args.reps, seed=args.seed, naive_max=args.naive_max)
    text = format_bench(rows)
    print(text, end="")
    run_dir = make_run_dir(args, "bench-loss")
    (run_dir / "bench.tsv").write_text(text, encoding="utf-8")
    write_manifest(run_dir)
    return EXIT_OK


def cmd_gridsearch(args) -> int:
    entries, parsed = _load_config(args)
    cfg = train_config(parsed)
    train_data, valid_data = _train_inputs(parsed)
    if valid_data is None:
        raise ConfigError("grid search needs data.valid_path", key="data.valid_path")
    lams = tuple(float(v) for v in _names(args.lambdas)) or (cfg.loss.lam,)
    m1s = tuple(float(v) for v in _names(args.m1s)) or (cfg.loss.m1,)
    m2s = tuple(float(v) for v in _names(args.m2s)) or (cfg.loss.m2,)
    run_dir = make_run_dir(args, "gridsearch")
    (run_dir / "config.txt").write_text(effective_config_text(entries), encoding="utf-8")

    def show(cell):
        auc = "failed" if cell.auc_ctr is None else f"{cell.auc_ctr:.3f}"
        print(f"lambda={cell.lam} m1={cell.m1} m2={cell.m2} auc_ctr={auc}", flush=True)

    cells = grid_search(train_data, valid_data, cfg, lams, m1s, m2s, on_cell=show)
    lines = ["rank\tlambda\tm1\tm2\tauc_ctr\tauc_ctcvr\terror"]
    for rank, c in enumerate(cells, start=1):
        def fmt(v):
            return "-" if v is None else f"{v:.3f}"

        lines.append(f"{rank}\t{c.lam!r}\t{c.m1!r}\t{c.m2!r}\t{fmt(c.auc_ctr)}\t"
                     f"{fmt(c.auc_ctcvr)}\t{c.error or ''}")
    text = "\n".join(lines) + "\n"
    (run_dir / "grid.tsv").write_text(text, encoding="utf-8")
    write_manifest(run_dir)
    print(text, end="")
    best = cells[0]
    if best.auc_ctr is None:
        print("every grid cell failed", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"best: lambda={best.lam} m1={best.m1} m2={best.m2} auc_ctr={best.auc_ctr:.3f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cases = gradcheck(seed=args.seed, m1=args.m1, m2=args.m2)
    text = format_gradcheck(cases)
    print(text, end="")
    worst = max(c.max_rel_err for c in cases)
    print(f"worst={worst:.3e} tolerance={args.tolerance:g}")
    run_dir = make_run_dir(args, "gradcheck")
    (run_dir / "gradcheck.tsv").write_text(text, encoding="utf-8")
    write_manifest(run_dir)
    return EXIT_OK if worst < args.tolerance else EXIT_NUMERICAL


# -- argument parsing --------------------------------------------------------------

def _keys_help() -> str:
    width = max(len(k) for k in KEYS)
    lines = ["config keys (default in brackets):"]
    lines += [f"  {k:<{width}}  [{spec.default}]  {spec.help}" for k, spec in KEYS.items()]
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pwiser", description="Multi-task CTR/CVR training with a pairwise ranking loss.",
        epilog=_keys_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, keys=False):
        p = sub.add_parser(name, help=help_text, description=help_text,
                           epilog=_keys_help() if keys else None,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--run-dir", help="write artifacts here instead of a timestamped directory")
        p.add_argument("--runs-root", default="runs", help="parent of timestamped run directories")
        p.set_defaults(func=func)
        return p

    p = add("synth-gen", cmd_synth_gen, "generate a synthetic impression log with click noise")
    p.add_argument("--rows", type=int, default=200_000)
    p.add_argument("--fields", type=int, default=6)
    p.add_argument("--vocab", type=int, default=50)
    p.add_argument("--noise-rate", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--valid-fraction", type=float, default=0.2)
    p.add_argument("--out-dir", help="output directory (default: the run directory)")

    for name, func, text in (("train", cmd_train, "train a model from a config"),
                             ("gridsearch", cmd_gridsearch, "grid search over lambda, m1 and m2")):
        p = add(name, func, text, keys=True)
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides")
        if name == "gridsearch":
            p.add_argument("--lambdas", default="", help="comma-separated lambda values")
            p.add_argument("--m1s", default="", help="comma-separated m1 values")
            p.add_argument("--m2s", default="", help="comma-separated m2 values")

    p = add("eval", cmd_eval, "evaluate a checkpoint on a TSV file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--arch", choices=ARCHS, help="fail unless the checkpoint holds this arch")
    p.add_argument("--schema", default="", help="comma-separated feature columns")
    p.add_argument("--policy", choices=POLICIES, default="coerce")

    p = add("bench-loss", cmd_bench_loss, "time the naive and fast pairwise kernels")
    p.add_argument("--sizes", default="1024,4096,16384,32768", help="comma-separated group sizes")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--naive-max", type=int, default=None, help="skip the naive kernel above this size")

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of every architecture")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--m1", type=float, default=0.3)
    p.add_argument("--m2", type=float, default=0.3)
    p.add_argument("--tolerance", type=float, default=1e-5)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    # overrides may be interleaved with options, so collect the leftovers here
    args, extra = parser.parse_known_args(argv)
    if extra:
        if not hasattr(args, "overrides") or any(x.startswith("-") or "=" not in x for x in extra):
            parser.error(f"unrecognized arguments: {' '.join(extra)}")
        args.overrides = list(args.overrides) + extra
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        key = f" [{exc.key}]" if exc.key else ""
        print(f"config error{key}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical error in {exc.component}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (SchemaError, LabelParseError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
