"""Command-line entry point: ``ftlab {pretrain,finetune,grid,variance,report}``.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 format error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

from . import data as D
from . import encoder as E
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, FtlabError
from .metrics import METRIC_NAMES
from .strategies import LLRDSetup, PoolingMode, StrategyConfig
from .trainer import (
    DESK_LR,
    REFERENCE_LR_GRID,
    PretrainConfig,
    TrainConfig,
    encoder_config,
    finetune,
    pretrain_toy,
    sample_std,
)

log = logging.getLogger("ftlab")

REFERENCE_MIXOUT_GRID = (0.3, 0.5, 0.7)
REFERENCE_REINIT_GRID = (0, 1, 2, 3)
HISTORY_FIELDS = ("run_id", "seed", "epoch", "split") + METRIC_NAMES
TABLE_HEADER = ("Model", "Precision", "Recall", "Accuracy", "F-Score")


class UsageError(FtlabError):
    exit_code = 2


# ---------------------------------------------------------------------------
# argument parsing


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="flat key=value file; command-line flags override it")
    p.add_argument("--out", default="runs", help="output directory")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("-v", "--verbose", action="store_true")


def _add_synth(p):
    g = p.add_argument_group("synthetic corpus")
    g.add_argument("--synth", action="store_true", help="use the synthetic marker-token task")
    g.add_argument("--synth-classes", type=int, default=2)
    g.add_argument("--synth-size", type=int, default=400)
    g.add_argument("--synth-vocab", type=int, default=60)
    g.add_argument("--synth-markers", type=int, default=2)
    g.add_argument("--synth-marker-prob", type=float, default=0.8)
    g.add_argument("--synth-noise", type=float, default=0.1)
    g.add_argument("--synth-priors", type=_floats, default=None)
    g.add_argument("--synth-seed", type=int, default=0)


def _add_data(p):
    g = p.add_argument_group("labelled data")
    g.add_argument("--data", help="UTF-8 TSV file with a header row")
    g.add_argument("--stage", type=int, choices=(1, 2), default=1)
    g.add_argument("--text-col", default="text")
    g.add_argument("--label-col", default="label")
    _add_synth(p)


def _add_training(p, with_strategy=True):
    p.add_argument("--pretrained", help="pretrained checkpoint file")
    p.add_argument("--lr", type=float, default=DESK_LR)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--warmup", type=float, default=0.1)
    p.add_argument("--dropout", type=float, default=None, help="override the encoder's dropout rate")
    if with_strategy:
        p.add_argument("--llrd", choices=[s.value for s in LLRDSetup], default="uniform")
        p.add_argument("--mixout", type=float, default=None)
        p.add_argument("--reinit", type=int, default=0)
        p.add_argument("--pool", choices=[m.value for m in PoolingMode], default="final")
        p.add_argument("--weighted-loss", action="store_true",
                       help="inverse-frequency class weights from the training split")


def build_parser():
    parser = argparse.ArgumentParser(prog="ftlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    parser.subcommands = sub.choices

    p = sub.add_parser("pretrain", help="masked-token pretraining of a fresh encoder")
    _add_common(p)
    p.add_argument("--corpus", help="plain-text corpus, one sequence per line")
    _add_synth(p)
    p.add_argument("--steps", type=int, default=400)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--max-len", type=int, default=32)
    p.add_argument("--dropout", type=float, default=0.1)

    p = sub.add_parser("finetune", help="fine-tune a pretrained checkpoint with a strategy stack")
    _add_common(p)
    _add_data(p)
    _add_training(p)

    p = sub.add_parser("grid", help="cross-product sweep over lr / mixout / re-init grids")
    _add_common(p)
    _add_data(p)
    _add_training(p)
    p.add_argument("--lr-grid", type=_floats, default=None)
    p.add_argument("--mixout-grid", type=_floats, default=None)
    p.add_argument("--reinit-grid", type=_ints, default=None)
    p.add_argument("--full-grids", action="store_true",
                   help="use the full default lr, mixout and re-init grids")

    p = sub.add_parser("variance", help="mean and std of test metrics across seeds")
    _add_common(p)
    _add_data(p)
    _add_training(p, with_strategy=False)
    p.add_argument("--seeds", type=_ints, required=False)
    p.add_argument("--strategy", action="append", default=None,
                   help="e.g. 'llrd=4group,mixout=0.7,reinit=2'; repeatable; 'baseline' for defaults")

    p = sub.add_parser("report", help="render a results CSV as an aligned table")
    _add_common(p)
    p.add_argument("--results", help="results CSV written by grid or variance")
    return parser


def read_config_file(path):
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = parser.subcommands[args.command]
        file_values = read_config_file(args.config)
        known = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, raw in file_values.items():
            action = known.get(key)
            if action is None:
                raise UsageError(f"unknown config key {key!r} for '{args.command}'")
            if action.nargs == 0:
                defaults[key] = raw.lower() in ("1", "true", "yes", "on")
            elif action.type is not None:
                try:
                    defaults[key] = action.type(raw)
                except (argparse.ArgumentTypeError, ValueError) as exc:
                    raise UsageError(f"config key {key!r}: {exc}") from None
            else:
                defaults[key] = raw
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


# ---------------------------------------------------------------------------
# shared plumbing


def resolved_config_text(args, exclude=("config", "verbose", "out", "jobs")):
    lines = []
    for key in sorted(vars(args)):
        if key in exclude:
            continue
        value = getattr(args, key)
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def run_id(config_text):
    return hashlib.sha256(config_text.encode("utf-8")).hexdigest()[:12]


def write_manifest(out_dir, rid, config_text, started, outputs, extra=()):
    lines = [
        f"run_id={rid}",
        f"started={started}",
        f"finished={_now()}",
    ]
    lines += [f"output.{k}={v}" for k, v in outputs.items()]
    lines += list(extra)
    lines.append("[config]")
    path = Path(out_dir) / "manifest.txt"
    path.write_text("\n".join(lines) + "\n" + config_text, encoding="utf-8")
    return path


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def synth_spec(args, size=None):
    return D.SynthTaskSpec(
        num_classes=args.synth_classes,
        size=args.synth_size if size is None else size,
        vocab_size=args.synth_vocab,
        markers_per_class=args.synth_markers,
        marker_prob=args.synth_marker_prob,
        noise_rate=args.synth_noise,
        priors=tuple(args.synth_priors) if args.synth_priors else None,
        seed=args.synth_seed,
    )


def load_labelled(args):
    """Returns ``(examples, num_classes)``."""
    if args.data:
        corpus = D.load_tsv(args.data, args.stage, args.text_col, args.label_col)
        if corpus.skipped:
            log.info("skipped %d rows outside the stage-%d schema", corpus.skipped, args.stage)
        return corpus.examples, len(D.schema(args.stage))
    if args.synth:
        return D.generate_synth(synth_spec(args)), args.synth_classes
    raise UsageError("no labelled data: pass --data FILE or --synth")


def load_pretrained(args):
    if not args.pretrained:
        raise UsageError("--pretrained is required")
    return load_checkpoint(args.pretrained)


def strategy_from_args(args):
    return StrategyConfig(
        llrd=args.llrd,
        mixout_p=args.mixout,
        reinit_n=args.reinit,
        pooling=args.pool,
        class_weights="auto" if args.weighted_loss else None,
    )


def train_config(args, strategy, seed=None, lr=None):
    return TrainConfig(
        base_lr=args.lr if lr is None else lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        warmup_frac=args.warmup,
        seed=args.seed if seed is None else seed,
        strategy=strategy,
        dropout_p=args.dropout,
    )


def format_metric(x):
    return f"{100.0 * x:.2f}"


def render_table(rows, header=TABLE_HEADER):
    """Aligned text table with ``|`` separators, one line per row."""
    rows = [tuple(str(c) for c in r) for r in rows]
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    rule = "+" + "+".join("-" * (w + 2) for w in widths) + "+"

    def line(r):
        return "| " + " | ".join(c.ljust(w) for c, w in zip(r, widths)) + " |"

    return "\n".join([rule, line(header), rule, *map(line, rows), rule]) + "\n"


def _write_csv(path, fieldnames, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _pool_map(fn, tasks, jobs):
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, tasks))
    return [fn(t) for t in tasks]


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(args):
    started = _now()
    if args.corpus:
        lines = Path(args.corpus).read_text(encoding="utf-8").splitlines()
        texts = [t for t in lines if t.strip()]
        vocab = E.Vocabulary.from_texts(texts)
    elif args.synth:
        spec = synth_spec(args)
        texts = [e.text for e in D.generate_synth(spec)]
        vocab = E.Vocabulary(spec.words())
    else:
        raise UsageError("no pretraining corpus: pass --corpus FILE or --synth")
    cfg = E.EncoderConfig(
        vocab_size=len(vocab),
        num_layers=args.layers,
        hidden=args.hidden,
        heads=args.heads,
        max_seq_len=args.max_len,
        dropout_p=args.dropout,
    )
    pcfg = PretrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr)
    ckpt = pretrain_toy(texts, vocab, cfg, pcfg, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = save_checkpoint(ckpt, out / "pretrained.ftlb")
    text = resolved_config_text(args)
    rid = run_id(text)
    write_manifest(out, rid, text, started, {"checkpoint": path},
                   [f"parameters={sum(v.size for v in ckpt.tensors.values())}"])
    print(f"wrote {path} ({len(ckpt)} tensors, vocab {len(vocab)})")
    return 0


def _history_rows(rid, seed, result):
    rows = []
    for row in [*result.history, result.test]:
        rows.append({"run_id": rid, "seed": seed, **row})
    return rows


def cmd_finetune(args):
    started = _now()
    strategy = strategy_from_args(args)
    strategy.validate()
    pretrained = load_pretrained(args)
    strategy.validate(encoder_config(pretrained).num_layers)
    examples, num_classes = load_labelled(args)
    result = finetune(pretrained, examples, train_config(args, strategy), num_classes)

    text = resolved_config_text(args)
    rid = run_id(text)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hist = out / "history.csv"
    _write_csv(hist, HISTORY_FIELDS, _history_rows(rid, args.seed, result))
    ckpt_path = save_checkpoint(result.checkpoint, out / "finetuned.ftlb")
    groups = [f"group.{g.name}.lr={g.lr!r}" for g in result.groups]
    groups += [f"group.{g.name}.multiplier={g.lr_multiplier!r}" for g in result.groups]
    write_manifest(out, rid, text, started, {"history": hist, "checkpoint": ckpt_path}, groups)
    t = result.test
    print(render_table([(strategy.label(), *(format_metric(t[k]) for k in METRIC_NAMES))]), end="")
    return 0


def _grid_task(task):
    pretrained, examples, num_classes, cfg = task
    return finetune(pretrained, examples, cfg, num_classes).test


def grid_configs(args):
    full = args.full_grids
    lrs = args.lr_grid if args.lr_grid is not None else list(REFERENCE_LR_GRID)
    mixouts = args.mixout_grid if args.mixout_grid is not None else (
        list(REFERENCE_MIXOUT_GRID) if full else [args.mixout])
    reinits = args.reinit_grid if args.reinit_grid is not None else (
        list(REFERENCE_REINIT_GRID) if full else [args.reinit])
    if not lrs or not mixouts or not reinits:
        raise UsageError("grid is empty: every grid needs at least one value")
    base = strategy_from_args(args)
    out = []
    for lr, mix, n in itertools.product(lrs, mixouts, reinits):
        strat = replace(base, mixout_p=mix or None, reinit_n=n).validate()
        out.append((lr, strat))
    return out


def cmd_grid(args):
    started = _now()
    configs = grid_configs(args)
    pretrained = load_pretrained(args)
    for _, strat in configs:
        strat.validate(encoder_config(pretrained).num_layers)
    examples, num_classes = load_labelled(args)
    tasks = [(pretrained, examples, num_classes, train_config(args, s, lr=lr)) for lr, s in configs]
    results = _pool_map(_grid_task, tasks, args.jobs)

    rows, table = [], []
    for (lr, strat), test in zip(configs, results):
        model = f"{strat.label()} @ lr={lr:g}"
        rows.append({"model": model, "lr": lr, "mixout": strat.mixout_p or 0.0,
                     "reinit": strat.reinit_n, "seed": args.seed,
                     **{k: test[k] for k in METRIC_NAMES}})
        table.append((model, *(format_metric(test[k]) for k in METRIC_NAMES)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "results.csv"
    _write_csv(csv_path, ("model", "lr", "mixout", "reinit", "seed") + METRIC_NAMES, rows)
    rendered = render_table(table)
    (out / "results.txt").write_text(rendered, encoding="utf-8")
    text = resolved_config_text(args)
    write_manifest(out, run_id(text), text, started, {"results": csv_path, "table": out / "results.txt"})
    print(rendered, end="")
    return 0


def parse_strategy(text):
    if text.strip() in ("", "baseline"):
        return StrategyConfig()
    kw = {}
    for part in text.split(","):
        if "=" not in part:
            raise UsageError(f"bad strategy item {part!r}; expected key=value")
        key, value = (s.strip() for s in part.split("=", 1))
        if key == "llrd":
            kw["llrd"] = value
        elif key == "mixout":
            kw["mixout_p"] = float(value) or None
        elif key == "reinit":
            kw["reinit_n"] = int(value)
        elif key == "pool":
            kw["pooling"] = value
        elif key == "weighted":
            kw["class_weights"] = "auto" if value.lower() in ("1", "true", "yes") else None
        else:
            raise UsageError(f"unknown strategy key {key!r}")
    try:
        return StrategyConfig(**kw).validate()
    except ValueError as exc:
        if isinstance(exc, FtlabError):
            raise
        raise ConfigError(str(exc)) from None


DEFAULT_VARIANCE_STRATEGIES = ("baseline", "llrd=4group,mixout=0.7,reinit=2")


def cmd_variance(args):
    started = _now()
    seeds = args.seeds or []
    if len(seeds) < 2:
        raise UsageError("variance needs at least 2 seeds (--seeds 1,2,3)")
    strategies = [parse_strategy(s) for s in (args.strategy or DEFAULT_VARIANCE_STRATEGIES)]
    pretrained = load_pretrained(args)
    for s in strategies:
        s.validate(encoder_config(pretrained).num_layers)
    examples, num_classes = load_labelled(args)
    tasks = [(pretrained, examples, num_classes, train_config(args, s, seed=seed))
             for s in strategies for seed in seeds]
    results = _pool_map(_grid_task, tasks, args.jobs)

    rows, table = [], []
    for i, strat in enumerate(strategies):
        runs = results[i * len(seeds) : (i + 1) * len(seeds)]
        row = {"model": strat.label(), "seeds": " ".join(map(str, seeds))}
        cells = [strat.label()]
        for k in METRIC_NAMES:
            vals = [r[k] for r in runs]
            mean, std = sum(vals) / len(vals), sample_std(vals)
            row[f"{k}_mean"], row[f"{k}_std"] = mean, std
            cells.append(f"{format_metric(mean)} ± {format_metric(std)}")
        rows.append(row)
        table.append(cells)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fields = ["model", "seeds"] + [f"{k}_{s}" for k in METRIC_NAMES for s in ("mean", "std")]
    csv_path = out / "variance.csv"
    _write_csv(csv_path, fields, rows)
    rendered = render_table(table)
    (out / "variance.txt").write_text(rendered, encoding="utf-8")
    text = resolved_config_text(args)
    write_manifest(out, run_id(text), text, started, {"results": csv_path, "table": out / "variance.txt"})
    print(rendered, end="")
    return 0


def cmd_report(args):
    if not args.results:
        raise UsageError("--results FILE is required")
    try:
        with open(args.results, newline="", encoding="utf-8") as fh:
            records = list(csv.DictReader(fh))
    except OSError as exc:
        raise UsageError(f"cannot read results: {exc}") from None
    table = []
    for rec in records:
        if "precision" in rec:
            cells = [format_metric(float(rec[k])) for k in METRIC_NAMES]
        else:
            cells = [f"{format_metric(float(rec[k + '_mean']))} ± {format_metric(float(rec[k + '_std']))}"
                     for k in METRIC_NAMES]
        table.append((rec["model"], *cells))
    print(render_table(table), end="")
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "grid": cmd_grid,
    "variance": cmd_variance,
    "report": cmd_report,
}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except SystemExit as exc:
        # argparse reports usage errors this way
        return exc.code if isinstance(exc.code, int) else 2
    except FtlabError as exc:
        print(f"ftlab: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"ftlab: error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
