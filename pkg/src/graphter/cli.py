"""Command-line entry point: ``graphter <subcommand> [flags]``.

Exit codes: 0 success, 1 validation error (bad flags, config or inputs), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import SHAPE_KINDS, load_cloud, load_dataset, make_dataset, normalize, save_cloud, save_dataset
from .training import RunConfig

log = logging.getLogger("graphter")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2

CONFIG_HELP = {
    "seed": "master seed; every random stream is derived from it",
    "epochs": "pretraining epochs",
    "batch_size": "clouds per pretraining batch",
    "lr_max": "initial learning rate of the cosine schedule",
    "lr_min": "final learning rate of the cosine schedule",
    "momentum": "SGD momentum",
    "weight_decay": "SGD weight decay",
    "kind": "transformation kind: translation, rotation or shearing",
    "strategy": "iso (shared parameters) or aniso (per-node parameters)",
    "mode": "node sampling: global or local",
    "rate": "fraction of nodes transformed, in (0, 1]",
    "k": "neighbours per node in the kNN graphs",
    "architecture": "network size: tiny, desk or full",
    "dynamic_graph": "rebuild kNN graphs from features after the first encoder layer",
    "classes": "comma-separated shape classes of the generated dataset",
    "per_class": "clouds per class in the generated dataset",
    "n_points": "points per generated cloud",
    "noise": "Gaussian noise sigma of generated clouds",
    "split": "train fraction of the generated dataset",
    "record_timing": "write real wall-clock milliseconds to the metrics CSV (otherwise 0)",
    "probe_task": "probe task: classify or segment",
    "probe_head": "classification head: linear or mlp",
    "probe_epochs": "probe training epochs",
    "probe_batch_size": "clouds per probe batch",
    "probe_lr_max": "initial probe learning rate",
    "probe_lr_min": "final probe learning rate",
    "metrics_file": "metrics CSV name inside --out",
    "checkpoint_file": "checkpoint name inside --out",
}


class ValidationError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """ArgumentParser that exits with status 1 (validation) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _type_name(t) -> str:
    return {int: "int", float: "float", str: "str", bool: "bool"}.get(t, getattr(t, "__name__", str(t)))


def add_flag(p, name: str, type, default, help: str, **kw):
    tail = "required" if kw.get("required") else f"default: {'none' if default is None else default}"
    p.add_argument(name, type=type, default=default, metavar=_type_name(type).upper(),
                   help=f"{help} (type: {_type_name(type)}, {tail})", **kw)


def _bool(text: str) -> bool:
    low = text.lower()
    if low not in ("true", "false", "1", "0", "yes", "no"):
        raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")
    return low in ("true", "1", "yes")


def add_config_flags(p, skip=()):
    """One override flag per RunConfig field; unset flags keep the config file value."""
    defaults = RunConfig()
    group = p.add_argument_group("run configuration overrides")
    for f in dataclasses.fields(RunConfig):
        if f.name in skip:
            continue
        typ = {"int": int, "float": float, "str": str, "bool": _bool}[f.type if isinstance(f.type, str) else f.type.__name__]
        flag = "--" + f.name.replace("_", "-")
        group.add_argument(flag, dest=f"cfg_{f.name}", type=typ, default=None,
                           metavar=("BOOL" if typ is _bool else _type_name(typ).upper()),
                           help=f"{CONFIG_HELP[f.name]} (type: {'bool' if typ is _bool else _type_name(typ)}, "
                                f"default: {getattr(defaults, f.name)})")


def resolve_config(args) -> RunConfig:
    """Config file values, then explicit flags on top."""
    try:
        cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
        overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
        return cfg.replace(**overrides)
    except FileNotFoundError as exc:
        raise ValidationError(f"config file not found: {exc.filename}") from None
    except ValueError as exc:
        raise ValidationError(str(exc)) from None


def write_manifest(out: Path) -> Path:
    """``manifest.txt``: one ``sha256  relative/path`` line per produced file."""
    lines = []
    for path in sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.txt"):
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        lines.append(f"{digest}  {path.relative_to(out).as_posix()}")
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def _out_dir(args) -> Path:
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise ValidationError(f"--out {out} exists and is not a directory")
    return out


def _load_data(args, cfg: RunConfig):
    if getattr(args, "data", None):
        path = Path(args.data)
        if not path.exists():
            raise ValidationError(f"dataset not found: {path}")
        try:
            return load_dataset(path)
        except (ValueError, KeyError) as exc:
            raise ValidationError(f"cannot read dataset {path}: {exc}") from None
    from .training import dataset_from_config
    return dataset_from_config(cfg)


# --- subcommands ----------------------------------------------------------------------------

def cmd_gen_data(args):
    classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    for c in classes:
        if c not in SHAPE_KINDS:
            raise ValidationError(f"unknown class {c!r}; expected among {','.join(SHAPE_KINDS)}")
    if args.count < 2 or args.points < 16 or args.noise < 0 or not 0 < args.split < 1:
        raise ValidationError("need --count >= 2, --points >= 16, --noise >= 0 and 0 < --split < 1")
    out = _out_dir(args)

    def run():
        ds = make_dataset(classes, args.count, args.points, args.split, args.seed, args.noise)
        save_dataset(ds, out)
        write_manifest(out)
        print(f"wrote {len(ds.clouds)} clouds ({len(ds.train)} train, {len(ds.test)} test) to {out}")
    return run


def cmd_transform(args):
    from .graph import dump_graph, knn_graph, rebuild_after_transform
    from .transforms import (PARAM_NAMES, apply_transform, canonical_strategy, check_kind, check_mode,
                             sample_subset, sample_transform)

    try:
        check_kind(args.kind)
        check_mode(args.mode)
        strategy = canonical_strategy(args.strategy)
        if not 0 < args.rate <= 1:
            raise ValueError(f"--rate must be in (0, 1], got {args.rate}")
        cloud = load_cloud(args.input)
    except FileNotFoundError:
        raise ValidationError(f"input cloud not found: {args.input}") from None
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    if not 1 <= args.k < cloud.num_points:
        raise ValidationError(f"--k must be in [1, {cloud.num_points - 1}]")
    out = _out_dir(args)

    def run():
        src = cloud if args.raw else normalize(cloud)
        rng = np.random.default_rng(args.seed)
        mask = sample_subset(src, args.mode, args.rate, rng)
        t = sample_transform(args.kind, strategy, mask, rng)
        moved = apply_transform(src, t)
        out.mkdir(parents=True, exist_ok=True)
        save_cloud(src, out / "original.xyz")
        save_cloud(moved, out / "transformed.xyz")
        with (out / "params.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["node"] + list(PARAM_NAMES[args.kind]))
            for node, row in zip(mask.indices, t.params):
                w.writerow([int(node)] + [repr(float(v)) for v in row])
        dump_graph(knn_graph(src.coords, args.k), out / "graph_original.txt")
        dump_graph(rebuild_after_transform(moved, args.k), out / "graph_transformed.txt")
        write_manifest(out)
        print(f"{args.kind} ({strategy}, {args.mode}) applied to {len(mask.indices)} of {src.num_points} nodes")
    return run


def cmd_pretrain(args):
    from .training import pretrain

    cfg = resolve_config(args)
    data = _load_data(args, cfg)
    if not data.train:
        raise ValidationError("dataset has no train split")
    out = _out_dir(args)

    def run():
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.txt")
        res = pretrain(cfg, data, metrics_path=out / cfg.metrics_file, checkpoint_path=out / cfg.checkpoint_file,
                       on_epoch=lambda m: print(f"epoch {m.epoch:3d}  lr {m.lr:.5f}  loss {m.mean_loss:.6f}"))
        write_manifest(out)
        print(f"final loss {res.metrics[-1].mean_loss:.6f}" if res.metrics else "no epochs run")
    return run


def cmd_probe(args):
    from .autodiff.checkpoint import CheckpointError
    from .evaluation import probe_metric, result_dict, train_probe
    from .model import GraphTerModel

    cfg = resolve_config(args)
    if args.task:
        cfg = cfg.replace(probe_task=args.task)
    try:
        model, _ = GraphTerModel.load(args.checkpoint)
    except FileNotFoundError:
        raise ValidationError(f"checkpoint not found: {args.checkpoint}") from None
    except CheckpointError as exc:
        raise ValidationError(f"bad checkpoint {args.checkpoint}: {exc}") from None
    data = _load_data(args, cfg)
    out = _out_dir(args)

    def run():
        outcome = train_probe(model, data, cfg)
        out.mkdir(parents=True, exist_ok=True)
        payload = {"task": outcome.task, "encoder_checksum": outcome.encoder_checksum,
                   "train_losses": outcome.train_losses, "result": result_dict(outcome.result)}
        (out / "probe.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        write_manifest(out)
        name, value = probe_metric(outcome.result)
        print(f"{outcome.task} {name} {value:.4f}")
    return run


def cmd_ablate(args):
    from .evaluation import ablation_grid, parse_axes, results_csv, summary_table

    cfg = resolve_config(args)
    try:
        axes = parse_axes(args.axes, cfg)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    if args.jobs < 1:
        raise ValidationError("--jobs must be >= 1")
    data = _load_data(args, cfg)
    out = _out_dir(args)

    def run():
        rows = ablation_grid(cfg, axes, data, args.jobs)
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.csv").write_text(results_csv(rows))
        table = summary_table(rows)
        (out / "summary.txt").write_text(table + "\n")
        write_manifest(out)
        print(table)
        failed = sum(r["metric"] == "failed" for r in rows)
        if failed:
            raise RuntimeError(f"{failed} of {len(rows)} cells failed")
    return run


def cmd_gradcheck(args):
    from .autodiff.gradcheck import REGISTRY, gradcheck

    names = sorted(REGISTRY) if args.ops == "all" else [n.strip() for n in args.ops.split(",") if n.strip()]
    unknown = [n for n in names if n not in REGISTRY and n != "end_to_end"]
    if unknown:
        raise ValidationError(f"unknown op(s) {', '.join(unknown)}; known: {', '.join(sorted(REGISTRY))}, end_to_end")
    if args.trials < 1 or args.tol <= 0:
        raise ValidationError("--trials must be >= 1 and --tol > 0")
    if args.ops == "all":
        names.append("end_to_end")

    def run():
        from .model import end_to_end_gradcheck

        failed = []
        for name in names:
            if name == "end_to_end":
                errs = end_to_end_gradcheck(seed=args.seed)
                worst = max(errs.values())
                ok = worst < args.e2e_tol
                print(f"{'PASS' if ok else 'FAIL'}  end_to_end  max_rel_err={worst:.3e}  tol={args.e2e_tol:g}")
            else:
                report = gradcheck(name, args.trials, args.tol, args.seed)
                ok = report.passed
                print(report.summary())
            if not ok:
                failed.append(name)
        if failed:
            raise RuntimeError(f"gradient check failed for: {', '.join(failed)}")
    return run


# --- parser -----------------------------------------------------------------------------------

def build_parser() -> Parser:
    parser = Parser(prog="graphter", description="Transformation-equivariant point-cloud representation learning.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr (type: flag, default: off)")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="generate a synthetic labelled shape dataset")
    add_flag(p, "--classes", str, ",".join(SHAPE_KINDS), "comma-separated shape classes")
    add_flag(p, "--count", int, 32, "clouds per class")
    add_flag(p, "--points", int, 256, "points per cloud")
    add_flag(p, "--noise", float, 0.01, "Gaussian noise sigma")
    add_flag(p, "--split", float, 0.75, "train fraction per class")
    add_flag(p, "--seed", int, 0, "random seed")
    add_flag(p, "--out", str, None, "output directory", required=True)
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("transform", help="sample and apply a node-wise transformation to one cloud")
    add_flag(p, "--in", str, None, "input cloud (.xyz or .off)", required=True, dest="input")
    add_flag(p, "--kind", str, "translation", "translation, rotation or shearing")
    add_flag(p, "--strategy", str, "iso", "iso or aniso")
    add_flag(p, "--mode", str, "global", "global or local node sampling")
    add_flag(p, "--rate", float, 0.25, "fraction of nodes transformed")
    add_flag(p, "--k", int, 10, "neighbours in the dumped kNN graphs")
    add_flag(p, "--seed", int, 0, "random seed")
    p.add_argument("--raw", action="store_true", help="skip normalisation of the input (type: flag, default: off)")
    add_flag(p, "--out", str, None, "output directory", required=True)
    p.set_defaults(handler=cmd_transform)

    p = sub.add_parser("pretrain", help="train encoder and decoder on the transformation-regression task")
    add_flag(p, "--config", str, None, "config file of key = value lines")
    add_flag(p, "--data", str, None, "dataset directory or manifest.csv (generated from the config if absent)")
    add_flag(p, "--out", str, None, "output directory", required=True)
    add_config_flags(p)
    p.set_defaults(handler=cmd_pretrain)

    p = sub.add_parser("probe", help="train a probe head on a frozen pretrained encoder")
    add_flag(p, "--checkpoint", str, None, "pretrained model checkpoint", required=True)
    add_flag(p, "--data", str, None, "dataset directory or manifest.csv (generated from the config if absent)")
    add_flag(p, "--task", str, None, "classify or segment (overrides --probe-task)", choices=["classify", "segment"])
    add_flag(p, "--config", str, None, "config file of key = value lines")
    add_flag(p, "--out", str, None, "output directory", required=True)
    add_config_flags(p, skip=("probe_task",))
    p.set_defaults(handler=cmd_probe)

    p = sub.add_parser("ablate", help="run a pretrain + probe grid over transformation settings")
    add_flag(p, "--config", str, None, "config file used as the template for every cell")
    add_flag(p, "--axes", str, "kind=translation,rotation,shearing",
             "axis values, e.g. 'kind=translation,rotation;rate=25,50'; strategy and mode always span both options")
    add_flag(p, "--data", str, None, "dataset directory or manifest.csv (generated from the config if absent)")
    add_flag(p, "--jobs", int, 1, "worker processes")
    add_flag(p, "--out", str, None, "output directory", required=True)
    add_config_flags(p)
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    add_flag(p, "--ops", str, "all", "'all', or comma-separated op names (end_to_end checks the whole model)")
    add_flag(p, "--trials", int, 10, "random inputs per op")
    add_flag(p, "--tol", float, 1e-4, "maximum relative error per op")
    add_flag(p, "--e2e-tol", float, 1e-3, "maximum relative error for end_to_end")
    add_flag(p, "--seed", int, 0, "random seed")
    p.set_defaults(handler=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = args.handler(args)
    except ValidationError as exc:
        print(f"graphter {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        run()
    except Exception as exc:
        print(f"graphter {args.command}: failed: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
