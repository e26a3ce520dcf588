"""Command-line entry point.

Every subcommand prints a JSON result on stdout and writes a manifest
(configs, seeds and input digests) next to its main output.  A JSON config
file given with ``--config`` supplies defaults; explicit flags win.  The
manifest has the same layout as the config file, so ``--config manifest.json``
replays a run.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

from . import __version__
from . import experiment as X
from . import model as M
from . import synthetic
from . import training as TR
from .corpus import SubsetSpec, load_jsonl, write_jsonl
from .errors import DecraError, SubsetError
from .kbeta import AugmentConfig

log = logging.getLogger("decra")

TRAIN_FLAGS = {f.name: f for f in fields(TR.TrainConfig)}
MODEL_FLAGS = ("max_length", "hidden", "num_layers", "num_heads", "ff_multiplier",
               "dropout_rate", "activation", "tie_lm_head", "layer_norm_eps")
SUBSET_FLAGS = {"num_subsets": "num_subsets", "train_per_class": "train_per_class",
                "val_per_class": "val_per_class", "subset_seed": "seed"}


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes"):
        return True
    if text.lower() in ("0", "false", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_train_flags(p):
    g = p.add_argument_group("training")
    for name, f in TRAIN_FLAGS.items():
        kind = {"int": int, "float": float, "str": str}[f.type if isinstance(f.type, str)
                                                         else f.type.__name__]
        extra = {"choices": TR.MODES} if name == "mode" else {}
        g.add_argument(_flag(name), dest=f"train.{name}", type=kind, default=None,
                       metavar=name.upper(), **extra)


def _add_model_flags(p):
    g = p.add_argument_group("model")
    kinds = {"max_length": int, "hidden": int, "num_layers": int, "num_heads": int,
             "ff_multiplier": int, "dropout_rate": float, "activation": str,
             "tie_lm_head": _bool, "layer_norm_eps": float}
    for name in MODEL_FLAGS:
        g.add_argument(_flag(name), dest=f"model.{name}", type=kinds[name], default=None,
                       metavar=name.upper())


def _add_subset_flags(p):
    g = p.add_argument_group("subsets")
    for flag, name in SUBSET_FLAGS.items():
        g.add_argument(_flag(flag), dest=f"subsets.{name}", type=int, default=None,
                       metavar=flag.upper())


def _add_common(p, *, data=False, test=False, init=False, out=False, out_help=None):
    p.add_argument("--config", type=Path, help="JSON file with default settings")
    p.add_argument("--manifest", type=Path, help="where to write the run manifest")
    p.add_argument("--max-vocab", dest="max_vocab", type=int, default=None)
    if data:
        p.add_argument("--data", default=None, help="JSONL file with text and label fields")
    if test:
        p.add_argument("--test", default=None, help="JSONL test file")
    if init:
        p.add_argument("--init", dest="init_checkpoint", default=None,
                       help="checkpoint whose encoder and LM head initialise every model")
    if out:
        p.add_argument("--out", default=None, help=out_help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="decra", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"decra {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic benchmark")
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--num-classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=500, help="training pool size per class")
    p.add_argument("--test-per-class", type=int, default=500)
    p.add_argument("--unlabeled-per-class", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--manifest", type=Path)

    p = sub.add_parser("pretrain", help="masked-LM pretraining on raw text")
    _add_common(p, out=True, out_help="checkpoint path")
    p.add_argument("--texts", default=None, help="JSONL with a text field, or plain text")
    _add_model_flags(p)
    _add_train_flags(p)

    p = sub.add_parser("train", help="train one model on a train/validation pair")
    _add_common(p, data=True, init=True, out=True, out_help="checkpoint path")
    p.add_argument("--val", default=None)
    p.add_argument("--epoch-log", default=None)
    _add_model_flags(p)
    _add_train_flags(p)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a labelled file")
    _add_common(p, test=True)
    p.add_argument("--checkpoint", required=True)

    for name, help_ in (("experiment", "subset protocol for one mode"),
                        ("ablation", "all six modes on shared subsets"),
                        ("sweep", "one experiment per value of a parameter")):
        p = sub.add_parser(name, help=help_)
        _add_common(p, data=True, test=True, init=True, out=True, out_help="JSON report path")
        p.add_argument("--epoch-log", default=None)
        _add_model_flags(p)
        _add_train_flags(p)
        _add_subset_flags(p)
        if name == "ablation":
            p.add_argument("--modes", default=None, help="comma-separated subset of modes")
        if name == "sweep":
            p.add_argument("--param", choices=X.SWEEP_PARAMS, default=None)
            p.add_argument("--values", default=None, help="comma-separated values")
            p.add_argument("--csv", default=None)

    for name in ("augment", "export-embeddings"):
        p = sub.add_parser(name, help="write k-beta augmentations" if name == "augment"
                           else "write CLS embeddings of original and generated data")
        _add_common(p, data=True, out=True, out_help="output path")
        p.add_argument("--checkpoint", required=True)
        for f in ("k", "beta", "p_mask", "temperature", "seed"):
            kind = float if f in ("p_mask", "temperature") else int
            p.add_argument(_flag(f), dest=f"aug.{f}", type=kind, default=None, metavar=f.upper())
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge the config file with explicit flags into one settings dict."""
    settings = {}
    if getattr(args, "config", None):
        try:
            settings = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DecraError(f"cannot read config {args.config}: {exc}") from exc
    for key, value in vars(args).items():
        if value is None or key in ("config", "manifest", "command", "verbose"):
            continue
        if "." in key:
            section, name = key.split(".", 1)
            settings.setdefault(section, {})[name] = value
        else:
            settings[key] = value
    return settings


def _train_config(s) -> TR.TrainConfig:
    return TR.TrainConfig.from_dict(s.get("train", {}))


def _model_config(s, vocab_size=1, num_classes=2) -> M.ModelConfig:
    base = {"vocab_size": vocab_size, "num_classes": num_classes}
    known = {f.name for f in fields(M.ModelConfig)}
    base.update({k: v for k, v in s.get("model", {}).items() if k in known})
    return M.ModelConfig.from_dict(base)


def _subset_spec(s) -> SubsetSpec:
    return SubsetSpec(**s.get("subsets", {}))


def _aug_config(s) -> AugmentConfig:
    return AugmentConfig(**s.get("aug", {}))


def _need(s, *keys):
    missing = [k for k in keys if not s.get(k)]
    if missing:
        raise DecraError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-")
                                                                   for k in missing))


def _inputs(*paths) -> dict:
    return {str(p): X.file_digest(p) for p in paths if p}


def cmd_gen_data(args, s):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = synthetic.SyntheticSpec(num_classes=args.num_classes, per_class=args.per_class,
                                   seed=args.seed)
    files = {"train": (out / "train.jsonl", spec, 0),
             "test": (out / "test.jsonl", replace(spec, per_class=args.test_per_class), 1)}
    if args.unlabeled_per_class:
        files["unlabeled"] = (out / "unlabeled.jsonl",
                              replace(spec, per_class=args.unlabeled_per_class), 2)
    counts = {}
    for name, (path, sp, split) in files.items():
        rows = synthetic.generate(sp, split)
        if name == "unlabeled":
            rows = [{"text": r["text"]} for r in rows]
        write_jsonl(rows, path)
        counts[name] = len(rows)
    result = {"files": {k: str(v[0]) for k, v in files.items()}, "counts": counts}
    manifest = {"command": "gen-data", "synthetic": asdict(spec),
                "test_per_class": args.test_per_class,
                "unlabeled_per_class": args.unlabeled_per_class,
                "outputs": _inputs(*(v[0] for v in files.values()))}
    return result, manifest, out / "manifest.json"


def cmd_pretrain(args, s):
    _need(s, "texts", "out")
    cfg = _train_config(s)
    model_cfg = _model_config(s)
    model, vocab, history = X.pretrain(s["texts"], model_cfg, cfg, cfg.pretrain_epochs,
                                       s.get("max_vocab", 2000), seed=cfg.seed)
    M.save_checkpoint(model, s["out"], extra=X.checkpoint_extra(vocab))
    result = {"checkpoint": s["out"], "l_lm": history}
    manifest = {"command": "pretrain", "train": cfg.to_dict(), "model": model.config.to_dict(),
                "texts": s["texts"], "max_vocab": s.get("max_vocab", 2000),
                "inputs": _inputs(s["texts"])}
    return result, manifest, s["out"] + ".manifest.json"


def cmd_train(args, s):
    _need(s, "data", "val", "out")
    cfg = _train_config(s)
    init = vocab = None
    if s.get("init_checkpoint"):
        init, vocab, _ = X.load_model(s["init_checkpoint"])
    length = init.config.max_length if init else _model_config(s).max_length
    train_set = load_jsonl(s["data"], vocab=vocab, max_length=length,
                           max_vocab=s.get("max_vocab", 2000))
    val_set = load_jsonl(s["val"], vocab=train_set.vocab, max_length=length,
                         label_names=train_set.label_names)
    model_cfg = X.resolve_model_config(_model_config(s), train_set, init)
    model = X._fresh_model(model_cfg, cfg.seed, init)
    best, reports = TR.train(train_set, val_set, model, cfg)
    if s.get("epoch_log"):
        TR.write_epoch_csv(reports, s["epoch_log"])
    M.save_checkpoint(best, s["out"],
                      extra=X.checkpoint_extra(train_set.vocab, train_set.label_names))
    result = {"checkpoint": s["out"], "best_epoch": TR.best_epoch(reports),
              "val_acc": [r.val_acc for r in reports]}
    manifest = {"command": "train", "train": cfg.to_dict(), "model": model_cfg.to_dict(),
                "data": s["data"], "val": s["val"], "init_checkpoint": s.get("init_checkpoint"),
                "inputs": _inputs(s["data"], s["val"], s.get("init_checkpoint"))}
    return result, manifest, s["out"] + ".manifest.json"


def cmd_eval(args, s):
    _need(s, "test")
    model, vocab, names = X.load_model(args.checkpoint)
    data = load_jsonl(s["test"], vocab=vocab, max_length=model.config.max_length,
                      label_names=names or None)
    acc = TR.evaluate(data, model)
    manifest = {"command": "eval", "checkpoint": args.checkpoint, "test": s["test"],
                "inputs": _inputs(args.checkpoint, s["test"])}
    return {"accuracy": acc, "n": len(data)}, manifest, None


def _experiment_args(s):
    _need(s, "data", "test")
    return dict(data_path=s["data"], test_path=s["test"], subset_spec=_subset_spec(s),
                model_cfg=_model_config(s), init_checkpoint=s.get("init_checkpoint"),
                max_vocab=s.get("max_vocab", 2000))


def _report_out(s, name):
    return s.get("out") or f"{name}_report.json"


def cmd_experiment(args, s):
    kw = _experiment_args(s)
    report = X.run_experiment(train_cfg=_train_config(s), epoch_log=s.get("epoch_log"), **kw)
    out = _report_out(s, "experiment")
    Path(out).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    manifest = {"command": "experiment", **report.manifest}
    result = {"report": out, "mean": report.mean, "std": report.std,
              "std_kind": report.std_kind, "accuracies": report.accuracies}
    return result, manifest, out + ".manifest.json"


def cmd_ablation(args, s):
    kw = _experiment_args(s)
    modes = tuple(s["modes"].split(",")) if s.get("modes") else TR.MODES
    for m in modes:
        if m not in TR.MODES:
            raise DecraError(f"unknown mode {m!r}")
    ab = X.run_ablation(base_cfg=_train_config(s), modes=modes, epoch_log=s.get("epoch_log"),
                        **kw)
    out = _report_out(s, "ablation")
    Path(out).write_text(json.dumps(ab.to_dict(), indent=2) + "\n")
    first = next(iter(ab.reports.values()))
    manifest = {"command": "ablation", "modes": list(modes),
                **{k: v for k, v in first.manifest.items() if k != "train"},
                "train": _train_config(s).to_dict()}
    result = {"report": out, "means": {m: r.mean for m, r in ab.reports.items()},
              "stds": {m: r.std for m, r in ab.reports.items()},
              "paired_deltas": ab.paired_deltas, "mean_delta": ab.mean_delta}
    return result, manifest, out + ".manifest.json"


def cmd_sweep(args, s):
    kw = _experiment_args(s)
    _need(s, "param", "values")
    values = tuple(float(v) for v in str(s["values"]).split(","))
    spec = X.SweepSpec(s["param"], values, _train_config(s))
    rows = X.run_sweep(spec, kw["data_path"], kw["test_path"], kw["subset_spec"], kw["model_cfg"],
                       kw["init_checkpoint"], kw["max_vocab"], csv_path=s.get("csv"))
    out = _report_out(s, "sweep")
    Path(out).write_text(json.dumps([{"value": v, **r.to_dict()} for v, r in rows],
                                    indent=2) + "\n")
    manifest = {"command": "sweep", "param": spec.param, "values": list(values),
                **{k: v for k, v in rows[0][1].manifest.items() if k != "train"},
                "train": spec.base.to_dict()}
    result = {"report": out, "csv": s.get("csv"),
              "rows": [{"value": v, "mean": r.mean, "std": r.std} for v, r in rows]}
    return result, manifest, out + ".manifest.json"


def _export(fn, name):
    def run(args, s):
        _need(s, "data", "out")
        aug = _aug_config(s)
        n = fn(s["data"], args.checkpoint, aug, s["out"])
        manifest = {"command": name, "aug": asdict(aug), "data": s["data"],
                    "checkpoint": args.checkpoint,
                    "inputs": _inputs(s["data"], args.checkpoint)}
        return {"out": s["out"], "rows": n}, manifest, s["out"] + ".manifest.json"
    return run


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
    "ablation": cmd_ablation,
    "sweep": cmd_sweep,
    "augment": _export(X.export_augmentations, "augment"),
    "export-embeddings": _export(X.export_embeddings, "export-embeddings"),
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        settings = resolve(args)
        result, manifest, default_path = COMMANDS[args.command](args, settings)
    except (DecraError, OSError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, SubsetError):
            err["subset"] = exc.subset
        if getattr(exc, "line", None) is not None:
            err["line"] = exc.line
        print(json.dumps(err))
        return 1
    manifest = {"version": __version__, **manifest}
    path = args.manifest or default_path
    if path is not None:
        Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        result["manifest"] = str(path)
    print(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
