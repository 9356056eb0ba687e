"""Command-line entry point: ``meatrd {synth,pretrain,train,infer,eval,bench}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from .autodiff import NonFiniteError
from .data import DatasetFormatError, EmptyDatasetError, load_dataset
from .nn import CheckpointError
from .stage1 import DivergenceError, pretrain_stage1
from .stage3 import CollapseError

log = logging.getLogger("meatrd")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


class DataError(RuntimeError):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="JSON file of dotted config keys")
    p.add_argument("--seed", type=int, metavar="N", help="master seed (overrides the config)")
    p.add_argument("--out", metavar="DIR", required=True, help="output directory")
    p.add_argument("--ablation", metavar="VARIANT", help=f"one of {', '.join(cfgmod.VARIANTS)}")
    p.add_argument("--finetune-e1", action="store_true", default=None, help="update the Stage I encoder in Stage II")
    p.add_argument("--adaptive-beta", action="store_true", default=None, help="choose beta from the zero proportion")
    p.add_argument("--exact-subgraph", action="store_true", default=None,
                   help="one private subgraph per target (slow, exact)")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meatrd", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic reference/target MTDS pair")
    _common(p)
    p.add_argument("--preset", default="standard", choices=("standard", "camouflaged"))
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a generator field, e.g. --set n_spots=500")

    p = sub.add_parser("pretrain", help="Stage I patch autoencoder")
    _common(p)
    p.add_argument("--reference", nargs="+", required=True, metavar="MTDS")

    p = sub.add_parser("train", help="Stage II and Stage III on reference data")
    _common(p)
    p.add_argument("--reference", nargs="+", required=True, metavar="MTDS")
    p.add_argument("--checkpoint", metavar="DIR", help="directory holding stage1.mprm (default: --out)")

    p = sub.add_parser("infer", help="score a target dataset and threshold with MAP-EM")
    _common(p)
    p.add_argument("--target", required=True, metavar="MTDS")
    p.add_argument("--model", metavar="DIR", help="trained model directory (default: --out)")

    p = sub.add_parser("eval", help="AUC and F1 at the true prevalence")
    _common(p)
    p.add_argument("--scores", required=True, metavar="CSV")
    p.add_argument("--target", metavar="MTDS", help="labels source when the scores CSV has none")

    p = sub.add_parser("bench", help="synthetic ablation benchmark over seeds")
    _common(p)
    p.add_argument("--preset", default="standard", choices=("standard", "camouflaged"))
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a generator field")
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    p.add_argument("--variants", nargs="+", default=list(cfgmod.VARIANTS))
    return parser


def _overrides(args) -> dict:
    return {
        "seed": args.seed,
        "ablation": args.ablation,
        "mgdat.finetune_e1": args.finetune_e1,
        "occ.adaptive_beta": args.adaptive_beta,
        "mgdat.exact_subgraph": args.exact_subgraph,
    }


def _load(path) -> object:
    try:
        return load_dataset(path)
    except FileNotFoundError as exc:
        raise DataError(f"dataset not found: {path}") from exc
    except (DatasetFormatError, EmptyDatasetError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from exc


def _manifest(out: Path, command: str, cfg: dict, artifacts: dict[str, str]) -> None:
    """Merge this command's artifacts into ``out/manifest.json``."""
    path = out / "manifest.json"
    data = {"version": __version__, "commands": [], "artifacts": {}}
    if path.exists():
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            log.warning("replacing unreadable %s", path)
    data.setdefault("commands", []).append({"command": command, "seed": cfg.get("seed")})
    data["config"] = cfg
    rel = {k: str(Path(v).resolve().relative_to(out.resolve())) if Path(v).resolve().is_relative_to(out.resolve())
           else str(v) for k, v in artifacts.items()}
    data.setdefault("artifacts", {}).update(rel)
    path.write_text(json.dumps(data, indent=2, sort_keys=True), encoding="utf-8")


def _write_config(out: Path, cfg: dict) -> str:
    p = out / "config.json"
    p.write_text(json.dumps(cfg, indent=2, sort_keys=True), encoding="utf-8")
    return str(p)


def write_scores_csv(path, scores, labels=None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["spot_id", "score", "label"] if labels is not None else ["spot_id", "score"])
        for i, s in enumerate(scores):
            row = [i, format(float(s), ".17g")]
            if labels is not None:
                row.append(int(labels[i]))
            w.writerow(row)


def read_scores_csv(path) -> tuple[np.ndarray, np.ndarray | None]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except FileNotFoundError as exc:
        raise DataError(f"scores file not found: {path}") from exc
    if not rows or "score" not in rows[0]:
        raise DataError(f"{path}: expected a header with spot_id,score[,label]")
    try:
        scores = np.array([float(r["score"]) for r in rows])
        labels = np.array([int(r["label"]) for r in rows]) if rows[0].get("label") not in (None, "") else None
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    return scores, labels


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _synth_config(args, seed: int):
    from .synth import SynthConfig, preset

    cfg = preset(args.preset, seed=seed)
    types = {f.name: f.type for f in fields(SynthConfig)}
    updates = {}
    for item in getattr(args, "set", []):
        key, _, value = item.partition("=")
        if key not in types:
            raise cfgmod.ConfigError(f"unknown generator field {key!r}")
        try:
            updates[key] = json.loads(value)
        except json.JSONDecodeError:
            updates[key] = value
    try:
        return replace(cfg, **updates)
    except (TypeError, ValueError) as exc:
        raise cfgmod.ConfigError(str(exc)) from exc


def cmd_synth(args, cfg: dict, out: Path) -> int:
    from .synth import write_pair

    scfg = _synth_config(args, cfgmod.stage_seed(cfg["seed"], "synth"))
    paths = write_pair(scfg, out)
    print(f"wrote {paths['reference']} and {paths['target']}")
    _manifest(out, "synth", cfg, paths)
    return EXIT_OK


def cmd_pretrain(args, cfg: dict, out: Path) -> int:
    from .data import concat_datasets
    from .pipeline import MEATRD

    refs = [_load(p) for p in args.reference]
    pooled = concat_datasets(refs)
    model = MEATRD.from_config(cfg)
    model.encoder_, history = pretrain_stage1(
        pooled.patches, epochs=cfg["stage1.epochs"], batch_size=cfg["stage1.batch"], lr=cfg["stage1.lr"],
        embed_dim=cfg["model.embed_dim"], seed=cfgmod.stage_seed(cfg["seed"], "stage1"))
    paths = model.save(out, stages=("stage1",))
    print(f"stage I loss {history[0]:.6f} -> {history[-1]:.6f}")
    _manifest(out, "pretrain", cfg, {**paths, "config": _write_config(out, cfg)})
    return EXIT_OK


def cmd_train(args, cfg: dict, out: Path) -> int:
    from .pipeline import MEATRD

    ckpt = Path(args.checkpoint or out) / "stage1.mprm"
    if not ckpt.exists():
        raise CheckpointError(f"missing Stage I checkpoint {ckpt}; run 'meatrd pretrain' first")
    refs = [_load(p) for p in args.reference]
    model = MEATRD.from_config(cfg)
    encoder = MEATRD.load_encoder(ckpt)
    if encoder.embed_dim != cfg["model.embed_dim"]:
        raise cfgmod.ConfigError("Stage I checkpoint embed_dim differs from model.embed_dim")
    try:
        model.fit(refs, stage1=encoder)
    except (ValueError, TypeError) as exc:
        raise DataError(str(exc)) from exc
    paths = model.save(out)
    pre = out / "preprocess.json"
    rep = model.preprocessor_.report_
    pre.write_text(json.dumps({"genes_removed": rep.genes_removed, "hvg_selected": rep.hvg_selected,
                               "zero_proportion_mean": rep.zero_proportion_mean, "beta": model.beta_},
                              indent=2), encoding="utf-8")
    hist = {k: v for k, v in model.history_.items()}
    (out / "history.json").write_text(json.dumps(hist, indent=2, default=float), encoding="utf-8")
    _manifest(out, "train", cfg, {**paths, "preprocess": str(pre), "history": str(out / "history.json"),
                                  "config": _write_config(out, cfg)})
    print(f"trained variant {cfg['ablation']} (beta={model.beta_:.4g})")
    return EXIT_OK


def cmd_infer(args, cfg: dict, out: Path) -> int:
    from .pipeline import MEATRD
    from .threshold import write_report

    model = MEATRD.load(args.model or out)
    target = _load(args.target)
    try:
        scores = model.score_samples(target)
    except ValueError as exc:
        raise DataError(f"{args.target}: {exc}") from exc
    thr = model.threshold(scores)
    calls = thr.predict(scores)
    paths = {"scores": str(out / "scores.csv"), "labels": str(out / "labels.csv"),
             "em_report": str(out / "em_report.json")}
    write_scores_csv(paths["scores"], scores, target.labels)
    with open(paths["labels"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["spot_id", "anomaly", "posterior"])
        for i, (c, q) in enumerate(zip(calls, thr.predict_proba(scores)[:, 0])):
            w.writerow([i, int(c), format(float(q), ".17g")])
    write_report(paths["em_report"], thr.report(scores))
    print(f"{int(calls.sum())} of {len(calls)} spots called anomalous")
    _manifest(out, "infer", model.config(), paths)
    return EXIT_OK


def cmd_eval(args, cfg: dict, out: Path) -> int:
    from .metrics import evaluate, result_row, summary_line, write_eval_csv

    scores, labels = read_scores_csv(args.scores)
    if args.target:
        labels = _load(args.target).labels
    if labels is None:
        raise DataError("no labels: the scores CSV has no label column and --target was not given")
    if len(labels) != len(scores):
        raise DataError("label count differs from score count")
    try:
        res = evaluate(scores, labels)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    path = out / "eval.csv"
    write_eval_csv(path, [result_row(res, scores=str(args.scores))])
    print(summary_line(res, Path(args.scores).name))
    _manifest(out, "eval", cfg, {"eval": str(path)})
    return EXIT_OK


def cmd_bench(args, cfg: dict, out: Path) -> int:
    from .synth import run_benchmark

    bad = [v for v in args.variants if v not in cfgmod.VARIANTS]
    if bad:
        raise cfgmod.ConfigError(f"unknown variants {bad}")
    scfg = _synth_config(args, 0)
    # keys set in the config file or by flags win over the benchmark schedule
    explicit = set(json.loads(Path(args.config).read_text(encoding="utf-8"))) if args.config else set()
    base = {k: v for k, v in cfg.items()
            if k not in ("seed", "ablation") and (k in explicit or v != cfgmod.DEFAULTS[k])}
    res = run_benchmark(out, seeds=args.seeds, variants=args.variants, synth=scfg, config=base)
    for r in res["rows"]:
        print(f"seed {r['seed']} {r['variant']:10s} AUC={r['auc']:.4f} F1={r['f1']:.4f}")
    _manifest(out, "bench", cfg, {"eval": str(out / "eval.csv"), "benchmark": str(out / "benchmark.json")})
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "train": cmd_train, "infer": cmd_infer,
            "eval": cmd_eval, "bench": cmd_bench}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.load_config(args.config, _overrides(args))
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg, out)
    except (cfgmod.ConfigError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DatasetFormatError, EmptyDatasetError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, CollapseError, NonFiniteError) as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
