"""Command-line entry point: ``ieci {synth,train,eval,ablate,gradcheck}``.

Settings resolve as CLI flag > ``--config`` JSON file > built-in default.
Every command writes a ``run.json`` manifest next to its outputs.

Exit codes: 0 success, 1 validation or config error, 2 numerical failure.
"""
from __future__ import annotations

import os

# Cap BLAS worker threads before numpy loads.
if os.environ.get("IECI_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["IECI_THREADS"])

import argparse
import json
import logging
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .corpus import CorpusError, SynthConfig, load_corpus, synth_generate, write_corpus
from .evaluation import box_table, predict, prediction_dump, stratified_report
from .model import ABLATIONS
from .training import (
    NumericalError, TrainConfig, history_csv, load_checkpoint, save_checkpoint, toy_gradcheck, train,
)

logger = logging.getLogger("ieci")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2
STRATA = {"implicit": ("Implicit",), "explicit": ("Explicit",), "full": ("Full",),
          "all": ("Implicit", "Explicit", "Full")}


class ConfigError(ValueError):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: Optional[int]
    version: str
    duration_s: float = 0.0
    outputs: list = field(default_factory=list)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "run.json"
        path.write_text(json.dumps(asdict(self), indent=2) + "\n", encoding="utf-8")
        return path


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# --- config resolution --------------------------------------------------------

def _load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(doc) - {"synth", "train", "eval"}
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    return doc


def _overlay(base: dict, flags: dict) -> dict:
    out = dict(base)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def resolve_synth(args, doc: dict) -> SynthConfig:
    section = doc.get("synth", {})
    known = {f.name for f in fields(SynthConfig)}
    if set(section) - known:
        raise ConfigError(f"unknown synth keys: {sorted(set(section) - known)}")
    merged = _overlay(section, {"seed": args.seed, "implicit_fraction": args.implicit_fraction,
                                "train_pairs": args.train_pairs, "val_pairs": args.val_pairs,
                                "test_pairs": args.test_pairs})
    cfg = SynthConfig(**merged)
    cfg.check()
    return cfg


def resolve_train(args, doc: dict) -> TrainConfig:
    flags = {"seed": args.seed, "ablation": args.ablation, "alpha": args.alpha, "learning_rate": args.lr,
             "batch_size": args.batch_size, "layers": args.layers, "dict_size": args.dict_size,
             "epochs": args.epochs}
    try:
        return TrainConfig.from_dict(_overlay(doc.get("train", {}), flags))
    except TypeError as e:
        raise ConfigError(str(e)) from None


def resolve_eval(args, doc: dict) -> dict:
    section = dict(doc.get("eval", {}))
    if set(section) - {"ks", "iou_threshold"}:
        raise ConfigError(f"unknown eval keys: {sorted(set(section) - {'ks', 'iou_threshold'})}")
    ks = args.k if args.k is not None else section.get("ks", [1, 5])
    thr = args.iou_threshold if args.iou_threshold is not None else section.get("iou_threshold", 0.5)
    if not ks or any(int(k) < 1 for k in ks):
        raise ConfigError(f"k values must be >= 1, got {ks}")
    if not 0.0 < float(thr) <= 1.0:
        raise ConfigError(f"iou threshold must lie in (0, 1], got {thr}")
    return {"ks": [int(k) for k in ks], "iou_threshold": float(thr)}


def _int_list(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _manifest_path(path: str) -> Path:
    p = Path(path)
    return p / "manifest.json" if p.is_dir() else p


# --- commands -----------------------------------------------------------------

def cmd_synth(args, doc) -> RunManifest:
    cfg = resolve_synth(args, doc)
    out = Path(args.out)
    manifest = write_corpus(synth_generate(cfg), out)
    logger.info("wrote %s", manifest)
    return RunManifest("synth", {"synth": asdict(cfg)}, cfg.seed, version_string(),
                       outputs=[str(manifest), str(out / "features.bin")])


def cmd_train(args, doc) -> RunManifest:
    cfg = resolve_train(args, doc)
    corpus = load_corpus(_manifest_path(args.corpus))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = train(corpus, cfg)
    ckpt = save_checkpoint(out / "model.ckpt", res.model, cfg)
    hist = out / "history.csv"
    hist.write_text(history_csv(res.history), encoding="utf-8")
    if res.history:
        logger.info("trained %d steps, final loss %.6f", len(res.history), res.history[-1].total)
    return RunManifest("train", {"train": cfg.to_dict(), "corpus": str(args.corpus)}, cfg.seed,
                       version_string(), outputs=[str(ckpt), str(hist)])


def cmd_eval(args, doc) -> RunManifest:
    ev = resolve_eval(args, doc)
    model, tcfg = load_checkpoint(args.checkpoint)
    corpus = load_corpus(_manifest_path(args.corpus))
    samples = corpus.splits[args.corpus_split]
    if not samples:
        raise ConfigError(f"corpus split {args.corpus_split!r} is empty")
    preds = predict(model, samples)
    report = stratified_report(preds, corpus.annotations_for(args.corpus_split), box_table(corpus),
                               ks=ev["ks"], iou_threshold=ev["iou_threshold"], splits=STRATA[args.split])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "report.json", out / "report.csv", out / "predictions.jsonl"]
    paths[0].write_text(report.to_json(), encoding="utf-8")
    paths[1].write_text(report.to_csv(), encoding="utf-8")
    paths[2].write_text(prediction_dump(preds, corpus), encoding="utf-8")
    print(report.to_csv(), end="")
    seed = None if tcfg is None else tcfg.seed
    return RunManifest("eval", {"eval": ev, "split": args.split, "corpus_split": args.corpus_split,
                                "checkpoint": str(args.checkpoint), "model": model.cfg.to_dict()},
                       seed, version_string(), outputs=[str(p) for p in paths])


def run_ablation(corpus, base: TrainConfig, seeds, ks=(1, 5), iou_threshold: float = 0.5,
                 ablations=ABLATIONS, split: str = "test") -> dict:
    """``{ablation: {(stratum, k): [one value per seed]}}`` on ``split``."""
    anns = corpus.annotations_for(split)
    boxes = box_table(corpus)
    table = {}
    for abl in ablations:
        cells: dict = {}
        for seed in seeds:
            cfg = TrainConfig.from_dict({**base.to_dict(), "ablation": abl, "seed": int(seed)})
            model = train(corpus, cfg).model
            rep = stratified_report(predict(model, corpus.splits[split]), anns, boxes, ks, iou_threshold)
            for key, v in rep.recall_at.items():
                cells.setdefault(key, []).append(v)
        table[abl] = cells
        logger.info("ablation %s done", abl)
    return table


def ablation_csv(table: dict, ks) -> str:
    header = ["ablation"] + [f"{s}_R@{k}" for s in ("Implicit", "Explicit", "Full") for k in ks]
    rows = [",".join(header)]
    for abl, cells in table.items():
        vals = []
        for s in ("Implicit", "Explicit", "Full"):
            for k in ks:
                xs = [v for v in cells[(s, k)] if v is not None]
                vals.append(repr(float(np.mean(xs))) if xs else "")
        rows.append(",".join([abl] + vals))
    return "\n".join(rows) + "\n"


def cmd_ablate(args, doc) -> RunManifest:
    base = resolve_train(args, doc)
    ev = resolve_eval(args, doc)
    corpus = load_corpus(_manifest_path(args.corpus))
    seeds = args.seeds
    table = run_ablation(corpus, base, seeds, ev["ks"], ev["iou_threshold"], split=args.corpus_split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, seeds_path = out / "ablation.csv", out / "per_seed.json"
    text = ablation_csv(table, ev["ks"])
    csv_path.write_text(text, encoding="utf-8")
    per_seed = {abl: {f"{s}_R@{k}": v for (s, k), v in cells.items()} for abl, cells in table.items()}
    seeds_path.write_text(json.dumps({"seeds": list(seeds), "results": per_seed}, indent=1) + "\n",
                          encoding="utf-8")
    print(text, end="")
    return RunManifest("ablate", {"train": base.to_dict(), "eval": ev, "seeds": list(seeds)}, None,
                       version_string(), outputs=[str(csv_path), str(seeds_path)])


def cmd_gradcheck(args, doc) -> RunManifest:
    seed = 0 if args.seed is None else args.seed
    layers = 2 if args.layers is None else args.layers
    dict_size = 4 if args.dict_size is None else args.dict_size
    res = toy_gradcheck(n_phrases=args.phrases, n_regions=args.regions, dim=args.dim, layers=layers,
                        dict_size=dict_size, seed=seed, eps=args.eps)
    worst = max(res.per_param, key=res.per_param.get)
    ok = res.max_rel_error < args.tol
    print(f"{'PASS' if ok else 'FAIL'} max relative error {res.max_rel_error:.3e} (worst: {worst})")
    cfg = {"phrases": args.phrases, "regions": args.regions, "dim": args.dim, "layers": layers,
           "dict_size": dict_size, "eps": args.eps, "tol": args.tol}
    manifest = RunManifest("gradcheck", cfg, seed, version_string())
    manifest.config["max_rel_error"] = res.max_rel_error
    if not ok:
        manifest.config["failed"] = True
    return manifest


# --- parser -------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with synth/train/eval sections")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ablation", choices=ABLATIONS)
    p.add_argument("--alpha", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--dict-size", type=int)
    p.add_argument("--epochs", type=int)


def _add_eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k", type=_int_list, help="comma-separated k values, e.g. 1,5")
    p.add_argument("--iou-threshold", type=float)
    p.add_argument("--corpus-split", choices=("val", "test"), default="test")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ieci", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a planted synthetic corpus")
    _add_common(p)
    p.add_argument("--implicit-fraction", type=float)
    p.add_argument("--train-pairs", type=int)
    p.add_argument("--val-pairs", type=int)
    p.add_argument("--test-pairs", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model from sentence-image pairs")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("corpus", help="manifest.json or the directory holding it")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Recall@k report for a checkpoint")
    _add_common(p)
    _add_eval_flags(p)
    p.add_argument("--split", choices=sorted(STRATA), default="all", help="which strata to report")
    p.add_argument("checkpoint")
    p.add_argument("corpus")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate all four ablations over several seeds")
    _add_common(p)
    _add_train_flags(p)
    _add_eval_flags(p)
    p.add_argument("--seeds", type=_int_list, default=[1, 2, 3, 4, 5])
    p.add_argument("corpus")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full loss on a toy model")
    _add_common(p)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--layers", type=int)
    p.add_argument("--dict-size", type=int)
    p.add_argument("--phrases", type=int, default=2)
    p.add_argument("--regions", type=int, default=3)
    p.add_argument("--dim", type=int, default=8)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    try:
        doc = _load_config(args.config)
        manifest = args.func(args, doc)
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CorpusError, ValueError, KeyError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest.duration_s = round(time.perf_counter() - start, 3)
    manifest.write(out)
    return EXIT_NUMERIC if manifest.config.get("failed") else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
