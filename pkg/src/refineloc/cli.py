"""Command-line entry point: ``refineloc {synth,refine,eval,ablate}``.

Exit codes: 0 success, 2 config/schema error, 3 I/O error, 4 training error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import dataio
from .dataio import FeatureFormatError, ManifestError, SyntheticConfig
from .evalkit import DEFAULT_THRESHOLDS, evaluate
from .pseudogen import GENERATORS, GeneratorKind
from .refine import RefineConfig, ablation_grid, config_to_json, refine_loop, summary_row, write_grid
from .segpred import PostprocConfig, read_predictions
from .wstal import ATTENTION_VARIANTS, ConfigError, ModelConfig

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("refineloc")


class ConfigFileError(Exception):
    pass


@dataclasses.dataclass
class RunConfig:
    synth: SyntheticConfig
    refine: RefineConfig
    data_path: str | None = None
    thresholds: tuple = DEFAULT_THRESHOLDS
    grid_generators: tuple = GENERATORS
    grid_betas: tuple = (0.0, 1.0, 2.0, 4.0, 8.0, 16.0)


def _build(cls, doc, path: str, skip=()):
    if not isinstance(doc, dict):
        raise ConfigFileError(f"{path}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)} - set(skip)
    for k in doc:
        if k not in names:
            raise ConfigFileError(f"unknown config key {path}.{k}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as e:
        raise ConfigFileError(f"{path}: {e}") from None


def parse_config(doc: dict) -> RunConfig:
    """Build a RunConfig; rejects unknown keys anywhere with their dotted path."""
    if not isinstance(doc, dict):
        raise ConfigFileError("config: expected a JSON object")
    sections = {"data", "synth", "model", "postproc", "refine", "eval"}
    for k in doc:
        if k not in sections:
            raise ConfigFileError(f"unknown config key {k}")
    synth = _build(SyntheticConfig, doc.get("synth", {}), "synth")
    model = _build(ModelConfig, doc.get("model", {}), "model", skip=("D", "N", "init_seed"))
    post = _build(PostprocConfig, doc.get("postproc", {}), "postproc")

    rdoc = dict(doc.get("refine", {}))
    if not isinstance(rdoc, dict):
        raise ConfigFileError("refine: expected an object")
    gen = _build(GeneratorKind, rdoc.pop("generator", {}), "refine.generator")
    grid = rdoc.pop("grid", {})
    if not isinstance(grid, dict) or set(grid) - {"generators", "betas"}:
        extra = sorted(set(grid) - {"generators", "betas"}) if isinstance(grid, dict) else []
        raise ConfigFileError(f"unknown config key refine.grid.{extra[0]}" if extra else "refine.grid: expected an object")
    refine = _build(RefineConfig, rdoc, "refine", skip=("generator", "postproc", "model"))
    refine.generator, refine.postproc, refine.model = gen, post, model

    ddoc = doc.get("data", {})
    if not isinstance(ddoc, dict) or set(ddoc) - {"path"}:
        raise ConfigFileError(f"unknown config key data.{sorted(set(ddoc) - {'path'})[0]}"
                              if isinstance(ddoc, dict) else "data: expected an object")
    edoc = doc.get("eval", {})
    if not isinstance(edoc, dict) or set(edoc) - {"thresholds"}:
        raise ConfigFileError(f"unknown config key eval.{sorted(set(edoc) - {'thresholds'})[0]}"
                              if isinstance(edoc, dict) else "eval: expected an object")
    rc = RunConfig(synth, refine, ddoc.get("path"))
    if "thresholds" in edoc:
        rc.thresholds = tuple(float(t) for t in edoc["thresholds"])
    if "generators" in grid:
        rc.grid_generators = tuple(grid["generators"])
    if "betas" in grid:
        rc.grid_betas = tuple(float(b) for b in grid["betas"])
    try:
        refine.validate()
        if model.attention_variant not in ATTENTION_VARIANTS:
            raise ConfigError(f"model.attention_variant: unknown value {model.attention_variant!r}")
        if model.L < 1:
            raise ConfigError(f"model.L must be >= 1, got {model.L}")
        for g in rc.grid_generators:
            GeneratorKind(g).validate()
    except (ConfigError, ValueError) as e:
        raise ConfigFileError(str(e)) from None
    return rc


def load_config(path, seed: int | None = None) -> RunConfig:
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigFileError(f"{path}: malformed JSON at line {e.lineno} column {e.colno}: {e.msg}") from None
    rc = parse_config(doc)
    if seed is not None:
        rc.synth.seed = seed
        rc.refine.seed = seed
    return rc


def resolved_config(rc: RunConfig) -> dict:
    return {
        "data": {"path": rc.data_path},
        "synth": dataclasses.asdict(rc.synth),
        "refine": config_to_json(rc.refine),
        "eval": {"thresholds": list(rc.thresholds)},
        "grid": {"generators": list(rc.grid_generators), "betas": list(rc.grid_betas)},
    }


# --- commands -------------------------------------------------------------

def cmd_synth(args) -> int:
    rc = load_config(args.config, args.seed)
    m = dataio.generate_synthetic(rc.synth, args.out)
    splits = {s: len(m.ids(s)) for s in dataio.SPLITS}
    print(f"videos={len(m.videos)} classes={m.N} D={m.D} "
          f"train={splits['train']} val={splits['val']} test={splits['test']} "
          f"fg_fraction={dataio.foreground_fraction(m):.4f}")
    return EXIT_OK


def _data_dir(args, rc: RunConfig) -> Path:
    path = args.data or rc.data_path
    if path is None:
        raise ConfigFileError("no dataset given (use --data or data.path)")
    return Path(path)


def cmd_refine(args) -> int:
    rc = load_config(args.config, args.seed)
    m = dataio.load_manifest(_data_dir(args, rc))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as f:
        json.dump(resolved_config(rc), f, indent=1)
        f.write("\n")
    res = _run(lambda: refine_loop(m, rc.refine, run_dir=out, threads=args.threads,
                                   thresholds=rc.thresholds))
    for rep in res.reports:
        eta, val_loss, m05, avg = summary_row(rep)
        print(f"eta={eta} val_loss={val_loss} mAP@0.5={m05} avg_mAP={avg}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    rc = load_config(args.config, args.seed)
    m = dataio.load_manifest(_data_dir(args, rc))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cells = _run(lambda: ablation_grid(m, rc.grid_generators, rc.grid_betas, rc.refine,
                                     threads=args.threads, thresholds=rc.thresholds))
    write_grid(cells, out / "grid.csv")
    for c in cells:
        print(f"{c.generator:<20} beta={c.beta:<5g} best_avg_mAP={c.best_avg_map:.4f} best_eta={c.best_eta}")
    return EXIT_OK


class TrainingError(Exception):
    pass


def _run(fn):
    try:
        return fn()
    except (ConfigError, ConfigFileError):
        raise
    except (ValueError, FloatingPointError, ArithmeticError) as e:
        raise TrainingError(str(e)) from e


def cmd_eval(args) -> int:
    try:
        preds = read_predictions(args.predictions)
        m = dataio.load_manifest(args.manifest, check_files=False)
    except ValueError as e:
        raise ConfigFileError(str(e)) from None
    report = evaluate(preds, m, DEFAULT_THRESHOLDS)
    print("threshold  mAP")
    for t, v in sorted(report.map_per_threshold.items()):
        print(f"{t:<9.2f}  {v:.4f}")
    print(f"average mAP {report.average_map:.4f}")
    out = Path(args.out) if args.out else Path(args.predictions).with_name("report.json")
    out.write_text(report.dumps())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="refineloc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    for name, func, help_ in (("refine", cmd_refine, "run the refinement loop"),
                              ("ablate", cmd_ablate, "generator x beta grid")):
        r = sub.add_parser(name, help=help_)
        r.add_argument("--config", required=True)
        r.add_argument("--data", help="dataset directory or manifest.json")
        r.add_argument("--out", required=True)
        r.add_argument("--seed", type=int)
        r.add_argument("--threads", type=int, default=1)
        r.set_defaults(func=func)

    e = sub.add_parser("eval", help="evaluate a predictions.jsonl file")
    e.add_argument("--predictions", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", help="report.json path (default: next to predictions)")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigFileError, ConfigError, ManifestError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FeatureFormatError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except TrainingError as e:
        print(f"training error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as e:
        # remaining ValueErrors come from config validation (dataclass __post_init__ etc.)
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
