"""``advlab`` command-line interface.

Subcommands: gen-data, train, eval, boundary, landscape, check-theorem.
Exit codes: 0 success, 2 configuration error, 3 I/O or file-format error,
4 training aborted on a non-finite loss.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .analysis import (
    decision_boundary_grid,
    boundary_delta,
    evaluate,
    flatness_score,
    loss_landscape,
    theorem31_check,
    write_boundary_csv,
    write_landscape_csv,
    write_theorem_csv,
)
from .config import ExperimentConfig, config_from_dict, override, read_config_file
from .data import LabeledDataset, generate_toy, load_csv, save_csv
from .errors import AdvlabError, CheckpointFormatError, ConfigError, DatasetError, SpecError, TrainingError
from .model import Mlp
from .training import LambdaSchedule, PiatConfig, load_checkpoint, train

logger = logging.getLogger("advlab")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_TRAINING = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# --- helpers ---------------------------------------------------------------

def _json_dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _inside(root: Path, target) -> Path:
    """Resolve ``target`` under ``root`` and refuse paths that escape it."""
    root = root.resolve()
    p = Path(target)
    p = (p if p.is_absolute() else root / p).resolve()
    if p != root and root not in p.parents:
        raise CliError(f"output path {p} lies outside the output directory {root}", EXIT_CONFIG)
    return p


def _write_manifest(directory: Path, command: str, cfg: ExperimentConfig, options: dict) -> None:
    _json_dump(
        {
            "tool": "advlab",
            "version": __version__,
            "command": command,
            "seed": cfg.seed,
            "options": options,
            "config": cfg.to_dict(),
        },
        directory / "manifest.json",
    )


def _load_dataset(cfg: ExperimentConfig, split: str, csv_path: Optional[str] = None) -> LabeledDataset:
    path = csv_path or (cfg.data.train_csv if split == "train" else cfg.data.test_csv)
    if path:
        if not Path(path).is_file():
            raise CliError(f"dataset file not found: {path}", EXIT_IO)
        return load_csv(path, n_features=cfg.model.input_dim)
    return generate_toy(cfg.toy_config(split))


def _load_model(path) -> Mlp:
    path = Path(path)
    if not path.is_file():
        raise CliError(f"checkpoint not found: {path}", EXIT_IO)
    return load_checkpoint(path).model


ANALYSIS_COMMANDS = ("eval", "boundary", "landscape", "check-theorem")


def _resolve_config(args) -> ExperimentConfig:
    raw = {}
    config_path = args.config
    if config_path is None and args.command in ANALYSIS_COMMANDS and args.output_dir:
        # analyses of a finished run default to the config that produced it
        run_manifest = Path(args.output_dir) / "manifest.json"
        if run_manifest.is_file():
            config_path = str(run_manifest)
    if config_path:
        if not Path(config_path).is_file():
            raise CliError(f"config file not found: {config_path}", EXIT_IO)
        raw = read_config_file(config_path)
    cfg = config_from_dict(raw, seed_override=args.seed)
    cfg = override(cfg, None, output_dir=args.output_dir)
    return cfg


def _parse_floats(text: Optional[str]) -> Optional[tuple]:
    if text is None:
        return None
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise CliError(f"expected a comma-separated list of numbers, got {text!r}", EXIT_CONFIG) from None


def _parse_piat(text: str) -> PiatConfig:
    if text == "off":
        return PiatConfig(enabled=False)
    return PiatConfig(enabled=True, schedule=LambdaSchedule.parse(text))


# --- subcommands -----------------------------------------------------------

def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    out_dir = Path(cfg.output_dir)
    target = _inside(out_dir, args.out)
    target.parent.mkdir(parents=True, exist_ok=True)
    ds = generate_toy(cfg.toy_config(args.split))
    save_csv(ds, target)
    _write_manifest(out_dir, "gen-data", cfg, {"out": str(args.out), "split": args.split})
    print(f"wrote {len(ds)} rows to {target}")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, args) -> int:
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    analysis_dir = out_dir / "analysis"
    tcfg = cfg.train_config()
    train_ds = _load_dataset(cfg, "train")
    test_ds = _load_dataset(cfg, "test")
    _write_manifest(out_dir, "train", cfg, {"resume": args.resume})

    resume = None
    if args.resume:
        if not Path(args.resume).is_file():
            raise CliError(f"checkpoint not found: {args.resume}", EXIT_IO)
        resume = load_checkpoint(args.resume)
    model = resume.model if resume else Mlp.init(cfg.model, cfg.seed)

    a = cfg.analysis
    deltas = []
    prev_grid = [None]

    def grid_of(m):
        return decision_boundary_grid(m, a.boundary_x1_range, a.boundary_x2_range, a.boundary_x3, a.boundary_resolution)

    on_epoch_end = None
    if a.track_boundary and cfg.model.input_dim in (2, 3):
        prev_grid[0] = grid_of(model)

        def on_epoch_end(epoch, m, record):
            g = grid_of(m)
            deltas.append((epoch, boundary_delta(prev_grid[0], g)))
            prev_grid[0] = g

    result = train(tcfg, model, train_ds, test_ds, resume=resume, checkpoint_dir=out_dir,
                   metrics_path=out_dir / "metrics.csv", on_epoch_end=on_epoch_end)

    final, best = result.final, result.best
    last = result.records[-1]
    report = {
        "best": {"epoch": best.best_epoch, "clean_acc": best.best_clean_acc, "robust_acc": best.best_robust_acc},
        "final": {"epoch": last.epoch, "clean_acc": last.clean_acc, "robust_acc": last.robust_acc_pgd},
        "diff": {
            "clean_acc": abs(best.best_clean_acc - last.clean_acc),
            "robust_acc": abs(best.best_robust_acc - last.robust_acc_pgd),
        },
        "epochs": final.epoch,
    }
    _json_dump(report, out_dir / "report.json")
    if deltas:
        analysis_dir.mkdir(exist_ok=True)
        with (analysis_dir / "boundary_delta.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "delta"])
            for e, d in deltas:
                w.writerow([e, repr(d)])
    print(f"final clean {last.clean_acc:.4f} robust {last.robust_acc_pgd:.4f}; "
          f"best robust {best.best_robust_acc:.4f} at epoch {best.best_epoch}")
    return EXIT_OK


def _analysis_dir(cfg: ExperimentConfig, name: str) -> Path:
    d = Path(cfg.output_dir) / "analysis" / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def _default_ckpt(cfg: ExperimentConfig, given: Optional[str]) -> str:
    return given or str(Path(cfg.output_dir) / "ckpt_final")


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    ckpt = _default_ckpt(cfg, args.checkpoint)
    model = _load_model(ckpt)
    ds = _load_dataset(cfg, "test", args.dataset)
    names = args.attacks.split(",") if args.attacks else list(cfg.analysis.eval_attacks)
    report = evaluate(model, ds, [(n, cfg.attack) for n in names], seed=cfg.seed)
    out = _analysis_dir(cfg, "eval")
    (out / "report.json").write_text(report.to_json())
    _write_manifest(out, "eval", cfg, {"checkpoint": ckpt, "dataset": args.dataset, "attacks": names})
    print(report.to_json(), end="")
    return EXIT_OK


def cmd_boundary(cfg: ExperimentConfig, args) -> int:
    ckpt = _default_ckpt(cfg, args.checkpoint)
    model = _load_model(ckpt)
    a = cfg.analysis
    grid = decision_boundary_grid(model, a.boundary_x1_range, a.boundary_x2_range, a.boundary_x3, a.boundary_resolution)
    out = _analysis_dir(cfg, "boundary")
    write_boundary_csv(grid, out / "boundary.csv")
    _write_manifest(out, "boundary", cfg, {"checkpoint": ckpt})
    print(f"wrote {grid.preds.size} cells to {out / 'boundary.csv'}")
    return EXIT_OK


def cmd_landscape(cfg: ExperimentConfig, args) -> int:
    ckpt = _default_ckpt(cfg, args.checkpoint)
    model = _load_model(ckpt)
    ds = _load_dataset(cfg, "test", args.dataset)
    a = cfg.analysis
    out = _analysis_dir(cfg, "landscape")
    scores = {}
    for variant in a.landscape_variants:
        grid = loss_landscape(model, ds, a.landscape_grid_n, cfg.seed, variant=variant, attack=cfg.attack,
                              eval_size=a.landscape_eval_size, threads=args.threads)
        write_landscape_csv(grid, out / f"landscape_{variant}.csv")
        scores[variant] = flatness_score(grid)
    _json_dump({"flatness": scores}, out / "flatness.json")
    _write_manifest(out, "landscape", cfg, {"checkpoint": ckpt, "dataset": args.dataset})
    for k, v in scores.items():
        print(f"{k}: flatness {v:.6g}")
    return EXIT_OK


def cmd_check_theorem(cfg: ExperimentConfig, args) -> int:
    a_state = _load_model(args.ckpt_a)
    b_state = _load_model(args.ckpt_b)
    if a_state.spec != b_state.spec:
        raise CliError("the two checkpoints hold different architectures", EXIT_CONFIG)
    ds = _load_dataset(cfg, "test", args.dataset)
    a = cfg.analysis
    probes = ds.features[: a.theorem_probes]
    lambdas = _parse_floats(args.lambdas) or a.theorem_lambdas
    shrinks = _parse_floats(args.shrinks) or a.theorem_shrinks
    rows = theorem31_check(a_state.get_params(), b_state.get_params(), a_state.spec, probes, lambdas, shrinks)
    out = _analysis_dir(cfg, "check-theorem")
    write_theorem_csv(rows, out / "theorem31.csv")
    _write_manifest(out, "check-theorem", cfg, {"ckpt_a": args.ckpt_a, "ckpt_b": args.ckpt_b,
                                                "lambdas": list(lambdas), "shrinks": list(shrinks)})
    for r in rows:
        print(f"lambda={r.lam:g} shrink={r.shrink:g} ratio={r.ratio:.9f}")
    return EXIT_OK


# --- parser ----------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config, or a manifest.json from an earlier run")
    p.add_argument("--output-dir", help="directory receiving every output of this run (overrides the config)")
    p.add_argument("--seed", type=int, help="experiment seed (overrides the config; ADVLAB_SEED is the fallback)")
    p.add_argument("--threads", type=int, default=1, help="worker threads for grid analyses; results do not depend on it")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advlab", description="Toy-scale adversarial training laboratory.")
    parser.add_argument("--version", action="version", version=f"advlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the concentric-circles dataset as CSV")
    _common(p)
    p.add_argument("--out", default="toy_train.csv", help="file name, relative to the output directory")
    p.add_argument("--split", choices=("train", "test"), default="train", help="which seeded split to generate")
    p.add_argument("--n-per-class", type=int, help="rows per class")
    p.add_argument("--sigma", type=float, help="noise standard deviation")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="adversarial training with optional parameter interpolation")
    _common(p)
    p.add_argument("--piat", help="'off', 'fixed:<lambda>' or 'rational:<a>,<b>,<c>,<d>'")
    p.add_argument("--epochs", type=int, help="number of epochs")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--batch-size", type=int, help="minibatch size")
    p.add_argument("--loss", choices=("ce_adv", "ce_plus_alp", "ce_plus_nmse"), help="training objective")
    p.add_argument("--mu", type=float, help="weight of the normalized logit term")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="clean and robust accuracy of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", help="checkpoint file (default: <output-dir>/ckpt_final)")
    p.add_argument("--dataset", help="CSV dataset (default: the toy test split)")
    p.add_argument("--attacks", help="comma-separated subset of fgsm,ifgsm,mifgsm,pgd")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("boundary", help="decision-boundary grid CSV")
    _common(p)
    p.add_argument("--checkpoint", help="checkpoint file (default: <output-dir>/ckpt_final)")
    p.add_argument("--resolution", type=int, help="cells per axis")
    p.add_argument("--x3", type=float, help="value of the third feature")
    p.set_defaults(func=cmd_boundary)

    p = sub.add_parser("landscape", help="loss-landscape grid CSVs (clean and PGD)")
    _common(p)
    p.add_argument("--checkpoint", help="checkpoint file (default: <output-dir>/ckpt_final)")
    p.add_argument("--dataset", help="CSV dataset (default: the toy test split)")
    p.add_argument("--grid-n", type=int, help="points per axis over [-1, 1]")
    p.add_argument("--variant", choices=("clean", "pgd"), help="compute only one variant")
    p.set_defaults(func=cmd_landscape)

    p = sub.add_parser("check-theorem", help="first-order interpolation ratio table")
    _common(p)
    p.add_argument("--ckpt-a", required=True, help="checkpoint holding the earlier parameters")
    p.add_argument("--ckpt-b", required=True, help="checkpoint holding the later parameters")
    p.add_argument("--dataset", help="CSV dataset supplying probe inputs (default: the toy test split)")
    p.add_argument("--lambdas", help="comma-separated interpolation weights in [0, 1)")
    p.add_argument("--shrinks", help="comma-separated shrink factors")
    p.set_defaults(func=cmd_check_theorem)
    return parser


def _apply_flags(cfg: ExperimentConfig, args) -> ExperimentConfig:
    cmd = args.command
    if cmd == "gen-data":
        cfg = override(cfg, "data", n_per_class=args.n_per_class, sigma=args.sigma)
    elif cmd == "train":
        cfg = override(cfg, "train", epochs=args.epochs, lr=args.lr, batch_size=args.batch_size)
        cfg = override(cfg, "loss", kind=args.loss, mu=args.mu)
        if args.piat:
            cfg = override(cfg, None, piat=_parse_piat(args.piat))
    elif cmd == "boundary":
        cfg = override(cfg, "analysis", boundary_resolution=args.resolution, boundary_x3=args.x3)
    elif cmd == "landscape":
        variants = (args.variant,) if args.variant else None
        cfg = override(cfg, "analysis", landscape_grid_n=args.grid_n, landscape_variants=variants)
    cfg.validate()
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.threads < 1:
            raise CliError("--threads must be >= 1", EXIT_CONFIG)
        cfg = _apply_flags(_resolve_config(args), args)
        return args.func(cfg, args)
    except CliError as exc:
        print(f"advlab: error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, SpecError) as exc:
        print(f"advlab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"advlab: training aborted: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (OSError, CheckpointFormatError, DatasetError) as exc:
        print(f"advlab: i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except AdvlabError as exc:
        print(f"advlab: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
