"""Command-line entry point: ingest, train, calibrate, score, eval, diag, simulate.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
Flag precedence for training configuration: explicit flags > --config file
(JSON or TOML) > profile defaults. Reports embed the effective configuration
and the tool version. MASC_CACHE_DIR sets the default embedding cache
location for remote embedders.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .detector import BackboneSpec, score_trajectory
from .embedding import EmbedderSpec, embed_trajectory
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    DivergenceError,
    MascError,
)
from .evaluation import ScoredStep, compute_metrics, embedding_distance_diagnostics
from .experiment import ExperimentConfig, MascSettings, batch_experiment
from .simulator import FaultSpec
from .trace import (
    error_position_histogram,
    load_trajectories,
    save_trajectories,
    serialize_trajectory,
)
from .training import PROFILES, TrainConfig, calibrate_threshold, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="masc",
        description="Step-level anomaly detection and self-correction for "
        "multi-agent traces.",
    )
    parser.add_argument("--version", action="version", version=f"masc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a JSONL trace file")
    p.add_argument("--traces", required=True, help="input JSONL trace file")
    p.add_argument("--strict", action="store_true", help="reject unknown keys")
    p.add_argument("--out", help="write canonicalized JSONL here")

    p = sub.add_parser("train", help="fit a detector on normal trajectories")
    p.add_argument("--traces", required=True, help="training JSONL trace file")
    p.add_argument("--checkpoint", required=True, help="output checkpoint path")
    p.add_argument("--report", help="write the training report JSON here")
    p.add_argument("--config", help="JSON or TOML file with training settings")
    p.add_argument("--profile", choices=sorted(PROFILES), help="hyperparameter profile")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--lambda", dest="lam", type=float, help="prototype loss weight")
    p.add_argument("--seed", type=int)
    p.add_argument("--hidden", type=int, help="hidden dimension d_h")
    p.add_argument("--layers", type=int, help="frozen backbone depth")
    p.add_argument("--dim", type=int, help="embedding dimension d_e")
    p.add_argument("--with-gt", action="store_true", default=None,
                   help="append gt_answer to the query before embedding")
    p.add_argument("--exclude-labeled-steps", action="store_true", default=None,
                   help="drop steps labeled as errors from training trajectories")
    p.add_argument("--strict", action="store_true")

    p = sub.add_parser("calibrate", help="set the threshold from normal scores")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--traces", required=True, help="normal-only calibration traces")
    p.add_argument("--quantile", type=float, default=0.99)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--out", help="output checkpoint (defaults to in-place)")
    p.add_argument("--strict", action="store_true")

    p = sub.add_parser("score", help="score every step of every trajectory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--traces", required=True)
    p.add_argument("--out", help="CSV output path (default stdout)")
    p.add_argument("--alpha", type=float, help="override calibration alpha")
    p.add_argument("--beta", type=float, help="override calibration beta")
    p.add_argument("--delta", type=float, help="override threshold (inf allowed)")
    p.add_argument("--strict", action="store_true")

    p = sub.add_parser("eval", help="detection metrics from scores or a checkpoint")
    p.add_argument("--traces", required=True, help="labeled JSONL trace file")
    p.add_argument("--scores", help="score CSV produced by `masc score`")
    p.add_argument("--checkpoint", help="score internally with this checkpoint")
    p.add_argument("--out", help="metrics JSON output path (default stdout)")
    p.add_argument("--hist", help="write score histogram CSV here")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--strict", action="store_true")

    p = sub.add_parser("diag", help="embedding distance and error-position diagnostics")
    p.add_argument("--traces", required=True, help="labeled JSONL trace file")
    p.add_argument("--dim", type=int, default=64, help="hashing embedder dimension")
    p.add_argument("--bins", type=int, default=5)
    p.add_argument("--out", help="JSON output path (default stdout)")
    p.add_argument("--strict", action="store_true")

    p = sub.add_parser("simulate", help="fault-injection sweep on the fixture suite")
    p.add_argument("--topology", default="all",
                   choices=["chain", "complete", "random", "all"])
    p.add_argument("--fault", default="both", choices=["on", "off", "both"])
    p.add_argument("--masc", default="both", choices=["on", "off", "both"])
    p.add_argument("--fixtures", type=int, default=50)
    p.add_argument("--agents", type=int, default=3)
    p.add_argument("--rounds", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--target-agent", default="1",
                   help="fault target: agent index or 'random'")
    p.add_argument("--step-selector", default="uniform",
                   help="'uniform', 'early', or a fixed step index")
    p.add_argument("--corruption", default="misleading_template",
                   choices=["misleading_template", "scramble"])
    p.add_argument("--delta", type=float, help="override calibrated threshold")
    p.add_argument("--quantile", type=float, default=0.99)
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--lambda", dest="lam", type=float, default=0.2)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--hidden", type=int, default=256)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help="JSON report path (default stdout)")
    p.add_argument("--csv", help="CSV report path")
    p.add_argument("--dump-traces", help="dump per-run trajectories as JSONL here")

    return parser


def _load_config_file(path: str) -> dict:
    if path.endswith(".toml"):
        import tomllib

        with open(path, "rb") as fh:
            return tomllib.load(fh)
    with open(path) as fh:
        return json.load(fh)


def _resolve_train_config(args) -> TrainConfig:
    settings: dict = {
        "epochs": 10, "lr": 1e-4, "weight_decay": 0.0, "lam": 0.2, "seed": 0,
        "d_h": 384, "layers": 2, "dim": 64, "with_gt": False,
        "exclude_labeled_steps": False,
    }
    if args.profile:
        settings.update(PROFILES[args.profile])
    if args.config:
        file_settings = _load_config_file(args.config)
        unknown = set(file_settings) - set(settings) - {"lambda"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "lambda" in file_settings:
            file_settings["lam"] = file_settings.pop("lambda")
        settings.update(file_settings)
    for key in ("epochs", "lr", "weight_decay", "lam", "seed", "with_gt",
                "exclude_labeled_steps"):
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    if args.hidden is not None:
        settings["d_h"] = args.hidden
    if args.layers is not None:
        settings["layers"] = args.layers
    if args.dim is not None:
        settings["dim"] = args.dim
    embedder = EmbedderSpec(kind="hashing", dimension=settings["dim"])
    backbone = BackboneSpec(
        hidden_dim=settings["d_h"], layers=settings["layers"],
        seed=settings["seed"],
    )
    return TrainConfig(
        epochs=settings["epochs"],
        lr=settings["lr"],
        weight_decay=settings["weight_decay"],
        lam=settings["lam"],
        seed=settings["seed"],
        d_h=settings["d_h"],
        embedder=embedder,
        backbone=backbone,
        with_gt=settings["with_gt"],
        exclude_labeled_steps=settings["exclude_labeled_steps"],
    )


def _config_echo(cfg: TrainConfig) -> dict:
    return {
        "epochs": cfg.epochs, "lr": cfg.lr, "weight_decay": cfg.weight_decay,
        "lambda": cfg.lam, "seed": cfg.seed, "d_h": cfg.d_h,
        "d_e": cfg.embedder.dimension, "layers": cfg.backbone.layers,
        "with_gt": cfg.with_gt, "exclude_labeled_steps": cfg.exclude_labeled_steps,
    }


def _write_text(path: str | None, text: str):
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_ingest(args) -> int:
    trajectories = load_trajectories(args.traces, strict=args.strict)
    if args.out:
        save_trajectories(args.out, trajectories)
    labeled = sum(1 for t in trajectories if t.labeled_steps)
    report = {
        "version": __version__,
        "trajectories": len(trajectories),
        "steps": sum(len(t) for t in trajectories),
        "labeled_trajectories": labeled,
    }
    sys.stdout.write(json.dumps(report, indent=2) + "\n")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve_train_config(args)
    trajectories = load_trajectories(args.traces, strict=args.strict)
    if not trajectories:
        raise DataError("no trajectories in input")
    model, report = train(cfg, trajectories)
    digest = save_checkpoint(model, None, args.checkpoint, lam=cfg.lam)
    payload = report.to_dict()
    payload["checkpoint_digest"] = digest
    payload["config"] = _config_echo(cfg)
    payload["version"] = __version__
    text = json.dumps(payload, indent=2) + "\n"
    if args.report:
        _write_text(args.report, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    trajectories = load_trajectories(args.traces, strict=args.strict)
    calibration = calibrate_threshold(
        model, trajectories, quantile=args.quantile,
        alpha=args.alpha, beta=args.beta,
    )
    out_path = args.out or args.checkpoint
    save_checkpoint(model, calibration, out_path)
    sys.stdout.write(
        json.dumps(
            {
                "version": __version__,
                "delta": calibration.delta,
                "quantile": calibration.quantile,
                "alpha": calibration.alpha,
                "beta": calibration.beta,
                "stats": calibration.stats,
                "checkpoint": out_path,
            },
            indent=2,
        )
        + "\n"
    )
    return EXIT_OK


def _score_rows(model, calibration, trajectories, alpha, beta, delta):
    if alpha is None:
        alpha = calibration.alpha if calibration else 1.0
    if beta is None:
        beta = calibration.beta if calibration else 1.0
    if delta is None:
        delta = calibration.delta if calibration else math.inf
    for trajectory in trajectories:
        q_vec, step_embs = embed_trajectory(
            model.embedder, trajectory, with_gt=model.with_gt
        )
        for v in score_trajectory(model, q_vec, step_embs, alpha, beta, delta):
            yield trajectory, v


def cmd_score(args) -> int:
    model, calibration = load_checkpoint(args.checkpoint)
    trajectories = load_trajectories(args.traces, strict=args.strict)
    if not trajectories:
        raise DataError("no trajectories in input")
    rows = ["trajectory_id,t,score,recon_term,proto_term,flagged"]
    for trajectory, v in _score_rows(
        model, calibration, trajectories, args.alpha, args.beta, args.delta
    ):
        rows.append(
            f"{trajectory.id},{v.t},{v.score:.17g},{v.recon_term:.17g},"
            f"{v.proto_term:.17g},{int(v.flagged)}"
        )
    _write_text(args.out, "\n".join(rows) + "\n")
    return EXIT_OK


def _scored_steps_from_csv(path: str, trajectories) -> list[ScoredStep]:
    labels = {
        (t.id, i): s.label
        for t in trajectories
        for i, s in enumerate(t.steps, start=1)
    }
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["trajectory_id"], int(row["t"]))
            label = labels.get(key)
            if label is None:
                raise DataError(f"no label for step {key}")
            out.append(
                ScoredStep(
                    trajectory_id=row["trajectory_id"],
                    t=int(row["t"]),
                    score=float(row["score"]),
                    label=label,
                    flagged=bool(int(row["flagged"])),
                )
            )
    return out


def cmd_eval(args) -> int:
    trajectories = load_trajectories(args.traces, strict=args.strict)
    if args.scores is None and args.checkpoint is None:
        raise ConfigError("eval needs --scores or --checkpoint")
    if args.scores:
        scored = _scored_steps_from_csv(args.scores, trajectories)
    else:
        model, calibration = load_checkpoint(args.checkpoint)
        scored = []
        for trajectory, v in _score_rows(
            model, calibration, trajectories, args.alpha, args.beta, None
        ):
            label = trajectory.steps[v.t - 1].label
            if label is None:
                raise DataError(
                    f"unlabeled step {v.t} in trajectory {trajectory.id!r}"
                )
            scored.append(
                ScoredStep(
                    trajectory_id=trajectory.id, t=v.t, score=v.score,
                    label=label, flagged=v.flagged,
                )
            )
    report = compute_metrics(scored, bins=args.bins if args.hist else None)
    if args.hist:
        _write_text(args.hist, report.histogram.to_csv())
    payload = report.to_dict()
    payload["version"] = __version__
    _write_text(args.out, json.dumps(payload, indent=2) + "\n")
    return EXIT_OK


def cmd_diag(args) -> int:
    trajectories = load_trajectories(args.traces, strict=args.strict)
    embedder = EmbedderSpec(kind="hashing", dimension=args.dim)
    raw = embedding_distance_diagnostics(trajectories, embedder)
    augmented = embedding_distance_diagnostics(
        trajectories, embedder, augment_nearest_neighbor=True
    )
    histogram = error_position_histogram(trajectories, bins=args.bins)
    payload = {
        "version": __version__,
        "raw": {"inter": raw.inter, "intra": raw.intra},
        "nn_augmented": {"inter": augmented.inter, "intra": augmented.intra},
        "n_normal_steps": raw.n_normal,
        "n_error_steps": raw.n_error,
        "error_position_histogram": histogram,
        "bins": args.bins,
        "embedder_dim": args.dim,
    }
    _write_text(args.out, json.dumps(payload, indent=2) + "\n")
    return EXIT_OK


def cmd_simulate(args) -> int:
    topologies = (
        ("chain", "complete", "random") if args.topology == "all" else (args.topology,)
    )
    try:
        target = int(args.target_agent)
    except ValueError:
        target = args.target_agent
        if target != "random":
            raise ConfigError("--target-agent must be an index or 'random'")
    try:
        selector: int | str = int(args.step_selector)
    except ValueError:
        selector = args.step_selector
        if selector not in ("uniform", "early"):
            raise ConfigError("--step-selector must be an index, 'uniform', or 'early'")
    config = ExperimentConfig(
        topologies=topologies,
        n_fixtures=args.fixtures,
        n_agents=args.agents,
        rounds=args.rounds,
        seed=args.seed,
        fault=FaultSpec(
            target_agent=target, step_selector=selector, corruption=args.corruption
        ),
        masc=MascSettings(
            quantile=args.quantile, epochs=args.epochs, lr=args.lr, lam=args.lam,
            d_e=args.dim, d_h=args.hidden, delta_override=args.delta,
        ),
        with_masc_cells=args.masc in ("on", "both"),
        jobs=args.jobs,
    )
    report = batch_experiment(config)
    wanted_faults = {"on": [True], "off": [False], "both": [False, True]}[args.fault]
    wanted_masc = {"on": [True], "off": [False], "both": [False, True]}[args.masc]
    report.cells = [
        c for c in report.cells
        if c.faulted in wanted_faults and c.masc_on in wanted_masc
    ]
    payload = report.to_dict()
    payload["version"] = __version__
    if args.csv:
        _write_text(args.csv, report.to_csv())
    if args.dump_traces:
        from .experiment import dump_cell_traces

        dump_cell_traces(config, report, args.dump_traces)
    _write_text(args.out, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


_COMMANDS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "score": cmd_score,
    "eval": cmd_eval,
    "diag": cmd_diag,
    "simulate": cmd_simulate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MascError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
