"""Command line front end: simulate, train, score, match-eval.

Each stage reads and writes files only, so any stage can be rerun from the
outputs of the previous one. Exit codes: 0 success, 2 usage or configuration
error, 3 data or contract error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import pandas as pd

from . import __version__, checkpoint, io
from . import config as config_mod
from .errors import (
    ConfigError,
    DataFormatError,
    DegenerateInputError,
    NumericFailure,
    OrderingError,
    ShapeError,
    StateError,
)
from .estimator import OracleEstimator
from .pipeline import Dataset, match_and_evaluate, prepare, score_pairs
from .simulator import generate_scenario
from .training import TrainConfig, build_pairs, fit, new_model, split_by_individual, train

log = logging.getLogger("imumatch")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(Exception):
    """Input files missing or inconsistent with each other."""


def _config(args) -> config_mod.Config:
    if args.config is None:
        return config_mod.from_dict({}, args.seed)
    return config_mod.load(args.config, args.seed)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise DataError(f"{what} not found: {path}")
    return path


def _write_manifest(out: Path, stage: str, args, cfg, inputs: dict, outputs: dict) -> Path:
    manifest = {
        "stage": stage,
        "toolkit_version": __version__,
        "config": None if args.config is None else str(args.config),
        "seed": cfg.seed,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
    }
    path = out / f"{stage}.manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _prepared(cfg, data: Path):
    ds = Dataset.load(_require(data, "dataset directory"))
    p = cfg.preprocess
    return ds, prepare(ds, p.rate, p.track_sigma, p.sensor_sigma)


# --------------------------------------------------------------------------- stages


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    scenario = generate_scenario(cfg.scenario)
    paths = Dataset.from_scenario(scenario).save(out)
    _write_manifest(out, "simulate", args, cfg, {}, {p.stem: p for p in paths})
    print(f"wrote {len(scenario.tracks)} tracks and {len(scenario.sensors)} sensor records to {out}")
    return EXIT_OK


def _train_one(prepared, tcfg: TrainConfig, out: Path, stem: str, resume: Path | None):
    if resume is not None:
        model, extra, opt = checkpoint.load_full(_require(resume, "checkpoint"))
        if model.W != tcfg.W:
            raise DataError(f"checkpoint W={model.W} but config W={tcfg.W}")
        if model.kind != tcfg.estimator:
            raise DataError(f"checkpoint holds a {model.kind!r} model but config asks for {tcfg.estimator!r}")
        split = split_by_individual(prepared, tcfg.split_ratio, tcfg.seed)
        tr = build_pairs(split.train, tcfg.W, tcfg.stride_train, tcfg.rho_neg, tcfg.seed, tcfg.neg_mix)
        va = (build_pairs(split.val, tcfg.W, tcfg.stride_val, tcfg.val_rho, tcfg.seed + 1, tcfg.neg_mix)
              if split.val_ids else None)
        history = [tuple(h) for h in extra.get("history", [])]
        result = train(model, tr, va, tcfg, history=history, optimizer=opt)
    else:
        result, split = fit(prepared, tcfg, new_model(tcfg))
    extra = {"history": result.history, "best_epoch": result.best_epoch, "config": tcfg.to_dict(),
             "train_ids": split.train_ids, "val_ids": split.val_ids}
    ckpt = checkpoint.save(result.model, out / f"{stem}.ckpt", extra=extra, optimizer=result.optimizer)
    loss = io.write_loss_history(result.history, out / f"{stem}_loss.csv")
    return result, ckpt, loss


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = Path(args.data)
    _, prepared = _prepared(cfg, data)
    tcfg = cfg.training
    if args.W is not None:
        tcfg = TrainConfig(**{**tcfg.to_dict(), "W": args.W})
    outputs = {}
    if args.grid:
        rows = []
        for W in args.grid_W:
            for rho in args.grid_rho:
                cell = TrainConfig(**{**tcfg.to_dict(), "W": W, "rho_neg": rho})
                result, ckpt, loss = _train_one(prepared, cell, out, f"model_W{W}_rho{rho:g}", None)
                rows.append({"rho_neg": rho, "W": W, "val_loss": result.best_val_loss})
                outputs[ckpt.stem] = ckpt
        table = pd.DataFrame(rows).pivot(index="rho_neg", columns="W", values="val_loss")
        table.columns = [f"W{c}" for c in table.columns]
        table = table.reset_index()
        table.to_csv(out / "grid.csv", index=False, float_format=io.FLOAT_FORMAT, lineterminator="\n")
        outputs["grid"] = out / "grid.csv"
        print(table.to_string(index=False))
    else:
        resume = Path(args.resume) if args.resume else None
        result, ckpt, loss = _train_one(prepared, tcfg, out, "model", resume)
        outputs.update(checkpoint=ckpt, loss=loss)
        print(f"best epoch {result.best_epoch}: validation loss {result.best_val_loss:.5f}; wrote {ckpt}")
    _write_manifest(out, "train", args, cfg, {"data": data, "resume": args.resume}, outputs)
    return EXIT_OK


def cmd_score(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    data = Path(args.data)
    sc = cfg.scoring
    estimator = args.estimator or sc.estimator
    stride = args.stride or sc.stride
    ds, prepared = _prepared(cfg, data)
    inputs = {"data": data}
    if estimator == "oracle":
        W = args.W or sc.W or cfg.training.W
        labels = ds.labels()
        if any(tr.track_id not in labels for tr in ds.tracks):
            raise DataError("oracle scoring needs a label for every track")
        model = OracleEstimator(labels, W, prepared.channel_stats())
    else:
        if not args.checkpoint:
            raise ConfigError(f"--checkpoint is required for the {estimator} estimator", "checkpoint")
        ckpt = _require(Path(args.checkpoint), "checkpoint")
        model = checkpoint.load(ckpt)
        inputs["checkpoint"] = ckpt
        if model.kind != estimator:
            raise DataError(f"checkpoint holds a {model.kind!r} model, not {estimator!r}")
        W = args.W or sc.W
        if W is not None and W != model.W:
            raise DataError(f"checkpoint W={model.W} does not match requested W={W}")
        if not model.stats.frozen:
            raise DataError("checkpoint running statistics are not frozen")
    scores = score_pairs(prepared, model, stride)
    path = io.write_scores(scores, out / "scores.csv")
    (out / "scores.json").write_text(json.dumps({"W": model.W, "estimator": estimator, "stride": stride},
                                                sort_keys=True) + "\n")
    _write_manifest(out, "score", args, cfg, inputs, {"scores": path})
    print(f"scored {len(scores)} windows (W={model.W}, {estimator}) -> {path}")
    return EXIT_OK


def cmd_match_eval(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    scores_path = _require(Path(args.scores), "scores file")
    scores = io.read_scores(scores_path)
    W = args.W
    meta_path = scores_path.with_suffix(".json")
    if W is None and meta_path.exists():
        W = json.loads(meta_path.read_text()).get("W")
    if W is None:
        W = cfg.scoring.W or cfg.training.W
    m = cfg.matching
    R = args.R_csdr if args.R_csdr is not None else m.R_csdr
    P = args.P_acpt if args.P_acpt is not None else m.P_acpt
    if args.N_min is not None:
        m = config_mod.MatchingConfig(R, P, args.N_min)
    else:
        m = config_mod.MatchingConfig(R, P, m.N_min, m.N_min_windows)
    mcfg = m.resolve(int(W))

    data = Path(args.data) if args.data else None
    truth_path = Path(args.truth) if args.truth else (data / "truth.csv" if data else None)
    if truth_path is None:
        raise ConfigError("--truth or --data is required", "truth")
    truth = io.read_truth(_require(truth_path, "truth file"))
    durations, participants = None, set(scores["sensor_id"])
    if data is not None and (data / "tracks.csv").exists():
        durations = {tr.track_id: tr.duration for tr in io.read_tracks(data / "tracks.csv")}
    if data is not None and (data / "sensors.csv").exists():
        participants |= {s.participant_id for s in io.read_sensors(data / "sensors.csv")}
    participants |= {v for v in truth.values() if v is not None}

    result = match_and_evaluate(scores, mcfg, truth, participants, durations)
    dec = io.write_decisions(result.decisions, out / "decisions.csv")
    met = io.write_metrics(result.report, out / "metrics.csv")
    _write_manifest(out, "match-eval", args, cfg, {"scores": scores_path, "truth": truth_path},
                    {"decisions": dec, "metrics": met})
    rep = result.report
    fmt = lambda v: f"{v:.4f}" if isinstance(v, float) else str(v)
    print(f"thresholds R_csdr={mcfg.R_csdr} P_acpt={mcfg.P_acpt} N_min={mcfg.N_min} (W={W})")
    print(f"PP {fmt(rep.PP)}  PR {fmt(rep.PR)}  PF {fmt(rep.PF)}  |  weighted PP {fmt(rep.PP_w)}  "
          f"PR {fmt(rep.PR_w)}  PF {fmt(rep.PF_w)}")
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="imumatch", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"imumatch {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate a synthetic scene")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", parents=[common], help="train an estimator")
    p.add_argument("--data", required=True, help="dataset directory (tracks.csv, sensors.csv)")
    p.add_argument("--W", type=int, help="window length, overrides training.W")
    p.add_argument("--resume", help="checkpoint to continue training from")
    p.add_argument("--grid", action="store_true", help="train every (W, rho_neg) cell")
    p.add_argument("--grid-W", type=int, nargs="+", default=[100, 300, 600])
    p.add_argument("--grid-rho", type=float, nargs="+", default=[1, 4, 16, 64, 256])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", parents=[common], help="score every window of every pair")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--checkpoint", help="trained model (not needed for the oracle)")
    p.add_argument("--estimator", choices=config_mod.ESTIMATORS)
    p.add_argument("--W", type=int, help="window length; must match the checkpoint")
    p.add_argument("--stride", type=int)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("match-eval", parents=[common], help="match tracks to sensors and compute metrics")
    p.add_argument("--scores", required=True, help="scores.csv from the score stage")
    p.add_argument("--data", help="dataset directory (truth.csv, tracks.csv for durations)")
    p.add_argument("--truth", help="ground-truth CSV, overrides <data>/truth.csv")
    p.add_argument("--W", type=int, help="window length used for scoring")
    p.add_argument("--R-csdr", dest="R_csdr", type=float)
    p.add_argument("--P-acpt", dest="P_acpt", type=float)
    p.add_argument("--N-min", dest="N_min", type=int)
    p.set_defaults(func=cmd_match_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, DataFormatError, DegenerateInputError, ShapeError, OrderingError, StateError,
            FileNotFoundError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
