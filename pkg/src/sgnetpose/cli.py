"""Command-line entry point: synth, prepare, train, evaluate, ablate, predict, gradcheck.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 failed internal check. Log verbosity comes from SGNETPOSE_LOG_LEVEL.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, data, training
from .autodiff import RngState
from .data import FEATURE_MODES, PrepareConfig, stable_hash
from .errors import CheckFailure, ConfigError, DataError, UsageError
from .metrics import CORNERS, MetricAccumulator, best_of_k
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .synth import SynthConfig, synth_generate

log = logging.getLogger("sgnetpose")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 2, 3, 4
LOG_ENV = "SGNETPOSE_LOG_LEVEL"


def run_config(args: argparse.Namespace) -> dict:
    """Flags that define a run; output locations are left out so reruns elsewhere hash the same."""
    skip = {"func", "out"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


# -- subcommands -----------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = SynthConfig(width=args.width, height=args.height, lean_lead=args.lean_lead)
    anns = synth_generate(args.tracks, RngState(args.seed), cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data.write_jsonl(anns, out)
    print(f"wrote {len(anns)} frame records for {args.tracks} tracks to {out}")
    return EXIT_OK


def cmd_prepare(args) -> int:
    cfg = PrepareConfig(obs_len=args.obs_len, pred_len=args.pred_len, stride=args.stride,
                        require_pose=not args.keep_poseless, min_confidence=args.min_confidence,
                        flip_augment=args.flip_augment, flip_all_splits=args.flip_all_splits,
                        val_fraction=args.val_fraction, test_fraction=args.test_fraction, seed=args.seed)
    result = data.ingest(args.input, strict=args.strict)
    stats = {"records": len(result.annotations), "rejected": result.rejected_count, "clamped": result.clamped}
    if not result.annotations:
        raise DataError(f"{args.input}: no usable records")
    splits, manifest = data.prepare_dataset(result.annotations, cfg, stats)
    data.write_prepared(args.out, splits, manifest)
    print(f"ingested {stats['records']} records ({stats['rejected']} rejected, {stats['clamped']} clamped)")
    print("split  windows  with_pose  dropped  samples")
    for name in data.SPLITS:
        c = manifest["counts"][name]
        dropped = c["windows"] - c["with_pose"] if cfg.require_pose else 0
        print(f"{name:<6} {c['windows']:>7}  {c['with_pose']:>9}  {dropped:>7}  {c['samples']:>7}")
    print(f"manifest hash {manifest['content_hash']}")
    return EXIT_OK


def _model_config(args, manifest: dict) -> ModelConfig:
    if args.features not in FEATURE_MODES:
        raise ConfigError(f"unknown feature mode {args.features!r}; expected one of {', '.join(FEATURE_MODES)}")
    if args.features not in manifest.get("feature_modes", FEATURE_MODES):
        raise ConfigError(f"dataset was prepared without pose filtering; feature mode {args.features!r} "
                          "needs --features bbox or a pose-filtered dataset")
    return ModelConfig(obs_len=manifest["obs_len"], pred_len=manifest["pred_len"], features=args.features,
                       embed_dim=args.embed_dim, hidden_dim=args.hidden_dim, latent_dim=args.latent_dim,
                       dropout=args.dropout, k=args.k_eval).validate()


def _train_config(args) -> training.TrainConfig:
    return training.TrainConfig(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
                                seed=getattr(args, "seed", 0), k_train=args.k_train, k_eval=args.k_eval, goal_weight=args.goal_weight,
                                kl_weight=args.kl_weight, kl_warmup=args.kl_warmup,
                                patience=args.patience or None, corner=args.corner).validate()


def cmd_train(args) -> int:
    manifest = data.read_manifest(args.data)
    mcfg = _model_config(args, manifest)
    tcfg = _train_config(args)
    result = training.train(mcfg, data.load_split(args.data, "train"), data.load_split(args.data, "val"), tcfg)
    out = Path(args.out)
    run = run_config(args)
    save_checkpoint(result.params, out / "checkpoint", extra={
        "run": run, "run_hash": stable_hash(run), "train": asdict(tcfg),
        "dataset_hash": manifest["content_hash"], "best_epoch": result.best_epoch,
    })
    training.write_text(out / "curve.csv", result.curve_csv())
    print(f"trained {mcfg.features} for {len(result.curve)} epoch(s), best epoch {result.best_epoch}; "
          f"config hash {mcfg.config_hash()}")
    return EXIT_OK


def _read_predictions(path) -> dict[tuple, np.ndarray]:
    """key -> candidate boxes [K, l_d, 4] from a predict-style JSONL file."""
    out = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                key = (rec["video_id"], rec["track_id"], rec["start_frame"], rec.get("flipped", False))
                cands = np.array(rec.get("samples") or [rec["boxes"]], dtype=np.float64)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: bad prediction record ({exc})") from None
            if cands.ndim != 3 or cands.shape[-1] != 4:
                raise DataError(f"{path}:{lineno}: boxes must be [steps][4]")
            out[key] = cands
    return out


def cmd_evaluate(args) -> int:
    if (args.checkpoint is None) == (args.predictions is None):
        raise UsageError("evaluate needs exactly one of --checkpoint or --predictions")
    data.read_manifest(args.data)
    samples = data.load_split(args.data, args.split)
    if args.checkpoint:
        params, _ = load_checkpoint(args.checkpoint)
        report = training.evaluate(params, samples, args.k, RngState(args.seed).child("test"), corner=args.corner,
                                   split=args.split)
    else:
        preds = _read_predictions(args.predictions)
        acc = MetricAccumulator(args.corner)
        for s in samples:
            if s.key not in preds:
                raise DataError(f"no prediction for window {s.key}")
            cands = preds[s.key]
            if cands.shape[1] != s.pred_len:
                raise DataError(f"prediction for {s.key} has {cands.shape[1]} steps, expected {s.pred_len}")
            chosen, _ = best_of_k(cands[None], s.future_boxes[None])
            acc.add(chosen, s.future_boxes[None])
        report = acc.report(hashlib.sha256(Path(args.predictions).read_bytes()).hexdigest()[:16], args.split)
    if args.out:
        report.write_csv(args.out)
    sys.stdout.write(report.to_csv())
    if report.corner == "top-left":
        log.info("cmse/cfmse track the top-left box corner (use --corner centroid for box centres)")
    return EXIT_OK


def cmd_ablate(args) -> int:
    manifest = data.read_manifest(args.data)
    features = [f.strip() for f in args.features.split(",") if f.strip()]
    seeds = args.seeds
    configs = []
    for f in features:
        args.features = f
        configs.append(_model_config(args, manifest))
    args.features = ",".join(features)
    splits = {name: data.load_split(args.data, name) for name in data.SPLITS}
    rows = training.ablation_run(configs, splits, seeds, _train_config(args))
    text = training.ablation_csv(rows)
    if args.out:
        training.write_text(args.out, text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_predict(args) -> int:
    params, _ = load_checkpoint(args.checkpoint)
    cfg = params.config
    result = data.ingest(args.input, strict=args.strict)
    windows = data.build_observations(result.annotations, cfg.obs_len, args.stride, cfg.uses_pose,
                                      args.min_confidence)
    rng = RngState(args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", encoding="utf-8", newline="\n") as fh:
        for i, batch in enumerate(data.make_batches(windows, args.batch_size, cfg.features)):
            point = training.predict_batch(params, batch, 1, None, deterministic=True)[:, 0]
            samples = training.predict_batch(params, batch, args.k, rng.child("predict", i)) if args.samples else None
            for j, s in enumerate(batch.samples):
                rec = {"video_id": s.video_id, "track_id": s.track_id, "start_frame": s.start_frame,
                       "flipped": s.flipped, "boxes": point[j].tolist()}
                if samples is not None:
                    rec["samples"] = samples[j].tolist()
                fh.write(json.dumps(rec) + "\n")
    print(f"wrote predictions for {len(windows)} window(s) to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import model_gradcheck

    features = [f.strip() for f in args.features.split(",")]
    worst = 0.0
    failures = []
    for seed in range(args.seed, args.seed + args.seeds):
        for f in features:
            report = model_gradcheck(seed, f, max_entries=args.max_entries or None)
            worst = max(worst, report.max_rel_error)
            log.info("gradcheck seed %d %s: max rel err %.3g (%d kinks skipped)", seed, f,
                     report.max_rel_error, report.skipped)
            if not report.passed(args.tol):
                failures.append((seed, f, report.max_rel_error))
    print(f"max relative error {worst:.3e} over {args.seeds} seed(s) x {len(features)} mode(s), tolerance {args.tol:g}")
    if failures:
        raise CheckFailure(f"gradient check failed: {failures}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------

def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("need at least one value")
    return values


def _model_flags(p: argparse.ArgumentParser, multi_features: bool = False) -> None:
    m, t = ModelConfig(), training.TrainConfig()
    if multi_features:
        p.add_argument("--features", default=",".join(FEATURE_MODES), help="comma-separated feature modes")
    else:
        p.add_argument("--features", default=m.features, choices=FEATURE_MODES)
    p.add_argument("--embed-dim", type=int, default=m.embed_dim)
    p.add_argument("--hidden-dim", type=int, default=m.hidden_dim)
    p.add_argument("--latent-dim", type=int, default=m.latent_dim)
    p.add_argument("--dropout", type=float, default=m.dropout)
    p.add_argument("--epochs", type=int, default=t.epochs)
    p.add_argument("--lr", type=float, default=t.lr)
    p.add_argument("--batch-size", type=int, default=t.batch_size)
    p.add_argument("--k-train", type=int, default=t.k_train, help="latent samples per window in the best-of-K loss")
    p.add_argument("--k-eval", type=int, default=t.k_eval, help="prior samples for validation/test best-of-K")
    p.add_argument("--goal-weight", type=float, default=t.goal_weight)
    p.add_argument("--kl-weight", type=float, default=t.kl_weight)
    p.add_argument("--kl-warmup", type=int, default=t.kl_warmup)
    p.add_argument("--patience", type=int, default=t.patience or 0,
                   help="early-stopping patience in epochs (0 disables)")
    p.add_argument("--corner", choices=CORNERS, default=t.corner)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgnetpose", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic gait dataset (JSONL)")
    p.add_argument("--out", required=True)
    p.add_argument("--tracks", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=1920)
    p.add_argument("--height", type=int, default=1080)
    p.add_argument("--lean-lead", type=int, default=20, help="frames the lean precedes each motion change")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="window, filter, split and augment annotations")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--obs-len", type=int, default=15)
    p.add_argument("--pred-len", type=int, default=45)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--flip-augment", action="store_true")
    p.add_argument("--flip-all-splits", action="store_true", help="also mirror val/test windows")
    p.add_argument("--keep-poseless", action="store_true", help="keep windows without pose (bbox-only use)")
    p.add_argument("--min-confidence", type=float, default=0.3)
    p.add_argument("--val-fraction", type=float, default=0.15)
    p.add_argument("--test-fraction", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--strict", action="store_true", help="fail on the first malformed line")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one model; writes checkpoint.{json,bin} and curve.csv")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="best-of-K metrics for a checkpoint or a predictions file")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--predictions")
    p.add_argument("--split", choices=data.SPLITS, default="test")
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corner", choices=CORNERS, default="top-left")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train/test each feature mode over several seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", type=_int_list, default="0,1,2,3,4", help="comma-separated seeds")
    p.add_argument("--out")
    _model_flags(p, multi_features=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("predict", help="predict future boxes for observation windows")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--samples", action="store_true", help="also write K sampled trajectories per window")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--min-confidence", type=float, default=0.3)
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model on a tiny config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    p.add_argument("--features", default=",".join(FEATURE_MODES))
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-entries", type=int, default=8, help="coordinates per tensor (0 = all)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _configure_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        raise UsageError(f"{LOG_ENV} must be DEBUG, INFO, WARNING, ERROR or CRITICAL, got {level!r}")
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def main(argv: list[str] | None = None) -> int:
    try:
        _configure_logging()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckFailure as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
