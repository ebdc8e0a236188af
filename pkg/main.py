import argparse
import logging
import sys
from pathlib import Path

from config import LOG_LEVEL, MODES, load_run_config
from dataset import (
    PRESETS, load_dataset, save_dataset, split_by, compute_alpha,
    gen_synthetic_xor, gen_synthetic_clusters, synthetic_meta,
)
from errors import FNRError, ConfigError, DataError, NumericError
from ablation import run_ablation
from report import report_text, write_run_reports, write_roc_csv, describe_text, gradcheck_text, ablation_text
from trainer import run_training, evaluate_checkpoint, run_gradcheck, worst_by_group

logger = logging.getLogger()

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


def setup_logging(level=LOG_LEVEL):
    """Console logging; run commands add a file handler in their run directory."""
    logger.setLevel(level)
    if not any(isinstance(h, logging.StreamHandler) and not isinstance(h, logging.FileHandler) for h in logger.handlers):
        console_handler = logging.StreamHandler()
        console_handler.setFormatter(logging.Formatter(LOG_FORMAT, DATE_FORMAT))
        logger.addHandler(console_handler)


def attach_run_log(run_dir):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    file_handler = logging.FileHandler(run_dir / "fnr.log", encoding="utf-8")
    file_handler.setFormatter(logging.Formatter(LOG_FORMAT, DATE_FORMAT))
    logger.addHandler(file_handler)
    return file_handler


def _run_config(args):
    return load_run_config(
        args.config,
        seed=args.seed,
        output_dir=args.out,
        mode=getattr(args, "mode", None),
        dataset=args.dataset,
    )


# ---------------------------------------------------------------------- #
# commands
# ---------------------------------------------------------------------- #
def cmd_train(args):
    config = _run_config(args)
    handler = attach_run_log(config.output_dir)
    try:
        logger.info("=" * 60)
        logger.info(f"  TRAIN {config.mode} | dataset {config.dataset} | seed {config.seed}")
        logger.info("=" * 60)
        run_dir, report, result = run_training(config, resume=args.resume)
        print(report_text(report, title=f"{config.mode} (best epoch {result.best_epoch})"))
        logger.info(f"✅ Run complete: {run_dir}")
    finally:
        logger.removeHandler(handler)
        handler.close()
    return 0


def _checkpoint_dataset(args):
    """--dataset, else DATASET from --config; the config file is validated either way."""
    config = load_run_config(args.config, dataset=args.dataset)
    dataset = config.dataset
    if not dataset:
        raise ConfigError("No dataset: pass --dataset or set DATASET in --config")
    return dataset


def cmd_evaluate(args):
    report = evaluate_checkpoint(args.checkpoint, _checkpoint_dataset(args), split=args.split)
    print(report_text(report, title=f"{Path(args.checkpoint).name} on {args.split}"))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        write_run_reports(report, args.out)
    return 0


def cmd_ablate(args):
    config = _run_config(args)
    handler = attach_run_log(config.output_dir)
    try:
        frame = run_ablation(config)
        print(ablation_text(frame))
    finally:
        logger.removeHandler(handler)
        handler.close()
    return 0


def cmd_gradcheck(args):
    config = load_run_config(args.config, seed=args.seed)
    result = run_gradcheck(inject_fault=args.inject_fault, seed=config.seed)
    print(gradcheck_text(result, worst_by_group(result)))
    if not result.passed:
        raise NumericError(f"Gradient check failed for: {', '.join(result.offending)}")
    return 0


def cmd_export_roc(args):
    report = evaluate_checkpoint(args.checkpoint, _checkpoint_dataset(args), split=args.split)
    path = write_roc_csv(report.roc, args.out)
    logger.info(f"ROC ({len(report.roc)} points, AUC {report.auc:.4f}) written to {path}")
    return 0


def cmd_synth(args):
    if args.kind == "xor":
        records = gen_synthetic_xor(args.n, args.d, args.seed or 0)
    else:
        records = gen_synthetic_clusters(args.n, args.d, args.seed or 0, args.separation)
    path = save_dataset(records, synthetic_meta(args.name or args.kind, records), args.out, fmt=args.format)
    logger.info(f"Synthetic {args.kind} dataset ({len(records)} records) written to {path}")
    return 0


def cmd_describe(args):
    records, meta = load_dataset(args.dataset)
    try:
        balance = compute_alpha([r.label for r in split_by(records, "train")])
    except DataError as e:
        logger.warning(f"No balancing factor: {e}")
        balance = None
    print(describe_text(meta, balance, PRESETS.get(meta.name)))
    return 0


# ---------------------------------------------------------------------- #
# argument parsing
# ---------------------------------------------------------------------- #
def _run_flags(parser, with_mode=True):
    parser.add_argument("--config", help="run config file (KEY=VALUE lines)")
    parser.add_argument("--dataset", help="dataset manifest (overrides DATASET)")
    parser.add_argument("--seed", type=int, help="overrides SEED")
    parser.add_argument("--out", help="run directory (overrides OUTPUT_DIR)")
    if with_mode:
        parser.add_argument("--mode", choices=MODES, help="overrides MODE")


def build_parser():
    parser = argparse.ArgumentParser(prog="fnr", description="FNR multimodal fake news detection head")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one mode and evaluate it on test")
    _run_flags(p)
    p.add_argument("--resume", help="continue from a last.fnrc checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="dataset manifest (overrides DATASET)")
    p.add_argument("--config", help="run config file (KEY=VALUE lines)")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out", help="also write report.txt / report.json / roc.csv here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train all four modes and tabulate them")
    _run_flags(p, with_mode=False)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="run config file (SEED is used)")
    p.add_argument("--inject-fault", metavar="PARAM", help="scale PARAM's analytic gradient by 1.1")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-roc", help="write the ROC polyline of a checkpoint as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="dataset manifest (overrides DATASET)")
    p.add_argument("--config", help="run config file (KEY=VALUE lines)")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_export_roc)

    p = sub.add_parser("synth", help="write a synthetic embedding dataset")
    p.add_argument("--kind", choices=("xor", "clusters"), default="xor")
    p.add_argument("--n", type=int, default=4000)
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--seed", type=int)
    p.add_argument("--separation", type=float, default=6.0)
    p.add_argument("--format", choices=("jsonl", "binary"), default="jsonl")
    p.add_argument("--name")
    p.add_argument("--out", required=True, help="manifest path")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("describe", help="print a dataset's distribution table")
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_describe)
    return parser


def main(argv=None):
    setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # usage errors map to the config exit code
        return 0 if e.code in (0, None) else 1
    try:
        return args.func(args)
    except FNRError as e:
        logger.error(f"❌ {e}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        logger.info("Stopped by user.")
        return 130


if __name__ == "__main__":
    sys.exit(main())
