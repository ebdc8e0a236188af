"""
Ablation: train text-only, image-only, FNR-WS and FNR-S on the same data,
splits and seed, then tabulate their test metrics side by side.
"""

import logging
from dataclasses import replace
from pathlib import Path

from config import MODES
from dataset import load_dataset
from errors import ConfigError
from report import ablation_frame, write_ablation
from trainer import run_training

logger = logging.getLogger(__name__)


def run_ablation(config, records=None):
    """Returns the 4-row ablation DataFrame (index = mode)."""
    if records is None:
        if not config.dataset:
            raise ConfigError("DATASET is not set")
        records, _ = load_dataset(config.dataset)

    out_dir = Path(config.output_dir)
    reports = {}
    for mode in MODES:
        logger.info("=" * 60)
        logger.info(f"  ABLATION: {mode}")
        logger.info("=" * 60)
        mode_config = replace(config, mode=mode, output_dir=str(out_dir / mode))
        _, reports[mode], _ = run_training(mode_config, records=records)
        logger.info(f"{mode}: accuracy {reports[mode].accuracy:.4f}, AUC {reports[mode].auc:.4f}")

    frame = ablation_frame(reports)
    write_ablation(frame, out_dir, title=f"Ablation on {Path(config.dataset).stem or 'dataset'}")
    return frame
