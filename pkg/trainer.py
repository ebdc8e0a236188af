"""
Training loop and run directory for one FNR mode.

Per epoch: seeded shuffle -> AdamW steps over the train batches (dropout on)
-> validation loss (dropout off) -> reduce-on-plateau -> early stopping.
Every random stream is derived from (seed, epoch) so a resumed run follows
the same trajectory as an uninterrupted one.
"""

import json
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from checkpoint import save_checkpoint, load_checkpoint
from config import write_resolved_config
from dataset import Batch, load_dataset, split_by, split_validation, make_batches, compute_alpha, stack
from errors import ConfigError, DataError, NumericError
from fnr_model import ModelConfig, ClassBalance, FNRParams, init_params, loss_and_grads, forward_loss, predict_proba
from metrics import evaluate
from optimizer import TrainState, default_groups, adamw_step, scheduler_update, early_stop_check
from autodiff import finite_diff_check
from report import write_run_reports

logger = logging.getLogger(__name__)

HISTORY_FILE = "history.jsonl"
BEST_CHECKPOINT = "best.fnrc"
LAST_CHECKPOINT = "last.fnrc"

# Gradient check fixture
GRADCHECK_BATCH = 4
GRADCHECK_D_IN = 8
GRADCHECK_K = 3
GRADCHECK_H = 3
GRADCHECK_ALPHA = 1.5
GRADCHECK_TOL = 1e-5


@dataclass
class EpochRecord:
    epoch: int
    l_T: float
    l_I: float
    l_s: float
    l_c: float
    total: float
    val_total: float
    lr_factor: float
    alpha: float
    lam: float

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    params: FNRParams          # best-validation snapshot
    last_params: FNRParams
    state: TrainState
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    stopped_early: bool = False


def build_model_config(config, mode=None):
    return ModelConfig(
        k=config.k,
        h=config.hidden,
        dropout_rate=config.dropout,
        lam=config.lam,
        mode=mode or config.mode,
        seed=config.seed,
        precision=config.precision,
    )


def build_groups(config):
    return default_groups(
        classifier_lr=config.classifier_lr,
        classifier_weight_decay=config.classifier_weight_decay,
        projector_lr=config.projector_lr,
        projector_weight_decay=config.projector_weight_decay,
        beta1=config.beta1,
        beta2=config.beta2,
        epsilon=config.epsilon,
    )


def epoch_rngs(seed, epoch):
    """(shuffle seed, dropout generator) for one epoch."""
    return [seed, epoch, 0], np.random.default_rng([seed, epoch, 1])


def _mean_breakdown(parts):
    """Batch-size weighted mean of (LossBreakdown, batch size) pairs."""
    n = sum(size for _, size in parts)
    keys = ("l_T", "l_I", "l_s", "l_c", "total")
    return {key: sum(getattr(bd, key) * size for bd, size in parts) / n for key in keys}


def train_model(train, val, config, balance, params=None, state=None, history=None, best=None, on_epoch=None):
    """
    Train one mode. `params`/`state`/`history`/`best` continue a previous run;
    `best` is (params, epoch, val loss). on_epoch(result) runs after every epoch.
    """
    model_config = build_model_config(config)
    groups = build_groups(config)
    d_in = train[0].text_embedding.size
    params = params if params is not None else init_params(d_in, model_config)
    state = state if state is not None else TrainState()
    result = TrainResult(params=params, last_params=params, state=state, history=list(history or []))
    if best is not None:
        result.params, result.best_epoch, result.best_val_loss = best

    val_batch = stack(val)
    logger.info(
        f"Training {model_config.mode}: {len(train)} train / {len(val)} val records, "
        f"alpha={balance.alpha:.4f} (minority {balance.minority}), epochs {state.epoch + 1}..{config.max_epochs}"
    )

    for epoch in range(state.epoch + 1, config.max_epochs + 1):
        shuffle_seed, dropout_rng = epoch_rngs(config.seed, epoch)
        parts = []
        for batch in make_batches(train, config.batch_size, seed=shuffle_seed, shuffle=True):
            try:
                breakdown, _, grads = loss_and_grads(batch, params, model_config, True, dropout_rng, balance)
            except NumericError as e:
                raise NumericError(f"epoch {epoch} step {state.step + 1}: {e}") from None
            params = FNRParams.from_dict(adamw_step(state, params.as_dict(), grads, groups))
            parts.append((breakdown, len(batch)))

        try:
            val_breakdown, _ = forward_loss(val_batch, params, model_config, balance=balance)
        except NumericError as e:
            raise NumericError(f"epoch {epoch} validation: {e}") from None
        val_total = val_breakdown.total
        if not math.isfinite(val_total):
            raise NumericError(f"epoch {epoch}: validation loss is {val_total}")

        if val_total < result.best_val_loss:
            result.params, result.best_epoch, result.best_val_loss = params, epoch, val_total

        lr_factor = scheduler_update(state, val_total, groups, config.lr_patience, config.lr_decay, config.min_lr, config.min_delta)
        stop = early_stop_check(state, val_total, config.early_stop_patience, config.min_delta)
        state.epoch = epoch

        means = _mean_breakdown(parts)
        record = EpochRecord(epoch=epoch, val_total=val_total, lr_factor=lr_factor, alpha=balance.alpha, lam=model_config.lam, **means)
        result.history.append(record)
        result.last_params = params
        logger.info(
            f"Epoch {epoch:3d} | total {record.total:.4f} (l_c {record.l_c:.4f}, l_s {record.l_s:.4f}) "
            f"| val {val_total:.4f} | lr x{lr_factor:g}"
        )
        if on_epoch is not None:
            on_epoch(result)
        if stop:
            result.stopped_early = True
            break

    logger.info(f"Best epoch {result.best_epoch} with val loss {result.best_val_loss:.4f}")
    return result


# ---------------------------------------------------------------------- #
# run directory
# ---------------------------------------------------------------------- #
def _check_splits(records):
    train, test = split_by(records, "train"), split_by(records, "test")
    if not train:
        raise DataError("Dataset has no train records")
    if len(test) < 2:
        raise DataError(f"Dataset needs at least 2 test records, has {len(test)}")
    return train, test


def prepare_data(config, records=None):
    """(train, val, test, balance); alpha comes from the full train split."""
    if records is None:
        if not config.dataset:
            raise ConfigError("DATASET is not set")
        records, _ = load_dataset(config.dataset)
    train_all, test = _check_splits(records)
    balance = compute_alpha([r.label for r in train_all])
    train, val = split_validation(train_all, config.val_fraction, config.seed)
    return train, val, test, balance


def write_history(history, run_dir):
    path = Path(run_dir) / HISTORY_FILE
    with open(path, "w", encoding="utf-8") as f:
        for record in history:
            f.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
    return path


def read_history(path, up_to_epoch):
    path = Path(path)
    if not path.is_file():
        return []
    history = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            record = EpochRecord(**json.loads(line))
            if record.epoch <= up_to_epoch:
                history.append(record)
    return history


def _checkpoint_writer(run_dir, model_config, balance):
    def on_epoch(result):
        metadata = {
            "best_epoch": result.best_epoch,
            "best_val_loss": result.best_val_loss,
            "alpha": balance.alpha,
            "minority": balance.minority,
        }
        save_checkpoint(run_dir / LAST_CHECKPOINT, result.last_params, model_config, result.state, metadata)
        if result.best_epoch == result.state.epoch:
            save_checkpoint(run_dir / BEST_CHECKPOINT, result.params, model_config, metadata=metadata)
        write_history(result.history, run_dir)
    return on_epoch


def _resume_from(path, config):
    last = load_checkpoint(path)
    if last.state is None:
        raise DataError(f"{path}: checkpoint carries no optimizer state; cannot resume")
    if last.model_config != build_model_config(config):
        raise ConfigError(f"{path}: checkpoint model config does not match the run config")
    best_path = Path(path).parent / BEST_CHECKPOINT
    best_params = load_checkpoint(best_path).params if best_path.is_file() else last.params
    best = (best_params, last.metadata.get("best_epoch", 0), last.metadata.get("best_val_loss", math.inf))
    history = read_history(Path(path).parent / HISTORY_FILE, last.state.epoch)
    logger.info(f"Resuming from {path} after epoch {last.state.epoch}")
    return last.params, last.state, history, best


def run_training(config, records=None, resume=None):
    """Train config.mode into config.output_dir; returns (run_dir, EvalReport, TrainResult)."""
    run_dir = Path(config.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_resolved_config(config, run_dir)

    train, val, test, balance = prepare_data(config, records)
    model_config = build_model_config(config)

    params = state = history = best = None
    if resume is not None:
        params, state, history, best = _resume_from(resume, config)

    result = train_model(
        train, val, config, balance,
        params=params, state=state, history=history, best=best,
        on_epoch=_checkpoint_writer(run_dir, model_config, balance),
    )

    test_batch = stack(test)
    probs = predict_proba(result.params, model_config, test_batch.text, test_batch.image)
    eval_report = evaluate(test_batch.labels, probs)
    write_run_reports(eval_report, run_dir, title=f"{model_config.mode} on {Path(config.dataset).stem or 'dataset'}")
    return run_dir, eval_report, result


def evaluate_checkpoint(checkpoint_path, dataset_path, split="test"):
    """EvalReport of a checkpoint on one split of a dataset (dropout off)."""
    ckpt = load_checkpoint(checkpoint_path)
    records, meta = load_dataset(dataset_path)
    if meta.d_in != ckpt.d_in:
        raise DataError(f"Dataset d_in {meta.d_in} does not match checkpoint d_in {ckpt.d_in}")
    chosen = split_by(records, split)
    if len(chosen) < 2:
        raise DataError(f"Split {split!r} has {len(chosen)} records; need at least 2")
    batch = stack(chosen)
    probs = predict_proba(ckpt.params, ckpt.model_config, batch.text, batch.image)
    return evaluate(batch.labels, probs)


# ---------------------------------------------------------------------- #
# gradient check
# ---------------------------------------------------------------------- #
def gradcheck_fixture(seed=0):
    """(batch, params, ModelConfig, ClassBalance) for the full fused_s loss at b=4."""
    rng = np.random.default_rng(seed)
    model_config = ModelConfig(k=GRADCHECK_K, h=GRADCHECK_H, dropout_rate=0.0, mode="fused_s", seed=seed, precision="extended")
    params = init_params(GRADCHECK_D_IN, model_config)
    # non-zero biases so every bias path carries a gradient
    named = {
        name: value + 0.1 * rng.standard_normal(value.shape) if name.split(".")[1].startswith("b") else value
        for name, value in params.as_dict().items()
    }
    batch = Batch(
        ids=[f"g{i}" for i in range(GRADCHECK_BATCH)],
        text=rng.standard_normal((GRADCHECK_BATCH, GRADCHECK_D_IN)),
        image=rng.standard_normal((GRADCHECK_BATCH, GRADCHECK_D_IN)),
        labels=np.array([0, 1, 1, 0], dtype=np.int64),
    )
    return batch, FNRParams.from_dict(named), model_config, ClassBalance(alpha=GRADCHECK_ALPHA, minority=1)


def run_gradcheck(inject_fault=None, seed=0, tol=GRADCHECK_TOL):
    """
    Central-difference check of every parameter of the fused_s loss.
    inject_fault names a parameter whose analytic gradient is scaled by 1.1.
    """
    batch, params, model_config, balance = gradcheck_fixture(seed)
    names = set(params.as_dict())
    if inject_fault is not None and inject_fault not in names:
        raise ConfigError(f"Unknown parameter {inject_fault!r}; expected one of {', '.join(sorted(names))}")

    def loss_fn(named):
        breakdown, _, grads = loss_and_grads(batch, FNRParams.from_dict(named), model_config, balance=balance)
        if inject_fault is not None:
            grads[inject_fault] = grads[inject_fault] * 1.1
        return breakdown.total, grads

    return finite_diff_check(loss_fn, params.as_dict(), tol=tol)


def worst_by_group(gradcheck_report):
    """{"text_projector": err, "image_projector": err, "classifier": err}."""
    groups = {}
    for name, err in gradcheck_report.per_param.items():
        group = name.split(".", 1)[0]
        groups[group] = max(groups.get(group, 0.0), err)
    return groups
