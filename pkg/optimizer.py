"""
AdamW with decoupled weight decay, one hyperparameter group per part of the
network, reduce-on-plateau scheduling and early stopping.

Groups select parameters by their module prefix ("text_projector",
"image_projector", "classifier"). A group without prefixes catches every
parameter no other group claims.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from config import (
    CLASSIFIER_LR, CLASSIFIER_WEIGHT_DECAY, PROJECTOR_LR, PROJECTOR_WEIGHT_DECAY,
    BETA1, BETA2, EPSILON, LR_PATIENCE, LR_DECAY, MIN_LR, EARLY_STOP_PATIENCE, MIN_DELTA,
)
from errors import ContractError, NumericError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ParamGroupConfig:
    name: str
    lr: float
    weight_decay: float
    beta1: float = BETA1
    beta2: float = BETA2
    epsilon: float = EPSILON
    prefixes: tuple = ()

    def __post_init__(self):
        if self.lr <= 0:
            raise ContractError(f"group {self.name}: lr must be > 0")
        if self.weight_decay < 0:
            raise ContractError(f"group {self.name}: weight_decay must be >= 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ContractError(f"group {self.name}: betas must lie in (0, 1)")


def default_groups(
    classifier_lr=CLASSIFIER_LR,
    classifier_weight_decay=CLASSIFIER_WEIGHT_DECAY,
    projector_lr=PROJECTOR_LR,
    projector_weight_decay=PROJECTOR_WEIGHT_DECAY,
    beta1=BETA1,
    beta2=BETA2,
    epsilon=EPSILON,
):
    return [
        ParamGroupConfig("projector", projector_lr, projector_weight_decay, beta1, beta2, epsilon,
                         prefixes=("text_projector", "image_projector")),
        ParamGroupConfig("classifier", classifier_lr, classifier_weight_decay, beta1, beta2, epsilon,
                         prefixes=("classifier",)),
    ]


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    lr_factor: float = 1.0
    # early stopping
    best_val_loss: float = math.inf
    epochs_since_improvement: int = 0
    # reduce-on-plateau
    plateau_best: float = math.inf
    plateau_count: int = 0

    def scalars(self):
        return {
            "step": self.step,
            "epoch": self.epoch,
            "lr_factor": self.lr_factor,
            "best_val_loss": self.best_val_loss,
            "epochs_since_improvement": self.epochs_since_improvement,
            "plateau_best": self.plateau_best,
            "plateau_count": self.plateau_count,
        }

    @classmethod
    def from_scalars(cls, values, m=None, v=None):
        return cls(m=dict(m or {}), v=dict(v or {}), **values)


def group_for(name, groups):
    module = name.split(".", 1)[0]
    catch_all = None
    for group in groups:
        if module in group.prefixes:
            return group
        if not group.prefixes and catch_all is None:
            catch_all = group
    if catch_all is None:
        raise ContractError(f"No parameter group covers {name}")
    return catch_all


def adamw_step(state, params, grads, groups):
    """
    One AdamW update. params and grads map names to arrays; returns a new
    dict of updated arrays and advances state in place.

        m <- b1 m + (1-b1) g
        v <- b2 v + (1-b2) g^2
        theta <- theta - lr f m_hat / (sqrt(v_hat) + eps) - lr f wd theta
    """
    for name, theta in params.items():
        if name not in grads:
            raise ContractError(f"No gradient for {name}")
        if np.shape(grads[name]) != np.shape(theta):
            raise ContractError(f"Gradient shape {np.shape(grads[name])} does not match {name} {np.shape(theta)}")

    state.step += 1
    t = state.step
    updated = {}
    for name, theta in params.items():
        group = group_for(name, groups)
        g = np.asarray(grads[name], dtype=theta.dtype)
        m = state.m.get(name, np.zeros_like(theta))
        v = state.v.get(name, np.zeros_like(theta))

        m = group.beta1 * m + (1.0 - group.beta1) * g
        v = group.beta2 * v + (1.0 - group.beta2) * g * g
        state.m[name], state.v[name] = m, v

        m_hat = m / (1.0 - group.beta1 ** t)
        v_hat = v / (1.0 - group.beta2 ** t)
        lr = group.lr * state.lr_factor
        updated[name] = theta - lr * m_hat / (np.sqrt(v_hat) + group.epsilon) - lr * group.weight_decay * theta

    return updated


def _check_loss(val_loss):
    if not math.isfinite(val_loss):
        raise NumericError(f"Validation loss is {val_loss}; aborting training")


def scheduler_update(state, val_loss, groups, patience=LR_PATIENCE, decay=LR_DECAY, min_lr=MIN_LR, min_delta=MIN_DELTA):
    """
    Reduce-on-plateau. After `patience` epochs without a >= min_delta
    improvement the lr factor is multiplied by `decay`, floored so that the
    smallest group lr times the factor stays >= min_lr. Never increases.
    """
    _check_loss(val_loss)
    if state.plateau_best - val_loss >= min_delta:
        state.plateau_best = val_loss
        state.plateau_count = 0
        return state.lr_factor

    state.plateau_count += 1
    if state.plateau_count >= patience:
        floor = min_lr / min(group.lr for group in groups)
        new_factor = min(max(state.lr_factor * decay, floor), state.lr_factor)
        if new_factor < state.lr_factor:
            logger.info(f"Reducing lr factor {state.lr_factor:g} -> {new_factor:g}")
        state.lr_factor = new_factor
        state.plateau_count = 0
    return state.lr_factor


def early_stop_check(state, val_loss, patience=EARLY_STOP_PATIENCE, min_delta=MIN_DELTA):
    """Returns True once `patience` epochs pass without a >= min_delta improvement."""
    _check_loss(val_loss)
    if state.best_val_loss - val_loss >= min_delta:
        state.best_val_loss = val_loss
        state.epochs_since_improvement = 0
        return False

    state.epochs_since_improvement += 1
    logger.info(f"Early stopping counter {state.epochs_since_improvement} of {patience}")
    if state.epochs_since_improvement >= patience:
        logger.info("Early stopping")
        return True
    return False
