"""Finite-difference checks of the whole two-step objective."""
import logging
from typing import Callable, Dict, Tuple

import numpy as np

from src.config import HyperParams
from src.datagen import PeriodDataset
from src.nn import Params, assign_flat, flatten_params, grad_check
from src.state import TrainerState
from src.trainer import step1_loss_and_grads, step2_loss_and_grads

logger = logging.getLogger(__name__)

LossAndGrad = Callable[[np.ndarray], Tuple[float, np.ndarray]]


def _joined(groups: Dict[str, Params]) -> Params:
    return {f"{group}/{name}": p for group, params in groups.items() for name, p in params.items()}


def step2_objective(state: TrainerState, target_batch: PeriodDataset, mixed_batch: PeriodDataset,
                    hyper: HyperParams) -> Tuple[LossAndGrad, np.ndarray, Params]:
    """
    The step-2 total as a function of the flat vector of every parameter
    step 2 updates. Evaluating it writes the vector into the live arrays.
    """
    _, grads = step2_loss_and_grads(state, target_batch, mixed_batch, hyper)
    live = state.groups()
    params = _joined({group: live[group] for group in grads})

    def loss_and_grad(vector: np.ndarray) -> Tuple[float, np.ndarray]:
        assign_flat(params, vector)
        losses, step_grads = step2_loss_and_grads(state, target_batch, mixed_batch, hyper)
        return losses.total, flatten_params(_joined(step_grads))

    return loss_and_grad, flatten_params(params), params


def step1_objective(state: TrainerState, mixed_batch: PeriodDataset,
                    hyper: HyperParams) -> Tuple[LossAndGrad, np.ndarray, Params]:
    params = state.discriminator.parameters()

    def loss_and_grad(vector: np.ndarray) -> Tuple[float, np.ndarray]:
        assign_flat(params, vector)
        loss, grads, _ = step1_loss_and_grads(state, mixed_batch, hyper)
        return loss, flatten_params(grads)

    return loss_and_grad, flatten_params(params), params


def _run(objective: Tuple[LossAndGrad, np.ndarray, Params], eps: float, what: str) -> float:
    loss_and_grad, point, params = objective
    try:
        error = grad_check(loss_and_grad, point, eps)
    finally:
        assign_flat(params, point)
    logger.info(f"{what}: max relative error {error:.3e} over {point.size} coordinates")
    return error


def check_step2(state: TrainerState, target_batch: PeriodDataset, mixed_batch: PeriodDataset,
                hyper: HyperParams, eps: float = 1e-5) -> float:
    return _run(step2_objective(state, target_batch, mixed_batch, hyper), eps, "step-2 objective")


def check_step1(state: TrainerState, mixed_batch: PeriodDataset, hyper: HyperParams, eps: float = 1e-5) -> float:
    return _run(step1_objective(state, mixed_batch, hyper), eps, "step-1 objective")
