"""
Multi-spot knowledge distillation from the aggregated (and mapped) source
outputs into the target model: MSE between middle-layer representations and
temperature-softened KL between logits.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.config import HyperParams
from src.errors import ConfigError, DimensionError
from src.nn import Params, glorot_uniform, log_softmax, softmax


class KDProjection:
    """
    One W_KD per distillation spot. ``None`` stands for a fixed identity (the
    widths already match); otherwise the matrix is learned.
    """

    def __init__(self, weights: List[Optional[np.ndarray]]):
        self.weights = weights

    @property
    def num_spots(self) -> int:
        return len(self.weights)

    def parameters(self) -> Params:
        return {f"kd.{i}.weight": w for i, w in enumerate(self.weights) if w is not None}


def new_projection(rng: np.random.Generator, source_widths: Sequence[int], target_widths: Sequence[int],
                   num_spots: int) -> KDProjection:
    """Spot i pairs trunk layer -(i+1) of the sources with the same depth of the target."""
    weights = []
    for i in range(num_spots):
        src_w, tgt_w = source_widths[-(i + 1)], target_widths[-(i + 1)]
        weights.append(None if src_w == tgt_w else glorot_uniform(rng, tgt_w, src_w))
    return KDProjection(weights)


@dataclass
class KDConfig:
    tau: float
    beta1: float
    beta2: float
    num_spots: int
    projection: KDProjection

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"hyper.tau: temperature must be > 0 (got {self.tau})")
        if self.projection.num_spots != self.num_spots:
            raise ConfigError(
                f"hyper.num_spots: {self.num_spots} spots but {self.projection.num_spots} projections"
            )

    @classmethod
    def from_hyper(cls, hyper: HyperParams, projection: KDProjection) -> "KDConfig":
        return cls(hyper.tau, hyper.beta1, hyper.beta2, hyper.num_spots, projection)


def _project(e_s: np.ndarray, w_kd: Optional[np.ndarray]) -> np.ndarray:
    return e_s if w_kd is None else e_s @ w_kd.T


def middle_distill_loss(e_s: np.ndarray, e_t: np.ndarray, w_kd: Optional[np.ndarray] = None) -> float:
    """Mean over samples and dimensions of (W_KD e_s - e_T)^2."""
    projected = _project(np.asarray(e_s, dtype=np.float64), w_kd)
    e_t = np.asarray(e_t, dtype=np.float64)
    if projected.shape != e_t.shape:
        raise DimensionError(f"projected source shape {projected.shape} does not match target shape {e_t.shape}")
    return float(np.mean((projected - e_t) ** 2))


def middle_distill_grads(e_s: np.ndarray, e_t: np.ndarray,
                         w_kd: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """Returns (grad wrt e_s, grad wrt e_T, grad wrt W_KD or None)."""
    projected = _project(e_s, w_kd)
    grad_projected = 2.0 * (projected - e_t) / projected.size
    grad_w = None if w_kd is None else grad_projected.T @ e_s
    grad_e_s = grad_projected if w_kd is None else grad_projected @ w_kd
    return grad_e_s, -grad_projected, grad_w


def logit_distill_loss(z_s: np.ndarray, z_t: np.ndarray, tau: float) -> float:
    """
    Mean over samples of sum_c p_S (log p_S - log p_T) with p = softmax(Z / tau),
    computed through log-softmax. No tau^2 rescaling.
    """
    if tau <= 0:
        raise ConfigError(f"hyper.tau: temperature must be > 0 (got {tau})")
    log_p_s = log_softmax(np.asarray(z_s, dtype=np.float64) / tau)
    log_p_t = log_softmax(np.asarray(z_t, dtype=np.float64) / tau)
    if log_p_s.shape != log_p_t.shape:
        raise DimensionError(f"source logits {log_p_s.shape} and target logits {log_p_t.shape} differ")
    return float(np.mean(np.sum(np.exp(log_p_s) * (log_p_s - log_p_t), axis=-1)))


def logit_distill_grads(z_s: np.ndarray, z_t: np.ndarray, tau: float) -> Tuple[np.ndarray, np.ndarray]:
    """Returns (grad wrt Z_S, grad wrt Z_T)."""
    n = z_s.shape[0]
    log_p_s = log_softmax(z_s / tau)
    log_p_t = log_softmax(z_t / tau)
    p_s = np.exp(log_p_s)
    p_t = softmax(z_t / tau)
    ratio = log_p_s - log_p_t
    per_sample = np.sum(p_s * ratio, axis=1, keepdims=True)
    grad_z_s = p_s * (ratio - per_sample) / (tau * n)
    grad_z_t = (p_t - p_s) / (tau * n)
    return grad_z_s, grad_z_t


def kd_total(middle_losses: Sequence[float], l_kl: float, beta1: float, beta2: float) -> float:
    """beta1 * sum of the middle-spot losses + beta2 * L_KL."""
    return beta1 * float(sum(middle_losses)) + beta2 * l_kl
