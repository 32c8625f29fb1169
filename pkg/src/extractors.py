"""
Domain-invariant information extractors.

Domain level: a gating network reads the target model's representation and
emits one softmax weight per source model; the same scalar weight mixes that
source's representation and its logits.

Representation level: a square linear mapper transforms the aggregated
source representation and a two-layer discriminator tries to tell target
samples from source samples. The discriminator is trained on plain
cross-entropy; the mapper is trained to confuse it by minimising the
cross-entropy against flipped domain labels.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.backbones import Backbone, BackboneCache, ForwardOutput, forward_features
from src.errors import DimensionError
from src.nn import (
    DenseCache,
    DenseLayer,
    Params,
    binary_cross_entropy,
    dense_backward,
    dense_forward_cached,
    new_dense,
)


class GatingNetwork:
    def __init__(self, hidden: DenseLayer, output: DenseLayer):
        self.hidden = hidden
        self.output = output
        self.reads = 0

    @property
    def num_sources(self) -> int:
        return self.output.out_width

    @property
    def input_width(self) -> int:
        return self.hidden.in_width

    def parameters(self) -> Params:
        return {**self.hidden.parameters("gate.hidden"), **self.output.parameters("gate.output")}


class Mapper:
    def __init__(self, weight: np.ndarray):
        if weight.ndim != 2 or weight.shape[0] != weight.shape[1]:
            raise DimensionError(f"mapper weight must be square, got {weight.shape}")
        self.weight = weight
        self.reads = 0

    @property
    def width(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> Params:
        return {"mapper.weight": self.weight}


class Discriminator:
    def __init__(self, hidden: DenseLayer, output: DenseLayer):
        self.hidden = hidden
        self.output = output
        self.reads = 0

    @property
    def input_width(self) -> int:
        return self.hidden.in_width

    def parameters(self) -> Params:
        return {**self.hidden.parameters("dis.hidden"), **self.output.parameters("dis.output")}


def new_gating(rng: np.random.Generator, rep_width: int, hidden_width: int, num_sources: int) -> GatingNetwork:
    return GatingNetwork(new_dense(rng, rep_width, hidden_width, "relu"),
                         new_dense(rng, hidden_width, num_sources, "softmax"))


def new_mapper(width: int) -> Mapper:
    """Identity-initialised, so transfer starts as a no-op."""
    return Mapper(np.eye(width))


def new_discriminator(rng: np.random.Generator, rep_width: int, hidden_width: int) -> Discriminator:
    return Discriminator(new_dense(rng, rep_width, hidden_width, "relu"),
                         new_dense(rng, hidden_width, 1, "sigmoid"))


# --- Domain level ---

def gate_weights_cached(gating: GatingNetwork, e_target: np.ndarray) -> Tuple[np.ndarray, Tuple[DenseCache, DenseCache]]:
    if e_target.ndim != 2 or e_target.shape[1] != gating.input_width:
        raise DimensionError(
            f"gating expects representations of width {gating.input_width}, got shape {e_target.shape}"
        )
    h, hidden_cache = dense_forward_cached(e_target, gating.hidden)
    g, output_cache = dense_forward_cached(h, gating.output)
    gating.reads += len(gating.parameters())
    return g, (hidden_cache, output_cache)


def gate_weights(gating: GatingNetwork, e_target: np.ndarray) -> np.ndarray:
    """Per-sample softmax weights over the N sources."""
    g, _ = gate_weights_cached(gating, np.asarray(e_target, dtype=np.float64))
    return g


def gate_backward(gating: GatingNetwork, caches: Tuple[DenseCache, DenseCache],
                  grad_g: np.ndarray) -> Tuple[np.ndarray, Params]:
    hidden_cache, output_cache = caches
    grad_h, gw2, gb2 = dense_backward(gating.output, output_cache, grad_g)
    grad_e, gw1, gb1 = dense_backward(gating.hidden, hidden_cache, grad_h)
    grads = {"gate.hidden.weight": gw1, "gate.hidden.bias": gb1,
             "gate.output.weight": gw2, "gate.output.bias": gb2}
    return grad_e, grads


def uniform_gate(batch_size: int, num_sources: int) -> np.ndarray:
    return np.full((batch_size, num_sources), 1.0 / num_sources)


def aggregate_sources(e_list: Sequence[np.ndarray], z_list: Sequence[np.ndarray],
                      g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """e_s = sum_n g_n e_n and Z_s = sum_n g_n Z_n, summed in source order."""
    if not (len(e_list) == len(z_list) == g.shape[1]):
        raise DimensionError(
            f"{len(e_list)} representation batches, {len(z_list)} logit batches and "
            f"{g.shape[1]} gate columns must agree"
        )
    e_s = np.zeros_like(e_list[0], dtype=np.float64)
    z_s = np.zeros_like(z_list[0], dtype=np.float64)
    for n, (e_n, z_n) in enumerate(zip(e_list, z_list)):
        if e_n.shape != e_s.shape or z_n.shape != z_s.shape or e_n.shape[0] != g.shape[0]:
            raise DimensionError(
                f"source {n}: shapes {e_n.shape}/{z_n.shape} inconsistent with {e_s.shape}/{z_s.shape} "
                f"and gate {g.shape}"
            )
        e_s = e_s + g[:, n:n + 1] * e_n
        z_s = z_s + g[:, n:n + 1] * z_n
    return e_s, z_s


def aggregate_backward(e_list: Sequence[np.ndarray], z_list: Sequence[np.ndarray],
                       grad_e_s: Optional[np.ndarray], grad_z_s: Optional[np.ndarray]) -> np.ndarray:
    """Gradient wrt the gate; the source outputs themselves are constants."""
    n_samples = e_list[0].shape[0]
    grad_g = np.zeros((n_samples, len(e_list)))
    for n, (e_n, z_n) in enumerate(zip(e_list, z_list)):
        if grad_e_s is not None:
            grad_g[:, n] += np.sum(grad_e_s * e_n, axis=1)
        if grad_z_s is not None:
            grad_g[:, n] += np.sum(grad_z_s * z_n, axis=1)
    return grad_g


# --- Representation level ---

def map_representation(mapper: Mapper, e: np.ndarray) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    if e.ndim != 2 or e.shape[1] != mapper.width:
        raise DimensionError(f"mapper expects width {mapper.width}, got shape {e.shape}")
    mapper.reads += 1
    return e @ mapper.weight.T


def mapper_backward(mapper: Mapper, e: np.ndarray, grad_out: np.ndarray) -> Tuple[np.ndarray, Params]:
    return grad_out @ mapper.weight, {"mapper.weight": grad_out.T @ e}


def discriminate_cached(discriminator: Discriminator, e: np.ndarray) -> Tuple[np.ndarray, Tuple[DenseCache, DenseCache]]:
    if e.ndim != 2 or e.shape[1] != discriminator.input_width:
        raise DimensionError(
            f"discriminator expects width {discriminator.input_width}, got shape {e.shape}"
        )
    h, hidden_cache = dense_forward_cached(e, discriminator.hidden)
    out, output_cache = dense_forward_cached(h, discriminator.output)
    discriminator.reads += len(discriminator.parameters())
    return out[:, 0], (hidden_cache, output_cache)


def discriminate(discriminator: Discriminator, e: np.ndarray) -> np.ndarray:
    """Probability that each representation comes from the target domain."""
    d_hat, _ = discriminate_cached(discriminator, np.asarray(e, dtype=np.float64))
    return d_hat


def discriminator_backward(discriminator: Discriminator, caches: Tuple[DenseCache, DenseCache],
                           grad_d_hat: np.ndarray) -> Tuple[np.ndarray, Params]:
    hidden_cache, output_cache = caches
    grad_h, gw2, gb2 = dense_backward(discriminator.output, output_cache, grad_d_hat.reshape(-1, 1))
    grad_e, gw1, gb1 = dense_backward(discriminator.hidden, hidden_cache, grad_h)
    grads = {"dis.hidden.weight": gw1, "dis.hidden.bias": gb1,
             "dis.output.weight": gw2, "dis.output.bias": gb2}
    return grad_e, grads


def discriminator_loss(d_hat, d) -> float:
    """Cross-entropy of the domain classifier (minimised by the discriminator)."""
    return binary_cross_entropy(d_hat, d)


def confusion_loss(d_hat, d) -> float:
    """
    Cross-entropy against flipped labels. Minimising it pushes the
    discriminator's output towards the wrong domain, which is what the
    mapper is trained for while the discriminator is frozen.
    """
    return binary_cross_entropy(d_hat, 1.0 - np.asarray(d, dtype=np.float64))


# --- Adversarial path over the mixed set ---

@dataclass
class AdversarialPass:
    d: np.ndarray
    target_out: ForwardOutput
    target_cache: BackboneCache
    source_reps: List[np.ndarray]
    source_logits: List[np.ndarray]
    g: np.ndarray
    gate_caches: Optional[Tuple[DenseCache, DenseCache]]
    pre_mapper: np.ndarray  # aggregated source representations
    mapped: np.ndarray  # what the discriminator sees


def adversarial_forward(sources: Sequence[Backbone], target: Backbone, gating: Optional[GatingNetwork],
                        mapper: Optional[Mapper], mixed, use_target_reps: bool = False) -> AdversarialPass:
    """
    Every mixed sample goes through every source model; the gate is computed
    from the target model's representation of the same sample. ``gating`` or
    ``mapper`` set to None means uniform weights or no mapping.
    With ``use_target_reps`` the d=1 samples bypass the source ensemble and
    present the target model's representation instead.
    """
    target_out, target_cache = forward_features(target, mixed.cat, mixed.dense)
    source_outs = [forward_features(s, mixed.cat, mixed.dense)[0] for s in sources]
    source_reps = [o.representation for o in source_outs]
    source_logits = [o.logits for o in source_outs]

    if gating is not None:
        g, gate_caches = gate_weights_cached(gating, target_out.representation)
    else:
        g, gate_caches = uniform_gate(len(mixed), len(sources)), None
    pre_mapper, _ = aggregate_sources(source_reps, source_logits, g)
    mapped = map_representation(mapper, pre_mapper) if mapper is not None else pre_mapper
    if use_target_reps:
        mapped = np.where(mixed.d[:, None] == 1.0, target_out.representation, mapped)
    return AdversarialPass(np.asarray(mixed.d, dtype=np.float64), target_out, target_cache,
                           source_reps, source_logits, g, gate_caches, pre_mapper, mapped)


def adversarial_source_path(sources: Sequence[Backbone], target: Backbone, gating: Optional[GatingNetwork],
                            mapper: Optional[Mapper], mixed,
                            use_target_reps: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Mapped representations of the mixed batch paired with their domain labels."""
    adv = adversarial_forward(sources, target, gating, mapper, mixed, use_target_reps)
    return adv.mapped, adv.d
