"""
What one incremental run carries from period to period, plus the guard that
enforces which parameter groups a given update may touch.
"""
import copy
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from src.backbones import Backbone
from src.errors import FreezeViolation
from src.extractors import Discriminator, GatingNetwork, Mapper
from src.migrator import KDProjection
from src.nn import AdamState, Params, copy_params, params_equal

logger = logging.getLogger(__name__)


@dataclass
class StepLosses:
    ce: float = 0.0
    adv1: float = 0.0
    adv2: float = 0.0
    mse: float = 0.0  # summed over spots
    kl: float = 0.0
    total: float = 0.0

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)

    def __str__(self) -> str:
        return " ".join(f"{k}={v:.5f}" for k, v in self.as_dict().items())


@dataclass
class TrainerState:
    sources: List[Backbone]
    target: Backbone
    period: int
    plug_period: int
    seed: int
    active: List[int] = field(default_factory=list)  # source indices the transfer draws on
    gating: Optional[GatingNetwork] = None
    mapper: Optional[Mapper] = None
    discriminator: Optional[Discriminator] = None
    projection: Optional[KDProjection] = None
    optimizers: Dict[str, AdamState] = field(default_factory=dict)

    @property
    def plugged(self) -> bool:
        return self.gating is not None

    @property
    def active_sources(self) -> List[Backbone]:
        return [self.sources[n] for n in self.active]

    def groups(self) -> Dict[str, Params]:
        """Every parameter group by name; ``source.<n>`` for the source models."""
        out: Dict[str, Params] = {f"source.{n}": s.parameters() for n, s in enumerate(self.sources)}
        out["target"] = self.target.parameters()
        if self.gating is not None:
            out["gate"] = self.gating.parameters()
        if self.mapper is not None:
            out["mapper"] = self.mapper.parameters()
        if self.discriminator is not None:
            out["dis"] = self.discriminator.parameters()
        if self.projection is not None and self.projection.parameters():
            out["kd"] = self.projection.parameters()
        return out


def copy_optimizers(optimizers: Dict[str, AdamState]) -> Dict[str, AdamState]:
    return {name: copy.deepcopy(state) for name, state in optimizers.items()}


class FreezeGuard:
    """
    Snapshots the named parameter groups on entry and raises FreezeViolation
    on a clean exit if any array changed.
    """

    def __init__(self, groups: Dict[str, Params], enabled: bool = True):
        self.groups = groups
        self.enabled = enabled
        self._snapshot: Dict[str, Params] = {}

    def __enter__(self) -> "FreezeGuard":
        if self.enabled:
            self._snapshot = {name: copy_params(params) for name, params in self.groups.items()}
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        if exc_type is not None or not self.enabled:
            return False
        for name, before in self._snapshot.items():
            if not params_equal(before, self.groups[name]):
                changed = [k for k in before if not np.array_equal(before[k], self.groups[name][k])]
                logger.error(f"Frozen group '{name}' changed: {changed}")
                raise FreezeViolation(f"parameter group '{name}' changed while frozen ({', '.join(changed)})")
        return False
