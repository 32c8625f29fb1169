import hashlib
import json
import logging
import os
import re
from pathlib import Path
from typing import Annotated, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.errors import ConfigError

logger = logging.getLogger(__name__)

BackboneKind = Literal["dnn", "dcn", "wd"]
SweepParam = Literal["tau", "alpha", "beta1", "beta2"]

DEFAULT_OUTPUT_DIR = "runs"
FIXED_VARIANTS = ("full", "no-gating", "no-adversarial", "no-middle", "no-logit", "base")
ONLY_SOURCE = re.compile(r"^only-src-(\d+)$")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CategoricalField(_Strict):
    name: str
    cardinality: int = Field(ge=1)


def _default_categorical() -> List[CategoricalField]:
    return [
        CategoricalField(name="c0", cardinality=1000),
        CategoricalField(name="c1", cardinality=500),
        CategoricalField(name="c2", cardinality=100),
        CategoricalField(name="c3", cardinality=10),
    ]


class FeatureSchema(_Strict):
    """Feature layout shared by every domain."""
    categorical: List[CategoricalField] = Field(default_factory=_default_categorical)
    dense: List[str] = Field(default_factory=lambda: ["n0", "n1"])
    embedding_dim: int = Field(8, ge=1)

    @model_validator(mode="after")
    def _unique_names(self):
        names = self.field_names
        if len(set(names)) != len(names):
            raise ValueError(f"schema: field names must be unique (got {names})")
        reserved = {"y", "d", "domain", "period"} & set(names)
        if reserved:
            raise ValueError(f"schema: field names {sorted(reserved)} are reserved")
        return self

    @property
    def categorical_names(self) -> List[str]:
        return [f.name for f in self.categorical]

    @property
    def cardinalities(self) -> List[int]:
        return [f.cardinality for f in self.categorical]

    @property
    def field_names(self) -> List[str]:
        return self.categorical_names + list(self.dense)

    @property
    def input_width(self) -> int:
        """Width of the concatenated embeddings plus dense features."""
        return len(self.categorical) * self.embedding_dim + len(self.dense)


class GenConfig(_Strict):
    num_domains: int = Field(3, ge=2)
    num_periods: int = Field(8, ge=2)
    samples_per_domain_per_period: int = Field(10000, ge=1)
    target_sample_ratio: float = Field(0.3, gt=0, le=1)
    invariant_strength: float = Field(2.0, ge=0)
    specific_strength: float = Field(1.0, ge=0)
    drift_magnitude: float = Field(0.1, ge=0)
    base_logit: float = 0.0
    seed: int = Field(0, ge=0)

    @property
    def num_sources(self) -> int:
        return self.num_domains - 1

    @property
    def target_domain(self) -> int:
        return self.num_domains - 1

    def domain_size(self, domain_id: int) -> int:
        if domain_id == self.target_domain:
            return max(1, round(self.samples_per_domain_per_period * self.target_sample_ratio))
        return self.samples_per_domain_per_period


class BackboneConfig(_Strict):
    kind: BackboneKind = "dnn"
    widths: List[int] = Field(default_factory=lambda: [64, 32], min_length=1)
    source_kinds: Optional[List[BackboneKind]] = None
    source_widths: Optional[List[int]] = Field(None, min_length=1)

    @field_validator("widths", "source_widths")
    @classmethod
    def _positive_widths(cls, widths):
        if widths is not None and any(w < 1 for w in widths):
            raise ValueError(f"trunk widths must be >= 1 (got {widths})")
        return widths

    def source_kind(self, n: int) -> str:
        return self.source_kinds[n] if self.source_kinds else self.kind

    @property
    def resolved_source_widths(self) -> List[int]:
        return list(self.source_widths) if self.source_widths else list(self.widths)


class HyperParams(_Strict):
    """Loss weights of the two-step objective and optimisation settings."""
    lam: float = Field(1.0, ge=0)
    alpha: float = Field(0.05, ge=0)
    beta1: float = Field(0.1, ge=0)
    beta2: float = Field(0.1, ge=0)
    tau: float = Field(10.0, gt=0)
    lr: float = Field(0.001, gt=0)
    batch_size: int = Field(256, ge=1)
    epochs_per_period: int = Field(1, ge=1)
    num_spots: int = Field(1, ge=0)
    gate_hidden: int = Field(16, ge=1)
    dis_hidden: int = Field(16, ge=1)
    # discriminator updates per mini-batch in step 1
    dis_steps: int = Field(1, ge=1)
    use_gating: bool = True
    use_adversarial: bool = True
    adv_target_from_target: bool = False
    check_freeze: bool = True
    # 0-based source indices the transfer draws on; None means every source.
    sources: Optional[List[Annotated[int, Field(ge=0)]]] = Field(None, min_length=1)


class SweepConfig(_Strict):
    param: SweepParam = "tau"
    grid: List[float] = Field(default_factory=lambda: [1.0, 10.0, 20.0, 30.0, 40.0, 50.0], min_length=1)


class PlugStudyConfig(_Strict):
    periods: List[int] = Field(default_factory=lambda: [3, 6], min_length=1)


def _default_variants() -> List[str]:
    return list(FIXED_VARIANTS)


class ExperimentConfig(_Strict):
    gen: GenConfig = Field(default_factory=GenConfig)
    schema_: FeatureSchema = Field(default_factory=FeatureSchema, alias="schema")
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    hyper: HyperParams = Field(default_factory=HyperParams)
    plug_period: int = Field(0, ge=0)
    seeds: List[Annotated[int, Field(ge=0)]] = Field(default_factory=lambda: [0], min_length=1)
    output_dir: str = DEFAULT_OUTPUT_DIR
    variants: List[str] = Field(default_factory=_default_variants, min_length=1)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    plug_study: PlugStudyConfig = Field(default_factory=PlugStudyConfig)
    compat_kinds: List[BackboneKind] = Field(default_factory=lambda: ["dnn", "dcn", "wd"], min_length=1)

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    @property
    def feature_schema(self) -> FeatureSchema:
        return self.schema_

    @property
    def last_train_period(self) -> int:
        return self.gen.num_periods - 2

    @property
    def active_sources(self) -> List[int]:
        return list(self.hyper.sources) if self.hyper.sources is not None else list(range(self.gen.num_sources))

    @model_validator(mode="after")
    def _consistent(self):
        num_sources = self.gen.num_sources
        source_kinds = self.backbone.source_kinds
        if source_kinds is not None and len(source_kinds) != num_sources:
            raise ValueError(
                f"backbone.source_kinds: expected {num_sources} entries, one per source (got {source_kinds})"
            )
        depth = min(len(self.backbone.widths), len(self.backbone.resolved_source_widths))
        if self.hyper.num_spots > depth:
            raise ValueError(f"hyper.num_spots: at most {depth} for these trunks (got {self.hyper.num_spots})")
        if self.hyper.adv_target_from_target and self.backbone.widths[-1] != self.backbone.resolved_source_widths[-1]:
            raise ValueError(
                "hyper.adv_target_from_target: needs equal source and target representation widths "
                f"(got {self.backbone.resolved_source_widths[-1]} and {self.backbone.widths[-1]})"
            )
        for p in self.plug_study.periods:
            if not 0 <= p <= self.last_train_period:
                raise ValueError(
                    f"plug_study.periods: {p} outside the training horizon 0..{self.last_train_period}"
                )
        chosen = self.hyper.sources
        if chosen is not None and (len(set(chosen)) != len(chosen) or max(chosen) >= num_sources):
            raise ValueError(f"hyper.sources: expected distinct indices in 0..{num_sources - 1} (got {chosen})")
        for name in self.variants:
            match = ONLY_SOURCE.match(name)
            if match:
                if not 1 <= int(match.group(1)) <= num_sources:
                    raise ValueError(f"variants: '{name}' names a source outside 1..{num_sources}")
            elif name not in FIXED_VARIANTS:
                raise ValueError(f"variants: unknown variant '{name}'")
        return self


def _format_validation_error(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        loc = ".".join(str(x) for x in item["loc"]).replace("schema_", "schema")
        msg = item["msg"].removeprefix("Value error, ")
        if loc:
            parts.append(f"{loc}: {msg} (got {item.get('input')!r})")
        else:
            parts.append(msg)
    return "; ".join(parts)


def validate_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_format_validation_error(e)) from e


def parse_config(path: str) -> ExperimentConfig:
    """
    Reads a JSON experiment config and validates it in full.
    Missing keys take their defaults; extra keys, wrong types and range
    violations raise ConfigError naming the dotted key path.
    """
    config_path = Path(path)
    if not config_path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(config_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")

    config = validate_config(data)
    if "output_dir" not in data and os.getenv("DIIT_OUTPUT_DIR"):
        config = config.model_copy(update={"output_dir": os.getenv("DIIT_OUTPUT_DIR")})
    logger.info(f"Loaded config {path} (seeds={config.seeds}, plug_period={config.plug_period})")
    return config


def config_to_json(config: ExperimentConfig) -> str:
    return config.model_dump_json(indent=2, by_alias=True)


def run_id(config: ExperimentConfig) -> str:
    """Collision-safe identity of a resolved experiment; where its outputs go is not part of it."""
    experiment = config.model_dump_json(by_alias=True, exclude={"output_dir"})
    payload = experiment + "|" + ",".join(str(s) for s in config.seeds)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


def write_resolved_config(config: ExperimentConfig, run_dir: Path) -> Path:
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "config.json"
    path.write_text(config_to_json(config) + "\n", encoding="utf-8")
    return path
