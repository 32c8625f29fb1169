"""
Checkpoint format: one ``.npz`` archive per object holding every parameter
array plus a ``__meta__`` entry, a JSON string carrying the format version
and whatever is needed to rebuild the object (kind, widths, schema, ...).
Round trips are bit-exact.
"""
import json
import logging
import zipfile
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from src.backbones import Backbone, build_backbone
from src.config import FeatureSchema
from src.errors import CheckpointError
from src.extractors import Discriminator, GatingNetwork, Mapper
from src.migrator import KDProjection
from src.nn import AdamState, DenseLayer, Params
from src.state import TrainerState

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
_META = "__meta__"
_SEP = "::"
STATE_FILE = "state.npz"


def save_arrays(path: Path, meta: dict, arrays: Dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {_META: np.array(json.dumps({"format_version": FORMAT_VERSION, **meta}, sort_keys=True))}
    payload.update(arrays)
    try:
        with open(path, "wb") as f:
            np.savez(f, **payload)
    except OSError as e:
        logger.error(f"Failed to write checkpoint {path}: {e}")
        raise
    return path


def load_arrays(path: Path) -> Tuple[dict, Dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {name: archive[name] for name in archive.files}
        meta = json.loads(str(arrays.pop(_META)))
    except (OSError, ValueError, KeyError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"{path}: unreadable checkpoint ({e})") from e
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    return meta, arrays


def _restore(params: Params, arrays: Dict[str, np.ndarray], prefix: str, path: Path) -> None:
    for name, p in params.items():
        key = f"{prefix}{_SEP}{name}"
        if key not in arrays:
            raise CheckpointError(f"{path}: missing array '{key}'")
        if arrays[key].shape != p.shape:
            raise CheckpointError(f"{path}: '{key}' has shape {arrays[key].shape}, expected {p.shape}")
        p[...] = arrays[key]


def _prefixed(params: Params, prefix: str) -> Dict[str, np.ndarray]:
    return {f"{prefix}{_SEP}{name}": p for name, p in params.items()}


# --- Backbones ---

def _backbone_meta(model: Backbone) -> dict:
    return {"kind": model.kind, "widths": model.widths}


def _rebuild_backbone(meta: dict, schema: FeatureSchema, arrays: Dict[str, np.ndarray],
                      prefix: str, path: Path) -> Backbone:
    model = build_backbone(meta["kind"], schema, meta["widths"], seed=0)
    _restore(model.parameters(), arrays, prefix, path)
    return model


def save_backbone(model: Backbone, path: Path) -> Path:
    meta = {"model": _backbone_meta(model), "schema": model.schema.model_dump()}
    save_arrays(path, meta, _prefixed(model.parameters(), "model"))
    logger.debug(f"Saved {model.kind} backbone to {path}")
    return Path(path)


def load_backbone(path: Path) -> Backbone:
    meta, arrays = load_arrays(path)
    try:
        schema = FeatureSchema.model_validate(meta["schema"])
        return _rebuild_backbone(meta["model"], schema, arrays, "model", Path(path))
    except KeyError as e:
        raise CheckpointError(f"{path}: metadata lacks {e}") from e


# --- Trainer state ---

def state_exists(directory: Path) -> bool:
    return (Path(directory) / STATE_FILE).exists()


def save_state(state: TrainerState, directory: Path) -> Path:
    """Every model, transfer module and optimizer state at a period boundary."""
    arrays: Dict[str, np.ndarray] = {}
    for n, source in enumerate(state.sources):
        arrays.update(_prefixed(source.parameters(), f"source.{n}"))
    arrays.update(_prefixed(state.target.parameters(), "target"))
    transfer = None
    if state.plugged:
        for name, module in (("gate", state.gating), ("mapper", state.mapper),
                             ("dis", state.discriminator), ("kd", state.projection)):
            arrays.update(_prefixed(module.parameters(), name))
        transfer = {"kd_learned": [w is not None for w in state.projection.weights]}

    optimizers = {}
    for name, adam in state.optimizers.items():
        optimizers[name] = {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
                            "eps": adam.eps, "step": adam.step}
        arrays.update(_prefixed(adam.first_moment, f"adam.{name}.m"))
        arrays.update(_prefixed(adam.second_moment, f"adam.{name}.v"))

    meta = {
        "period": state.period, "plug_period": state.plug_period, "seed": state.seed, "active": state.active,
        "sources": [_backbone_meta(s) for s in state.sources], "target": _backbone_meta(state.target),
        "schema": state.target.schema.model_dump(), "transfer": transfer, "optimizers": optimizers,
    }
    path = save_arrays(Path(directory) / STATE_FILE, meta, arrays)
    logger.info(f"Checkpoint for period {state.period} written to {path}")
    return path


def _dense(arrays: Dict[str, np.ndarray], prefix: str, activation: str) -> DenseLayer:
    return DenseLayer(arrays[f"{prefix}.weight"].copy(), arrays[f"{prefix}.bias"].copy(), activation)


def _group(arrays: Dict[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    head = prefix + _SEP
    return {key[len(head):]: value for key, value in arrays.items() if key.startswith(head)}


def load_state(directory: Path) -> TrainerState:
    path = Path(directory) / STATE_FILE
    meta, arrays = load_arrays(path)
    try:
        schema = FeatureSchema.model_validate(meta["schema"])
        sources = [_rebuild_backbone(m, schema, arrays, f"source.{n}", path) for n, m in enumerate(meta["sources"])]
        target = _rebuild_backbone(meta["target"], schema, arrays, "target", path)
        state = TrainerState(sources=sources, target=target, period=meta["period"],
                             plug_period=meta["plug_period"], seed=meta["seed"], active=meta["active"])

        if meta["transfer"] is not None:
            gate = _group(arrays, "gate")
            state.gating = GatingNetwork(_dense(gate, "gate.hidden", "relu"), _dense(gate, "gate.output", "softmax"))
            state.mapper = Mapper(_group(arrays, "mapper")["mapper.weight"].copy())
            dis = _group(arrays, "dis")
            state.discriminator = Discriminator(_dense(dis, "dis.hidden", "relu"), _dense(dis, "dis.output", "sigmoid"))
            kd = _group(arrays, "kd")
            state.projection = KDProjection([kd[f"kd.{i}.weight"].copy() if learned else None
                                             for i, learned in enumerate(meta["transfer"]["kd_learned"])])

        for name, settings in meta["optimizers"].items():
            state.optimizers[name] = AdamState(
                lr=settings["lr"], beta1=settings["beta1"], beta2=settings["beta2"], eps=settings["eps"],
                step=settings["step"],
                first_moment={k: v.copy() for k, v in _group(arrays, f"adam.{name}.m").items()},
                second_moment={k: v.copy() for k, v in _group(arrays, f"adam.{name}.v").items()},
            )
    except KeyError as e:
        raise CheckpointError(f"{path}: checkpoint lacks {e}") from e
    logger.info(f"Loaded period {state.period} checkpoint from {path}")
    return state
