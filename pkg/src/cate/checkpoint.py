"""Checkpoint files: a version-stamped ``.npz`` holding config, vocabulary and float64 tensors."""

from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .encoder import EncoderConfig, EncoderWeights, parameter_shapes
from .space import OpVocab

FORMAT_VERSION = "cate-checkpoint/1"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(weights: EncoderWeights, path, vocab: OpVocab, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "version": FORMAT_VERSION,
        "config": weights.config.to_dict(),
        "vocab": {"inputs": list(vocab.inputs), "ops": list(vocab.ops), "output": vocab.output,
                  "labels": list(vocab.labels)},
        "extra": extra or {},
    }
    arrays = {f"param/{k}": np.ascontiguousarray(v.data, dtype=np.float64) for k, v in weights.params.items()}
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path, expected_vocab: OpVocab | None = None,
                    expected_config: EncoderConfig | None = None) -> tuple[EncoderWeights, dict]:
    """Load weights; raises :class:`CheckpointError` on any format, version or config mismatch."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            arrays = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    except (OSError, ValueError, KeyError, zipfile.BadZipFile, json.JSONDecodeError, EOFError) as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from None
    if meta.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint version {meta.get('version')!r} != {FORMAT_VERSION!r}")
    try:
        cfg_dict = meta["config"]
        config = EncoderConfig(**cfg_dict)
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"bad config in checkpoint: {e}") from None
    if expected_config is not None and expected_config != config:
        raise CheckpointError(f"config mismatch: checkpoint {config} vs expected {expected_config}")
    if expected_vocab is not None and list(expected_vocab.labels) != meta["vocab"]["labels"]:
        raise CheckpointError(
            f"vocabulary mismatch: checkpoint has {len(meta['vocab']['labels'])} labels "
            f"{meta['vocab']['labels']}, expected {list(expected_vocab.labels)}")
    shapes = parameter_shapes(config)
    if set(shapes) != set(arrays):
        raise CheckpointError(f"parameter names differ from config: {sorted(set(shapes) ^ set(arrays))}")
    params = {}
    for name, shape in shapes.items():
        if arrays[name].shape != shape or arrays[name].dtype != np.float64:
            raise CheckpointError(f"parameter {name}: {arrays[name].shape}/{arrays[name].dtype}, expected {shape}")
        params[name] = Tensor(arrays[name].copy(), requires_grad=True, name=name)
    return EncoderWeights(config, params), meta


def vocab_from_meta(meta: dict, costs: dict | None = None) -> OpVocab:
    v = meta["vocab"]
    return OpVocab(tuple(v["inputs"]), tuple(v["ops"]), v["output"], costs or {})


def checkpoint_io(weights, path, mode: str, vocab: OpVocab | None = None, **kwargs):
    if mode == "save":
        if vocab is None:
            raise ValueError("saving a checkpoint needs the vocabulary")
        save_checkpoint(weights, path, vocab, **kwargs)
        return None
    if mode == "load":
        return load_checkpoint(path, expected_vocab=vocab, **kwargs)[0]
    raise ValueError(f"mode must be 'save' or 'load', got {mode!r}")
