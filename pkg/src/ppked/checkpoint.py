"""Versioned checkpoint container.

A checkpoint is an ``.npz`` archive: one little-endian array per parameter,
keyed by its dotted path (``poke.topic_blocks.0.mha.Wq``), optional Adam
moments under ``adam.m.<name>`` / ``adam.v.<name>``, and a JSON header in the
``__header__`` entry holding the format version, hyperparameters, vocabulary,
topic list, graph grouping and training progress.
"""

from __future__ import annotations

import io
import json
import os
from pathlib import Path

import numpy as np

from .config import ModelConfig, hyperparameters
from .data import Vocabulary
from .errors import CheckpointMismatch, DataError
from .model import PpkedModel
from .optim import AdamState
from .prke import KnowledgeGraph

FORMAT_VERSION = 1


def _le(arr: np.ndarray) -> np.ndarray:
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def save_checkpoint(path, model: PpkedModel, adam: AdamState | None = None, extra: dict | None = None) -> None:
    names = [n for n, _ in model.named_parameters()]
    arrays = {name: _le(p.data) for name, p in model.named_parameters()}
    header = {
        "format_version": FORMAT_VERSION,
        "hyperparameters": hyperparameters(model.cfg),
        "model_config": model.cfg.__dict__,
        "vocab": model.vocab.to_dict(),
        "topics": list(model.topics),
        "graph_groups": model.graph_def.groups,
        "parameters": names,
        "extra": extra or {},
    }
    if adam is not None:
        header["adam"] = {"learning_rate": adam.learning_rate, "beta1": adam.beta1, "beta2": adam.beta2,
                          "epsilon": adam.epsilon, "step_count": adam.step_count,
                          "params": adam_names(model, adam)}
        for name, m, v in zip(header["adam"]["params"], adam.first_moment, adam.second_moment):
            arrays[f"adam.m.{name}"] = _le(m)
            arrays[f"adam.v.{name}"] = _le(v)
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def adam_names(model: PpkedModel, adam: AdamState) -> list[str]:
    names = [n for n, _ in model.named_parameters()]
    if len(adam.first_moment) == len(names):
        return names
    return [n for n in names if not n.startswith("tag_head.")][: len(adam.first_moment)]


def read_header(path) -> dict:
    with np.load(path) as z:
        return json.loads(z["__header__"].tobytes())


def load_checkpoint(path, cfg: ModelConfig | None = None) -> tuple[PpkedModel, AdamState | None, dict]:
    """Rebuild the model stored at ``path``.

    When ``cfg`` is given its architecture fields must match the checkpoint,
    otherwise CheckpointMismatch lists every differing field.
    """
    try:
        z = np.load(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    with z:
        header = json.loads(z["__header__"].tobytes())
        if header.get("format_version") != FORMAT_VERSION:
            raise DataError(f"checkpoint format {header.get('format_version')} unsupported")
        stored = ModelConfig(**header["model_config"])
        if cfg is not None:
            mine = hyperparameters(cfg)
            diff = {k: (v, mine.get(k)) for k, v in header["hyperparameters"].items() if mine.get(k) != v}
            if diff:
                raise CheckpointMismatch(diff)
            stored.dropout = cfg.dropout
            stored.max_len = cfg.max_len
        vocab = Vocabulary.from_dict(header["vocab"])
        graph = KnowledgeGraph.from_groups(header["topics"], header["graph_groups"])
        model = PpkedModel(stored, vocab, graph, topics=header["topics"])
        params = dict(model.named_parameters())
        for name in header["parameters"]:
            arr = z[name]
            if params[name].shape != arr.shape:
                raise DataError(f"checkpoint parameter {name} has shape {arr.shape}, model expects {params[name].shape}")
            params[name].data = arr.astype(model.dtype)
        adam = None
        if "adam" in header:
            a = header["adam"]
            adam = AdamState(a["learning_rate"], a["beta1"], a["beta2"], a["epsilon"], a["step_count"],
                             [z[f"adam.m.{n}"].copy() for n in a["params"]],
                             [z[f"adam.v.{n}"].copy() for n in a["params"]])
    return model, adam, header.get("extra", {})
