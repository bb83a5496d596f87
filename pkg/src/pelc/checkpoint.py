"""Checkpoint container shared by every trained model in the package.

Layout is the safetensors format: an 8-byte little-endian header length, a
JSON header describing each named tensor (dtype, shape, byte offsets), then
the raw tensor bytes. The header's ``__metadata__`` holds a single string
entry ``pelc``: a JSON document with the format tag, the tensor names in
module order, and the model metadata (architecture config, seed, latent
statistics, ...). One entry keeps the header byte-identical across
processes, since the writer does not order metadata keys.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from collections import OrderedDict
from pathlib import Path
from typing import Any

import torch
from safetensors.torch import load_file, save_file

FORMAT = "pelc-checkpoint/1"


def save_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor], meta: dict[str, Any]) -> str:
    """Atomically write ``tensors`` + ``meta``; returns the file's sha256."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ordered = OrderedDict((k, v.detach().contiguous().cpu()) for k, v in tensors.items())
    metadata = {"pelc": json.dumps({"format": FORMAT, "order": list(ordered), "meta": meta}, sort_keys=True)}
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        save_file(dict(ordered), tmp, metadata=metadata)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return file_sha256(path)


def load_checkpoint(path: str | Path) -> tuple["OrderedDict[str, torch.Tensor]", dict[str, Any]]:
    from safetensors import safe_open

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with safe_open(str(path), framework="pt") as fh:
        metadata = fh.metadata() or {}
    try:
        doc = json.loads(metadata["pelc"])
    except (KeyError, json.JSONDecodeError):
        doc = {}
    if doc.get("format") != FORMAT:
        raise ValueError(f"{path} is not a {FORMAT} file")
    flat = load_file(str(path))
    return OrderedDict((k, flat[k]) for k in doc["order"]), doc["meta"]


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
