"""Lossless PNG persistence for masks/images and JSON dataset manifests."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image

from .masks import MaskKind, PixelMask


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _png_bytes(img: Image.Image) -> bytes:
    import io

    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def save_mask_png(path: str | Path, m: PixelMask) -> None:
    """Binary/thin masks as 8-bit, soft/original masks as 16-bit grayscale."""
    if m.kind in (MaskKind.BINARY, MaskKind.THIN):
        arr = np.round(m.data * 255.0).astype(np.uint8)
        img = Image.fromarray(arr)
    else:
        arr = np.round(m.data * 65535.0).astype(np.uint16)
        img = Image.fromarray(arr)
    atomic_write_bytes(path, _png_bytes(img))


def load_mask_png(path: str | Path, kind: MaskKind | str = MaskKind.ORIGINAL) -> PixelMask:
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        data = arr.astype(np.float32) / 255.0
    else:
        data = arr.astype(np.float32) / 65535.0
    if data.ndim == 3:
        data = data[..., 0]
    return PixelMask(data, kind)


def save_image_png(path: str | Path, x: np.ndarray) -> None:
    """[3, H, W] (or [H, W]) float image in [0, 1] -> 8-bit PNG."""
    x = np.asarray(x)
    if x.ndim == 3:
        x = x.transpose(1, 2, 0)
    arr = np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)
    atomic_write_bytes(path, _png_bytes(Image.fromarray(arr)))


def load_image_png(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


def write_manifest(path: str | Path, entries: list[dict[str, Any]], **meta: Any) -> None:
    """Dataset manifest: ``{"meta": {...}, "entries": [{path, seed, kind, ...}]}``."""
    doc = {"meta": meta, "entries": entries}
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True))


def read_manifest(path: str | Path) -> dict[str, Any]:
    return json.loads(Path(path).read_text())
