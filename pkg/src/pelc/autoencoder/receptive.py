"""Analytic receptive-field and influence-field calculus over layer lists.

Layers are ordered input -> output. ``stride_s`` is the layer's stride in
input units (1/2 for a 2x upsample, 2 for a strided downsample) and
``upscale_f`` its spatial upscaling factor (2 for an upsample, else 1).
All arithmetic is exact (``fractions.Fraction``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from importlib import resources
from itertools import groupby
from pathlib import Path
from typing import Iterable

from .model import AutoencoderConfig


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kernel_k: int
    stride_s: Fraction = Fraction(1)
    upscale_f: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "stride_s", Fraction(self.stride_s))
        if self.kernel_k < 1:
            raise ValueError(f"{self.name}: kernel must be >= 1")
        if self.stride_s <= 0:
            raise ValueError(f"{self.name}: stride must be positive")
        if self.upscale_f not in (1, 2):
            raise ValueError(f"{self.name}: upscale factor must be 1 or 2")

    @classmethod
    def from_json(cls, d: dict) -> "LayerSpec":
        return cls(d["name"], int(d["k"]), Fraction(str(d.get("s", 1))), int(d.get("f", 1)))

    def to_json(self) -> dict:
        return {"name": self.name, "k": self.kernel_k, "s": str(self.stride_s), "f": self.upscale_f}


@dataclass
class RFRow:
    name: str
    effective_stride: Fraction
    upscale: int
    layer_sum: Fraction
    cumulative: Fraction


def load_layer_specs(path: str | Path) -> list[LayerSpec]:
    return [LayerSpec.from_json(d) for d in json.loads(Path(path).read_text())]


def bundled_specs(name: str) -> list[LayerSpec]:
    """``flux_encoder`` or ``flux_decoder`` (attention excluded)."""
    text = resources.files("pelc.autoencoder").joinpath("layer_specs", f"{name}.json").read_text()
    return [LayerSpec.from_json(d) for d in json.loads(text)]


def analytic_receptive_field(layers: Iterable[LayerSpec]) -> Fraction:
    """r0 = sum_l (k_l - 1) * prod_{i<l} s_i + 1."""
    r, stride = Fraction(1), Fraction(1)
    for layer in layers:
        r += (layer.kernel_k - 1) * stride
        stride *= layer.stride_s
    return r


def analytic_influence_field(layers: Iterable[LayerSpec]) -> Fraction:
    """Output-pixel extent touched by one input site, via the upscale-aware recurrence.

    Each layer first rescales the running extent by its upscale factor and then
    adds its own kernel reach, measured in units of the cumulative upscale of
    the layers before it: ``i <- i * f_l + (k_l - 1) * prod_{j<l} f_j``.
    """
    i, scale = Fraction(1), 1
    for layer in layers:
        i = i * layer.upscale_f + (layer.kernel_k - 1) * scale
        scale *= layer.upscale_f
    return i


def influence_field_expanded(layers: Iterable[LayerSpec]) -> Fraction:
    """Closed form of the recurrence: prod_j f_j + sum_l (k_l - 1) * prod_{j != l} f_j."""
    layers = list(layers)
    total = 1
    for layer in layers:
        total *= layer.upscale_f
    out = Fraction(total)
    for layer in layers:
        out += Fraction((layer.kernel_k - 1) * total, layer.upscale_f)
    return out


def _grouped(layers: list[LayerSpec]):
    return [(name, list(group)) for name, group in groupby(layers, key=lambda l: l.name)]


def receptive_field_table(layers: Iterable[LayerSpec]) -> list[RFRow]:
    """Per-block rows (consecutive layers sharing a name) of the receptive-field sum."""
    rows, r, stride = [], Fraction(1), Fraction(1)
    for name, group in _grouped(list(layers)):
        start_stride, layer_sum = stride, Fraction(0)
        for layer in group:
            layer_sum += (layer.kernel_k - 1) * stride
            stride *= layer.stride_s
        r += layer_sum
        rows.append(RFRow(name, start_stride, 1, layer_sum, r))
    return rows


def influence_field_table(layers: Iterable[LayerSpec]) -> list[RFRow]:
    rows, i, scale = [], Fraction(1), 1
    for name, group in _grouped(list(layers)):
        start_scale, layer_sum, up = scale, Fraction(0), 1
        for layer in group:
            layer_sum += (layer.kernel_k - 1) * scale
            i = i * layer.upscale_f + (layer.kernel_k - 1) * scale
            scale *= layer.upscale_f
            up *= layer.upscale_f
        rows.append(RFRow(name, Fraction(start_scale), up, layer_sum, i))
    return rows


def format_fraction(x: Fraction) -> str:
    if x.denominator == 1:
        return str(x.numerator)
    as_float = float(x)
    return f"{as_float:g}" if Fraction(as_float) == x else str(x)


def format_table(rows: list[RFRow], title: str, with_upscale: bool = False) -> str:
    head = ["Layer", "Effective Stride"] + (["Upscale Factor"] if with_upscale else []) + ["Layer Sum", "Cumulative field"]
    lines = [title, " | ".join(head)]
    for row in rows:
        cells = [row.name, format_fraction(row.effective_stride)]
        if with_upscale:
            cells.append(str(row.upscale))
        cells += [format_fraction(row.layer_sum), format_fraction(row.cumulative)]
        lines.append(" | ".join(cells))
    return "\n".join(lines)


def autoencoder_layer_specs(cfg: AutoencoderConfig, part: str) -> list[LayerSpec]:
    """Layer list of the toy encoder or decoder (attention excluded)."""
    if cfg.identity:
        if part == "encoder":
            return [LayerSpec("unshuffle", cfg.f, Fraction(cfg.f))]
        return [LayerSpec("shuffle", 1, Fraction(1, cfg.f), 1)] if cfg.f == 1 else _shuffle_up(cfg.f)
    n = len(cfg.widths)
    res = lambda name: [LayerSpec(name, 3), LayerSpec(name, 3)]  # noqa: E731
    if part == "encoder":
        layers = [LayerSpec("conv_in", 3)]
        for i in range(n):
            layers += res(f"down{i}")
            if i + 1 < n:
                layers.append(LayerSpec(f"down{i}", 3, Fraction(2)))
        layers += res("middle") + res("middle") + [LayerSpec("conv_out", 3)]
        return layers
    if part == "decoder":
        layers = [LayerSpec("conv_in", 3)] + res("middle") + res("middle")
        for i in reversed(range(n)):
            layers += res(f"up{i}")
            if i > 0:
                layers += [LayerSpec(f"up{i}", 1, Fraction(1, 2), 2), LayerSpec(f"up{i}", 3)]
        layers.append(LayerSpec("conv_out", 3))
        return layers
    raise ValueError(f"part must be 'encoder' or 'decoder', got {part!r}")


def _shuffle_up(f: int) -> list[LayerSpec]:
    layers = []
    while f > 1:
        layers.append(LayerSpec("shuffle", 1, Fraction(1, 2), 2))
        f //= 2
    return layers
