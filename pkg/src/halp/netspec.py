"""Layer geometry, output-size propagation and receptive-field arithmetic.

Rows are 1-based everywhere.  Spatial layers (conv, maxpool) are square and
are partitioned along the height axis only; fully connected layers close the
network and never take part in the row arithmetic.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import NamedTuple

SPATIAL_KINDS = ("conv", "maxpool")
KINDS = SPATIAL_KINDS + ("fc",)


class NetworkError(ValueError):
    """A layer or network violates a geometric invariant."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    k: int = 0
    s: int = 0
    p: int = 0
    c_in: int = 1
    c_out: int = 1
    relu: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise NetworkError(f"unknown layer kind {self.kind!r}")
        if self.c_in < 1 or self.c_out < 1:
            raise NetworkError("channel counts must be positive")
        if self.kind == "fc":
            if self.k or self.s or self.p:
                raise NetworkError("fc layers take no kernel/stride/padding")
            return
        if self.k < 1 or self.s < 1 or self.p < 0:
            raise NetworkError(f"bad geometry k={self.k} s={self.s} p={self.p}")
        if self.kind == "maxpool" and self.c_in != self.c_out:
            raise NetworkError("maxpool must preserve the channel count")

    @property
    def spatial(self) -> bool:
        return self.kind in SPATIAL_KINDS

    def input_span(self, out_start: int, out_end: int) -> tuple[int, int]:
        """Unclipped input rows read by output rows [out_start, out_end]."""
        return (self.s * (out_start - 1) + 1 - self.p,
                self.s * (out_end - 1) + self.k - self.p)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.kind == "fc":
            for key in ("k", "s", "p"):
                d.pop(key)
        return d


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    input_height: int
    input_channels: int
    layers: tuple[LayerSpec, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.input_height < 1 or self.input_channels < 1:
            raise NetworkError("input height and channels must be positive")
        seen_fc = False
        channels = self.input_channels
        height = self.input_height
        for i, layer in enumerate(self.layers):
            if layer.kind == "fc":
                seen_fc = True
                continue
            if seen_fc:
                raise NetworkError(f"layer {i}: spatial layer after an fc layer")
            if layer.c_in != channels:
                raise NetworkError(
                    f"layer {i}: c_in={layer.c_in} does not chain with {channels}")
            height = output_dim(height, layer)
            channels = layer.c_out

    @property
    def spatial_layers(self) -> tuple[LayerSpec, ...]:
        return tuple(l for l in self.layers if l.spatial)

    @property
    def fc_layers(self) -> tuple[LayerSpec, ...]:
        return tuple(l for l in self.layers if l.kind == "fc")

    def heights(self) -> list[int]:
        """Input height of every spatial layer followed by the final output height."""
        dims = [self.input_height]
        for layer in self.spatial_layers:
            dims.append(output_dim(dims[-1], layer))
        return dims

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_height": self.input_height,
            "input_channels": self.input_channels,
            "layers": [l.to_dict() for l in self.layers],
        }


@dataclass(frozen=True)
class RFState:
    """Cumulative jump, receptive-field size and first-row centre."""

    j: int
    r: int
    sigma: Fraction

    def center(self, out_row: int) -> Fraction:
        return self.sigma + (out_row - 1) * self.j


RF_INPUT = RFState(j=1, r=1, sigma=Fraction(1))


class RowSpan(NamedTuple):
    start: int
    end: int
    clipped: bool = False

    @property
    def width(self) -> int:
        return self.end - self.start + 1


def output_dim(input_dim: int, layer: LayerSpec) -> int:
    if not layer.spatial:
        raise NetworkError("output_dim is only defined for spatial layers")
    if input_dim < 1:
        raise NetworkError("input dimension must be positive")
    if layer.k > input_dim + 2 * layer.p:
        raise NetworkError(
            f"kernel {layer.k} larger than padded input {input_dim}+2*{layer.p}")
    return (input_dim + 2 * layer.p - layer.k) // layer.s + 1


def rf_step(prev: RFState, layer: LayerSpec) -> RFState:
    return RFState(
        j=prev.j * layer.s,
        r=prev.r + (layer.k - 1) * prev.j,
        sigma=prev.sigma + (Fraction(layer.k - 1, 2) - layer.p) * prev.j,
    )


def propagate_rf(network: NetworkSpec) -> list[RFState]:
    states = []
    state = RF_INPUT
    for layer in network.spatial_layers:
        state = rf_step(state, layer)
        states.append(state)
    return states


def layer_rf(layer: LayerSpec) -> RFState:
    """Receptive field of one layer measured in its own input rows."""
    return rf_step(RF_INPUT, layer)


def rf_oracle(network: NetworkSpec, out_row: int, upto: int | None = None) -> RowSpan:
    """Input rows influencing ``out_row`` of spatial layer ``upto`` (default: last).

    Walks the dependency sets backwards one layer at a time instead of using
    the closed-form jump/field/centre recurrence.
    """
    layers = network.spatial_layers
    if upto is None:
        upto = len(layers) - 1
    heights = network.heights()
    if not 1 <= out_row <= heights[upto + 1]:
        raise NetworkError(f"output row {out_row} outside [1, {heights[upto + 1]}]")
    rows = {out_row}
    clipped = False
    for idx in range(upto, -1, -1):
        layer = layers[idx]
        limit = heights[idx]
        needed = set()
        for o in rows:
            lo, hi = layer.input_span(o, o)
            for i in range(lo, hi + 1):
                if 1 <= i <= limit:
                    needed.add(i)
                else:
                    clipped = True
        rows = needed
    return RowSpan(min(rows), max(rows), clipped)


def load_network(path: str | Path) -> NetworkSpec:
    with open(path) as fh:
        return network_from_dict(json.load(fh))


def network_from_dict(doc: dict) -> NetworkSpec:
    layers = []
    for entry in doc["layers"]:
        entry = dict(entry)
        kind = entry.pop("kind")
        layers.append(LayerSpec(
            kind=kind,
            k=entry.pop("k", 0),
            s=entry.pop("s", 0),
            p=entry.pop("p", 0),
            c_in=entry.pop("c_in"),
            c_out=entry.pop("c_out"),
            relu=entry.pop("relu", False),
        ))
        if entry:
            raise NetworkError(f"unknown layer fields: {sorted(entry)}")
    return NetworkSpec(
        name=doc.get("name", "network"),
        input_height=doc["input_height"],
        input_channels=doc["input_channels"],
        layers=tuple(layers),
    )


def save_network(network: NetworkSpec, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(network.to_dict(), fh, indent=2)
        fh.write("\n")


def vgg16(input_height: int = 224, classes: int = 1000) -> NetworkSpec:
    layers = []
    c = 3
    for width, n_conv in ((64, 2), (128, 2), (256, 3), (512, 3), (512, 3)):
        for _ in range(n_conv):
            layers.append(LayerSpec("conv", 3, 1, 1, c, width, relu=True))
            c = width
        layers.append(LayerSpec("maxpool", 2, 2, 0, c, c))
    side = input_height // 32
    layers += [
        LayerSpec("fc", c_in=c * side * side, c_out=4096, relu=True),
        LayerSpec("fc", c_in=4096, c_out=4096, relu=True),
        LayerSpec("fc", c_in=4096, c_out=classes),
    ]
    return NetworkSpec("vgg16", input_height, 3, tuple(layers))
