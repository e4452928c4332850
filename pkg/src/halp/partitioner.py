"""Row partitioning of spatial layers across one host and two secondary servers.

Every spatial layer's output rows are cut into three contiguous bands in the
vertical order e1 (top), e0 (host, the overlapping zone), e2 (bottom).  Each
server then needs a band of the layer's input rows, and rows it does not hold
after the previous layer have to be shipped to it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

from .netspec import LayerSpec, NetworkSpec, RFState, layer_rf, rf_oracle

log = logging.getLogger(__name__)

HOST = "e0"
SECONDARIES = ("e1", "e2")
SERVER_ORDER = ("e1", "e0", "e2")  # top-to-bottom
BYTES_PER_ELEMENT = 4

Interval = tuple[int, int]
Ratio = tuple[Fraction, Fraction, Fraction]  # (e1, e0, e2)


class PartitionError(ValueError):
    pass


class NegativeSize(PartitionError):
    def __init__(self, layer: int, link: str, rows: int):
        super().__init__(f"layer {layer} link {link}: literal size evaluates to {rows} rows")
        self.layer = layer
        self.link = link
        self.rows = rows


class MissingRows(PartitionError):
    def __init__(self, layer: int, server: str, rows: Sequence[int]):
        rows = list(rows)
        super().__init__(f"layer {layer} server {server}: rows {rows[:8]} unavailable")
        self.layer = layer
        self.server = server
        self.rows = rows


def _count(iv: Interval | None) -> int:
    return 0 if iv is None else iv[1] - iv[0] + 1


def _intersect(a: Interval | None, b: Interval | None) -> Interval | None:
    if a is None or b is None:
        return None
    lo, hi = max(a[0], b[0]), min(a[1], b[1])
    return (lo, hi) if lo <= hi else None


@dataclass(frozen=True)
class LayerPlan:
    index: int
    kind: str
    in_height: int
    out_height: int
    out_rows: dict[str, Interval | None]
    in_rows: dict[str, Interval | None]

    def owner(self, row: int) -> str:
        for server, iv in self.out_rows.items():
            if iv is not None and iv[0] <= row <= iv[1]:
                return server
        raise PartitionError(f"layer {self.index}: row {row} has no owner")

    @property
    def ratios(self) -> Ratio:
        return tuple(Fraction(_count(self.out_rows[s]), self.out_height)
                     for s in SERVER_ORDER)


@dataclass(frozen=True)
class PartitionPlan:
    network: NetworkSpec
    layers: tuple[LayerPlan, ...]
    bounds: str = "exact"
    widened: tuple[tuple[int, str], ...] = ()

    def to_dict(self) -> dict:
        spatial = self.network.spatial_layers
        return {
            "network": self.network.name,
            "bounds": self.bounds,
            "layers": [
                {
                    "index": lp.index,
                    "kind": lp.kind,
                    "k": spatial[lp.index].k,
                    "s": spatial[lp.index].s,
                    "p": spatial[lp.index].p,
                    "in_height": lp.in_height,
                    "out_height": lp.out_height,
                    "eta": {s: str(r) for s, r in zip(SERVER_ORDER, lp.ratios)},
                    "out_rows": {s: list(iv) if iv else None for s, iv in lp.out_rows.items()},
                    "in_rows": {s: list(iv) if iv else None for s, iv in lp.in_rows.items()},
                }
                for lp in self.layers
            ],
        }


@dataclass(frozen=True)
class Transfer:
    layer: int       # producing layer; rows are rows of its output
    src: str
    dst: str
    rows: Interval
    nbytes: int

    @property
    def n_rows(self) -> int:
        return _count(self.rows)


@dataclass
class TransferPlan:
    """Byte counts of the initial image slices and of every inter-layer exchange."""

    initial: dict[str, int] = field(default_factory=dict)
    initial_rows: dict[str, Interval | None] = field(default_factory=dict)
    transfers: list[Transfer] = field(default_factory=list)

    def nbytes(self, layer: int, src: str, dst: str) -> int:
        return sum(t.nbytes for t in self.transfers
                   if t.layer == layer and t.src == src and t.dst == dst)

    def rows(self, layer: int, src: str, dst: str) -> int:
        return sum(t.n_rows for t in self.transfers
                   if t.layer == layer and t.src == src and t.dst == dst)

    def peer_transfers(self) -> list[Transfer]:
        return [t for t in self.transfers if HOST not in (t.src, t.dst)]

    def to_dict(self) -> dict:
        return {
            "initial": dict(self.initial),
            "initial_rows": {s: list(iv) if iv else None for s, iv in self.initial_rows.items()},
            "transfers": [
                {"layer": t.layer, "src": t.src, "dst": t.dst,
                 "rows": list(t.rows), "bytes": t.nbytes}
                for t in self.transfers
            ],
        }


def split_output(out_height: int, ratio: Sequence[Fraction]) -> dict[str, Interval | None]:
    eta = [Fraction(r) for r in ratio]
    if len(eta) != 3 or any(r < 0 or r > 1 for r in eta):
        raise PartitionError(f"ratios must be three values in [0, 1], got {ratio}")
    if sum(eta) != 1:
        raise PartitionError(f"ratios must sum to 1 (got {sum(eta)})")
    cuts = [eta[0] * out_height, (eta[0] + eta[1]) * out_height]
    if any(c.denominator != 1 for c in cuts):
        raise PartitionError(f"ratios {ratio} do not split {out_height} rows into whole rows")
    a, b = int(cuts[0]), int(cuts[1])
    bands = {"e1": (1, a), "e0": (a + 1, b), "e2": (b + 1, out_height)}
    return {s: (iv if iv[0] <= iv[1] else None) for s, iv in bands.items()}


def round_ratio(out_height: int, ratio: Sequence[float | Fraction]) -> Ratio:
    """Nearest whole-row split; cut points round half up so ties favour e1."""
    total = sum(Fraction(r) for r in ratio)
    if total <= 0:
        raise PartitionError("ratios must have a positive sum")
    eta = [Fraction(r) / total for r in ratio]
    a = math.floor(eta[0] * out_height + Fraction(1, 2))
    b = math.floor((eta[0] + eta[1]) * out_height + Fraction(1, 2))
    b = max(a, min(b, out_height))
    return (Fraction(a, out_height), Fraction(b - a, out_height),
            Fraction(out_height - b, out_height))


def input_range(rf: RFState, out_rows: Interval, in_height: int) -> Interval:
    """Input rows of one server from the layer-local receptive field.

    Literal jump/field/centre formula; with even kernels the centre is
    half-integral, so the start is floored and the end ceiled.
    """
    os_, oe = out_rows
    if oe < os_:
        raise PartitionError("empty output band has no input range")
    half = (rf.r - 1) // 2
    start = math.floor(rf.sigma + (os_ - 1) * rf.j - half)
    end = math.ceil(rf.sigma + (oe + 1) * rf.j - half)
    start, end = max(start, 1), min(end, in_height)
    if start > end:
        raise PartitionError(f"input range collapsed to [{start}, {end}]")
    return start, end


def exact_input_range(layer: LayerSpec, out_rows: Interval, in_height: int) -> Interval:
    lo, hi = layer.input_span(*out_rows)
    return max(lo, 1), min(hi, in_height)


def _check_ratios(network: NetworkSpec, ratios: Sequence[Sequence[Fraction]]):
    n = len(network.spatial_layers)
    if len(ratios) != n:
        raise PartitionError(f"need ratios for {n} spatial layers, got {len(ratios)}")


def plan_partition(network: NetworkSpec, ratios: Sequence[Sequence[Fraction]],
                   bounds: str = "exact") -> PartitionPlan:
    """Build the per-layer row plan.

    ``bounds="exact"`` uses the minimal dependency interval of each band;
    ``bounds="formula"`` uses :func:`input_range` and widens it wherever the
    closed form under-covers (kernels wider than twice the stride plus one).
    """
    if bounds not in ("exact", "formula"):
        raise PartitionError(f"unknown bounds mode {bounds!r}")
    _check_ratios(network, ratios)
    heights = network.heights()
    plans = []
    widened = []
    for idx, layer in enumerate(network.spatial_layers):
        in_h, out_h = heights[idx], heights[idx + 1]
        out_rows = split_output(out_h, ratios[idx])
        in_rows = {}
        for server, band in out_rows.items():
            if band is None:
                in_rows[server] = None
                continue
            need = exact_input_range(layer, band, in_h)
            if bounds == "exact":
                in_rows[server] = need
                continue
            got = input_range(layer_rf(layer), band, in_h)
            if got[0] > need[0] or got[1] < need[1]:
                log.warning("layer %d %s: formula range %s misses rows of %s; widened",
                            idx, server, got, need)
                widened.append((idx, server))
                got = (min(got[0], need[0]), max(got[1], need[1]))
            in_rows[server] = got
        plans.append(LayerPlan(idx, layer.kind, in_h, out_h, out_rows, in_rows))
    plan = PartitionPlan(network, tuple(plans), bounds, tuple(widened))
    verify_coverage(plan, use_oracle=network.input_height <= 64)
    return plan


def verify_coverage(plan: PartitionPlan, use_oracle: bool = False) -> None:
    """Every output row's dependencies must sit inside its server's input band."""
    spatial = plan.network.spatial_layers
    for lp in plan.layers:
        layer = spatial[lp.index]
        bands = [iv for iv in lp.out_rows.values() if iv is not None]
        rows = sorted(r for iv in bands for r in range(iv[0], iv[1] + 1))
        if rows != list(range(1, lp.out_height + 1)):
            raise PartitionError(f"layer {lp.index}: output bands do not tile [1, {lp.out_height}]")
        for server, band in lp.out_rows.items():
            if band is None:
                continue
            have = lp.in_rows[server]
            if have is None or not 1 <= have[0] <= have[1] <= lp.in_height:
                raise PartitionError(f"layer {lp.index} {server}: bad input band {have}")
            if use_oracle:
                single = _single_layer_net(plan.network, lp.index, lp.in_height)
                need = [rf_oracle(single, o) for o in (band[0], band[1])]
                lo, hi = need[0].start, need[1].end
            else:
                lo, hi = exact_input_range(layer, band, lp.in_height)
            if lo < have[0] or hi > have[1]:
                raise PartitionError(
                    f"layer {lp.index} {server}: needs rows [{lo}, {hi}], band is {have}")


def _single_layer_net(network: NetworkSpec, idx: int, in_height: int) -> NetworkSpec:
    layer = network.spatial_layers[idx]
    return NetworkSpec(f"{network.name}[{idx}]", in_height, layer.c_in, (layer,))


# -- ratio policies -----------------------------------------------------------

def _straddlers(layer: LayerSpec, out_h: int, cut: int) -> Interval | None:
    """Output rows whose input span covers both row ``cut`` and ``cut + 1``."""
    rows = [o for o in range(1, out_h + 1)
            if layer.input_span(o, o)[0] <= cut < layer.input_span(o, o)[1]]
    return (rows[0], rows[-1]) if rows else None


def balanced_ratios(network: NetworkSpec) -> list[Ratio]:
    """Halves for the secondaries plus a minimal host band around the cut.

    Convolutions give the host the rows whose receptive field straddles the
    middle of the host's previous band.  Pools instead let each secondary keep
    every row it can compute from its own data, so the host never has to ship
    rows forward ahead of a pooling layer.
    """
    heights = network.heights()
    ratios = []
    held = None  # (a, b): e1 holds [1, a], host [a+1, b], e2 [b+1, in_h]
    for idx, layer in enumerate(network.spatial_layers):
        in_h, out_h = heights[idx], heights[idx + 1]
        if held is None:
            held = (in_h // 2, in_h // 2)
        a, b = held
        if layer.kind == "maxpool":
            top = sum(1 for o in range(1, out_h + 1) if layer.input_span(o, o)[1] <= a)
            bottom = sum(1 for o in range(1, out_h + 1) if layer.input_span(o, o)[0] >= b + 1)
            top = min(top, out_h)
            bottom = min(bottom, out_h - top)
            a2, b2 = top, out_h - bottom
        else:
            cut = (a + b) // 2 if b > a else a
            band = _straddlers(layer, out_h, cut)
            if band is None:
                # no row straddles: split where the input cut maps to
                a2 = sum(1 for o in range(1, out_h + 1) if layer.input_span(o, o)[1] <= cut)
                b2 = a2
            else:
                a2, b2 = band[0] - 1, band[1]
        ratios.append((Fraction(a2, out_h), Fraction(b2 - a2, out_h), Fraction(out_h - b2, out_h)))
        held = (a2, b2)
    return ratios


def uniform_ratios(network: NetworkSpec, ratio: Sequence[float | Fraction]) -> list[Ratio]:
    heights = network.heights()
    return [round_ratio(h, ratio) for h in heights[1:]]


def single_server_ratios(network: NetworkSpec) -> list[Ratio]:
    return [(Fraction(1), Fraction(0), Fraction(0))] * len(network.spatial_layers)


def ratios_for_policy(network: NetworkSpec, policy: str | Sequence) -> list[Ratio]:
    if isinstance(policy, str):
        if policy == "balanced":
            return balanced_ratios(network)
        if policy == "halves":
            return uniform_ratios(network, (Fraction(1, 2), 0, Fraction(1, 2)))
        if policy == "single":
            return single_server_ratios(network)
        try:
            parts = [Fraction(x.strip()) for x in policy.split(",")]
        except ValueError:
            raise PartitionError(f"unknown split policy {policy!r}") from None
        if len(parts) != 3:
            raise PartitionError(f"unknown split policy {policy!r}")
        if sum(parts) != 1:
            raise PartitionError(f"ratios {policy} sum to {sum(parts)}, not 1")
        return uniform_ratios(network, parts)
    parts = [Fraction(x) for x in policy]
    if sum(parts) != 1:
        raise PartitionError(f"ratios {policy} sum to {sum(parts)}, not 1")
    return uniform_ratios(network, parts)


# -- transfer sizes -----------------------------------------------------------

def _row_bytes(height_or_width: int, channels: int) -> int:
    return BYTES_PER_ELEMENT * height_or_width * channels


def transfer_sizes_oracle(plan: PartitionPlan) -> TransferPlan:
    """Rows each server must receive, found by set difference of needed vs held."""
    net = plan.network
    spatial = net.spatial_layers
    heights = net.heights()
    tp = TransferPlan()
    first = plan.layers[0]
    for server in SECONDARIES:
        band = first.in_rows[server]
        tp.initial_rows[server] = band
        tp.initial[server] = _count(band) * _row_bytes(heights[0], net.input_channels)
    for lp, nxt in zip(plan.layers, plan.layers[1:]):
        width, channels = heights[lp.index + 1], spatial[lp.index].c_out
        for dst in SERVER_ORDER:
            need = nxt.in_rows[dst]
            if need is None:
                continue
            covered = 0
            for src in SERVER_ORDER:
                part = _intersect(need, lp.out_rows[src])
                if part is None:
                    continue
                covered += _count(part)
                if src != dst:
                    tp.transfers.append(Transfer(lp.index, src, dst, part,
                                                 _count(part) * _row_bytes(width, channels)))
            if covered != _count(need):
                held = [r for r in range(need[0], need[1] + 1)
                        if not any(_intersect((r, r), iv) for iv in lp.out_rows.values())]
                raise MissingRows(nxt.index, dst, held)
    last = plan.layers[-1]
    width, channels = heights[-1], spatial[-1].c_out
    for src in SECONDARIES:
        band = last.out_rows[src]
        if band is not None:
            tp.transfers.append(Transfer(last.index, src, HOST, band,
                                         _count(band) * _row_bytes(width, channels)))
    return tp


def transfer_sizes_closed_form(plan: PartitionPlan, corrected: bool = False) -> TransferPlan:
    """Closed-form exchange sizes.

    Transfers are attributed to the producing layer.  With ``corrected=False``
    the formulas are evaluated as printed (producer rows counted as
    ``IS - OE + 1`` and sized with the producer's *input* width and channels)
    and a negative row count raises :class:`NegativeSize`.  ``corrected=True``
    orders each difference from the later row to the earlier one, sizes rows
    with the tensor actually sent and clamps disjoint bands to zero.
    """
    net = plan.network
    spatial = net.spatial_layers
    heights = net.heights()
    tp = TransferPlan()
    first = plan.layers[0]
    for server in SECONDARIES:
        band = first.in_rows[server]
        tp.initial_rows[server] = band
        tp.initial[server] = _count(band) * _row_bytes(heights[0], net.input_channels)

    def emit(layer, src, dst, rows, width, channels, link):
        if rows < 0:
            if not corrected:
                raise NegativeSize(layer, link, rows)
            rows = 0
        if rows:
            tp.transfers.append(Transfer(layer, src, dst, (0, rows - 1),
                                         rows * _row_bytes(width, channels)))

    n = len(plan.layers)
    for i, lp in enumerate(plan.layers):
        layer = spatial[lp.index]
        host = lp.out_rows[HOST]
        if i == n - 1:
            for src in SECONDARIES:
                band = lp.out_rows[src]
                emit(i, src, HOST, _count(band), heights[i + 1], layer.c_out, f"{src}->e0")
            continue
        nxt = plan.layers[i + 1]
        # host -> secondaries feed layer i+1; rows of layer i output
        w_next, c_next = heights[i + 1], spatial[i + 1].c_in
        ie1 = nxt.in_rows["e1"][1] if nxt.in_rows["e1"] else 0
        is2 = nxt.in_rows["e2"][0] if nxt.in_rows["e2"] else heights[i + 1] + 1
        n_host = _count(host)
        if host is None:
            pass
        elif corrected:
            emit(i, HOST, "e1", min(ie1 - host[0] + 1, n_host), w_next, c_next, "e0->e1")
            emit(i, HOST, "e2", min(host[1] - is2 + 1, n_host), w_next, c_next, "e0->e2")
        else:
            emit(i, HOST, "e1", ie1 - host[0] + 1, w_next, c_next, "e0->e1")
            emit(i, HOST, "e2", is2 - host[1] + 1, w_next, c_next, "e0->e2")
        # secondaries -> host
        if nxt.in_rows[HOST] is None:
            continue
        if not corrected and nxt.out_rows[HOST] is None:
            continue
        is0, ie0 = nxt.in_rows[HOST]
        oe1 = lp.out_rows["e1"][1] if lp.out_rows["e1"] else 0
        if corrected:
            os2 = lp.out_rows["e2"][0] if lp.out_rows["e2"] else heights[i + 1] + 1
            emit(i, "e1", HOST, min(oe1 - is0 + 1, _count(lp.out_rows["e1"])),
                 heights[i + 1], layer.c_out, "e1->e0")
            emit(i, "e2", HOST, min(ie0 - os2 + 1, _count(lp.out_rows["e2"])),
                 heights[i + 1], layer.c_out, "e2->e0")
        else:
            is2_here = lp.in_rows["e2"][0] if lp.in_rows["e2"] else lp.in_height + 1
            oe0_next = nxt.out_rows[HOST][1]
            emit(i, "e1", HOST, is0 - oe1 + 1, lp.in_height, layer.c_in, "e1->e0")
            emit(i, "e2", HOST, is2_here - oe0_next + 1, lp.in_height, layer.c_in, "e2->e0")
    return tp


def compare_transfers(ref: TransferPlan, oracle: TransferPlan, n_layers: int,
                      links: Iterable[tuple[str, str]] = (("e0", "e1"), ("e0", "e2"),
                                                           ("e1", "e0"), ("e2", "e0"))):
    """Row-count differences per (layer, link); logs every non-zero entry."""
    diffs = {}
    for layer in range(n_layers):
        for src, dst in links:
            d = ref.rows(layer, src, dst) - oracle.rows(layer, src, dst)
            diffs[(layer, f"{src}->{dst}")] = d
            if d:
                log.info("layer %d %s->%s: closed form %+d rows vs dependency count",
                         layer, src, dst, d)
    return diffs
