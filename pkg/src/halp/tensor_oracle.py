"""Reference CNN forward pass used to check partitioned execution bit-for-bit.

Tensors are float32 arrays of shape (height, width, channels).  Every output
row of a spatial layer is produced by one call of :func:`_conv_row` or
:func:`_pool_row` on a freshly assembled window of input rows, whether the
row is computed monolithically or on one of the servers of a plan.  Identical
operands through an identical call give identical bits, which is what makes
exact equality between the two paths a meaningful check.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .netspec import LayerSpec, NetworkSpec, output_dim
from .partitioner import HOST, SERVER_ORDER, MissingRows, PartitionPlan, transfer_sizes_oracle

DTYPE = np.float32


def tensor_nbytes(t: np.ndarray) -> int:
    return 4 * int(np.prod(t.shape))


@dataclass
class WeightSet:
    conv: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    fc: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def check(self, network: NetworkSpec) -> None:
        for idx, layer in enumerate(network.spatial_layers):
            if layer.kind != "conv":
                continue
            if idx not in self.conv:
                raise ValueError(f"missing weights for spatial layer {idx}")
            kernel, bias = self.conv[idx]
            if kernel.shape != (layer.k, layer.k, layer.c_in, layer.c_out) or bias.shape != (layer.c_out,):
                raise ValueError(f"layer {idx}: weight shape {kernel.shape} does not match spec")
        if self.fc:
            for (mat, bias), layer in zip(self.fc, network.fc_layers):
                if mat.shape != (layer.c_in, layer.c_out) or bias.shape != (layer.c_out,):
                    raise ValueError(f"fc weight shape {mat.shape} does not match spec")


def random_weights(network: NetworkSpec, seed: int = 0, include_fc: bool = True) -> WeightSet:
    """He-scaled normal weights from ``numpy.random.default_rng(seed)``."""
    rng = np.random.default_rng(seed)
    ws = WeightSet()
    for idx, layer in enumerate(network.spatial_layers):
        if layer.kind != "conv":
            continue
        fan_in = layer.k * layer.k * layer.c_in
        kernel = rng.standard_normal((layer.k, layer.k, layer.c_in, layer.c_out)) * np.sqrt(2.0 / fan_in)
        bias = rng.standard_normal(layer.c_out) * 0.01
        ws.conv[idx] = (kernel.astype(DTYPE), bias.astype(DTYPE))
    if include_fc:
        for layer in network.fc_layers:
            mat = rng.standard_normal((layer.c_in, layer.c_out)) * np.sqrt(2.0 / layer.c_in)
            ws.fc.append((mat.astype(DTYPE), (rng.standard_normal(layer.c_out) * 0.01).astype(DTYPE)))
    return ws


def save_weights(ws: WeightSet, path: str | Path) -> None:
    """Little-endian float32 blob at ``path`` plus a ``.json`` sidecar of shapes."""
    path = Path(path)
    entries = []
    blobs = []
    offset = 0
    for idx in sorted(ws.conv):
        for part, arr in zip(("kernel", "bias"), ws.conv[idx]):
            entries.append({"layer": idx, "kind": "conv", "part": part,
                            "shape": list(arr.shape), "offset": offset})
            blobs.append(arr)
            offset += arr.size
    for n, (mat, bias) in enumerate(ws.fc):
        for part, arr in zip(("matrix", "bias"), (mat, bias)):
            entries.append({"layer": n, "kind": "fc", "part": part,
                            "shape": list(arr.shape), "offset": offset})
            blobs.append(arr)
            offset += arr.size
    with open(path, "wb") as fh:
        for arr in blobs:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path.with_suffix(path.suffix + ".json"), "w") as fh:
        json.dump({"dtype": "float32", "byteorder": "little", "tensors": entries}, fh, indent=2)


def load_weights(path: str | Path) -> WeightSet:
    path = Path(path)
    with open(path.with_suffix(path.suffix + ".json")) as fh:
        meta = json.load(fh)
    flat = np.fromfile(path, dtype="<f4").astype(DTYPE)
    ws = WeightSet()
    conv: dict[int, dict[str, np.ndarray]] = {}
    fc: dict[int, dict[str, np.ndarray]] = {}
    for e in meta["tensors"]:
        size = int(np.prod(e["shape"]))
        arr = flat[e["offset"]:e["offset"] + size].reshape(e["shape"])
        (conv if e["kind"] == "conv" else fc).setdefault(e["layer"], {})[e["part"]] = arr
    ws.conv = {i: (d["kernel"], d["bias"]) for i, d in conv.items()}
    ws.fc = [(fc[i]["matrix"], fc[i]["bias"]) for i in sorted(fc)]
    return ws


# -- row kernels ----------------------------------------------------------------

def _conv_row(window: np.ndarray, layer: LayerSpec, kernel: np.ndarray,
              bias: np.ndarray) -> np.ndarray:
    # window: (k, W + 2p, c_in), already padded
    patches = sliding_window_view(window, layer.k, axis=1)[:, ::layer.s]  # (k, O, c_in, k)
    patches = np.ascontiguousarray(patches.transpose(1, 0, 3, 2)).reshape(patches.shape[1], -1)
    out = patches @ kernel.reshape(-1, layer.c_out)
    out += bias
    if layer.relu:
        np.maximum(out, 0, out=out)
    return out


def _pool_row(window: np.ndarray, layer: LayerSpec) -> np.ndarray:
    cols = sliding_window_view(window, layer.k, axis=1)[:, ::layer.s]  # (k, O, c, k)
    out = cols.max(axis=(0, 3))
    if layer.relu:
        out = np.maximum(out, 0)
    return np.ascontiguousarray(out)


def _fill(layer: LayerSpec) -> float:
    return -np.inf if layer.kind == "maxpool" else 0.0


def _layer_rows(rows: dict[int, np.ndarray], in_height: int, width: int, layer: LayerSpec,
                weights: WeightSet, idx: int, out_band: tuple[int, int],
                allowed: tuple[int, int] | None = None, strict: bool = True) -> np.ndarray:
    """Compute output rows ``out_band`` of one layer from a row store.

    Rows inside ``[1, in_height]`` that are absent from ``rows`` or outside
    ``allowed`` raise :class:`MissingRows` when ``strict``; otherwise they are
    poisoned with NaN so any dependence on them shows up in the result.
    """
    c = layer.c_in
    pad_val = _fill(layer)
    padded_w = width + 2 * layer.p
    out = []
    missing = []
    for o in range(out_band[0], out_band[1] + 1):
        lo, hi = layer.input_span(o, o)
        window = np.full((layer.k, padded_w, c), pad_val, dtype=DTYPE)
        for t, r in enumerate(range(lo, hi + 1)):
            if not 1 <= r <= in_height:
                continue
            ok = r in rows and (allowed is None or allowed[0] <= r <= allowed[1])
            if ok:
                window[t, layer.p:layer.p + width] = rows[r]
            else:
                missing.append(r)
                window[t, layer.p:layer.p + width] = np.nan
        if layer.kind == "conv":
            kernel, bias = weights.conv[idx]
            out.append(_conv_row(window, layer, kernel, bias))
        else:
            out.append(_pool_row(window, layer))
    if missing and strict:
        raise MissingRows(idx, "", sorted(set(missing)))
    return np.stack(out) if out else np.zeros((0, output_dim(width, layer), layer.c_out), DTYPE)


def conv_forward(x: np.ndarray, layer: LayerSpec, weights: WeightSet | None = None,
                 idx: int = 0) -> np.ndarray:
    """Forward one spatial layer over a whole (H, W, C) tensor."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 3 or x.shape[0] != x.shape[1] or x.shape[2] != layer.c_in:
        raise ValueError(f"input shape {x.shape} does not match layer c_in={layer.c_in}")
    h = x.shape[0]
    o = output_dim(h, layer)
    rows = {r + 1: x[r] for r in range(h)}
    return _layer_rows(rows, h, h, layer, weights, idx, (1, o))


def _dense(features: np.ndarray, weights: WeightSet, network: NetworkSpec) -> np.ndarray:
    v = features.reshape(-1)
    for (mat, bias), layer in zip(weights.fc, network.fc_layers):
        v = v @ mat + bias
        if layer.relu:
            v = np.maximum(v, 0)
    return v


def run_full(network: NetworkSpec, weights: WeightSet, image: np.ndarray,
             trace: bool = False):
    """Monolithic forward pass.

    Returns ``(features, scores)`` where ``features`` is the last spatial
    layer's output (or the list of every spatial output when ``trace``) and
    ``scores`` is None unless fc weights are present.
    """
    weights.check(network)
    x = np.asarray(image, dtype=DTYPE)
    expected = (network.input_height, network.input_height, network.input_channels)
    if x.shape != expected:
        raise ValueError(f"image shape {x.shape} != {expected}")
    outputs = []
    for idx, layer in enumerate(network.spatial_layers):
        x = conv_forward(x, layer, weights, idx)
        outputs.append(x)
    scores = _dense(x, weights, network) if weights.fc else None
    return (outputs if trace else x), scores


def run_partitioned(network: NetworkSpec, weights: WeightSet, image: np.ndarray,
                    plan: PartitionPlan, strict: bool = True, trace: bool = False):
    """Execute ``plan`` server by server and merge the sub-outputs.

    Each server owns a row store per layer.  The host starts with the whole
    image and ships each secondary its initial slice; after every layer the
    rows listed by the dependency-based transfer plan are copied between
    stores.  A server may only read rows inside its planned input band.
    """
    weights.check(network)
    image = np.asarray(image, dtype=DTYPE)
    transfers = transfer_sizes_oracle(plan)
    heights = network.heights()
    stores: dict[str, dict[int, np.ndarray]] = {s: {} for s in SERVER_ORDER}
    stores[HOST] = {r + 1: image[r] for r in range(heights[0])}
    for server, band in transfers.initial_rows.items():
        if band is not None:
            for r in range(band[0], band[1] + 1):
                stores[server][r] = image[r - 1]
    merged_trace = []
    for lp, layer in zip(plan.layers, network.spatial_layers):
        produced: dict[str, dict[int, np.ndarray]] = {}
        width = heights[lp.index]
        for server in SERVER_ORDER:
            band = lp.out_rows[server]
            if band is None:
                produced[server] = {}
                continue
            try:
                block = _layer_rows(stores[server], lp.in_height, width, layer, weights,
                                    lp.index, band, lp.in_rows[server], strict)
            except MissingRows as exc:
                raise MissingRows(lp.index, server, exc.rows) from None
            produced[server] = {band[0] + n: block[n] for n in range(block.shape[0])}
        merged = np.stack([produced[lp.owner(r)][r] for r in range(1, lp.out_height + 1)])
        merged_trace.append(merged)
        stores = {s: dict(produced[s]) for s in SERVER_ORDER}
        for t in transfers.transfers:
            if t.layer != lp.index or lp.index == len(plan.layers) - 1:
                continue
            for r in range(t.rows[0], t.rows[1] + 1):
                stores[t.dst][r] = produced[t.src][r]
    return merged_trace if trace else merged_trace[-1]


def mutate_plan(plan: PartitionPlan, layer: int, server: str, side: str) -> PartitionPlan:
    """Drop one boundary row (``side`` = "start" or "end") from a server's input band."""
    lp = plan.layers[layer]
    lo, hi = lp.in_rows[server]
    band = (lo + 1, hi) if side == "start" else (lo, hi - 1)
    in_rows = dict(lp.in_rows)
    in_rows[server] = band
    layers = list(plan.layers)
    layers[layer] = replace(lp, in_rows=in_rows)
    return replace(plan, layers=tuple(layers))


def naive_forward(network: NetworkSpec, weights: WeightSet, image) -> list:
    """Nested-loop float64 forward pass over plain lists; slow, for tiny nets only."""
    h = network.input_height
    x = [[[float(image[r][c][ch]) for ch in range(network.input_channels)]
          for c in range(h)] for r in range(h)]
    for idx, layer in enumerate(network.spatial_layers):
        o = output_dim(h, layer)
        y = [[[0.0] * layer.c_out for _ in range(o)] for _ in range(o)]
        for orow in range(o):
            for ocol in range(o):
                for co in range(layer.c_out):
                    if layer.kind == "conv":
                        acc = float(weights.conv[idx][1][co])
                    else:
                        acc = -float("inf")
                    for dr in range(layer.k):
                        for dc in range(layer.k):
                            r = orow * layer.s + dr - layer.p
                            c = ocol * layer.s + dc - layer.p
                            if not (0 <= r < h and 0 <= c < h):
                                continue
                            if layer.kind == "conv":
                                for ci in range(layer.c_in):
                                    acc += x[r][c][ci] * float(weights.conv[idx][0][dr, dc, ci, co])
                            else:
                                acc = max(acc, x[r][c][co])
                    if layer.relu:
                        acc = max(acc, 0.0)
                    y[orow][ocol][co] = acc
        x, h = y, o
    return x
