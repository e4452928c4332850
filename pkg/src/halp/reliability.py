"""Probability of meeting a batch deadline when the upload time is Gaussian."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from statistics import NormalDist
from typing import NamedTuple

import numpy as np

log = logging.getLogger(__name__)

CHUNK = 1 << 16
Z_95 = 1.959963984540054


class ReliabilityError(ValueError):
    pass


@dataclass(frozen=True)
class OffloadModel:
    rate: float      # bits per second
    payload: float   # bits per batch
    sigma: float     # seconds

    def __post_init__(self):
        if self.rate <= 0 or self.payload <= 0 or self.sigma < 0:
            raise ReliabilityError("need rate > 0, payload > 0 and sigma >= 0")

    @property
    def mu(self) -> float:
        return self.payload / self.rate


@dataclass(frozen=True)
class DeadlineSpec:
    deadline: float
    t_inf: float

    def __post_init__(self):
        if self.deadline <= 0 or self.t_inf < 0:
            raise ReliabilityError("need deadline > 0 and t_inf >= 0")


def min_offload_rate(n_tasks: int, image_bytes: float, target_fps: float) -> float:
    """Upload rate in bit/s that sustains ``target_fps``; batch size does not matter."""
    if n_tasks < 1 or image_bytes < 0 or target_fps < 0:
        raise ReliabilityError("inputs must be non-negative with at least one task")
    return target_fps * image_bytes * 8.0


def rate_fluctuation(model: OffloadModel) -> float:
    """Rate drop whose upload time equals the mean time plus three sigma."""
    return model.rate - model.payload / (model.mu + 3.0 * model.sigma)


def std_normal_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def slack(model: OffloadModel, spec: DeadlineSpec) -> float:
    return spec.deadline - spec.t_inf - model.mu


def reliability_closed_form(model: OffloadModel, spec: DeadlineSpec) -> float:
    s = slack(model, spec)
    if model.sigma == 0:
        return 1.0 if s >= 0 else 0.0
    return std_normal_cdf(s / model.sigma)


def slack_from_probability(p: float, sigma: float) -> float:
    """Invert the closed form: the slack that yields ``p`` at this sigma."""
    if not 0.0 < p < 1.0:
        raise ReliabilityError(f"probability {p} has no finite quantile")
    return NormalDist().inv_cdf(p) * sigma


class MCResult(NamedTuple):
    p: float
    low: float
    high: float
    n: int
    clamped: int

    @property
    def stderr(self) -> float:
        return math.sqrt(max(self.p * (1 - self.p), 0.0) / self.n)


def _chunk(seed_seq: np.random.SeedSequence, size: int, mu: float, sigma: float,
           budget: float) -> tuple[int, int]:
    draws = np.random.default_rng(seed_seq).normal(mu, sigma, size)
    neg = draws < 0
    np.maximum(draws, 0.0, out=draws)
    return int(np.count_nonzero(draws <= budget)), int(np.count_nonzero(neg))


def reliability_monte_carlo(model: OffloadModel, spec: DeadlineSpec, n_samples: int,
                            seed: int = 0, workers: int = 1) -> MCResult:
    """Sampled success fraction with a 95% Wilson interval.

    Samples are split into fixed-size chunks with seeds spawned from ``seed``,
    so the result does not depend on ``workers``.
    """
    if n_samples < 1:
        raise ReliabilityError("n_samples must be at least 1")
    budget = spec.deadline - spec.t_inf
    sizes = [CHUNK] * (n_samples // CHUNK)
    if n_samples % CHUNK:
        sizes.append(n_samples % CHUNK)
    seqs = np.random.SeedSequence(seed).spawn(len(sizes))
    args = [(sq, n, model.mu, model.sigma, budget) for sq, n in zip(seqs, sizes)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda a: _chunk(*a), args))
    else:
        parts = [_chunk(*a) for a in args]
    hits = sum(h for h, _ in parts)
    clamped = sum(c for _, c in parts)
    if clamped:
        log.info("clamped %d negative upload times to 0", clamped)
    p = hits / n_samples
    low, high = wilson_interval(hits, n_samples)
    return MCResult(p, low, high, n_samples, clamped)


def wilson_interval(hits: int, n: int, z: float = Z_95) -> tuple[float, float]:
    p = hits / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    low = 0.0 if hits == 0 else max(0.0, centre - half)
    high = 1.0 if hits == n else min(1.0, centre + half)
    return low, high


# -- table fixture ----------------------------------------------------------------

@dataclass(frozen=True)
class TableCell:
    scheme: str
    rate: float
    sigma: float
    ref: float
    phi_ref: float


@dataclass(frozen=True)
class ReliabilityTable:
    deadline: float
    payload: float
    t_inf: dict[str, float]
    cells: tuple[TableCell, ...]
    saturated: float
    tolerance: dict[str, float]

    def model(self, cell: TableCell) -> OffloadModel:
        return OffloadModel(cell.rate, self.payload, cell.sigma)

    def spec(self, cell: TableCell) -> DeadlineSpec:
        return DeadlineSpec(self.deadline, self.t_inf[cell.scheme])

    def tolerance_for(self, cell: TableCell) -> float:
        return self.tolerance.get(f"{cell.scheme}@{cell.rate / 1e6:g}", self.tolerance["default"])


def table_from_dict(doc: dict) -> ReliabilityTable:
    n = doc["n_tasks"]
    cells = []
    for col in doc["columns"]:
        for scheme, value in col["ref"].items():
            cells.append(TableCell(scheme, col["rate_mbps"] * 1e6, col["sigma_ms"] / 1e3,
                                   float(value), float(col["phi_mbps"])))
    return ReliabilityTable(
        deadline=n / doc["target_fps"],
        payload=n * doc["image_bytes"] * 8.0,
        t_inf={k: n / fps for k, fps in doc["throughput_fps"].items()},
        cells=tuple(cells),
        saturated=float(doc.get("saturated", 0.99999)),
        tolerance={k: float(v) for k, v in doc["tolerance"].items()},
    )


def load_reliability_reference(path=None) -> ReliabilityTable:
    if path is None:
        text = resources.files("halp").joinpath("data/reliability_reference.json").read_text()
        return table_from_dict(json.loads(text))
    with open(path) as fh:
        return table_from_dict(json.load(fh))


def slack_consistency(table: ReliabilityTable) -> list[dict]:
    """Per (scheme, rate): quantile-derived slacks of the printed cells.

    Cells printed as 1 only bound the slack from below (``p >= saturated``);
    the group is consistent when every finite slack meets every such bound and
    the finite slacks agree with each other.
    """
    groups: dict[tuple[str, float], list[TableCell]] = {}
    for cell in table.cells:
        groups.setdefault((cell.scheme, cell.rate), []).append(cell)
    z_sat = NormalDist().inv_cdf(table.saturated)
    out = []
    for (scheme, rate), cells in groups.items():
        exact = [slack_from_probability(c.ref, c.sigma) for c in cells if c.ref < 1.0]
        bounds = [z_sat * c.sigma for c in cells if c.ref >= 1.0]
        spread = max(exact) - min(exact) if len(exact) > 1 else 0.0
        floor = max(bounds) if bounds else -math.inf
        out.append({"scheme": scheme, "rate": rate, "slacks": exact, "lower_bound": floor,
                    "spread": spread,
                    "bound_ok": all(s >= floor for s in exact)})
    return out
