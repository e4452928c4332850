"""Timeline evaluation of host-assisted layer-wise parallel inference and baselines.

All times are seconds internally.  The evaluator is a deterministic fold of
``max`` and ``+`` over per-layer timing terms; the terms come either from a
measured table (e.g. ``data/two_layer_terms.json``)
or from the analytic FLOP model calibrated so a standalone run takes
``t_pre``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .netspec import LayerSpec, NetworkSpec
from .partitioner import (HOST, SECONDARIES, PartitionPlan, TransferPlan, balanced_ratios,
                          exact_input_range, plan_partition, ratios_for_policy,
                          transfer_sizes_oracle)

FLOPS_PER_MAC = 2
SCHEMES = ("halp", "conventional", "modnn_original", "modnn_enhanced", "standalone")


class ScheduleError(ValueError):
    pass


# -- profiles ---------------------------------------------------------------------

@dataclass(frozen=True)
class DeviceProfile:
    name: str
    flops: float
    t_pre: float
    t_fls: float = 0.0
    mode: str = "analytic"
    layer_times: tuple[float, ...] | None = None
    utilization: float | None = None

    def __post_init__(self):
        if self.flops <= 0 or self.t_pre <= 0 or self.t_fls < 0:
            raise ScheduleError(f"profile {self.name}: flops, t_pre must be > 0 and t_fls >= 0")
        if self.mode not in ("analytic", "table"):
            raise ScheduleError(f"unknown profile mode {self.mode!r}")

    def calibrated(self, network: NetworkSpec) -> "DeviceProfile":
        """Fix the utilisation so full-image layer times plus ``t_fls`` equal ``t_pre``."""
        if self.mode == "table":
            if self.layer_times is None or len(self.layer_times) != len(network.spatial_layers):
                raise ScheduleError("table profile must list a time for every spatial layer")
            return self
        budget = self.t_pre - self.t_fls
        if budget <= 0:
            raise ScheduleError(f"t_fls={self.t_fls} leaves no time for the spatial layers")
        heights = network.heights()
        macs = sum(layer_macs(l, heights[i + 1], heights[i + 1])
                   for i, l in enumerate(network.spatial_layers))
        return replace(self, utilization=FLOPS_PER_MAC * macs / (self.flops * budget))

    def to_dict(self) -> dict:
        d = {"name": self.name, "flops": self.flops, "t_pre": self.t_pre,
             "t_fls": self.t_fls, "mode": self.mode}
        if self.layer_times is not None:
            d["layer_times"] = list(self.layer_times)
        return d


def profile_from_dict(doc: dict) -> DeviceProfile:
    lt = doc.get("layer_times")
    return DeviceProfile(name=doc["name"], flops=float(doc["flops"]), t_pre=float(doc["t_pre"]),
                         t_fls=float(doc.get("t_fls", 0.0)), mode=doc.get("mode", "analytic"),
                         layer_times=tuple(lt) if lt is not None else None)


def load_profile(path: str | Path) -> DeviceProfile:
    with open(path) as fh:
        return profile_from_dict(json.load(fh))


@dataclass(frozen=True)
class LinkProfile:
    rate: float          # bits per second
    overhead: float = 0.0

    def __post_init__(self):
        if self.rate <= 0:
            raise ScheduleError("link rate must be positive")

    def time(self, nbytes: int) -> float:
        return 0.0 if nbytes <= 0 else 8.0 * nbytes / self.rate + self.overhead


def layer_macs(layer: LayerSpec, rows: int, out_width: int) -> int:
    if layer.kind == "conv":
        return rows * out_width * layer.c_out * layer.k * layer.k * layer.c_in
    return rows * out_width * layer.c_out * layer.k * layer.k


def compute_time(layer: LayerSpec, rows: int, out_width: int, profile: DeviceProfile,
                 index: int | None = None) -> float:
    if rows <= 0:
        return 0.0
    if profile.mode == "table":
        if profile.layer_times is None or index is None:
            raise ScheduleError("table mode needs the layer index and a time table")
        return profile.layer_times[index] * rows / out_width
    if profile.utilization is None:
        raise ScheduleError(f"profile {profile.name} is not calibrated")
    return FLOPS_PER_MAC * layer_macs(layer, rows, out_width) / (profile.flops * profile.utilization)


# -- timing terms -----------------------------------------------------------------

@dataclass
class LayerTerms:
    """Per-layer terms keyed by secondary name; host terms keyed by destination."""

    t_int: dict[str, float]
    cmp_to_host: dict[str, float]
    com_to_host: dict[str, float]
    cmp_own: dict[str, float]
    host_cmp_to: dict[str, float]
    host_com_to: dict[str, float]
    host_cmp_own: float = 0.0

    def scaled(self, factor: float) -> "LayerTerms":
        def sc(d):
            return {k: v * factor for k, v in d.items()}
        return LayerTerms(sc(self.t_int), sc(self.cmp_to_host), sc(self.com_to_host),
                          sc(self.cmp_own), sc(self.host_cmp_to), sc(self.host_com_to),
                          self.host_cmp_own * factor)


@dataclass
class TimingTerms:
    secondaries: tuple[str, ...]
    layers: list[LayerTerms]
    t_fls: float = 0.0
    t_pre: float | None = None
    # True when the layers are a prefix of a longer network (no g_N branch)
    partial: bool = False
    names: tuple[str, ...] = ()

    def validate(self):
        for lt in self.layers:
            for d in (lt.t_int, lt.cmp_to_host, lt.com_to_host, lt.cmp_own,
                      lt.host_cmp_to, lt.host_com_to):
                if set(d) != set(self.secondaries):
                    raise ScheduleError(f"terms keyed by {sorted(d)}, expected {self.secondaries}")
                if any(v < 0 for v in d.values()):
                    raise ScheduleError("timing terms must be non-negative")
            if lt.host_cmp_own < 0:
                raise ScheduleError("timing terms must be non-negative")


def terms_from_dict(doc: dict) -> TimingTerms:
    """Read a terms document; scalar entries apply to every secondary."""
    scale = {"s": 1.0, "ms": 1e-3, "us": 1e-6}[doc.get("unit", "s")]
    secs = tuple(doc.get("secondaries", SECONDARIES))

    def per(value):
        if isinstance(value, dict):
            if set(value) != set(secs):
                raise ScheduleError(f"terms keyed by {sorted(value)}, expected {list(secs)}")
            return {k: float(value[k]) * scale for k in secs}
        return {k: float(value) * scale for k in secs}

    layers = []
    for entry in doc["layers"]:
        layers.append(LayerTerms(
            t_int=per(entry.get("t_int", 0.0)),
            cmp_to_host=per(entry.get("cmp_to_host", 0.0)),
            com_to_host=per(entry.get("com_to_host", 0.0)),
            cmp_own=per(entry.get("cmp_own", 0.0)),
            host_cmp_to=per(entry.get("host_cmp_to", 0.0)),
            host_com_to=per(entry.get("host_com_to", 0.0)),
            host_cmp_own=float(entry.get("host_cmp_own", 0.0)) * scale,
        ))
    t_pre = doc.get("t_pre")
    terms = TimingTerms(secs, layers, float(doc.get("t_fls", 0.0)) * scale,
                        None if t_pre is None else float(t_pre) * scale,
                        bool(doc.get("partial", False)),
                        tuple(e.get("name", f"g{i + 1}") for i, e in enumerate(doc["layers"])))
    terms.validate()
    return terms


def load_terms(path: str | Path) -> TimingTerms:
    with open(path) as fh:
        return terms_from_dict(json.load(fh))


def derive_terms(plan: PartitionPlan, transfers: TransferPlan, device: DeviceProfile,
                 link: LinkProfile) -> TimingTerms:
    """Timing terms of one task from its row plan, transfer plan and profiles."""
    if transfers.peer_transfers():
        raise ScheduleError("plan needs secondary-to-secondary transfers; not schedulable")
    net = plan.network
    if device.mode == "analytic" and device.utilization is None:
        device = device.calibrated(net)
    spatial = net.spatial_layers
    heights = net.heights()
    n = len(plan.layers)
    layers = []
    for lp in plan.layers:
        i = lp.index
        layer = spatial[i]
        width = heights[i + 1]
        last = i == n - 1

        def ct(rows):
            return compute_time(layer, rows, width, device, i)

        lt = LayerTerms({}, {}, {}, {}, {}, {}, 0.0)
        for k in SECONDARIES:
            band = lp.out_rows[k]
            rows = 0 if band is None else band[1] - band[0] + 1
            to_host = transfers.rows(i, k, HOST)
            lt.t_int[k] = link.time(transfers.initial.get(k, 0)) if i == 0 else 0.0
            if last:
                lt.cmp_to_host[k] = 0.0
                lt.cmp_own[k] = ct(rows)
            else:
                lt.cmp_to_host[k] = ct(to_host)
                lt.cmp_own[k] = ct(rows - to_host)
            lt.com_to_host[k] = link.time(transfers.nbytes(i, k, HOST))
        host = lp.out_rows[HOST]
        host_rows = 0 if host is None else host[1] - host[0] + 1
        sent: set[int] = set()
        for k in SECONDARIES:
            rows_k = set()
            for t in transfers.transfers:
                if t.layer == i and t.src == HOST and t.dst == k:
                    rows_k.update(range(t.rows[0], t.rows[1] + 1))
            fresh = rows_k - sent
            sent |= rows_k
            lt.host_cmp_to[k] = ct(len(fresh))
            lt.host_com_to[k] = link.time(transfers.nbytes(i, HOST, k))
        lt.host_cmp_own = ct(host_rows - len(sent))
        layers.append(lt)
    names = tuple(f"{spatial[i].kind}{i + 1}" for i in range(n))
    terms = TimingTerms(SECONDARIES, layers, device.t_fls, device.t_pre, names=names)
    terms.validate()
    return terms


def combine_tasks(per_task: Sequence[TimingTerms]) -> TimingTerms:
    """Stack single-task terms into one host with secondaries e1..e_2n."""
    if not per_task:
        raise ScheduleError("need at least one task")
    n_layers = len(per_task[0].layers)
    if any(len(t.layers) != n_layers for t in per_task):
        raise ScheduleError("tasks must have the same number of layers")
    secs = []
    rename = []
    for t_idx, terms in enumerate(per_task):
        mapping = {s: f"e{len(terms.secondaries) * t_idx + n + 1}"
                   for n, s in enumerate(terms.secondaries)}
        rename.append(mapping)
        secs.extend(mapping.values())
    layers = []
    for i in range(n_layers):
        merged = LayerTerms({}, {}, {}, {}, {}, {}, 0.0)
        for terms, mapping in zip(per_task, rename):
            lt = terms.layers[i]
            for field_name in ("t_int", "cmp_to_host", "com_to_host", "cmp_own",
                               "host_cmp_to", "host_com_to"):
                src = getattr(lt, field_name)
                getattr(merged, field_name).update({mapping[k]: v for k, v in src.items()})
            merged.host_cmp_own += lt.host_cmp_own
        layers.append(merged)
    first = per_task[0]
    return TimingTerms(tuple(secs), layers, first.t_fls, first.t_pre, first.partial, first.names)


# -- recurrences ------------------------------------------------------------------

def secondary_layer_time(lt: LayerTerms, k: str, first_layer: bool) -> float:
    t = lt.cmp_to_host[k] + max(lt.com_to_host[k], lt.cmp_own[k])
    return t + lt.t_int[k] if first_layer else t


def host_layer_time(lt: LayerTerms, order: Sequence[str], last_layer: bool) -> float:
    """Host busy time: boundary rows computed in secondary order, each sent when ready.

    Own rows (needed by no secondary) are computed after the boundary rows.
    """
    if last_layer:
        return lt.host_cmp_own
    prefix = 0.0
    best = 0.0
    for k in order:
        prefix += lt.host_cmp_to[k]
        best = max(best, prefix + lt.host_com_to[k])
    return max(best, prefix + lt.host_cmp_own)


@dataclass
class Event:
    layer: int
    server: str
    kind: str
    start: float
    end: float
    peer: str = ""


@dataclass
class Timeline:
    scheme: str
    completion: list[dict[str, float]]
    layer_end: list[float]
    t_fls: float
    n_tasks: int = 1
    t_pre: float | None = None
    events: list[Event] = field(default_factory=list)
    comm_share: list[float] = field(default_factory=list)
    avg_delay_override: float | None = None
    makespan_override: float | None = None

    @property
    def latency(self) -> float:
        if self.makespan_override is not None:
            return self.makespan_override
        return (self.layer_end[-1] if self.layer_end else 0.0) + self.t_fls

    @property
    def avg_delay(self) -> float:
        return self.latency if self.avg_delay_override is None else self.avg_delay_override

    @property
    def throughput(self) -> float:
        return self.n_tasks / self.latency

    def summary(self) -> dict:
        out = {"scheme": self.scheme, "n_tasks": self.n_tasks,
               "latency_ms": self.latency * 1e3, "avg_delay_ms": self.avg_delay * 1e3,
               "throughput_fps": self.throughput}
        if self.t_pre:
            rho, x = speedup(self.avg_delay, self.t_pre)
            out.update(rho=rho, x_factor=x)
        return out


def evaluate_halp(terms: TimingTerms, n_tasks: int = 1) -> Timeline:
    terms.validate()
    order = terms.secondaries
    n = len(terms.layers)
    sec_end = {k: 0.0 for k in order}
    host_end = 0.0
    completion, layer_end, events = [], [], []
    for i, lt in enumerate(terms.layers):
        first = i == 0
        last = i == n - 1 and not terms.partial
        prev_sec = {k: (lt.t_int[k] if first else sec_end[k]) for k in order}
        t_host = host_layer_time(lt, order, last)
        if last:
            arrivals = [prev_sec[k] + lt.cmp_to_host[k] + lt.cmp_own[k] + lt.com_to_host[k]
                        for k in order]
        else:
            arrivals = [prev_sec[k] + lt.cmp_to_host[k] + lt.com_to_host[k] for k in order]
        new_host = max([t_host + host_end] + arrivals)
        _host_events(events, i, lt, order, host_end, new_host, last, first)
        for k in order:
            start = sec_end[k]
            new = start + secondary_layer_time(lt, k, first)
            _secondary_events(events, i, k, lt, start, first)
            sec_end[k] = new
        host_end = new_host
        row = {HOST: host_end, **sec_end}
        completion.append(row)
        layer_end.append(max(row.values()))
    return Timeline("halp", completion, layer_end, terms.t_fls, n_tasks, terms.t_pre, events)


def _secondary_events(events, i, k, lt, start, first):
    t = start
    if first and lt.t_int[k]:
        events.append(Event(i, k, "receive", t, t + lt.t_int[k], HOST))
        t += lt.t_int[k]
    if lt.cmp_to_host[k]:
        events.append(Event(i, k, "compute_boundary", t, t + lt.cmp_to_host[k]))
    t += lt.cmp_to_host[k]
    if lt.com_to_host[k]:
        events.append(Event(i, k, "send", t, t + lt.com_to_host[k], HOST))
    if lt.cmp_own[k]:
        events.append(Event(i, k, "compute_own", t, t + lt.cmp_own[k]))


def _host_events(events, i, lt, order, start, end, last, first):
    t = start
    if first:
        for k in order:
            if lt.t_int[k]:
                events.append(Event(i, HOST, "send", 0.0, lt.t_int[k], k))
    if not last:
        for k in order:
            if lt.host_cmp_to[k]:
                events.append(Event(i, HOST, "compute_boundary", t, t + lt.host_cmp_to[k], k))
            t += lt.host_cmp_to[k]
            if lt.host_com_to[k]:
                events.append(Event(i, HOST, "send", t, t + lt.host_com_to[k], k))
    if lt.host_cmp_own:
        events.append(Event(i, HOST, "compute_own", t, t + lt.host_cmp_own))
        t += lt.host_cmp_own
    if end > t:
        events.append(Event(i, HOST, "wait", t, end))


def halp_timeline(plan: PartitionPlan, transfers: TransferPlan, device: DeviceProfile,
                  link: LinkProfile) -> Timeline:
    return evaluate_halp(derive_terms(plan, transfers, device, link))


def halp_multi_timeline(plans: Sequence[PartitionPlan], device: DeviceProfile,
                        link: LinkProfile, n_tasks: int, n_secondaries: int) -> Timeline:
    """Host shared by ``n_tasks`` pairs of secondaries; host bands done in task order."""
    if n_secondaries != 2 * n_tasks or len(plans) != n_tasks:
        raise ScheduleError(f"{n_tasks} tasks need {2 * n_tasks} secondaries and one plan each")
    per_task = [derive_terms(p, transfer_sizes_oracle(p), device, link) for p in plans]
    return evaluate_halp(combine_tasks(per_task), n_tasks=n_tasks)


# -- baselines --------------------------------------------------------------------

def baseline_conventional(terms: TimingTerms, n_tasks: int = 1) -> Timeline:
    """Exchange then compute, layer by layer; each layer waits for its slowest server."""
    terms.validate()
    t = 0.0
    completion, layer_end, shares, events = [], [], [], []
    for i, lt in enumerate(terms.layers):
        totals = {}
        comms = {}
        for k in terms.secondaries:
            comms[k] = lt.t_int[k] + lt.com_to_host[k]
            totals[k] = comms[k] + lt.cmp_to_host[k] + lt.cmp_own[k]
        comms[HOST] = sum(lt.host_com_to.values())
        totals[HOST] = comms[HOST] + sum(lt.host_cmp_to.values()) + lt.host_cmp_own
        critical = max(totals, key=lambda s: totals[s])
        span = totals[critical]
        shares.append(comms[critical] / span if span else 0.0)
        for s, tot in totals.items():
            if comms[s]:
                events.append(Event(i, s, "send" if s == HOST else "receive", t, t + comms[s]))
            if tot > comms[s]:
                events.append(Event(i, s, "compute_own", t + comms[s], t + tot))
            if span > tot:
                events.append(Event(i, s, "wait", t + tot, t + span))
        t += span
        completion.append({s: t for s in totals})
        layer_end.append(t)
    return Timeline("conventional", completion, layer_end, terms.t_fls, n_tasks, terms.t_pre,
                    events, shares)


def _stages(network: NetworkSpec, fuse_pools: bool) -> list[list[int]]:
    stages: list[list[int]] = []
    for i, layer in enumerate(network.spatial_layers):
        if fuse_pools and layer.kind == "maxpool" and stages:
            stages[-1].append(i)
        else:
            stages.append([i])
    return stages


def modnn_task_time(network: NetworkSpec, device: DeviceProfile, link: LinkProfile,
                    n_servers: int, fuse_pools: bool = True) -> float:
    """One task spread over ``n_servers``: scatter sub-inputs, compute, gather, every stage.

    The host computes one share locally; each other server has its own link.
    """
    if n_servers < 1:
        raise ScheduleError("need at least one server")
    if device.mode == "analytic" and device.utilization is None:
        device = device.calibrated(network)
    spatial = network.spatial_layers
    heights = network.heights()
    total = 0.0
    for stage in _stages(network, fuse_pools):
        last = stage[-1]
        out_h = heights[last + 1]
        chunks = [c for c in np.array_split(np.arange(1, out_h + 1), n_servers) if c.size]
        worst = 0.0
        for w, chunk in enumerate(chunks):
            band = (int(chunk[0]), int(chunk[-1]))
            out_band = band
            compute = 0.0
            for idx in reversed(stage):
                layer = spatial[idx]
                compute += compute_time(layer, band[1] - band[0] + 1, heights[idx + 1], device, idx)
                band = exact_input_range(layer, band, heights[idx])
            if w == 0:
                worst = max(worst, compute)
                continue
            first = spatial[stage[0]]
            recv = link.time(4 * (band[1] - band[0] + 1) * heights[stage[0]] * first.c_in)
            send = link.time(4 * (out_band[1] - out_band[0] + 1) * out_h * spatial[last].c_out)
            worst = max(worst, recv + compute + send)
        total += worst
    return total + device.t_fls


def modnn_original(t_m: float, n_tasks: int, t_pre: float | None = None) -> Timeline:
    """Tasks run one after another, each on every server."""
    avg = (n_tasks + 1) / 2 * t_m
    return Timeline("modnn_original", [], [], 0.0, n_tasks, t_pre,
                    avg_delay_override=avg, makespan_override=n_tasks * t_m)


def modnn_enhanced(t_e1: float, t_e2: float, n_tasks: int, n_servers: int = 9,
                   group_size: int = 3, t_pre: float | None = None) -> Timeline:
    """Waves of parallel tasks on server groups; a lone last task runs on all servers.

    With 4 tasks and 9 servers: three tasks on three servers each, then the
    fourth on all nine, for an average delay of ``t_e1 + t_e2 / 4``.  A partial
    wave of two or more tasks still takes ``t_e1``.
    """
    if n_servers % group_size:
        raise ScheduleError(f"{n_servers} servers do not form groups of {group_size}")
    groups = n_servers // group_size
    t, finish = 0.0, []
    remaining = n_tasks
    while remaining > 1:
        wave = min(groups, remaining)
        t += t_e1
        finish += [t] * wave
        remaining -= wave
    if remaining:
        t += t_e2
        finish.append(t)
    return Timeline("modnn_enhanced", [], [], 0.0, n_tasks, t_pre,
                    avg_delay_override=sum(finish) / n_tasks, makespan_override=t)


def baseline_modnn(n_tasks: int, n_servers: int, device: DeviceProfile, link: LinkProfile,
                   variant: str, network: NetworkSpec, group_size: int = 3) -> Timeline:
    if variant == "original":
        return modnn_original(modnn_task_time(network, device, link, n_servers), n_tasks,
                              device.t_pre)
    if variant == "enhanced":
        t_e1 = modnn_task_time(network, device, link, group_size)
        t_e2 = modnn_task_time(network, device, link, n_servers)
        return modnn_enhanced(t_e1, t_e2, n_tasks, n_servers, group_size, device.t_pre)
    raise ScheduleError(f"unknown MoDNN variant {variant!r}")


def standalone(device: DeviceProfile, n_tasks: int = 1) -> Timeline:
    """Single server; the batch completes in ``t_pre``."""
    return Timeline("standalone", [], [], 0.0, n_tasks, device.t_pre,
                    makespan_override=device.t_pre)


def speedup(latency: float, t_pre: float) -> tuple[float, float]:
    if t_pre <= 0:
        raise ScheduleError("t_pre must be positive")
    return 1.0 - latency / t_pre, t_pre / latency


# -- driver -----------------------------------------------------------------------

def run_scheme(scheme: str, network: NetworkSpec, device: DeviceProfile, link: LinkProfile,
               n_tasks: int = 1, policy="balanced", n_servers: int | None = None) -> Timeline:
    if scheme not in SCHEMES:
        raise ScheduleError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")
    device = device.calibrated(network)
    if n_servers is None:
        n_servers = 2 * n_tasks + 1
    if scheme == "standalone":
        return standalone(device, n_tasks)
    if scheme.startswith("modnn"):
        return baseline_modnn(n_tasks, n_servers, device, link, scheme.split("_")[1], network)
    plan = plan_partition(network, ratios_for_policy(network, policy))
    if scheme == "conventional":
        terms = derive_terms(plan, transfer_sizes_oracle(plan), device, link)
        return baseline_conventional(combine_tasks([terms] * n_tasks), n_tasks)
    if n_tasks == 1:
        return halp_timeline(plan, transfer_sizes_oracle(plan), device, link)
    return halp_multi_timeline([plan] * n_tasks, device, link, n_tasks, 2 * n_tasks)


def fit_t_fls(network: NetworkSpec, device: DeviceProfile, link: LinkProfile,
              target_latency: float, n_tasks: int = 1) -> float:
    """The fc-tail time that makes the HALP model hit ``target_latency``."""
    plan = plan_partition(network, balanced_ratios(network))
    transfers = transfer_sizes_oracle(plan)

    def gap(t_fls):
        dev = replace(device, t_fls=t_fls, utilization=None).calibrated(network)
        terms = combine_tasks([derive_terms(plan, transfers, dev, link)] * n_tasks)
        return evaluate_halp(terms, n_tasks).latency - target_latency

    hi = device.t_pre * (1 - 1e-9)
    if gap(0.0) > 0 or gap(hi) < 0:
        raise ScheduleError(f"target {target_latency} s is outside the model's range")
    return brentq(gap, 0.0, hi, xtol=1e-12)
