"""Command-line front end: plan, verify, simulate, reliability, report.

Exit codes: 0 ok, 1 verification failure, 2 configuration or validation error.
Outputs go to ``--out`` (default ``$HALP_OUT_DIR`` or ``./halp_out``).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .netspec import NetworkError, NetworkSpec, network_from_dict
from .partitioner import (HOST, SERVER_ORDER, PartitionError, plan_partition,
                          ratios_for_policy, transfer_sizes_oracle)
from .reliability import (DeadlineSpec, OffloadModel, ReliabilityError, load_reliability_reference,
                          rate_fluctuation, reliability_closed_form, reliability_monte_carlo,
                          slack_consistency, table_from_dict)
from .scheduler import (SCHEMES, LinkProfile, ScheduleError, Timeline, baseline_conventional,
                        evaluate_halp, modnn_enhanced, modnn_original,
                        profile_from_dict, run_scheme, speedup, terms_from_dict)
from .tensor_oracle import mutate_plan, random_weights, run_full, run_partitioned

log = logging.getLogger("halp")

OUT_ENV = "HALP_OUT_DIR"
RATIO_HINT = "per-layer ratios must satisfy eta_e1 + eta_e0 + eta_e2 = 1"


class ConfigError(Exception):
    pass


# -- io helpers -------------------------------------------------------------------

def _fixture(name: str) -> dict:
    return json.loads(resources.files("halp").joinpath(f"data/{name}.json").read_text())


def _load_json(ref: str) -> dict:
    path = Path(ref)
    if path.is_file():
        with open(path) as fh:
            return json.load(fh)
    try:
        return _fixture(ref)
    except FileNotFoundError:
        raise ConfigError(f"no file or packaged fixture named {ref!r}") from None


def resolve_network(ref) -> NetworkSpec:
    if isinstance(ref, dict):
        return network_from_dict(ref)
    return network_from_dict(_load_json(ref))


def resolve_profile(ref):
    if isinstance(ref, dict):
        return profile_from_dict(ref)
    return profile_from_dict(_load_json(ref))


def out_dir(arg: str | None) -> Path:
    path = Path(arg or os.environ.get(OUT_ENV) or "halp_out")
    path.mkdir(parents=True, exist_ok=True)
    return path


def atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def write_json(path: Path, doc) -> None:
    atomic_write(path, json.dumps(doc, indent=2, sort_keys=False) + "\n")


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    atomic_write(path, buf.getvalue())


def _cell(v):
    if isinstance(v, float):
        return repr(round(v, 12))
    return "" if v is None else v


def _parse_rates(text: str | None) -> list[float]:
    if not text:
        return []
    try:
        rates = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad rate list {text!r}") from None
    if any(r <= 0 for r in rates):
        raise ConfigError("rates must be positive")
    return rates


# -- plan -------------------------------------------------------------------------

def cmd_plan(args) -> int:
    net = resolve_network(args.network)
    try:
        plan = plan_partition(net, ratios_for_policy(net, args.ratios), bounds=args.bounds)
    except PartitionError as exc:
        if "sum" in str(exc):
            raise ConfigError(f"{exc}; {RATIO_HINT}") from None
        raise
    transfers = transfer_sizes_oracle(plan)
    out = out_dir(args.out)
    write_json(out / "plan.json", plan.to_dict())
    write_json(out / "transfers.json", transfers.to_dict())
    print(f"{'layer':>5} {'kind':<8} {'in':>4} {'out':>4}  " +
          "  ".join(f"{s:>11}" for s in SERVER_ORDER))
    for lp in plan.layers:
        bands = ["-" if lp.out_rows[s] is None else f"[{lp.out_rows[s][0]},{lp.out_rows[s][1]}]"
                 for s in SERVER_ORDER]
        print(f"{lp.index + 1:>5} {lp.kind:<8} {lp.in_height:>4} {lp.out_height:>4}  " +
              "  ".join(f"{b:>11}" for b in bands))
    print(f"wrote {out / 'plan.json'} and {out / 'transfers.json'}")
    return 0


# -- verify -----------------------------------------------------------------------

def _resize(net: NetworkSpec, height: int) -> NetworkSpec:
    doc = net.to_dict()
    doc["input_height"] = height
    doc["layers"] = [l for l in doc["layers"] if l["kind"] != "fc"]
    return network_from_dict(doc)


def _parse_mutation(text: str) -> tuple[int, str, str]:
    try:
        layer, server, side = text.split(":")
        out = (int(layer) - 1, server, side)
    except ValueError:
        raise ConfigError(f"--mutate expects LAYER:SERVER:start|end, got {text!r}") from None
    if server not in SERVER_ORDER or side not in ("start", "end"):
        raise ConfigError(f"--mutate expects LAYER:SERVER:start|end, got {text!r}")
    return out


def verify_network(net: NetworkSpec, policy, seed: int, mutations: bool = True,
                   mutate: tuple[int, str, str] | None = None) -> dict:
    """Compare partitioned and full execution layer by layer.

    ``mutate`` breaks the plan under test (one input row dropped) before the
    comparison; ``mutations`` additionally checks that every such break is caught.
    """
    plan = plan_partition(net, ratios_for_policy(net, policy))
    weights = random_weights(net, seed, include_fc=False)
    rng = np.random.default_rng(seed)
    image = rng.standard_normal((net.input_height, net.input_height, net.input_channels),
                               dtype=np.float32)
    full, _ = run_full(net, weights, image, trace=True)
    if mutate is not None:
        if not 0 <= mutate[0] < len(plan.layers) or plan.layers[mutate[0]].in_rows[mutate[1]] is None:
            raise ConfigError(f"cannot mutate layer {mutate[0] + 1} of {mutate[1]}")
        part = run_partitioned(net, weights, image, mutate_plan(plan, *mutate), strict=False,
                               trace=True)
    else:
        part = run_partitioned(net, weights, image, plan, trace=True)
    with np.errstate(invalid="ignore"):
        diff = float(np.max([np.max(np.abs(a - b)) for a, b in zip(full, part)]))
    equal = all(np.array_equal(a, b) for a, b in zip(full, part))
    tried = caught = 0
    missed = []
    if mutations:
        for lp in plan.layers:
            for server in SERVER_ORDER:
                band = lp.in_rows[server]
                if band is None:
                    continue
                for side in ("start", "end"):
                    tried += 1
                    bad = mutate_plan(plan, lp.index, server, side)
                    got = run_partitioned(net, weights, image, bad, strict=False, trace=True)
                    if any(not np.array_equal(a, b) for a, b in zip(full, got)):
                        caught += 1
                    else:
                        missed.append((lp.index, server, side))
    return {"network": net.name, "input_height": net.input_height, "equal": equal,
            "max_abs_diff": diff, "mutations": tried, "mutations_caught": caught,
            "missed": missed}


def cmd_verify(args) -> int:
    net = resolve_network(args.network)
    sizes = [int(x) for x in args.sizes.split(",")] if args.sizes else [net.input_height]
    ok = True
    results = []
    for h in sizes:
        sized = net if h == net.input_height else _resize(net, h)
        mutate = _parse_mutation(args.mutate) if args.mutate else None
        res = verify_network(sized, args.ratios, args.seed, not args.no_mutations, mutate)
        results.append(res)
        passed = res["equal"] and not res["missed"]
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {res['network']} {h}x{h} "
              f"max diff {res['max_abs_diff']:g} "
              f"mutations caught {res['mutations_caught']}/{res['mutations']}")
    if args.out or os.environ.get(OUT_ENV):
        write_json(out_dir(args.out) / "verify.json", results)
    return 0 if ok else 1


# -- simulate ---------------------------------------------------------------------

EVENT_HEADER = ["scheme", "rate_gbps", "n_tasks", "layer", "server", "kind", "peer",
                "start_ms", "end_ms"]


def _scenario(args) -> dict:
    doc = _load_json(args.scenario) if args.scenario else {}
    if args.network:
        doc["network"] = args.network
    if args.profile:
        doc["profile"] = args.profile
    if args.rates:
        doc["rates_gbps"] = _parse_rates(args.rates)
    if args.tasks:
        doc["n_tasks"] = args.tasks
    if args.scheme:
        doc["schemes"] = args.scheme.split(",")
    return doc


def simulate(doc: dict) -> tuple[list[dict], list[list]]:
    summaries, events = [], []
    n_tasks = int(doc.get("n_tasks", 1))
    if n_tasks < 1:
        raise ConfigError("n_tasks must be at least 1")
    schemes = doc.get("schemes", ["halp"])
    for s in schemes:
        if s not in SCHEMES:
            raise ConfigError(f"unknown scheme {s!r}; choose from {', '.join(SCHEMES)}")

    if "terms" in doc:
        # measured per-layer terms: evaluate the recurrences directly
        terms = terms_from_dict(_load_json(doc["terms"]) if isinstance(doc["terms"], str)
                                else doc["terms"])
        for s in schemes:
            if s == "halp":
                tl = evaluate_halp(terms)
            elif s == "conventional":
                tl = baseline_conventional(terms)
            else:
                raise ConfigError(f"scheme {s!r} needs a network and profile, not a terms table")
            summary = tl.summary()
            summary["layer_time_ms"] = [t * 1e3 for t in _layer_spans(tl.layer_end)]
            summary["layer_end_ms"] = [t * 1e3 for t in tl.layer_end]
            summary["host_end_ms"] = [c[HOST] * 1e3 for c in tl.completion]
            if tl.comm_share:
                summary["comm_share"] = tl.comm_share
            summaries.append(summary)
            events += [[s, None, 1, e.layer + 1, e.server, e.kind, e.peer,
                        e.start * 1e3, e.end * 1e3] for e in tl.events]
        return summaries, events

    if "modnn_times_ms" in doc:
        # measured per-task times: average delay and throughput arithmetic only
        t = {k: v * 1e-3 for k, v in doc["modnn_times_ms"].items()}
        t_pre = t.get("t_pre")
        for s in schemes:
            if s == "modnn_original":
                tl = modnn_original(t["t_m"], n_tasks, t_pre)
            elif s == "modnn_enhanced":
                tl = modnn_enhanced(t["t_e1"], t["t_e2"], n_tasks, t_pre=t_pre)
            elif s == "halp":
                tl = Timeline("halp", [], [], 0.0, n_tasks, t_pre, makespan_override=t["t_h"])
            elif s == "standalone":
                tl = Timeline("standalone", [], [], 0.0, n_tasks, t_pre, makespan_override=t_pre)
            else:
                raise ConfigError(f"scheme {s!r} is not defined by measured times")
            summaries.append(tl.summary())
        return summaries, events

    net = resolve_network(doc.get("network", "vgg16"))
    device = resolve_profile(doc.get("profile", "gtx1080ti"))
    rates = doc.get("rates_gbps", [100])
    if not rates or any(r <= 0 for r in rates):
        raise ConfigError("rates must be positive")
    policy = doc.get("policy", "balanced")
    n_servers = doc.get("n_servers")
    for s in schemes:
        for rate in rates:
            link = LinkProfile(rate * 1e9, float(doc.get("overhead_s", 0.0)))
            tl = run_scheme(s, net, device, link, n_tasks, policy, n_servers)
            summary = {"rate_gbps": rate, **tl.summary()}
            summaries.append(summary)
            events += [[s, rate, n_tasks, e.layer + 1, e.server, e.kind, e.peer,
                        e.start * 1e3, e.end * 1e3] for e in tl.events]
    return summaries, events


def cmd_simulate(args) -> int:
    summaries, events = simulate(_scenario(args))
    out = out_dir(args.out)
    write_json(out / "summary.json", summaries)
    write_csv(out / "events.csv", EVENT_HEADER, events)
    for s in summaries:
        extra = f" rho {s['rho']:.3f}" if "rho" in s else ""
        rate = f" @ {s['rate_gbps']:g} Gbps" if s.get("rate_gbps") else ""
        print(f"{s['scheme']}{rate}: latency {s['latency_ms']:.4f} ms, "
              f"avg delay {s['avg_delay_ms']:.4f} ms, {s['throughput_fps']:.1f} fps{extra}")
    return 0


# -- reliability ------------------------------------------------------------------

REL_HEADER = ["scheme", "rate_mbps", "sigma_ms", "phi_mbps", "phi_ref_mbps",
              "closed_form", "monte_carlo", "mc_low", "mc_high", "ref", "abs_delta"]


def reliability_rows(doc: dict | None, samples: int, seed: int, workers: int) -> list[list]:
    rows = []
    if doc is None or "columns" in doc:
        table = load_reliability_reference() if doc is None else table_from_dict(doc)
        cases = [(c.scheme, table.model(c), table.spec(c), c.ref, c.phi_ref)
                 for c in table.cells]
    else:
        n = int(doc.get("n_tasks", 4))
        payload = n * float(doc.get("image_bytes", 125000)) * 8
        if "t_inf_ms" in doc:
            t_inf = doc["t_inf_ms"] / 1e3
        elif "throughput_fps" in doc:
            t_inf = n / doc["throughput_fps"]
        else:
            raise ConfigError("scenario needs t_inf_ms or throughput_fps")
        deadline = doc["deadline_ms"] / 1e3 if "deadline_ms" in doc else n / 30
        sigmas = doc["sigma_ms"] if isinstance(doc["sigma_ms"], list) else [doc["sigma_ms"]]
        rates = doc["rate_mbps"] if isinstance(doc["rate_mbps"], list) else [doc["rate_mbps"]]
        cases = [(doc.get("scheme", "custom"), OffloadModel(r * 1e6, payload, s / 1e3),
                  DeadlineSpec(deadline, t_inf), None, None) for r in rates for s in sigmas]
    for index, (scheme, model, spec, ref, phi_ref) in enumerate(cases):
        p = reliability_closed_form(model, spec)
        mc = reliability_monte_carlo(model, spec, samples, seed + index, workers)
        phi = rate_fluctuation(model) / 1e6 if model.sigma > 0 else 0.0
        delta = None if ref is None else abs(p - ref)
        rows.append([scheme, model.rate / 1e6, model.sigma * 1e3, phi, phi_ref,
                     p, mc.p, mc.low, mc.high, ref, delta])
    return rows


def cmd_reliability(args) -> int:
    doc = _load_json(args.scenario) if args.scenario else None
    if args.samples < 1:
        raise ConfigError("--samples must be at least 1")
    rows = reliability_rows(doc, args.samples, args.seed, args.workers)
    out = out_dir(args.out)
    write_csv(out / "reliability.csv", REL_HEADER, rows)
    for r in rows:
        ref = "" if r[9] is None else f"  ref {r[9]:g}  |d| {r[10]:.2e}"
        print(f"{r[0]:<10} {r[1]:>6g} Mbps sigma {r[2]:>5g} ms  phi {r[3]:6.2f}  "
              f"P {r[5]:.6f}  MC {r[6]:.6f}{ref}")
    print(f"wrote {out / 'reliability.csv'}")
    return 0


# -- report -----------------------------------------------------------------------

def build_report(samples: int, seed: int) -> dict:
    """Recompute the reference throughput, reliability and two-layer timing values with per-cell deltas."""
    t1 = terms_from_dict(_fixture("two_layer_terms"))
    conv = baseline_conventional(t1)
    halp = evaluate_halp(t1)
    two_layer = {
        "conventional_ms": [t * 1e3 for t in _layer_spans(conv.layer_end)],
        "conventional_ref_ms": [0.113, 0.107],
        "comm_share": conv.comm_share,
        "comm_share_ref": [0.602, 0.103],
        "halp_host_g1_ms": halp.completion[0][HOST] * 1e3,
        "halp_host_g1_ref_ms": 0.069,
    }
    t2 = _fixture("throughput_reference")
    net = resolve_network("vgg16")
    throughput = []
    for key in ("gtx1080ti", "xavier"):
        device = resolve_profile(key)
        for scheme, ref in t2[key].items():
            for rate, ref in zip(t2["rates_gbps"], ref):
                tl = run_scheme(scheme, net, device, LinkProfile(rate * 1e9), t2["n_tasks"],
                                n_servers=9 if scheme.startswith("modnn") else None)
                throughput.append({"device": key, "scheme": scheme, "rate_gbps": rate,
                               "model_fps": tl.throughput, "ref_fps": ref,
                               "delta_fps": tl.throughput - ref})
    g = {k: v * 1e-3 for k, v in t2["gtx_times_ms"].items()}
    arithmetic = {
        "modnn_enhanced_rho": speedup(modnn_enhanced(g["t_e1"], g["t_e2"], 4).avg_delay,
                                      g["t_pre"])[0],
        "modnn_enhanced_fps": modnn_enhanced(g["t_e1"], g["t_e2"], 4).throughput,
        "modnn_original_fps": modnn_original(g["t_m"], 4).throughput,
        "halp_fps": 4 / g["t_h"],
        "standalone_fps": 4 / g["t_pre"],
    }
    table = load_reliability_reference()
    cells = []
    for c in table.cells:
        p = reliability_closed_form(table.model(c), table.spec(c))
        mc = reliability_monte_carlo(table.model(c), table.spec(c), samples, seed)
        cells.append({"scheme": c.scheme, "rate_mbps": c.rate / 1e6, "sigma_ms": c.sigma * 1e3,
                      "closed_form": p, "monte_carlo": mc.p, "ref": c.ref,
                      "abs_delta": abs(p - c.ref), "tolerance": table.tolerance_for(c),
                      "phi_mbps": rate_fluctuation(table.model(c)) / 1e6,
                      "phi_ref_mbps": c.phi_ref})
    slacks = [{**g_, "rate": g_["rate"] / 1e6,
               "lower_bound": None if math.isinf(g_["lower_bound"]) else g_["lower_bound"]}
              for g_ in slack_consistency(table)]
    return {"two_layer": two_layer, "throughput": throughput, "throughput_arithmetic": arithmetic,
            "reliability": cells, "reliability_slack": slacks}


def _layer_spans(ends: list[float]) -> list[float]:
    return [b - a for a, b in zip([0.0] + ends[:-1], ends)]


def cmd_report(args) -> int:
    rep = build_report(args.samples, args.seed)
    out = out_dir(args.out)
    write_json(out / "report.json", rep)
    write_csv(out / "throughput.csv", ["device", "scheme", "rate_gbps", "model_fps", "ref_fps",
                                   "delta_fps"], [list(r.values()) for r in rep["throughput"]])
    write_csv(out / "reliability_table.csv", list(rep["reliability"][0].keys()),
              [list(r.values()) for r in rep["reliability"]])
    t1 = rep["two_layer"]
    print("conventional g1/g2 ms:", ", ".join(f"{v:.3f}" for v in t1["conventional_ms"]),
          " comm share:", ", ".join(f"{v:.1%}" for v in t1["comm_share"]))
    print(f"halp host g1: {t1['halp_host_g1_ms']:.3f} ms")
    for r in rep["throughput"]:
        print(f"{r['device']:<10} {r['scheme']:<15} {r['rate_gbps']:>4g} Gbps "
              f"model {r['model_fps']:8.1f}  ref {r['ref_fps']:5d}")
    worst = max(r["abs_delta"] for r in rep["reliability"])
    print(f"reliability cells: worst |delta| {worst:.4f}")
    print(f"wrote {out}")
    return 0


# -- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="halp", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="partition a network and size the transfers")
    p.add_argument("--network", default="vgg16")
    p.add_argument("--ratios", default="balanced",
                   help="balanced, halves, single, or e1,e0,e2 fractions")
    p.add_argument("--bounds", choices=("exact", "formula"), default="exact")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("verify", help="check partitioned execution against the full pass")
    p.add_argument("--network", default="vgg16")
    p.add_argument("--ratios", default="balanced")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sizes", help="comma-separated input heights (fc layers dropped)")
    p.add_argument("--no-mutations", action="store_true")
    p.add_argument("--mutate", help="drop one input row first: LAYER:SERVER:start|end")
    p.add_argument("--out")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("simulate", help="evaluate schedules and emit a Gantt event list")
    p.add_argument("--scenario")
    p.add_argument("--network")
    p.add_argument("--profile")
    p.add_argument("--rates", help="comma-separated link rates in Gbps")
    p.add_argument("--tasks", type=int)
    p.add_argument("--scheme", help=f"comma-separated subset of {', '.join(SCHEMES)}")
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reliability", help="deadline reliability, closed form and sampled")
    p.add_argument("--scenario", help="fixture name or JSON file {rate_mbps, sigma_ms, ...}")
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_reliability)

    p = sub.add_parser("report", help="recompute reference values with deltas")
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, PartitionError, NetworkError, ScheduleError, ReliabilityError,
            KeyError, ValueError, OSError) as exc:
        msg = str(exc)
        if isinstance(exc, KeyError):
            msg = f"missing field {msg}"
        print(f"halp: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
