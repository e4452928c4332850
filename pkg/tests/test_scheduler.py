import copy
import random
from dataclasses import replace
from fractions import Fraction as F
from importlib import resources

import json
import pytest
from hypothesis import given, settings, strategies as st

from halp.netspec import LayerSpec, NetworkSpec, vgg16
from halp.partitioner import balanced_ratios, plan_partition, transfer_sizes_oracle
from halp.scheduler import (DeviceProfile, LayerTerms, LinkProfile, ScheduleError,
                            TimingTerms, baseline_conventional, combine_tasks, compute_time,
                            derive_terms, evaluate_halp, fit_t_fls, halp_multi_timeline,
                            halp_timeline, layer_macs, load_profile, modnn_enhanced,
                            modnn_original, modnn_task_time, run_scheme,
                            secondary_layer_time, speedup, standalone, terms_from_dict)

VGG = vgg16()
DATA = resources.files("halp").joinpath("data")
SECS = ("e1", "e2")


def _profile(name):
    return load_profile(DATA.joinpath(f"{name}.json"))


def _two_layer():
    return terms_from_dict(json.loads(DATA.joinpath("two_layer_terms.json").read_text()))


def _terms(values: dict, n_layers=1, **kw) -> TimingTerms:
    layers = []
    for _ in range(n_layers):
        layers.append(LayerTerms(
            **{f: {k: values.get(f, 0.0) for k in SECS}
               for f in ("t_int", "cmp_to_host", "com_to_host", "cmp_own",
                         "host_cmp_to", "host_com_to")},
            host_cmp_own=values.get("host_cmp_own", 0.0)))
    return TimingTerms(SECS, layers, **kw)


def random_terms(rng: random.Random, n_secondaries=2, n_layers=None) -> TimingTerms:
    secs = tuple(f"e{i + 1}" for i in range(n_secondaries))
    n_layers = n_layers or rng.randint(1, 8)
    layers = []
    for i in range(n_layers):
        def d(scale=1.0, zero=False):
            return {k: 0.0 if zero else rng.random() * scale for k in secs}
        layers.append(LayerTerms(d(zero=i > 0), d(0.1), d(), d(2.0), d(0.1), d(),
                                 rng.random() * 0.2))
    return TimingTerms(secs, layers, t_fls=rng.random(), partial=rng.random() < 0.3)


# -- compute model ----------------------------------------------------------------

def test_calibration_reproduces_standalone_time():
    gtx = _profile("gtx1080ti").calibrated(VGG)
    heights = VGG.heights()
    total = sum(compute_time(l, heights[i + 1], heights[i + 1], gtx, i)
                for i, l in enumerate(VGG.spatial_layers))
    assert total + gtx.t_fls == pytest.approx(4.7e-3, rel=1e-12)


def test_compute_time_linear_in_rows():
    gtx = _profile("gtx1080ti").calibrated(VGG)
    conv = VGG.spatial_layers[3]
    assert compute_time(conv, 0, 112, gtx) == 0.0
    assert compute_time(conv, 56, 112, gtx) / compute_time(conv, 112, 112, gtx) == pytest.approx(0.5)
    assert layer_macs(LayerSpec("maxpool", 2, 2, 0, 64, 64), 1, 112) == 112 * 64 * 4


def test_uncalibrated_and_table_modes():
    raw = DeviceProfile("x", 1e12, 1e-3)
    with pytest.raises(ScheduleError):
        compute_time(VGG.spatial_layers[0], 4, 224, raw)
    table = DeviceProfile("t", 1e12, 1e-3, mode="table", layer_times=tuple([1e-4] * 18))
    assert compute_time(VGG.spatial_layers[0], 56, 224, table.calibrated(VGG), 0) == pytest.approx(2.5e-5)
    with pytest.raises(ScheduleError):
        replace(table, layer_times=(1e-4,)).calibrated(VGG)
    with pytest.raises(ScheduleError):
        DeviceProfile("bad", 1e12, 1e-3, t_fls=2e-3).calibrated(VGG)


def test_link_time():
    link = LinkProfile(40e9)
    assert link.time(0) == 0.0
    assert link.time(303_744) == pytest.approx(303_744 * 8 / 40e9)
    assert LinkProfile(40e9, overhead=1e-6).time(8) == pytest.approx(1.6e-9 + 1e-6)


# -- recurrences ------------------------------------------------------------------

def test_secondary_layer_time_examples():
    lt = _terms({"t_int": 2, "cmp_to_host": 1, "com_to_host": 1, "cmp_own": 3}).layers[0]
    assert secondary_layer_time(lt, "e1", True) == 6
    assert secondary_layer_time(lt, "e1", False) == 4
    g2 = _two_layer().layers[1]
    assert secondary_layer_time(g2, "e1", False) == pytest.approx(0.096e-3)
    lt = _terms({"cmp_to_host": 1, "cmp_own": 3}).layers[0]
    assert secondary_layer_time(lt, "e2", False) == 4


def test_two_layer_host_completion():
    tl = evaluate_halp(_two_layer())
    assert tl.completion[0]["e0"] == pytest.approx(0.069e-3, abs=1e-15)
    assert tl.completion[0]["e1"] == pytest.approx(0.102e-3)


def test_two_layer_conventional():
    tl = baseline_conventional(_two_layer())
    spans = [tl.layer_end[0], tl.layer_end[1] - tl.layer_end[0]]
    assert spans == pytest.approx([0.113e-3, 0.107e-3])
    assert tl.comm_share[0] == pytest.approx(0.602, abs=1e-3)
    assert tl.comm_share[1] == pytest.approx(0.103, abs=1e-3)


def test_compute_bound_limit():
    terms = _terms({"cmp_own": 2.0, "cmp_to_host": 0.5}, n_layers=3, t_fls=0.25)
    assert evaluate_halp(terms).latency == pytest.approx(3 * 2.5 + 0.25)
    conv = baseline_conventional(terms)
    assert conv.latency == pytest.approx(3 * 2.5 + 0.25)


def test_two_layer_events_are_well_formed():
    tl = evaluate_halp(_two_layer())
    kinds = {e.kind for e in tl.events}
    assert kinds <= {"compute_boundary", "compute_own", "send", "receive", "wait"}
    assert all(0 <= e.start < e.end for e in tl.events)
    assert max(e.end for e in tl.events) <= tl.layer_end[-1] + 1e-15


def test_terms_validation():
    bad = _terms({"cmp_own": -1.0})
    with pytest.raises(ScheduleError):
        evaluate_halp(bad)
    with pytest.raises(ScheduleError):
        terms_from_dict({"secondaries": ["e1"], "layers": [{"cmp_own": {"e2": 1}}]})


# -- analytic model on VGG-16 -----------------------------------------------------

def test_gtx_single_task_latency_bracket():
    tl = run_scheme("halp", VGG, _profile("gtx1080ti"), LinkProfile(100e9))
    assert 2.5e-3 <= tl.latency <= 3.1e-3


def test_profiles_hold_their_fitted_fc_time():
    for name, target in (("gtx1080ti", 2.81e-3), ("xavier", 4 / 225)):
        prof = _profile(name)
        fitted = fit_t_fls(VGG, replace(prof, t_fls=0.0), LinkProfile(100e9), target, n_tasks=4)
        assert prof.t_fls == pytest.approx(fitted, rel=1e-9)
        tl = run_scheme("halp", VGG, prof, LinkProfile(100e9), n_tasks=4)
        assert tl.latency == pytest.approx(target, rel=1e-9)


def test_gtx_batch_throughput():
    tl = run_scheme("halp", VGG, _profile("gtx1080ti"), LinkProfile(100e9), n_tasks=4)
    assert tl.throughput == pytest.approx(1423, abs=1)


def test_xavier_batch_throughput_across_rates():
    for rate in (40, 60, 80, 100):
        tl = run_scheme("halp", VGG, _profile("xavier"), LinkProfile(rate * 1e9), n_tasks=4)
        assert 219 <= tl.throughput <= 225.5


def test_multi_with_one_task_is_single():
    gtx = _profile("gtx1080ti")
    plan = plan_partition(VGG, balanced_ratios(VGG))
    link = LinkProfile(60e9)
    one = halp_timeline(plan, transfer_sizes_oracle(plan), gtx, link)
    multi = halp_multi_timeline([plan], gtx, link, 1, 2)
    assert one.completion == multi.completion and one.latency == multi.latency
    with pytest.raises(ScheduleError):
        halp_multi_timeline([plan], gtx, link, 2, 3)


def test_batch_host_takes_longer_than_single():
    gtx = _profile("gtx1080ti")
    link = LinkProfile(100e9)
    single = run_scheme("halp", VGG, gtx, link, 1)
    batch = run_scheme("halp", VGG, gtx, link, 4)
    assert batch.latency >= single.latency
    assert batch.throughput > single.throughput


def test_speedup_gap_widens_at_lower_rate():
    gtx = _profile("gtx1080ti")
    gaps = []
    for rate in (40, 60, 80, 100):
        link = LinkProfile(rate * 1e9)
        h = run_scheme("halp", VGG, gtx, link).latency
        c = run_scheme("conventional", VGG, gtx, link).latency
        gaps.append(speedup(h, gtx.t_pre)[0] - speedup(c, gtx.t_pre)[0])
    assert all(g >= 0 for g in gaps)
    assert gaps == sorted(gaps, reverse=True)


def test_peer_transfers_are_not_schedulable():
    net = NetworkSpec("p", 12, 1, (LayerSpec("conv", 3, 1, 1), LayerSpec("conv", 3, 1, 1)))
    plan = plan_partition(net, [(F(1, 2), 0, F(1, 2))] * 2)
    prof = DeviceProfile("d", 1e9, 1e-3)
    with pytest.raises(ScheduleError):
        derive_terms(plan, transfer_sizes_oracle(plan), prof, LinkProfile(1e9))


def test_derived_terms_last_layer_sends_everything():
    gtx = _profile("gtx1080ti").calibrated(VGG)
    plan = plan_partition(VGG, balanced_ratios(VGG))
    link = LinkProfile(100e9)
    terms = derive_terms(plan, transfer_sizes_oracle(plan), gtx, link)
    last = terms.layers[-1]
    assert last.cmp_to_host == {"e1": 0.0, "e2": 0.0}
    assert last.com_to_host["e1"] == pytest.approx(link.time(4 * 3 * 7 * 512))
    assert terms.layers[0].t_int["e1"] == pytest.approx(link.time(4 * 112 * 224 * 3))


# -- baselines --------------------------------------------------------------------

def test_modnn_arithmetic():
    orig = modnn_original(1.89e-3, 4)
    assert orig.avg_delay == pytest.approx(2.5 * 1.89e-3)
    assert orig.throughput == pytest.approx(529, abs=1)
    enh = modnn_enhanced(3.13e-3, 1.89e-3, 4)
    assert enh.avg_delay == pytest.approx(3.6025e-3)
    assert enh.throughput == pytest.approx(797, abs=1)
    assert speedup(enh.avg_delay, 4.7e-3)[0] == pytest.approx(0.233, abs=1e-3)
    assert modnn_original(1.89e-3, 1).avg_delay == modnn_enhanced(3.13e-3, 1.89e-3, 1).avg_delay
    with pytest.raises(ScheduleError):
        modnn_enhanced(1, 1, 4, n_servers=8)


def test_modnn_analytic_model():
    gtx = _profile("gtx1080ti")
    link = LinkProfile(100e9)
    t9 = modnn_task_time(VGG, gtx, link, 9)
    t3 = modnn_task_time(VGG, gtx, link, 3)
    assert t9 < t3
    # more bandwidth always helps
    assert modnn_task_time(VGG, gtx, LinkProfile(40e9), 9) > t9
    # one server means no communication at all
    assert modnn_task_time(VGG, gtx, link, 1) == pytest.approx(gtx.t_pre)


def test_standalone_and_speedup():
    gtx = _profile("gtx1080ti")
    assert standalone(gtx, 4).throughput == pytest.approx(851, abs=1)
    assert speedup(4.7e-3, 4.7e-3) == (0.0, 1.0)
    assert speedup(2.81e-3, 4.7e-3)[1] == pytest.approx(1.67, abs=0.005)
    with pytest.raises(ScheduleError):
        speedup(1.0, 0.0)


# -- properties -------------------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_halp_never_slower_than_conventional(seed, n_tasks):
    rng = random.Random(seed)
    n_layers = rng.randint(1, 8)
    terms = combine_tasks([random_terms(rng, n_layers=n_layers) for _ in range(n_tasks)])
    assert evaluate_halp(terms).latency <= baseline_conventional(terms).latency + 1e-12


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_increasing_a_term_never_speeds_anything_up(seed):
    rng = random.Random(seed)
    terms = random_terms(rng)
    before = evaluate_halp(terms)
    bumped = copy.deepcopy(terms)
    lt = rng.choice(bumped.layers)
    field = rng.choice(["t_int", "cmp_to_host", "com_to_host", "cmp_own", "host_cmp_to",
                        "host_com_to", "host_cmp_own"])
    if field == "host_cmp_own":
        lt.host_cmp_own += rng.random()
    else:
        getattr(lt, field)[rng.choice(SECS)] += rng.random()
    after = evaluate_halp(bumped)
    for a, b in zip(before.completion, after.completion):
        assert all(b[s] >= a[s] - 1e-12 for s in a)
    assert all(y >= x - 1e-12 for x, y in zip(before.layer_end, after.layer_end))


def test_completion_is_monotone_per_server():
    rng = random.Random(5)
    for _ in range(50):
        tl = evaluate_halp(random_terms(rng, n_secondaries=rng.choice([2, 4, 8])))
        for prev, cur in zip(tl.completion, tl.completion[1:]):
            assert all(cur[s] >= prev[s] for s in prev)
        assert all(end == max(c.values()) for end, c in zip(tl.layer_end, tl.completion))
