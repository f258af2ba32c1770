import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seal_sim.crypto import CipherMode
from seal_sim.memsim import (SCHEMES, CacheConfig, ConfigError, EngineState, SimConfig,
                             check_metrics, derive_timing, filter_l2, load_config, parse_scheme,
                             run_cache, simulate)
from seal_sim.trace import LayerTrace, Op, Tag


def make_trace(lines, writes=None, enc=None, macs=0, layer_id=1):
    lines = np.asarray(lines, dtype=np.int64)
    n = lines.size
    ops = np.zeros(n, np.uint8) if writes is None else np.asarray(writes, np.uint8)
    enc = np.ones(n, bool) if enc is None else np.asarray(enc, bool)
    return LayerTrace(layer_id, "Conv", lines, ops, np.full(n, Tag.WEIGHT, np.uint8), enc, macs)


def cfg(scheme="baseline", **kw):
    mode, se = parse_scheme(scheme)
    return dataclasses.replace(SimConfig(**kw), scheme=mode, se_enabled=se)


# -- timing arithmetic -------------------------------------------------------

def test_derive_timing_defaults():
    assert derive_timing(SimConfig()) == {"aes_interval_cycles": 12, "dram_service_cycles": 4}


def test_derive_timing_double_aes_bandwidth():
    assert derive_timing(SimConfig(aes_bandwidth_gb_s=16.0))["aes_interval_cycles"] == 6


def test_one_byte_line_rejected():
    with pytest.raises(ConfigError):
        derive_timing(SimConfig(l2=CacheConfig(786432, 8, 1, 10)))


@pytest.mark.parametrize("field,value", [("channels", 0), ("max_outstanding", 0),
                                         ("aes_bandwidth_gb_s", 0.0), ("macs_per_cycle", 0)])
def test_bad_configs(field, value):
    with pytest.raises(ConfigError):
        SimConfig(**{field: value}).validate()


def test_counter_cache_is_l2_over_16():
    c = SimConfig()
    assert c.counter_cache.bytes * 16 == c.l2.bytes


# -- cache -------------------------------------------------------------------

def test_repeated_line_misses_once():
    s = run_cache([7] * 10, CacheConfig(1024, 2, 128))
    assert (s.hits, s.misses) == (9, 1)


def test_lru_thrash_two_passes():
    c = CacheConfig(4096, 4, 128)
    sweep = list(range(2 * 4096 // 128))
    s = run_cache(sweep + sweep, c)
    assert s.hits == 0 and s.misses == 2 * len(sweep)


def test_lru_hand_pattern():
    a, b, c = 0, 2, 4           # one set of a 4-line, 2-way cache
    s = run_cache([a, b, a, c, a, b], CacheConfig(512, 2, 128))
    assert (s.hits, s.misses, s.evictions) == (2, 4, 2)


def test_write_back_counts_dirty_evictions():
    c = CacheConfig(256, 2, 128)  # a single 2-way set
    s = run_cache([(0, True), (1, False), (2, False), (3, False)], c)
    assert s.writebacks == 1 and s.evictions == 2


def test_filter_l2_matches_run_cache():
    rng = np.random.default_rng(3)
    lines = rng.integers(0, 20000, 5000)
    writes = rng.integers(0, 2, 5000)
    l2cfg = SimConfig().l2
    res = filter_l2([make_trace(lines, writes)], l2cfg)
    ref = run_cache(list(zip(lines.tolist(), writes.astype(bool).tolist())), l2cfg)
    assert (res.hits, res.misses, res.evictions) == (ref.hits, ref.misses, ref.evictions)
    assert res.layers[0].events.count(1) == ref.writebacks


# -- schemes -----------------------------------------------------------------

@pytest.fixture(scope="module")
def mixed_trace():
    rng = np.random.default_rng(11)
    layers = []
    for i in range(3):
        n = 6000
        lines = rng.integers(0, 60000, n)
        layers.append(make_trace(lines, rng.random(n) < 0.2, rng.random(n) < 0.5,
                                 macs=int(rng.integers(0, 400000)), layer_id=i + 1))
    return layers


def test_baseline_uses_no_crypto(mixed_trace):
    m = simulate(mixed_trace, cfg("baseline"))
    assert m.aes_busy_cycles == 0 and m.counter_accesses == 0 and m.encrypted_accesses == 0


@pytest.mark.parametrize("scheme", ["coloe", "seal"])
def test_coloe_has_no_counter_traffic(mixed_trace, scheme):
    m = simulate(mixed_trace, cfg(scheme))
    assert m.counter_reads == 0 and m.counter_writes == 0


def test_disabled_counter_cache_reads_every_counter():
    n = 300
    trace = [make_trace(np.arange(n) * 7)]
    c = cfg("counter", counter_cache=CacheConfig(0, 8, 128))
    m = simulate(trace, c)
    assert m.l2_misses == n and m.counter_reads == n and m.counter_cache_hits == 0


def test_one_counter_line_covers_sixteen_lines():
    m = simulate([make_trace(np.arange(32) + 64)], cfg("counter"))
    assert m.counter_reads == 2 and m.counter_cache_hits == 30


def test_counter_traffic_zero_when_nothing_encrypted(mixed_trace):
    plain = [dataclasses.replace(t, enc=np.zeros(len(t), bool)) for t in mixed_trace]
    m = simulate(plain, cfg("counter+se"))
    assert m.counter_accesses == 0 and m.counter_cache_misses == 0


def test_se_plaintext_bypasses_aes(mixed_trace):
    full = simulate(mixed_trace, cfg("direct"))
    se = simulate(mixed_trace, cfg("direct+se"))
    assert full.encrypted_accesses == full.data_accesses
    assert se.encrypted_accesses < full.encrypted_accesses
    assert se.aes_busy_cycles == 12 * se.encrypted_accesses


def test_accounting_identities(mixed_trace):
    for name in SCHEMES:
        m = simulate(mixed_trace, cfg(name))
        assert m.data_reads == m.l2_misses
        assert m.encrypted_accesses + m.data_reads_plaintext + m.data_writes_plaintext == m.data_accesses
        assert check_metrics(m, cfg(name)) == []


def test_compute_bound_layer():
    t = make_trace([1, 2, 3], macs=128 * 10_000)
    m = simulate([t], cfg("direct"))
    assert m.total_cycles == 10_000 == m.compute_cycles


def test_hit_latency_counts():
    m = simulate([make_trace([5, 5])], cfg("baseline"))
    assert m.l2_hits == 1 and m.total_cycles == 10  # the hit issues at 0 and finishes at 10


def test_single_miss_latencies():
    base = simulate([make_trace([5])], cfg("baseline")).total_cycles
    direct = simulate([make_trace([5])], cfg("direct")).total_cycles
    coloe = simulate([make_trace([5])], cfg("coloe")).total_cycles
    counter = simulate([make_trace([5])], cfg("counter")).total_cycles
    assert base == 4
    assert direct == 4 + 20                  # AES after the read
    assert coloe == 20 + 1                   # pad overlaps the read, XOR exposed
    assert counter == 4 + 20 + 1             # cold counter read first


def test_engine_initiation_interval():
    e = EngineState(interval=12, latency=20)
    done = [e.issue(0) for _ in range(4)]
    assert done == [20, 32, 44, 56]
    assert e.stall == 12 + 24 + 36 and e.busy == 48


def test_determinism(mixed_trace):
    assert simulate(mixed_trace, cfg("counter+se")) == simulate(mixed_trace, cfg("counter+se"))


def test_work_conservation(mixed_trace):
    for name in SCHEMES:
        m = simulate(mixed_trace, cfg(name))
        assert m.channel_busy_cycles <= m.total_cycles * 6


def _ordering(traces):
    cyc = {n: simulate(traces, cfg(n)).total_cycles for n in SCHEMES}
    assert cyc["baseline"] <= cyc["seal"] <= cyc["counter+se"]
    assert cyc["direct+se"] <= cyc["direct"]
    return cyc


def test_scheme_ordering_mixed(mixed_trace):
    cyc = _ordering(mixed_trace)
    assert cyc["counter+se"] <= cyc["counter"]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3000), st.booleans(), st.booleans()),
                min_size=1, max_size=400),
       st.integers(0, 50_000))
def test_scheme_ordering_property(reqs, macs):
    lines, writes, enc = zip(*reqs)
    _ordering([make_trace(lines, writes, enc, macs)])


# -- config files ------------------------------------------------------------

def test_config_json_roundtrip(tmp_path):
    c = cfg("seal", max_outstanding=32)
    p = tmp_path / "c.json"
    p.write_text(json.dumps(c.to_dict()))
    assert load_config(p) == c


def test_config_partial_nested(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"counter_cache": {"bytes": 0}, "scheme": "counter"}))
    c = load_config(p)
    assert c.counter_cache.bytes == 0 and c.counter_cache.ways == 8
    assert c.scheme is CipherMode.COUNTER


def test_config_unknown_key(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"l3": {}}))
    with pytest.raises(ConfigError):
        load_config(p)


@pytest.mark.parametrize("text,expected", [
    ("seal", (CipherMode.COLOE, True)), ("counter+se", (CipherMode.COUNTER, True)),
    ("coloe", (CipherMode.COLOE, False)), ("none", (CipherMode.NONE, False)),
])
def test_parse_scheme(text, expected):
    assert parse_scheme(text) == expected


def test_parse_scheme_rejects_suffix():
    with pytest.raises(ValueError):
        parse_scheme("counter+xts")
