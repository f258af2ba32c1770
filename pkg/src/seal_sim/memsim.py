"""Trace-driven timing model of the GPU memory side under the cipher schemes.

The simulation runs in two passes.  :func:`filter_l2` replays a trace through
the shared L2 (LRU, write-back, write-allocate) and records the DRAM-level
event stream: line fills for misses and write-backs of dirty victims.  That
pass depends only on addresses, so one result serves every scheme.
:func:`simulate` then times the stream per layer against six address
interleaved controllers, each with an FCFS DRAM channel, a pipelined AES
engine and (for counter mode) a counter cache.

Timing rules per line, with ``svc`` the DRAM service time and ``lat`` the AES
latency:

* plaintext or scheme ``none``: DRAM only;
* direct: read ``DRAM -> AES``, write ``AES -> DRAM``;
* counter: the counter word is looked up first (a miss costs a DRAM read on
  the same channel); the pad is generated once the counter is known and
  overlaps the data read, leaving one XOR cycle exposed;
* coloe: the counter arrives with the line, so the pad overlaps the read from
  the start and no counter traffic exists.

Each layer starts with idle resources.  Its time is the larger of its memory
completion and its MAC count divided by ``macs_per_cycle``.  Summing over layers
gives ``total_cycles``.  Dirty lines still resident in L2 when the trace ends
are not flushed.
"""

from __future__ import annotations

import dataclasses
import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np

from .crypto import CipherMode
from .model import ceil_div
from .trace import LayerTrace

COUNTER_BYTES = 8
FILL, WRITEBACK = 0, 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CacheConfig:
    bytes: int
    ways: int = 8
    line: int = 128
    hit_latency_cycles: int = 0

    def validate(self, name: str, allow_empty: bool = False) -> None:
        if self.line < 16 or self.line & (self.line - 1):
            raise ConfigError(f"{name}: line size must be a power of two >= 16, got {self.line}")
        if self.ways < 1:
            raise ConfigError(f"{name}: ways must be >= 1")
        if self.bytes == 0 and allow_empty:
            return
        if self.bytes <= 0 or self.bytes % (self.ways * self.line):
            raise ConfigError(f"{name}: {self.bytes} bytes is not a whole number of "
                              f"{self.ways}-way sets of {self.line}-byte lines")
        if self.hit_latency_cycles < 0:
            raise ConfigError(f"{name}: negative hit latency")

    @property
    def sets(self) -> int:
        return self.bytes // (self.ways * self.line)


def _default_l2() -> CacheConfig:
    return CacheConfig(786432, 8, 128, 10)


def _default_counter_cache() -> CacheConfig:
    return CacheConfig(786432 // 16, 8, 128)


@dataclass(frozen=True)
class SimConfig:
    core_clock_mhz: float = 700.0
    channels: int = 6
    bus_width_bits: int = 384
    dram_data_rate_mts: float = 3696.0
    l2: CacheConfig = field(default_factory=_default_l2)
    counter_cache: CacheConfig = field(default_factory=_default_counter_cache)
    aes_latency_cycles: int = 20
    aes_bandwidth_gb_s: float = 8.0
    scheme: CipherMode = CipherMode.NONE
    se_enabled: bool = False
    max_outstanding: int = 64
    macs_per_cycle: int = 128

    def validate(self) -> None:
        if self.channels < 1:
            raise ConfigError("at least one memory channel is required")
        if self.bus_width_bits < 8 or self.bus_width_bits % (8 * self.channels):
            raise ConfigError("bus width must split into whole bytes per channel")
        for name in ("core_clock_mhz", "dram_data_rate_mts", "aes_bandwidth_gb_s"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.aes_latency_cycles < 0:
            raise ConfigError("aes_latency_cycles must be >= 0")
        if self.max_outstanding < 1:
            raise ConfigError("max_outstanding must be >= 1")
        if self.macs_per_cycle < 1:
            raise ConfigError("macs_per_cycle must be >= 1")
        self.l2.validate("l2")
        self.counter_cache.validate("counter_cache", allow_empty=True)
        if self.counter_cache.line % COUNTER_BYTES:
            raise ConfigError("counter cache line must hold whole counters")

    @property
    def label(self) -> str:
        return scheme_label(self.scheme, self.se_enabled)

    def with_scheme(self, scheme: Union[CipherMode, str], se_enabled: bool) -> "SimConfig":
        if isinstance(scheme, str):
            scheme = CipherMode.parse(scheme)
        return dataclasses.replace(self, scheme=scheme, se_enabled=se_enabled)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scheme"] = self.scheme.value
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(data)
        for key, default in (("l2", _default_l2()), ("counter_cache", _default_counter_cache())):
            if key in kw and isinstance(kw[key], dict):
                kw[key] = dataclasses.replace(default, **kw[key])
        if "scheme" in kw and isinstance(kw["scheme"], str):
            kw["scheme"] = CipherMode.parse(kw["scheme"])
        cfg = cls(**kw)
        cfg.validate()
        return cfg


def load_config(path: Union[str, Path]) -> SimConfig:
    """Read a JSON file mirroring :class:`SimConfig` (nested objects for the caches)."""
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return SimConfig.from_dict(data)


SCHEMES = {
    "baseline": (CipherMode.NONE, False),
    "direct": (CipherMode.DIRECT, False),
    "counter": (CipherMode.COUNTER, False),
    "direct+se": (CipherMode.DIRECT, True),
    "counter+se": (CipherMode.COUNTER, True),
    "seal": (CipherMode.COLOE, True),
}


def scheme_label(scheme: CipherMode, se_enabled: bool) -> str:
    for name, key in SCHEMES.items():
        if key == (scheme, se_enabled):
            return name
    if scheme is CipherMode.NONE:
        return "baseline"
    return scheme.value + ("+se" if se_enabled else "")


def parse_scheme(text: str) -> tuple[CipherMode, bool]:
    """``seal``, ``counter+se``, ``coloe`` ... -> (mode, se_enabled)."""
    t = text.strip().lower()
    if t in SCHEMES:
        return SCHEMES[t]
    base, plus, suffix = t.partition("+")
    if plus and suffix != "se":
        raise ValueError(f"unknown scheme {text!r}")
    return CipherMode.parse(base), bool(plus)


def derive_timing(config: SimConfig) -> dict[str, int]:
    """AES initiation interval and per-line DRAM service time, in core cycles."""
    config.validate()
    line = config.l2.line
    lines_per_s = config.aes_bandwidth_gb_s * 1e9 / line
    aes_interval = math.ceil(round(config.core_clock_mhz * 1e6 / lines_per_s, 9))
    bytes_per_cycle = (config.dram_data_rate_mts * 1e6 * config.bus_width_bits / 8
                       / config.channels) / (config.core_clock_mhz * 1e6)
    dram_service = math.ceil(round(line / bytes_per_cycle, 9))
    if aes_interval < 1 or dram_service < 1:
        raise ConfigError("derived intervals must be at least one cycle")
    return {"aes_interval_cycles": aes_interval, "dram_service_cycles": dram_service}


# -- caches -----------------------------------------------------------------

@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0
    evictions: int = 0
    writebacks: int = 0


def run_cache(accesses: Iterable, config: CacheConfig) -> CacheStats:
    """Replay line indices (or ``(line, is_write)`` pairs) through an LRU cache."""
    config.validate("cache")
    sets: list[dict[int, bool]] = [dict() for _ in range(config.sets)]
    stats = CacheStats()
    for acc in accesses:
        line, write = acc if isinstance(acc, tuple) else (acc, False)
        s = sets[line % config.sets]
        dirty = s.pop(line, None)
        if dirty is not None:
            stats.hits += 1
            s[line] = dirty or bool(write)
            continue
        stats.misses += 1
        if len(s) >= config.ways:
            victim = next(iter(s))
            stats.evictions += 1
            stats.writebacks += s.pop(victim)
        s[line] = bool(write)
    return stats


@dataclass
class LayerStream:
    """DRAM-level events for one layer, in issue order.

    Encryption flags are not stored: they are a property of the line, looked up
    from the traces being timed, so one L2 pass serves plans of any ratio.
    """

    layer_id: int
    kind: str
    lines: list[int]
    events: list[int]       # FILL or WRITEBACK
    hit_pos: int            # events preceding the layer's last L2 hit, -1 if none
    macs: int


@dataclass
class L2Result:
    layers: list[LayerStream]
    hits: int
    misses: int
    evictions: int


def filter_l2(traces: list[LayerTrace], l2: CacheConfig) -> L2Result:
    l2.validate("l2")
    nsets, ways = l2.sets, l2.ways
    sets: list[dict[int, int]] = [dict() for _ in range(nsets)]
    hits = misses = evictions = 0
    out = []
    for t in traces:
        lines, events = [], []
        hit_pos = -1
        for line, op in zip(t.lines.tolist(), t.ops.tolist()):
            s = sets[line % nsets]
            state = s.pop(line, None)
            if state is not None:
                hits += 1
                s[line] = state | op
                hit_pos = len(lines)
                continue
            misses += 1
            lines.append(line)
            events.append(FILL)
            if len(s) >= ways:
                victim = next(iter(s))
                vstate = s.pop(victim)
                evictions += 1
                if vstate:
                    lines.append(victim)
                    events.append(WRITEBACK)
            s[line] = op
        out.append(LayerStream(t.layer_id, t.kind, lines, events, hit_pos, t.macs))
    return L2Result(out, hits, misses, evictions)


def line_flags(traces: list[LayerTrace]) -> np.ndarray:
    """Per-line encrypted flag, indexed by line number, gathered from the traces."""
    top = max((int(t.lines.max()) for t in traces if len(t)), default=-1)
    flags = np.zeros(top + 1, dtype=bool)
    for t in traces:
        flags[t.lines] = t.enc
    return flags


# -- timing -----------------------------------------------------------------

@dataclass
class Metrics:
    scheme: str = "baseline"
    total_cycles: int = 0
    compute_cycles: int = 0
    data_reads_encrypted: int = 0
    data_reads_plaintext: int = 0
    data_writes_encrypted: int = 0
    data_writes_plaintext: int = 0
    counter_reads: int = 0
    counter_writes: int = 0
    l2_hits: int = 0
    l2_misses: int = 0
    counter_cache_hits: int = 0
    counter_cache_misses: int = 0
    aes_busy_cycles: int = 0
    aes_stall_cycles: int = 0
    channel_busy_cycles: int = 0
    normalized_perf: float = float("nan")

    @property
    def data_reads(self) -> int:
        return self.data_reads_encrypted + self.data_reads_plaintext

    @property
    def data_writes(self) -> int:
        return self.data_writes_encrypted + self.data_writes_plaintext

    @property
    def data_accesses(self) -> int:
        return self.data_reads + self.data_writes

    @property
    def encrypted_accesses(self) -> int:
        return self.data_reads_encrypted + self.data_writes_encrypted

    @property
    def counter_accesses(self) -> int:
        return self.counter_reads + self.counter_writes

    @property
    def latency_proxy(self) -> int:
        return self.total_cycles

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["latency_proxy"] = self.latency_proxy
        return d


@dataclass
class EngineState:
    """In-order pipelined AES engine of one controller."""

    interval: int
    latency: int
    next_slot: int = 0
    busy: int = 0
    stall: int = 0
    jobs: int = 0

    def issue(self, ready: int) -> int:
        """Admit a line job ready at ``ready``; returns its completion time."""
        start = ready if ready > self.next_slot else self.next_slot
        self.stall += start - ready
        self.next_slot = start + self.interval
        self.busy += self.interval
        self.jobs += 1
        return start + self.latency


class _CounterCache:
    """LRU counter cache shared by all controllers; 0 bytes means every lookup misses."""

    def __init__(self, cfg: CacheConfig):
        self.nsets = cfg.sets if cfg.bytes else 0
        self.ways = cfg.ways
        self.per_line = cfg.line // COUNTER_BYTES
        self.sets = [dict() for _ in range(self.nsets)]
        self.hits = self.misses = 0

    def key(self, line: int) -> int:
        # one counter line holds the counters of per_line consecutive data lines
        return line // self.per_line

    def lookup(self, line: int, write: bool) -> tuple[bool, Optional[int]]:
        """Returns (hit, evicted dirty counter line or None).

        With caching disabled a write reports its own line as the dirty victim.
        """
        key = self.key(line)
        if not self.nsets:
            self.misses += 1
            return False, (key if write else None)
        s = self.sets[key % self.nsets]
        dirty = s.pop(key, None)
        if dirty is not None:
            self.hits += 1
            s[key] = dirty or write
            return True, None
        self.misses += 1
        victim = None
        if len(s) >= self.ways:
            old = next(iter(s))
            if s.pop(old):
                victim = old
        s[key] = write
        return False, victim


def simulate(traces: list[LayerTrace], config: SimConfig,
             l2: Optional[L2Result] = None) -> Metrics:
    """Time ``traces`` under ``config``; pass a precomputed ``l2`` to skip the cache pass."""
    timing = derive_timing(config)
    if l2 is None:
        l2 = filter_l2(traces, config.l2)
    svc = timing["dram_service_cycles"]
    interval = timing["aes_interval_cycles"]
    lat = config.aes_latency_cycles
    nch = config.channels
    window = config.max_outstanding
    hit_lat = config.l2.hit_latency_cycles
    mode = config.scheme
    direct = mode is CipherMode.DIRECT
    counter = mode is CipherMode.COUNTER
    crypt = mode is not CipherMode.NONE
    se = config.se_enabled

    m = Metrics(scheme=config.label, l2_hits=l2.hits, l2_misses=l2.misses)
    ctr_cache = _CounterCache(config.counter_cache)
    engines = [EngineState(interval, lat) for _ in range(nch)]
    busy = 0
    total = 0
    compute_total = 0

    if len(l2.layers) != len(traces):
        raise ValueError("L2 result does not belong to these traces")
    flags = line_flags(traces)
    for layer in l2.layers:
        free = [0] * nch
        for eng in engines:
            eng.next_slot = 0
        pending: list[list[int]] = [[] for _ in range(nch)]
        front = 0
        end = 0
        hit_time = -1

        def dram(ch: int, ready: int) -> int:
            nonlocal busy, end
            start = ready if ready > free[ch] else free[ch]
            done = start + svc
            free[ch] = done
            busy += svc
            if done > end:
                end = done
            return done

        def counter_word(line: int, write: bool, ready: int) -> int:
            hit, victim = ctr_cache.lookup(line, write)
            if hit:
                return ready
            m.counter_reads += 1
            got = dram(ctr_cache.key(line) % nch, ready)
            if victim is not None:
                m.counter_writes += 1
                dram(victim % nch, got)
            return got

        enc = flags[layer.lines].tolist() if layer.lines else []
        for pos, (line, ev, e) in enumerate(zip(layer.lines, layer.events, enc)):
            if pos == layer.hit_pos:
                hit_time = front
            ch = line % nch
            secure = crypt and (e or not se)
            if ev == FILL:
                q = pending[ch]
                while q and q[0] <= front:
                    heapq.heappop(q)
                if len(q) >= window:
                    front = heapq.heappop(q)
                ready = front
                if not secure:
                    m.data_reads_plaintext += 1
                    done = dram(ch, ready)
                else:
                    m.data_reads_encrypted += 1
                    eng = engines[ch]
                    if direct:
                        done = eng.issue(dram(ch, ready))
                    elif counter:
                        known = counter_word(line, False, ready)
                        data = dram(ch, ready)
                        pad = eng.issue(known)
                        done = (data if data > pad else pad) + 1
                    else:
                        data = dram(ch, ready)
                        pad = eng.issue(ready)
                        done = (data if data > pad else pad) + 1
                heapq.heappush(q, done)
            else:
                if not secure:
                    m.data_writes_plaintext += 1
                    done = dram(ch, front)
                else:
                    m.data_writes_encrypted += 1
                    eng = engines[ch]
                    if direct:
                        done = dram(ch, eng.issue(front))
                    elif counter:
                        known = counter_word(line, True, front)
                        done = dram(ch, eng.issue(known) + 1)
                    else:
                        done = dram(ch, eng.issue(front) + 1)
            if done > end:
                end = done
        if layer.hit_pos >= len(layer.lines):
            hit_time = front
        if hit_time >= 0 and hit_time + hit_lat > end:
            end = hit_time + hit_lat
        comp = ceil_div(layer.macs, config.macs_per_cycle)
        compute_total += comp
        total += end if end > comp else comp

    m.total_cycles = total
    m.compute_cycles = compute_total
    m.counter_cache_hits = ctr_cache.hits
    m.counter_cache_misses = ctr_cache.misses
    m.aes_busy_cycles = sum(e.busy for e in engines)
    m.aes_stall_cycles = sum(e.stall for e in engines)
    m.channel_busy_cycles = busy
    return m


def check_metrics(m: Metrics, config: SimConfig) -> list[str]:
    """Structural invariants every run must satisfy; returns violations found."""
    bad = []
    for k, v in m.to_dict().items():
        if isinstance(v, int) and v < 0:
            bad.append(f"{k} is negative")
    if config.scheme is CipherMode.NONE:
        if m.aes_busy_cycles or m.encrypted_accesses:
            bad.append("baseline used the AES engine")
    if config.scheme is not CipherMode.COUNTER and m.counter_accesses:
        bad.append(f"{config.scheme.value} issued counter traffic")
    if m.channel_busy_cycles > m.total_cycles * config.channels:
        bad.append("channel busy cycles exceed total_cycles x channels")
    if m.total_cycles < m.compute_cycles:
        bad.append("total_cycles below the compute bound")
    return bad


__all__ = [
    "COUNTER_BYTES", "check_metrics", "CacheConfig", "CacheStats", "ConfigError", "EngineState", "L2Result",
    "LayerStream", "Metrics", "line_flags", "SCHEMES", "SimConfig", "derive_timing", "filter_l2",
    "load_config", "parse_scheme", "run_cache", "scheme_label", "simulate",
]
