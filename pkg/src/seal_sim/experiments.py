"""Scheme x preset x ratio experiment matrices written as metrics CSVs."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .memsim import (SCHEMES, L2Result, Metrics, SimConfig, filter_l2, parse_scheme,
                     scheme_label, simulate)
from .crypto import CipherMode
from .model import PRESETS, Model, generate_synthetic
from .planner import POLICIES, build_plan
from .trace import LayerTrace, TilingConfig, gen_inference_trace

DEFAULT_SCHEMES = tuple(SCHEMES)

METRIC_COLUMNS = (
    "total_cycles", "compute_cycles", "latency_proxy",
    "data_reads", "data_reads_encrypted", "data_reads_plaintext",
    "data_writes", "data_writes_encrypted", "data_writes_plaintext",
    "counter_reads", "counter_writes", "l2_hits", "l2_misses",
    "counter_cache_hits", "counter_cache_misses",
    "aes_busy_cycles", "aes_stall_cycles", "channel_busy_cycles", "normalized_perf",
)
ID_COLUMNS = ("preset", "scale", "ratio", "seed", "policy", "scheme", "mode", "se_enabled")
CSV_COLUMNS = ID_COLUMNS + METRIC_COLUMNS


class SpecError(ValueError):
    pass


@dataclass
class ExperimentSpec:
    presets: list[str] = field(default_factory=lambda: ["vgg16-like", "resnet18-like", "resnet34-like"])
    scales: list[int] = field(default_factory=lambda: [4])
    ratios: list[float] = field(default_factory=lambda: [0.5])
    schemes: list[str] = field(default_factory=lambda: list(DEFAULT_SCHEMES))
    seed: int = 0
    output_dir: Path = Path("results")
    policy: str = "paper-default"
    config: SimConfig = field(default_factory=SimConfig)

    def validate(self) -> None:
        for name in ("presets", "scales", "ratios", "schemes"):
            if not getattr(self, name):
                raise SpecError(f"{name} must not be empty")
        for p in self.presets:
            if p not in PRESETS:
                raise SpecError(f"unknown preset {p!r}")
        for r in self.ratios:
            if not 0.0 <= r <= 1.0:
                raise SpecError(f"ratio {r} outside [0, 1]")
        for s in self.schemes:
            try:
                parse_scheme(s)
            except ValueError as exc:
                raise SpecError(str(exc)) from None
        if self.policy not in POLICIES:
            raise SpecError(f"unknown boundary policy {self.policy!r}")
        if not 0 <= self.seed < 2 ** 64:
            raise SpecError("seed must fit in 64 bits")
        self.config.validate()

    def scheme_keys(self) -> list[tuple[CipherMode, bool]]:
        """Requested schemes in order, baseline first and without duplicates."""
        keys = [SCHEMES["baseline"]]
        for s in self.schemes:
            k = parse_scheme(s)
            if k[0] is CipherMode.NONE:
                k = SCHEMES["baseline"]
            if k not in keys:
                keys.append(k)
        return keys


@dataclass
class Workload:
    """A model, its plan-flagged trace and the shared L2 pass for one ratio."""

    model: Model
    ratio: float
    traces: list[LayerTrace]
    l2: L2Result


def prepare(preset: str, scale: int, ratio: float, seed: int, policy: str = "paper-default",
            config: Optional[SimConfig] = None, model: Optional[Model] = None,
            l2: Optional[L2Result] = None, tiling: TilingConfig = TilingConfig()) -> Workload:
    config = config or SimConfig()
    model = model or generate_synthetic(preset, scale, seed)
    traces = gen_inference_trace(model, build_plan(model, ratio, policy), tiling)
    # flags change with the ratio, addresses do not, so one L2 pass can be reused
    return Workload(model, ratio, traces, l2 or filter_l2(traces, config.l2))


def run_cell(work: Workload, config: SimConfig, scheme: CipherMode, se: bool) -> Metrics:
    return simulate(work.traces, config.with_scheme(scheme, se), work.l2)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def metrics_row(m: Metrics, preset: str, scale: int, ratio: float, seed: int, policy: str,
                mode: CipherMode, se: bool) -> dict[str, str]:
    d = m.to_dict()
    d.update(data_reads=m.data_reads, data_writes=m.data_writes)
    row = {"preset": preset, "scale": str(scale), "ratio": f"{ratio:.2f}", "seed": str(seed),
           "policy": policy, "scheme": scheme_label(mode, se), "mode": mode.value,
           "se_enabled": _fmt(se)}
    row.update({k: _fmt(d[k]) for k in METRIC_COLUMNS})
    return row


def write_csv(rows: list[dict[str, str]], path: Path) -> Path:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())
    return path


def run_matrix(spec: ExperimentSpec, progress=None) -> list[Path]:
    """Run every (preset, scale, ratio, scheme) cell; one metrics CSV per preset and scale.

    The baseline is always included.  Schemes without SE ignore plan flags, so
    they are simulated once per preset and scale and reported at every ratio.
    """
    spec.validate()
    keys = spec.scheme_keys()
    out_dir = Path(spec.output_dir)
    paths = []
    for preset in spec.presets:
        for scale in spec.scales:
            model = generate_synthetic(preset, scale, spec.seed)
            shared_l2 = None
            fixed: dict[tuple[CipherMode, bool], Metrics] = {}
            rows = []
            for ratio in spec.ratios:
                work = prepare(preset, scale, ratio, spec.seed, spec.policy, spec.config,
                               model=model, l2=shared_l2)
                shared_l2 = work.l2
                results = []
                for mode, se in keys:
                    if se:
                        m = run_cell(work, spec.config, mode, se)
                    else:
                        if (mode, se) not in fixed:
                            fixed[(mode, se)] = run_cell(work, spec.config, mode, se)
                        m = fixed[(mode, se)]
                    results.append((mode, se, m))
                    if progress:
                        progress(preset, scale, ratio, scheme_label(mode, se), m)
                base = results[0][2].total_cycles
                for mode, se, m in results:
                    m.normalized_perf = base / m.total_cycles if m.total_cycles else 1.0
                    rows.append(metrics_row(m, preset, scale, ratio, spec.seed, spec.policy,
                                            mode, se))
            paths.append(write_csv(rows, out_dir / f"metrics_{preset}_s{scale}.csv"))
    return paths


def read_csv(paths) -> list[dict[str, str]]:
    rows = []
    for p in paths:
        with open(p, newline="") as fh:
            rows.extend(csv.DictReader(fh))
    return rows


__all__ = ["CSV_COLUMNS", "DEFAULT_SCHEMES", "ExperimentSpec", "SpecError", "Workload",
           "metrics_row", "prepare", "read_csv", "run_cell", "run_matrix", "write_csv"]
