"""Command-line entry point: ``seal-sim plan|simulate|matrix|analyze|report``.

Exit codes: 0 success, 1 usage or invalid input, 2 invariant violation, 3 I/O failure.
The default output directory comes from ``$SEAL_SIM_OUT`` (else ``./results``).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .experiments import ExperimentSpec, metrics_row, prepare, run_cell, run_matrix, write_csv
from .memsim import SimConfig, check_metrics, load_config, parse_scheme, scheme_label
from .crypto import CipherMode
from .model import PRESETS, generate_synthetic, linear_chain
from .planner import POLICIES, build_plan, drop_channel, solvability_oracle, verify_closure
from .report import band_notes, build_table, write_report

EXIT_OK, EXIT_USAGE, EXIT_INVARIANT, EXIT_IO = 0, 1, 2, 3
OUT_ENV = "SEAL_SIM_OUT"


class UsageError(Exception):
    pass


class InvariantError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _csv_list(cast):
    def parse(text: str):
        try:
            return [cast(x) for x in text.split(",") if x.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
    return parse


def _config(args) -> SimConfig:
    return load_config(args.config) if args.config else SimConfig()


def _out(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or "results")


def cmd_plan(args) -> int:
    model = generate_synthetic(args.preset, args.scale, args.seed)
    plan = build_plan(model, args.ratio, args.policy)
    report = verify_closure(model, plan)
    out = _out(args)
    out.mkdir(parents=True, exist_ok=True)
    plan_path = out / f"plan_{args.preset}_s{args.scale}_r{args.ratio:.2f}.json"
    plan_path.write_text(plan.to_json() + "\n")
    (out / (plan_path.stem + "_closure.json")).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    rows = sum(len(plan.encrypted_rows(l.id)) for l in model.weight_layers)
    total = sum(l.kernel.n_x for l in model.weight_layers)
    print(f"{model.name}: {rows}/{total} kernel rows encrypted, closure ok={report.ok}")
    print(f"plan written to {plan_path}")
    if not report.ok:
        raise InvariantError(f"{len(report.violations)} closure violations")
    return EXIT_OK


def cmd_simulate(args) -> int:
    config = _config(args)
    mode, se = parse_scheme(args.scheme) if args.scheme else (config.scheme, config.se_enabled)
    se = se or args.se
    work = prepare(args.preset, args.scale, args.ratio, args.seed, args.policy, config)
    cfg = config.with_scheme(mode, se)
    m = run_cell(work, config, mode, se)
    if mode is not CipherMode.NONE:
        base = run_cell(work, config, CipherMode.NONE, False)
        m.normalized_perf = base.total_cycles / m.total_cycles
    else:
        m.normalized_perf = 1.0
    row = metrics_row(m, args.preset, args.scale, args.ratio, args.seed, args.policy, mode, se)
    path = write_csv([row], _out(args) / f"simulate_{args.preset}_s{args.scale}_{scheme_label(mode, se)}.csv")
    sys.stdout.write(path.read_text())
    bad = check_metrics(m, cfg)
    if bad:
        raise InvariantError("; ".join(bad))
    return EXIT_OK


def cmd_matrix(args) -> int:
    spec = ExperimentSpec(presets=args.presets, scales=args.scales, ratios=args.ratios,
                          schemes=args.schemes, seed=args.seed, output_dir=_out(args),
                          policy=args.policy, config=_config(args))
    bad = []

    def progress(preset, scale, ratio, scheme, m):
        print(f"{preset} s{scale} r{ratio:.2f} {scheme:11s} cycles={m.total_cycles}", flush=True)
        cfg = spec.config.with_scheme(*parse_scheme(scheme))
        bad.extend(f"{preset} {scheme}: {b}" for b in check_metrics(m, cfg))

    for p in run_matrix(spec, progress):
        print(f"wrote {p}")
    if bad:
        raise InvariantError("; ".join(bad))
    return EXIT_OK


def cmd_report(args) -> int:
    out = _out(args)
    paths = [Path(p) for p in args.csv] or sorted(out.glob("metrics_*.csv"))
    if not paths:
        raise FileNotFoundError(f"no metrics_*.csv files in {out}")
    table = build_table(paths)
    written = write_report(table, out, figures=not args.no_figures)
    sys.stdout.write(table.to_text())
    for note in band_notes(table):
        print(note)
    for p in written:
        print(f"wrote {p}")
    bad = [r for r in table.rows if r.scheme == "baseline" and r.normalized_perf != 1.0]
    if bad:
        raise InvariantError("baseline row does not normalise to 1.0")
    return EXIT_OK


def _parse_drop(text: str) -> tuple[int, int]:
    layer, sep, ch = text.upper().lstrip("L").partition(":")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected L<layer>:<channel>, got {text!r}")
    try:
        return int(layer), int(ch)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected L<layer>:<channel>, got {text!r}") from None


def cmd_analyze(args) -> int:
    model = linear_chain(args.widths, (args.pixels, args.pixels), args.seed, name="toy-chain")
    plan = build_plan(model, args.ratio, "none")
    for layer, ch in args.drop_channel:
        plan = drop_channel(model, plan, layer, ch)
    closure = verify_closure(model, plan)
    result = solvability_oracle(model, plan, seed=args.seed)
    recovered = {f"L{l}:row{r}": [None if v != v else round(float(v), 9) for v in w]
                 for (l, r), w in sorted(result.recovered_rows.items())}
    print(json.dumps({"model": model.name, "widths": args.widths, "ratio": args.ratio,
                      "dropped": [f"L{l}:{c}" for l, c in args.drop_channel],
                      "closure_ok": closure.ok, "violations": closure.to_dict()["violations"],
                      "recoverable": result.recoverable, "recovered_rows": recovered,
                      "max_rel_error": result.max_rel_error, "note": result.note}, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="seal-sim", description="Smart-encryption / colocation memory simulator")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, preset=True):
        sp.add_argument("--config", help="JSON file with SimConfig fields")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./results)")
        if preset:
            sp.add_argument("--preset", choices=PRESETS, default="vgg16-like")
            sp.add_argument("--scale", type=int, default=4)
            sp.add_argument("--ratio", type=float, default=0.5)
            sp.add_argument("--policy", choices=POLICIES, default="paper-default")

    sp = sub.add_parser("plan", help="build an encryption plan and check closure")
    common(sp)
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("simulate", help="run one scheme on one preset")
    common(sp)
    sp.add_argument("--scheme", help="baseline, direct, counter, coloe, seal, counter+se ...")
    sp.add_argument("--se", action="store_true", help="enable smart encryption")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("matrix", help="run a preset x ratio x scheme matrix")
    common(sp, preset=False)
    sp.add_argument("--presets", "--preset", type=_csv_list(str),
                    default=["vgg16-like", "resnet18-like", "resnet34-like"])
    sp.add_argument("--scales", "--scale", type=_csv_list(int), default=[4])
    sp.add_argument("--ratios", "--ratio", type=_csv_list(float), default=[0.5])
    sp.add_argument("--schemes", "--scheme", type=_csv_list(str),
                    default=list(ExperimentSpec().schemes))
    sp.add_argument("--policy", choices=POLICIES, default="paper-default")
    sp.set_defaults(func=cmd_matrix)

    sp = sub.add_parser("report", help="normalise metrics CSVs into tables and figures")
    common(sp, preset=False)
    sp.add_argument("csv", nargs="*", help="metrics CSVs (default: metrics_*.csv in --out)")
    sp.add_argument("--no-figures", action="store_true", help="skip PNG output")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("analyze", help="run the solvability oracle on a 1x1 toy chain")
    common(sp, preset=False)
    sp.add_argument("--widths", type=_csv_list(int), default=[4, 4, 4, 4],
                    help="channel widths, input first (default 4,4,4,4)")
    sp.add_argument("--pixels", type=int, default=4, help="toy map side")
    sp.add_argument("--ratio", type=float, default=0.25)
    sp.add_argument("--drop-channel", type=_parse_drop, action="append", default=[],
                    metavar="L<layer>:<ch>", help="leave an encrypted row's input channel in plaintext")
    sp.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"seal-sim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvariantError as exc:
        print(f"seal-sim: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except OSError as exc:
        print(f"seal-sim: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"seal-sim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
