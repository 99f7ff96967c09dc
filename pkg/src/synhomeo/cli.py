"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or validation error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import featkit
from .dataio import (
    ConfigError,
    DataError,
    SynthSpec,
    atomic_write,
    generate_synthetic,
    load_config,
    load_dataset,
    save_dataset,
)
from .harness import ABLATIONS, EvalReport, prepare, pretrain_source, run_ablation, run_experiment
from .synnet import NetworkSnapshot

EXIT_USAGE = 1
EXIT_DATA = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("manifest", help="dataset manifest.json")
    p.add_argument("--config", help="key = value config file (defaults for unspecified keys)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable, applied after --config")
    p.add_argument("--source-frac", type=float, help="fraction of subjects used as labelled source")
    p.add_argument("--seed", type=int, help="run seed")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="synhomeo", description="Synaptic-homeostasis continual adaptation for EEG subject streams.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log adaptation events to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic multi-subject dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--subjects", type=int, default=12)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--channels", type=int, default=2)
    p.add_argument("--epochs", type=int, default=60, help="epochs per subject")
    p.add_argument("--sample-rate", type=float, default=100.0)
    p.add_argument("--epoch-seconds", type=float, default=2.0)
    p.add_argument("--shift", type=float, default=1.0, help="inter-subject shift magnitude")
    p.add_argument("--noise", type=float, default=0.5, help="white-noise standard deviation")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default="synthetic")

    p = sub.add_parser("extract", help="write per-subject initial features as JSON")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--aggregate", choices=("mean", "median"), default="mean")

    p = sub.add_parser("init-net", help="pretrain the source model and export the initial network")
    _add_run_flags(p)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("run-cl", help="run continual adaptation over the incremental subjects")
    _add_run_flags(p)
    p.add_argument("--repeats", type=int, help="number of shuffled stream orders")
    p.add_argument("--ablation", choices=ABLATIONS, help="homeostasis variant")
    p.add_argument("--workers", type=int, default=1, help="parallel processes for repeats")
    p.add_argument("--out", required=True, help="run directory")

    p = sub.add_parser("ablate", help="run the full, no_SC and no_SR variants with identical seeds")
    _add_run_flags(p)
    p.add_argument("--repeats", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True, help="parent directory; one run directory per variant")

    p = sub.add_parser("export-graph", help="convert a network snapshot to DOT or JSON")
    p.add_argument("snapshot")
    p.add_argument("--format", default="dot", help="dot or json")
    p.add_argument("--out", help="output file (stdout if omitted)")

    p = sub.add_parser("report", help="summarise a run directory")
    p.add_argument("run_dir")
    return parser


def _resolve_config(args) -> "RunConfig":
    overrides = list(args.overrides)
    for flag, key in (("source_frac", "source_frac"), ("seed", "seed"), ("repeats", "repeats"), ("ablation", "ablation")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    return load_config(args.config, overrides)


def write_run_dir(report: EvalReport, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "config.txt", report.config.to_text())
    atomic_write(out / "report.csv", report.report_csv())
    atomic_write(out / "trajectories.csv", report.trajectories_csv())
    atomic_write(out / "summary.txt", report.summary() + "\n")
    atomic_write(out / "params" / "m0.lprm", report.m0.to_bytes())
    for stream, params in zip(report.streams, report.final_params):
        for snap in stream.snapshots:
            atomic_write(out / "snapshots" / f"repeat_{stream.repeat}" / f"step_{snap.step}.json", snap.to_json())
        for sid, p in params.items():
            atomic_write(out / "params" / f"repeat_{stream.repeat}" / f"{sid}.lprm", p.to_bytes())


def cmd_synth(args) -> int:
    if args.classes < 2:
        raise UsageError("--classes must be at least 2")
    try:
        spec = SynthSpec(
            n_subjects=args.subjects, n_classes=args.classes, n_channels=args.channels,
            epochs_per_subject=args.epochs, sample_rate=args.sample_rate,
            epoch_seconds=args.epoch_seconds, shift=args.shift, noise=args.noise,
            seed=args.seed, name=args.name,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    path = save_dataset(generate_synthetic(spec), args.out)
    print(path)
    return 0


def cmd_extract(args) -> int:
    ds = load_dataset(args.manifest)
    out = {"n_channels": ds.n_channels, "subjects": {}}
    for s in ds.subjects:
        fv = featkit.build_initial_feature(list(s.samples), ds.sample_rate, args.aggregate)
        out["subjects"][s.id] = {
            "time": fv.time_block.tolist(),
            "freq": fv.freq_block.tolist(),
            "tf": fv.tf_block.tolist(),
        }
    atomic_write(args.out, json.dumps(out, indent=1) + "\n")
    print(args.out)
    return 0


def cmd_init_net(args) -> int:
    cfg = _resolve_config(args)
    ds = load_dataset(args.manifest)
    prepared = prepare(ds, cfg)
    m0, net, _ = pretrain_source(prepared.sources, cfg, prepared.n_classes)
    out = Path(args.out)
    atomic_write(out / "config.txt", cfg.to_text())
    atomic_write(out / "m0.lprm", m0.to_bytes())
    atomic_write(out / "step_0.json", net.export_snapshot(0).to_json())
    print(out / "step_0.json")
    return 0


def cmd_run_cl(args) -> int:
    cfg = _resolve_config(args)
    ds = load_dataset(args.manifest)
    report = run_experiment(ds, cfg, workers=args.workers)
    write_run_dir(report, Path(args.out))
    print(report.summary())
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    ds = load_dataset(args.manifest)
    reports = run_ablation(ds, cfg, workers=args.workers)
    for variant, report in reports.items():
        write_run_dir(report, Path(args.out) / variant)
        print(f"[{variant}]")
        print(report.summary())
    return 0


def cmd_export_graph(args) -> int:
    if args.format not in ("dot", "json"):
        raise UsageError(f"unknown format {args.format!r}; use dot or json")
    try:
        snap = NetworkSnapshot.from_json(Path(args.snapshot).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read snapshot {args.snapshot}: {exc}") from exc
    text = snap.to_dot() if args.format == "dot" else snap.to_json()
    if args.out:
        atomic_write(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_report(args) -> int:
    import csv
    import math
    import statistics

    path = Path(args.run_dir) / "report.csv"
    try:
        rows = list(csv.DictReader(path.open()))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise DataError(f"{path} has no rows")
    repeats = sorted({int(r["repeat"]) for r in rows})
    print(f"repeats: {len(repeats)}  rows: {len(rows)}")
    for key, label in (("acc", "ACC"), ("mf1", "MF1")):
        parts = []
        for model in ("m0", "mi"):
            col = f"{key}_{model}"
            per = [
                math.fsum(float(r[col]) for r in rows if int(r["repeat"]) == rep)
                / sum(1 for r in rows if int(r["repeat"]) == rep)
                for rep in repeats
            ]
            sd = statistics.pstdev(per) if len(per) > 1 else 0.0
            parts.append(f"{model.capitalize()} {100 * math.fsum(per) / len(per):.1f}±{100 * sd:.2f}")
        print(f"{label}  " + "  ->  ".join(parts))
    n_fb = sum(int(r["fallback"]) for r in rows)
    print(f"fallback subjects: {n_fb}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "extract": cmd_extract,
    "init-net": cmd_init_net,
    "run-cl": cmd_run_cl,
    "ablate": cmd_ablate,
    "export-graph": cmd_export_graph,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"synhomeo {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"synhomeo {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
