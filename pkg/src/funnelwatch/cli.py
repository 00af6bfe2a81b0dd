"""Command-line interface: ``funnelwatch {analyze,simulate,validate,render}``.

Exit status is 0 on success, 2 when the input failed validation (analysis
still runs for what can be analysed), and 1 on a fatal error.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import os
import re
import sys
import tempfile
import dataclasses
from dataclasses import dataclass

from . import __version__
from .engine import AnalysisConfig, analyze_dataset
from .errors import FunnelError
from .ingest import (
    Dataset,
    apply_transforms,
    parse_claims,
    parse_population,
    parse_transforms,
    validate,
    write_claims,
    write_population,
)
from .render import ChartStyle, export_points, read_points, render_svg
from .report import file_digest, summarize, summary_table, summary_text
from .simulate import evaluate_detection, generate, load_scenario, replicate

log = logging.getLogger("funnelwatch")

FORMATS = ("svg", "csv", "json")


@dataclass(frozen=True)
class RunConfig:
    claims: str | None = None
    population: str | None = None
    transforms: str | None = None
    out: str = "."
    analysis: AnalysisConfig = AnalysisConfig()
    formats: tuple = FORMATS
    workers: int = 1
    delimiter: str = ","
    seed: int | None = None

    def check_paths(self):
        for label, path in (("claims", self.claims), ("population", self.population),
                            ("transforms", self.transforms)):
            if path is not None and not os.path.isfile(path):
                raise FileNotFoundError(f"{label} file not found: {path}")


def _atomic_write(path, text):
    d = os.path.dirname(path) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


_UNSAFE = re.compile(r"[^A-Za-z0-9._-]")


def _safe_name(identifier):
    return _UNSAFE.sub("_", identifier) or "_"


def _error(msg):
    print(f"funnelwatch: error: {msg}", file=sys.stderr)


def run_analyze(cfg: RunConfig) -> int:
    try:
        ds = _load(cfg)
    except (FileNotFoundError, _LoadError) as exc:
        _error(str(exc))
        return 1

    diagnostics = validate(ds)
    for d in diagnostics:
        print(str(d), file=sys.stderr)
    failed = any(d.severity == "error" for d in diagnostics)

    results = analyze_dataset(ds, cfg.analysis, workers=cfg.workers)
    inputs = {"claims": file_digest(cfg.claims), "population": file_digest(cfg.population)}
    if cfg.transforms:
        inputs["transforms"] = file_digest(cfg.transforms)
    report = summarize(results, config=cfg.analysis, inputs=inputs,
                       extra={"validation": [vars(d) for d in diagnostics]})

    # everything is rendered before the first write, then written file by file
    outputs = {}
    for r in results:
        if not r.analyzed:
            continue
        name = _safe_name(r.diagnosis_id)
        if "svg" in cfg.formats:
            outputs[os.path.join("charts", f"{name}.svg")] = render_svg(r.chart, ChartStyle())
        if "csv" in cfg.formats:
            outputs[os.path.join("points", f"{name}.csv")] = export_points(r.chart, cfg.analysis.grid_points)
    if "json" in cfg.formats:
        outputs["report.json"] = report.to_json()
    if "csv" in cfg.formats:
        outputs["summary.csv"] = summary_table(report)
    outputs["summary.txt"] = summary_text(report)
    for rel in sorted(outputs):
        _atomic_write(os.path.join(cfg.out, rel), outputs[rel])
    for d in report.diagnoses:
        if d.skipped:
            log.info("diagnosis %s skipped: %s", d.diagnosis_id, d.skipped)
    return 2 if failed else 0


class _LoadError(Exception):
    pass


def _load(cfg):
    """Read inputs one file at a time so a failure can name its file."""
    cfg.check_paths()
    stage = [("claims", cfg.claims, parse_claims), ("population", cfg.population, parse_population)]
    parsed = {}
    for label, path, fn in stage:
        try:
            with open(path, newline="", encoding="utf-8") as fh:
                parsed[label] = fn(fh, delimiter=cfg.delimiter)
        except (FunnelError, UnicodeDecodeError) as exc:
            raise _LoadError(f"{path}: {exc}") from exc
    try:
        ds = Dataset(parsed["claims"], parsed["population"])
    except FunnelError as exc:
        raise _LoadError(f"{cfg.claims}: {exc}") from exc
    if cfg.transforms:
        try:
            with open(cfg.transforms, encoding="utf-8") as fh:
                spec = parse_transforms(fh)
            ds = apply_transforms(ds, spec)
        except FunnelError as exc:
            raise _LoadError(f"{cfg.transforms}: {exc}") from exc
    return ds


def run_validate(cfg: RunConfig) -> int:
    try:
        ds = _load(cfg)
    except (FileNotFoundError, _LoadError) as exc:
        _error(str(exc))
        return 1
    diagnostics = validate(ds)
    for d in diagnostics:
        print(str(d))
    if not diagnostics:
        print("ok")
    return 2 if any(d.severity == "error" for d in diagnostics) else 0


def run_simulate(cfg: RunConfig, scenario_path, replications=None) -> int:
    try:
        with open(scenario_path, encoding="utf-8") as fh:
            spec = load_scenario(fh)
    except FileNotFoundError:
        _error(f"scenario file not found: {scenario_path}")
        return 1
    except FunnelError as exc:
        _error(f"{scenario_path}: {exc}")
        return 1
    try:
        if cfg.seed is not None:
            spec = dataclasses.replace(spec, seed=cfg.seed)
        if replications is not None:
            spec = dataclasses.replace(spec, replications=replications)
    except FunnelError as exc:
        _error(str(exc))
        return 1
    n = spec.replications

    try:
        ds, truth = generate(spec, 0)
    except FunnelError as exc:
        _error(f"{scenario_path}: {exc}")
        return 1
    data_dir = os.path.join(cfg.out, "data")
    claims_path = os.path.join(data_dir, "claims.csv")
    pop_path = os.path.join(data_dir, "population.csv")
    buf = io.StringIO()
    write_claims(ds.claims, buf)
    _atomic_write(claims_path, buf.getvalue())
    buf = io.StringIO()
    write_population(ds.population, buf)
    _atomic_write(pop_path, buf.getvalue())
    _atomic_write(os.path.join(data_dir, "truth.json"),
                  json.dumps(truth.to_dict(), indent=2, sort_keys=True) + "\n")

    acfg = RunConfig(claims_path, pop_path, None, os.path.join(cfg.out, "analysis"), cfg.analysis,
                     cfg.formats, cfg.workers, ",")
    status = run_analyze(acfg)
    if status == 1:
        return 1

    outcomes, truths = replicate(spec, n, cfg.analysis, workers=cfg.workers)
    summary = evaluate_detection(outcomes, truths)
    doc = {"scenario": spec.to_dict(), "analysis": cfg.analysis.to_dict(), "evaluation": summary.to_dict()}
    _atomic_write(os.path.join(cfg.out, "evaluation.json"),
                  json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"false-flag rate {summary.false_flag_rate:.4f} "
          f"(95% CI {summary.false_flag_ci[0]:.4f}-{summary.false_flag_ci[1]:.4f}) "
          f"over {summary.null_trials} null provider-replications")
    for m, v in sorted(summary.detection.items()):
        print(f"odds multiplier {m:g}: detected {v['hits']}/{v['trials']} ({v['rate']:.3f})")
    return status


def run_render(points_path, out_path, secondary_axis=False) -> int:
    try:
        with open(points_path, encoding="utf-8") as fh:
            chart = read_points(fh.read())
    except FileNotFoundError:
        _error(f"points file not found: {points_path}")
        return 1
    except (KeyError, ValueError) as exc:
        _error(f"{points_path}: cannot read points export ({exc})")
        return 1
    _atomic_write(out_path, render_svg(chart, ChartStyle(secondary_axis=secondary_axis)))
    return 0


def _floats(text):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _formats(text):
    fmts = tuple(v.strip() for v in text.split(",") if v.strip())
    bad = [f for f in fmts if f not in FORMATS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown format(s) {bad}; choose from {FORMATS}")
    return fmts


def _add_analysis_flags(p):
    p.add_argument("--sigma", type=_floats, default=(2.0, 3.0), help="sigma levels, e.g. 2,3")
    p.add_argument("--primary-sigma", type=float, default=2.0, help="sigma level used for flags")
    p.add_argument("--min-observed", type=int, default=1, help="minimum patients for a provider to be plotted")
    p.add_argument("--no-continuity-correction", action="store_true",
                   help="fail on zero or saturated counts instead of correcting")
    p.add_argument("--format", type=_formats, default=FORMATS, help="svg,csv,json")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)


def build_parser():
    parser = argparse.ArgumentParser(prog="funnelwatch", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="funnel plots and flags for every diagnosis")
    p.add_argument("--claims", required=True)
    p.add_argument("--population", required=True)
    p.add_argument("--transforms")
    p.add_argument("--out", required=True)
    p.add_argument("--delimiter", choices=(",", "tab"), default=",")
    p.add_argument("--seed", type=int, help="accepted for a uniform interface; analysis draws no random numbers")
    _add_analysis_flags(p)

    p = sub.add_parser("validate", help="check inputs without analysing")
    p.add_argument("--claims", required=True)
    p.add_argument("--population", required=True)
    p.add_argument("--transforms")
    p.add_argument("--delimiter", choices=(",", "tab"), default=",")

    p = sub.add_parser("simulate", help="generate synthetic data, analyse it, evaluate detection")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--replications", type=int)
    p.add_argument("--seed", type=int)
    _add_analysis_flags(p)

    p = sub.add_parser("render", help="re-render a chart from a points export")
    p.add_argument("--points", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--secondary-axis", action="store_true", help="label implied odds ratios on the right")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    if args.command == "render":
        return run_render(args.points, args.out, args.secondary_axis)
    delimiter = "\t" if getattr(args, "delimiter", ",") == "tab" else ","
    if args.command == "validate":
        return run_validate(RunConfig(args.claims, args.population, args.transforms, delimiter=delimiter))
    try:
        analysis = AnalysisConfig(args.sigma, args.primary_sigma, args.min_observed,
                                  not args.no_continuity_correction)
    except ValueError as exc:
        _error(str(exc))
        return 1
    if args.command == "analyze":
        cfg = RunConfig(args.claims, args.population, args.transforms, args.out, analysis, args.format,
                        args.workers, delimiter)
        return run_analyze(cfg)
    cfg = RunConfig(out=args.out, analysis=analysis, formats=args.format, workers=args.workers, seed=args.seed)
    return run_simulate(cfg, args.scenario, args.replications)


if __name__ == "__main__":
    sys.exit(main())
