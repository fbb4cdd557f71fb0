"""Command-line entry points: run, bench, metrics, serve.

Exit codes: 0 success, 2 validation/usage errors, 3 runtime aborts.
LRO_LOG=debug|info|warn selects the logging level.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .bench import read_suite, run_bench
from .diffusion import latent_to_bytes
from .instruction import SpecParseError, SpecValidationError, parse_spec, validate
from .lro import RunAbortedError, make_components, pbsi_run
from .metrics import DISTANCES, MetricsReport, if_ed, if_hh, if_th, report_table

log = logging.getLogger("latentdrag")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


def _setup_logging():
    level = {"debug": logging.DEBUG, "info": logging.INFO, "warn": logging.WARNING}.get(
        os.environ.get("LRO_LOG", "warn").lower(), logging.WARNING
    )
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentdrag",
        description="region-based drag editing on latent grids",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute one edit")
    run_p.add_argument("--image", required=True, help="input PNG")
    run_p.add_argument("--spec", required=True, help="instruction document (JSON)")
    run_p.add_argument("--out", required=True, help="output PNG path")
    run_p.add_argument("--denoiser", choices=["zero", "linear", "smoothing"], default="zero")
    run_p.add_argument("--extractor", choices=["identity", "pyramid"], default="pyramid")
    run_p.add_argument("--codec", choices=["identity", "pool"], default="identity")
    run_p.add_argument("--seed", type=int, default=0, help="seed for any randomized component")
    run_p.add_argument("--snapshot-every", type=int, default=0, metavar="N",
                       help="keep a latent snapshot every N window timesteps")

    bench_p = sub.add_parser("bench", help="run a fixture suite")
    bench_p.add_argument("--suite", required=True, help="fixture suite directory")
    bench_p.add_argument("--method", choices=["pbsi", "baseline"], required=True)
    bench_p.add_argument("--out", required=True, help="report directory")

    metrics_p = sub.add_parser("metrics", help="score edited images against originals")
    metrics_p.add_argument("--orig", required=True, help="directory of original PNGs")
    metrics_p.add_argument("--edited", required=True, help="directory of edited PNGs")
    metrics_p.add_argument("--specs", required=True, help="directory of instruction documents")
    metrics_p.add_argument("--distance", choices=sorted(DISTANCES), default="mae")

    serve_p = sub.add_parser("serve", help="start the run service")
    serve_p.add_argument("--port", type=int, default=8787)
    serve_p.add_argument("--workers", type=int, default=2, help="concurrent run slots")
    serve_p.add_argument("--queue", type=int, default=4, help="pending-run capacity")
    serve_p.add_argument("--output-dir", default=None, help="where finished results persist")
    return parser


def cmd_run(args) -> int:
    image_path = Path(args.image)
    spec_path = Path(args.spec)
    for p in (image_path, spec_path):
        if not p.exists():
            print(f"error: {p} does not exist", file=sys.stderr)
            return EXIT_VALIDATION
    try:
        image = np.asarray(Image.open(image_path).convert("RGB"))
        spec = parse_spec(spec_path.read_text(encoding="utf-8"),
                          base_dir=spec_path.parent, image_override=image)
    except (SpecParseError, SpecValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    for warning in validate(spec):
        log.warning("%s", warning)

    np.random.seed(args.seed)  # components are deterministic; belt and braces
    try:
        den, ext, cod, sched = make_components(spec, args.denoiser, args.extractor, args.codec)
        result = pbsi_run(spec, den, ext, cod, sched,
                          snapshot_every=args.snapshot_every, include_previews=False)
    except RunAbortedError as exc:
        print(f"error: run aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(result.image, mode="RGB").save(out_path)

    for t, latent in sorted(result.snapshots.items()):
        snap_path = out_path.with_name(f"{out_path.stem}_t{t}.lro")
        snap_path.write_bytes(latent_to_bytes(latent))

    trace_path = out_path.with_name(out_path.stem + "_trace.csv")
    with open(trace_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "k", "loss"])
        for t, k, loss in result.loss_trace:
            writer.writerow([t, k, repr(loss)])

    manifest_path = out_path.with_name(out_path.stem + "_manifest.json")
    manifest = {
        "image": str(image_path),
        "spec": str(spec_path),
        "out": str(out_path),
        "denoiser": args.denoiser,
        "extractor": args.extractor,
        "codec": args.codec,
        "seed": args.seed,
        "iterations": len(result.loss_trace),
        "final_loss": result.loss_trace[-1][2] if result.loss_trace else None,
        "latency_ms": result.latency_ms,
        "cancelled": result.cancelled,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    print(f"wrote {out_path}")
    return EXIT_OK


def cmd_bench(args) -> int:
    try:
        suite = read_suite(args.suite)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        report = run_bench(suite, args.method, workers=min(4, os.cpu_count() or 1))
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    print(report_table([MetricsReport(report.method, report.if_ed, report.if_th,
                                      report.if_hh, report.latency_ms)]))
    failures = [r for r in report.rows if r.error is not None]
    for row in failures:
        print(f"fixture {row.name} failed: {row.error}", file=sys.stderr)
    print(f"wrote {out_dir / 'report.csv'}")
    if args.method == "pbsi" and any(not r.ok for r in report.rows):
        bad = [r.name for r in report.rows if not r.ok]
        print(f"error: fixtures below success thresholds: {', '.join(bad)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_metrics(args) -> int:
    orig_dir, edited_dir, specs_dir = Path(args.orig), Path(args.edited), Path(args.specs)
    for p in (orig_dir, edited_dir, specs_dir):
        if not p.is_dir():
            print(f"error: {p} is not a directory", file=sys.stderr)
            return EXIT_VALIDATION
    stems = sorted(p.stem for p in orig_dir.glob("*.png"))
    if not stems:
        print(f"error: no PNGs under {orig_dir}", file=sys.stderr)
        return EXIT_VALIDATION
    edited_stems = sorted(p.stem for p in edited_dir.glob("*.png"))
    spec_stems = sorted(p.stem for p in specs_dir.glob("*.json"))
    if stems != edited_stems or stems != spec_stems:
        print("error: originals, editeds, and specs must cover the same names",
              file=sys.stderr)
        return EXIT_VALIDATION

    originals, editeds, specs = [], [], []
    for stem in stems:
        orig = np.asarray(Image.open(orig_dir / f"{stem}.png").convert("RGB"))
        originals.append(orig)
        editeds.append(np.asarray(Image.open(edited_dir / f"{stem}.png").convert("RGB")))
        try:
            specs.append(parse_spec((specs_dir / f"{stem}.json").read_text(encoding="utf-8"),
                                    base_dir=specs_dir, image_override=orig))
        except (SpecParseError, SpecValidationError) as exc:
            print(f"error: {stem}.json: {exc}", file=sys.stderr)
            return EXIT_VALIDATION

    d = DISTANCES[args.distance]()
    report = MetricsReport(
        method=args.distance,
        if_ed=if_ed(originals, editeds, [s.uneditable_mask for s in specs], d),
        if_th=if_th(originals, editeds, specs, d),
        if_hh=if_hh(originals, editeds, specs, d),
        latency_ms=0.0,
    )
    print(report_table([report]))
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(workers=args.workers, queue_size=args.queue,
                     output_dir=args.output_dir)
    try:
        uvicorn.run(app, host="127.0.0.1", port=args.port, log_level="warning")
    except SystemExit as exc:  # uvicorn raises on bind failure
        if exc.code not in (0, None):
            print(f"error: server failed to start on port {args.port}", file=sys.stderr)
            return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: cannot bind port {args.port}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    handlers = {
        "run": cmd_run,
        "bench": cmd_bench,
        "metrics": cmd_metrics,
        "serve": cmd_serve,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    raise SystemExit(main())
