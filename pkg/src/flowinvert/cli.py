"""flowinvert command line: generate -> sample -> aggregate -> invert -> score.

Stages hand off through files named ``<out-prefix>.<kind>.<ext>``:

    generate   packets.csv, hist.tsv, truth.json
    sample     sampled.csv
    aggregate  hist.tsv
    invert     report.json, ccdf.tsv, overlay.tsv
    score      score.json

The exit status is 0 on success and 1 whenever an error is reported
(including an inversion that stopped early and wrote a partial report).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from .aggregate import (
    FIVE_TUPLE,
    FlowHistogram,
    aggregate_sharded,
    histogram_ccdf,
    read_histogram,
    read_packet_csv,
    write_histogram,
)
from .inversion import InversionConfig, invert
from .model import FlowSizeModel, draw_flow_sizes, load_model
from .synth import INTERLEAVE_MODES, SamplingConfig, interleave

log = logging.getLogger("flowinvert")

TRUTH_SCHEMA = 1
_WRITE_CHUNK = 1 << 20


class CliError(Exception):
    """A user-facing failure: reported on stderr, exit status 1."""


def _prefix_path(prefix: str, kind: str) -> Path:
    return Path(f"{prefix}.{kind}")


def _check_writable(path: Path) -> None:
    parent = path.parent if str(path.parent) else Path(".")
    if not parent.is_dir():
        raise CliError(f"output directory {parent} does not exist")
    if not os.access(parent, os.W_OK):
        raise CliError(f"output directory {parent} is not writable")


def _check_readable(path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise CliError(f"input file {path} does not exist")
    return path


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- generate -----------------------------------------------------------------


def cmd_generate(args) -> int:
    if args.flows < 1:
        raise CliError("--flows must be >= 1")
    model_path = _check_readable(args.model)
    outs = {kind: _prefix_path(args.out_prefix, kind) for kind in ("packets.csv", "hist.tsv", "truth.json")}
    for path in outs.values():
        _check_writable(path)
    try:
        model = load_model(model_path)
    except (ValueError, json.JSONDecodeError) as exc:
        raise CliError(f"invalid model {model_path}: {exc}") from exc

    sizes = draw_flow_sizes(model, args.flows, args.seed)
    stream = interleave(sizes, args.interleave, args.seed)
    with open(outs["packets.csv"], "w") as fh:
        fh.write("flow_id\n")
        flows = stream.flows
        for start in range(0, len(flows), _WRITE_CHUNK):
            chunk = flows[start : start + _WRITE_CHUNK].tolist()
            fh.write("".join(f"f{i}\n" for i in chunk))
    write_histogram(FlowHistogram.from_sizes(sizes), outs["hist.tsv"])
    big = int(np.count_nonzero(sizes >= model.b0))
    truth = {
        "schema": TRUTH_SCHEMA,
        "run_id": args.run_id or f"seed{args.seed}-K{args.flows}",
        "seed": args.seed,
        "K": int(args.flows),
        "K0_plus": big,
        "K0_minus": int(args.flows) - big,
        "total_packets": int(stream.total_packets),
        "interleave": args.interleave,
        "model": model.to_dict(),
    }
    _dump_json(truth, outs["truth.json"])
    log.info("generated %d flows, %d packets", args.flows, stream.total_packets)
    return 0


# -- sample -------------------------------------------------------------------


def cmd_sample(args) -> int:
    cfg = SamplingConfig(args.k, args.phase, args.seed)
    src = _check_readable(args.inp)
    out = _prefix_path(args.out_prefix, "sampled.csv")
    _check_writable(out)
    kept = 0
    position = 0
    bad = 0
    with open(src, newline="") as fin, open(out, "w") as fout:
        columns = None
        for lineno, line in enumerate(fin, 1):
            text = line.rstrip("\r\n")
            fields = [f.strip() for f in text.split(",")]
            if lineno == 1:
                lowered = tuple(f.lower() for f in fields)
                if lowered in (("flow_id",), FIVE_TUPLE):
                    columns = len(lowered)
                    fout.write(text + "\n")
                    continue
                columns = 5 if len(fields) == 5 else 1
            if len(fields) != columns or not all(fields):
                log.warning("%s:%d: malformed packet record %r", src, lineno, text)
                bad += 1
                continue
            if position % cfg.k == cfg.phase:
                fout.write(text + "\n")
                kept += 1
            position += 1
    log.info("kept %d of %d packets", kept, position)
    if bad:
        log.warning("skipped %d malformed lines", bad)
    return 0


# -- aggregate ----------------------------------------------------------------


def cmd_aggregate(args) -> int:
    src = _check_readable(args.inp)
    out = _prefix_path(args.out_prefix, "hist.tsv")
    _check_writable(out)
    if args.shards < 1:
        raise CliError("--shards must be >= 1")
    hist = aggregate_sharded(read_packet_csv(src), args.shards)
    write_histogram(hist, out)
    log.info("%d flows, %d packets, %d malformed records", hist.total_flows, hist.total_packets, hist.malformed)
    return 0


# -- invert -------------------------------------------------------------------


def _ccdf_grid(max_j: int) -> np.ndarray:
    """Every size up to 1000, then about 100 points per decade."""
    dense = np.arange(1, min(max_j, 1000) + 1)
    if max_j <= 1000:
        return dense
    sparse = np.unique(np.round(np.logspace(3, math.log10(max_j), 100 * int(math.ceil(math.log10(max_j) - 3)) + 1)))
    return np.unique(np.concatenate([dense, sparse.astype(np.int64)]))


def cmd_invert(args) -> int:
    src = _check_readable(args.inp)
    outs = {kind: _prefix_path(args.out_prefix, kind) for kind in ("report.json", "ccdf.tsv", "overlay.tsv")}
    for path in outs.values():
        _check_writable(path)
    try:
        hist = read_histogram(src)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    if hist.total_flows < 1:
        raise CliError(f"{src} holds no flows")
    config = InversionConfig(
        k=args.k,
        b0=args.b0,
        m=args.m,
        j_min=args.jmin,
        tail_correction=args.tail_correction,
        refine=args.refine,
    )
    rep = invert(hist, config)
    rep.run_id = args.run_id
    _dump_json(rep.to_dict(), outs["report.json"])
    if rep.status != "ok":
        # no recovered law: drop plot files left over from an earlier run
        outs["ccdf.tsv"].unlink(missing_ok=True)
        outs["overlay.tsv"].unlink(missing_ok=True)
        print(f"error: inversion failed at stage {rep.failed_stage}: {rep.error}", file=sys.stderr)
        return 1

    p = config.p
    model = rep.recovered
    js = _ccdf_grid(max(10 * model.b0, int(math.ceil(hist.max_size / p))))
    ccdf = np.atleast_1d(model.ccdf(js))
    outs["ccdf.tsv"].write_text("".join(f"{j}\t{c:.10g}\n" for j, c in zip(js.tolist(), ccdf.tolist())))
    sampled = histogram_ccdf(hist)
    outs["overlay.tsv"].write_text(
        "".join(f"{j / p:.10g}\t{rep.nu_hat * c:.10g}\n" for j, c in sampled.items())
    )
    return 0


# -- score --------------------------------------------------------------------


def _rel(est, true):
    if est is None or true is None:
        return None
    if true == 0:
        return 0.0 if est == 0 else math.inf
    return (est - true) / true


def score(truth: dict, report: dict) -> dict:
    """Relative errors (estimate - truth) / truth for every recovered quantity."""
    if report.get("status") != "ok":
        raise CliError(f"report has status {report.get('status')!r}; nothing to score")
    t_run, r_run = truth.get("run_id"), report.get("run_id")
    if t_run is not None and r_run is not None and t_run != r_run:
        raise CliError(f"run id mismatch: truth {t_run!r} vs report {r_run!r}")
    model = FlowSizeModel.from_dict(truth["model"])
    K, Ks = truth["K"], report["Ks"]
    true_shapes = [s.shape for s in model.segments]
    est_shapes = report["shapes"]
    if len(est_shapes) == len(true_shapes):
        shape_err = [_rel(a, b) for a, b in zip(est_shapes, true_shapes)]
    else:
        # differing segment counts: compare the outermost shapes only
        shape_err = [_rel(est_shapes[0], true_shapes[0]), _rel(est_shapes[-1], true_shapes[-1])]
    errors = {
        "K_hat": _rel(report["K_hat"], K),
        "K0_plus": _rel(report["K0_plus"], truth["K0_plus"]),
        "K0_minus": _rel(report["K0_minus"], truth["K0_minus"]),
        "nu_hat": _rel(report["nu_hat"], Ks / K),
        "eta": _rel(report["eta"], truth["K0_plus"] / Ks),
        "r_hat": _rel(report["r_hat"], model.r),
        "shapes": shape_err,
    }
    out = {"schema": 1, "run_id": t_run, "relative_errors": errors}
    if report.get("recovered_model"):
        rec = FlowSizeModel.from_dict(report["recovered_model"])
        js = np.arange(1, 10**4 + 1)
        out["ccdf_max_relative_error"] = float(np.max(np.abs(rec.ccdf(js) / model.ccdf(js) - 1.0)))
    return out


def cmd_score(args) -> int:
    truth_path = _check_readable(args.truth)
    report_path = _check_readable(args.inp)
    out = _prefix_path(args.out_prefix, "score.json")
    _check_writable(out)
    try:
        truth = json.loads(truth_path.read_text())
        report = json.loads(report_path.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"unreadable JSON: {exc}") from exc
    try:
        result = score(truth, report)
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"cannot score: {exc!r}") from exc
    _dump_json(result, out)
    return 0


# -- argument parsing ---------------------------------------------------------


def _positive_int(text: str) -> int:
    val = int(text)
    if val < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return val


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowinvert", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="draw flows from a model and write a packet trace")
    g.add_argument("--model", required=True, help="flow-size model JSON")
    g.add_argument("--flows", type=_positive_int, required=True, help="number of flows K")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--interleave", choices=INTERLEAVE_MODES, default="shuffle")
    g.add_argument("--run-id", default=None, help="identifier copied into the truth file")
    g.add_argument("--out-prefix", required=True)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("sample", help="1-out-of-k deterministic sampling of a packet CSV")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--k", type=_positive_int, required=True)
    s.add_argument("--phase", type=int, default=0)
    s.add_argument("--seed", type=int, default=0, help="recorded only; deterministic sampling uses no randomness")
    s.add_argument("--out-prefix", required=True)
    s.set_defaults(func=cmd_sample)

    a = sub.add_parser("aggregate", help="packet CSV to flow-size histogram")
    a.add_argument("--in", dest="inp", required=True)
    a.add_argument("--shards", type=int, default=1)
    a.add_argument("--out-prefix", required=True)
    a.set_defaults(func=cmd_aggregate)

    i = sub.add_parser("invert", help="recover the original flow-size law from a sampled histogram")
    i.add_argument("--in", dest="inp", required=True, help="sampled histogram TSV")
    i.add_argument("--k", type=_positive_int, required=True)
    i.add_argument("--b0", type=_positive_int, default=20)
    i.add_argument("--m", type=_positive_int, default=None, help="number of Pareto segments (default: chosen, up to 3)")
    i.add_argument("--jmin", type=_positive_int, default=3)
    i.add_argument("--tail-correction", choices=("off", "fitted"), default="off")
    i.add_argument("--refine", choices=("none", "forward"), default="none",
                   help="'forward' replaces the stepwise estimates by a joint likelihood fit")
    i.add_argument("--run-id", default=None)
    i.add_argument("--out-prefix", required=True)
    i.set_defaults(func=cmd_invert)

    c = sub.add_parser("score", help="relative errors of a report against the generator truth")
    c.add_argument("--truth", required=True)
    c.add_argument("--in", dest="inp", required=True, help="report JSON")
    c.add_argument("--out-prefix", required=True)
    c.set_defaults(func=cmd_score)
    return parser


def main(argv=None) -> int:
    name = os.environ.get("FLOWINVERT_LOG", "WARNING").upper()
    level = logging.getLevelName(name)
    if not isinstance(level, int):
        print(f"warning: unknown FLOWINVERT_LOG level {name!r}; using WARNING", file=sys.stderr)
        level = logging.WARNING
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("flowinvert").setLevel(level)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
