"""Command-line entry point.

Exit codes: 0 success, 2 configuration or input-schema error, 3 I/O error,
4 analysis error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .coincidence import (
    InconsistentInputsError,
    InterferenceParams,
    RateEstimates,
    expected_histogram,
    p_cross_emitter,
    p_distinguishable,
    visibility,
)
from .config import RunConfig, config_hash, load_config, provenance, window_sweep
from .inference import InsufficientSamplesError, Measurement, ParameterStats, map_and_ci, posterior
from .pipeline import DegenerateFitError, EstimationError, StreamIntegrityError, analyze_pieces
from .reference import HEADLINE_VISIBILITY, TOTAL_REPETITIONS, WINDOW_SWEEP
from .sequence import ConfigError, TagStream, iter_run
from .spectral import (
    EmissionLine,
    FilterSpec,
    overlap_closed_form,
    photon_transmission_probability,
    transmission,
    transmission_drift,
)
from .tagio import (
    TagFileError,
    canonical_json,
    iter_stream,
    read_sidecar,
    sidecar_path,
    stream_to_array,
    write_csv_stream,
    write_records,
)
from .temporal import DetectionWindow, EmptyShapeError, compose_shape

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_ANALYSIS = 0, 2, 3, 4


class SchemaError(ValueError):
    pass


def load_schema(name: str) -> dict:
    return json.loads(resources.files("tpqi").joinpath("schemas", name).read_text())


def validate(doc, schema_name: str):
    try:
        jsonschema.validate(doc, load_schema(schema_name))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaError(f"{schema_name}: at {where}: {exc.message}") from exc


def read_csv_rows(path) -> list[dict]:
    """CSV rows as dicts of numbers (empty cells become None), skipping '#' lines."""
    def num(x):
        if x == "":
            return None
        v = float(x)
        return int(v) if v.is_integer() and "." not in x and "e" not in x.lower() else v

    with open(path, newline="") as fh:
        reader = csv.DictReader(line for line in fh if not line.startswith("#"))
        return [{k: num(v) for k, v in row.items()} for row in reader]


def validate_csv(path, schema_name: str) -> int:
    rows = read_csv_rows(path)
    for i, row in enumerate(rows):
        try:
            validate(row, schema_name)
        except SchemaError as exc:
            raise SchemaError(f"{path} row {i}: {exc}") from exc
    return len(rows)


def _write_json(path, doc):
    Path(path).write_text(canonical_json(doc))


def _csv_header(fh, prov: dict):
    for k in sorted(prov):
        fh.write(f"# {k}={prov[k]}\n")


def _parse_window(text: str) -> list[float]:
    try:
        a, b = (float(x) for x in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"--window-ns expects 'start,end' in ns, got {text!r}") from exc
    return [a, b]


# --------------------------------------------------------------------- simulate

def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.blocks is not None:
        cfg.blocks = args.blocks
    if args.eta is not None:
        cfg.eta = args.eta
    cfg.validate()
    h = cfg.hash()
    out = Path(args.out)
    sidecar = {"config": cfg.to_dict(), "tick_ps": cfg.sequence.tag_resolution_ps, "blocks": cfg.blocks,
               "eta": cfg.eta, **provenance(h, cfg.seed)}
    chunks = iter_run(cfg.sequence, cfg.model, cfg.eta, cfg.seed, cfg.blocks, workers=args.threads)
    bursts = []
    n_tags = 0
    try:
        if out.suffix.lower() == ".csv":
            stream = TagStream.concat(list(chunks))
            write_csv_stream(out, stream)
            bursts = stream.meta.get("bursts", [])
            n_tags = len(stream)
            digest = hashlib.sha256(out.read_bytes()).hexdigest()
        else:
            sha = hashlib.sha256()
            with open(out, "wb") as fh:
                for chunk in chunks:
                    data = stream_to_array(chunk).tobytes()
                    sha.update(data)
                    fh.write(data)
                    n_tags += len(chunk)
                    bursts.extend(chunk.meta.get("bursts", []))
            digest = sha.hexdigest()
        sidecar.update({"n_tags": n_tags, "tags_sha256": digest, "bursts": bursts})
        validate(sidecar, "sidecar.schema.json")
        _write_json(sidecar_path(out), sidecar)
    except OSError as exc:
        raise TagFileError(str(exc)) from exc
    print(f"wrote {n_tags} tags for {cfg.blocks} blocks to {out} (config {h[:12]}, seed {cfg.seed})")
    return EXIT_OK


# ---------------------------------------------------------------------- analyze

def _histogram_csv(path, wrep: dict, prov: dict):
    rates = wrep.get("rates")
    expected = None
    if rates is not None and wrep["n_blocks"] > 0:
        r = RateEstimates(**rates["mean"])
        expected = expected_histogram(r, InterferenceParams(0.0), wrep["n_blocks"]).counts
    with open(path, "w", newline="") as fh:
        _csv_header(fh, prov)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["d", "counts", "per_block", "per_attempt", "expected_eta0"])
        hist = wrep["histogram"]
        for i, d in enumerate(hist["d"]):
            w.writerow([d, hist["counts"][i], repr(hist["per_block"][i]), repr(hist["per_attempt"][i]),
                        "" if expected is None else repr(float(expected[i]))])


def _shape_csv(path, wrep: dict, prov: dict) -> bool:
    rates = wrep.get("rates")
    if rates is None:
        return False
    win = wrep["window"]
    try:
        shape = compose_shape(DetectionWindow(win["t_start_ns"], win["t_end_ns"], win["tau_ns"]),
                              RateEstimates(**rates["mean"]))
    except EmptyShapeError:
        return False
    shape.meta.update(prov)
    with open(path, "w", newline="") as fh:
        shape.to_csv(fh)
    return True


def cmd_analyze(args) -> int:
    path = Path(args.input)
    if not path.exists():
        raise TagFileError(f"no such stream: {path}")
    side = read_sidecar(path)
    if args.config:
        cfg = load_config(args.config)
    elif "config" in side:
        cfg = RunConfig.from_dict(side["config"])
    else:
        cfg = RunConfig()
    if args.sweep:
        cfg.windows_ns = window_sweep()
    elif args.window_ns:
        cfg.windows_ns = [_parse_window(w) for w in args.window_ns]
    if args.rate_source:
        cfg.rate_source = args.rate_source
    cfg.validate()
    h = cfg.hash()
    pieces = iter_stream(path, chunk_tags=args.chunk_tags)
    report, records = analyze_pieces(pieces, cfg.sequence, cfg.windows(), workers=args.threads,
                                     sidecar=side, rate_source=cfg.rate_source)
    doc = {
        **provenance(h, side.get("seed")),
        "stream": {"name": path.name, "tags_sha256": side.get("tags_sha256"),
                   "source_config_hash": side.get("config_hash")},
        **report,
    }
    validate(doc, "report.schema.json")
    out = Path(args.report)
    _write_json(out, doc)
    prov = provenance(h, side.get("seed"))
    stem = out.with_suffix("")
    for i, wrep in enumerate(doc["windows"]):
        _histogram_csv(f"{stem}.w{i}.histogram.csv", wrep, prov)
        _shape_csv(f"{stem}.w{i}.shape.csv", wrep, prov)
    if args.records:
        write_records(args.records, records[0])
    for wrep in doc["windows"]:
        w = wrep["window"]
        v = wrep["visibility"]
        vtxt = "n/a" if v is None else f"{v:.4f}"
        print(f"window {w['t_start_ns']:g}-{w['t_end_ns']:g} ns: C_M={wrep['c_m']} "
              f"C_E={wrep['c_e']} C_dist={wrep['c_dist']} V={vtxt}"
              + (f" ({wrep['error']})" if wrep["error"] else ""))
    return EXIT_OK


# ------------------------------------------------------------------------ infer

def cmd_infer(args) -> int:
    try:
        doc = json.loads(Path(args.report).read_text())
    except OSError as exc:
        raise TagFileError(f"cannot read report: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"report is not valid JSON: {exc}") from exc
    validate(doc, "report.schema.json")
    settings = {"grid": args.grid, "draws": args.draws, "realizations": args.realizations,
                "t_M": args.t_m, "t_E": args.t_e, "seed": args.seed}
    h = config_hash({"report_config_hash": doc["config_hash"], "settings": settings})
    prov = provenance(h, args.seed)
    indices = range(len(doc["windows"])) if args.window_index is None else [args.window_index]
    out = Path(args.out)
    results = []
    for i in indices:
        if not 0 <= i < len(doc["windows"]):
            raise ConfigError(f"window index {i} out of range")
        w = doc["windows"][i]
        if w["c_e"] is None or w["rates"] is None or w["c_e"] <= 0:
            results.append({"window": w["window"], "skipped": w["error"] or "no extrapolated count"})
            continue
        stats = ParameterStats(RateEstimates(**w["rates"]["mean"]), RateEstimates(**w["rates"]["stderr"]),
                               int(w["n_attempt"]))
        m = Measurement(int(w["c_m"]), float(w["c_e"]), float(w["c_e_err"] or 0.0))
        pdf = posterior(args.grid, stats, m, args.draws, args.realizations, args.t_m, args.t_e,
                        seed=args.seed, workers=args.threads)
        ci = map_and_ci(pdf)
        csv_path = out if len(indices) == 1 else out.with_name(f"{out.stem}.w{i}{out.suffix}")
        with open(csv_path, "w", newline="") as fh:
            _csv_header(fh, prov)
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["eta", "density"])
            for e, d in zip(pdf.eta, pdf.density):
                wr.writerow([f"{e:.6f}", repr(float(d))])
        results.append({"window": w["window"], "map": ci.map, "lo": ci.lo, "hi": ci.hi,
                        "multimodal": ci.multimodal, "truncated": ci.truncated,
                        "matches_total": int(pdf.matches.sum()), "posterior_csv": csv_path.name,
                        "t_E": pdf.settings["t_E"]})
        print(f"window {w['window']['t_start_ns']:g}-{w['window']['t_end_ns']:g} ns: "
              f"eta MAP {ci.map:.3f}, 68% interval [{ci.lo:.3f}, {ci.hi:.3f}]")
    if not any("map" in r for r in results):
        raise EstimationError("no window in the report has the counts and rates needed for inference")
    summary = {**prov, "source_config_hash": doc["config_hash"], "settings": settings, "windows": results}
    validate(summary, "posterior_summary.schema.json")
    _write_json(args.summary or out.with_suffix(".json"), summary)
    return EXIT_OK


# ----------------------------------------------------------------- filter-model

def cmd_filter_model(args) -> int:
    cfg = load_config(args.config)
    spec = cfg.filters[0]
    line = cfg.emission
    spec = FilterSpec(
        args.f0 if args.f0 is not None else spec.f0,
        args.fwhm / 2 if args.fwhm is not None else spec.gamma,
        args.peak if args.peak is not None else spec.I,
        args.background if args.background is not None else spec.B,
    )
    line = EmissionLine(args.f_nv if args.f_nv is not None else line.f_nv,
                        args.nv_fwhm / 2 if args.nv_fwhm is not None else line.gamma_nv)
    h = config_hash({"filter": spec.to_dict(), "emission": {"f_nv_mhz": line.f_nv, "gamma_nv_mhz": line.gamma_nv},
                     "drift": args.drift, "steps": args.drift_steps, "span": args.span})
    prov = provenance(h, None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    f = np.linspace(spec.f0 - args.span * spec.fwhm, spec.f0 + args.span * spec.fwhm, 2 * args.points + 1)
    with open(out / "transmission.csv", "w", newline="") as fh:
        _csv_header(fh, prov)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["f_mhz", "transmission"])
        for x, y in zip(f, transmission(f, spec)):
            w.writerow([f"{x:.6f}", repr(float(y))])
    summary = {**prov, "filter": spec.to_dict(), "emission": {"f_nv_mhz": line.f_nv, "gamma_nv_mhz": line.gamma_nv},
               "peak_f_mhz": float(f[np.argmax(transmission(f, spec))])}
    if args.overlap:
        numeric = photon_transmission_probability(spec, line)
        closed = overlap_closed_form(spec, line)
        summary["overlap"] = {"numeric": numeric, "closed_form": closed, "abs_diff": abs(numeric - closed)}
        print(f"photon transmission: numeric {numeric:.9f}, closed form {closed:.9f}, "
              f"difference {abs(numeric - closed):.2e}")
    if args.drift is not None:
        shifts = np.linspace(-args.drift, args.drift, args.drift_steps)
        changes = [transmission_drift(spec, line, float(s), max_shift=max(args.drift, 5.0)) for s in shifts]
        with open(out / "drift.csv", "w", newline="") as fh:
            _csv_header(fh, prov)
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["delta_f_mhz", "relative_change"])
            for s, c in zip(shifts, changes):
                w.writerow([f"{s:.6f}", repr(float(c))])
        worst = float(np.max(np.abs(changes)))
        summary["drift"] = {"max_shift_mhz": args.drift, "max_abs_relative_change": worst}
        print(f"max |relative transmission change| over +/-{args.drift:g} MHz: {worst:.4%}")
    validate(summary, "filter_summary.schema.json")
    _write_json(out / "filter_model.json", summary)
    return EXIT_OK


# ----------------------------------------------------------------------- report

def reference_table(split: float) -> list[dict]:
    rows = []
    for row in WINDOW_SWEEP:
        r = row.rates(split)
        v = visibility(row.C_M, row.C_dist)
        n_eff = row.effective_attempts(split)
        rows.append({
            "window_ns": row.window_ns, "c_m": row.C_M, "c_dist": row.C_dist, "visibility": v.V,
            "effective_attempts": n_eff, "attempts_consistent": bool(n_eff <= TOTAL_REPETITIONS),
            "c_dist_at_total_repetitions": p_distinguishable(r) * TOTAL_REPETITIONS,
            "eta_point_estimate": v.V * p_distinguishable(r) / p_cross_emitter(r),
        })
    return rows


def cmd_report(args) -> int:
    splits = {"per_detector": 1.0, "symmetric_split": 0.5}
    h = config_hash({"report": "reference_sweep", "splits": splits})
    doc = {**provenance(h, None), "total_repetitions": TOTAL_REPETITIONS,
           "headline_visibility": list(HEADLINE_VISIBILITY),
           "interpretations": {k: reference_table(s) for k, s in splits.items()}}
    print(f"{'window':>6} {'C_M':>5} {'C_dist':>7} {'V':>7}  {'N_eff/N (per-det)':>17} {'N_eff/N (split)':>15}")
    for a, b in zip(doc["interpretations"]["per_detector"], doc["interpretations"]["symmetric_split"]):
        print(f"{a['window_ns']:>6g} {a['c_m']:>5} {a['c_dist']:>7.1f} {a['visibility']:>7.4f}  "
              f"{a['effective_attempts'] / TOTAL_REPETITIONS:>17.3f} {b['effective_attempts'] / TOTAL_REPETITIONS:>15.3f}")
    validate(doc, "reference_report.schema.json")
    if args.out:
        _write_json(args.out, doc)
    return EXIT_OK


# ------------------------------------------------------------------------ main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tpqi", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def threads(sp):
        sp.add_argument("--threads", type=int, default=1, help="maximum worker processes")

    s = sub.add_parser("simulate", help="generate a synthetic tag stream")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--blocks", type=int)
    s.add_argument("--eta", type=float)
    s.add_argument("--out", required=True)
    threads(s)
    s.set_defaults(func=cmd_simulate)

    a = sub.add_parser("analyze", help="run the analysis pipeline on a tag stream")
    a.add_argument("--in", dest="input", required=True)
    a.add_argument("--config")
    a.add_argument("--window-ns", action="append", help="start,end in ns; repeat for several windows")
    a.add_argument("--sweep", action="store_true", help="analyse window lengths 6..30 ns")
    a.add_argument("--report", required=True)
    a.add_argument("--records", help="write coincidence records of the first window here")
    a.add_argument("--rate-source", choices=("auto", "estimate", "truth"))
    a.add_argument("--chunk-tags", type=int, default=1 << 20)
    threads(a)
    a.set_defaults(func=cmd_analyze)

    i = sub.add_parser("infer", help="posterior over the indistinguishability")
    i.add_argument("--report", required=True)
    i.add_argument("--grid", type=int, default=201)
    i.add_argument("--draws", type=int, default=1000)
    i.add_argument("--realizations", type=int, default=1000)
    i.add_argument("--t-m", type=float, default=0.0)
    i.add_argument("--t-e", type=float)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--window-index", type=int)
    i.add_argument("--out", required=True)
    i.add_argument("--summary")
    threads(i)
    i.set_defaults(func=cmd_infer)

    f = sub.add_parser("filter-model", help="filter transmission, overlap and drift")
    f.add_argument("--config")
    f.add_argument("--f0", type=float)
    f.add_argument("--fwhm", type=float, help="filter FWHM in MHz")
    f.add_argument("--peak", type=float)
    f.add_argument("--background", type=float)
    f.add_argument("--f-nv", type=float)
    f.add_argument("--nv-fwhm", type=float, help="emission FWHM in MHz")
    f.add_argument("--overlap", action="store_true")
    f.add_argument("--drift", type=float, help="sweep the filter centre by +/- this many MHz")
    f.add_argument("--drift-steps", type=int, default=21)
    f.add_argument("--span", type=float, default=4.0, help="plot range in filter FWHMs")
    f.add_argument("--points", type=int, default=200)
    f.add_argument("--out", required=True)
    threads(f)
    f.set_defaults(func=cmd_filter_model)

    r = sub.add_parser("report", help="visibility and consistency table of the reference sweep")
    r.add_argument("--out")
    threads(r)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, SchemaError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TagFileError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (StreamIntegrityError, EstimationError, DegenerateFitError, InsufficientSamplesError,
            InconsistentInputsError, ValueError) as exc:
        print(f"analysis error: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS


if __name__ == "__main__":
    sys.exit(main())
