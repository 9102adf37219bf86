"""Command-line entry point: ``simulate``, ``train``, ``evaluate`` and ``report``.

Typical run::

    progrisk simulate --config run.cfg
    progrisk train --config run.cfg --approach Baseline
    progrisk train --config run.cfg --approach RiskFORM2
    progrisk evaluate --config run.cfg --approach RiskFORM2
    progrisk report report.json

Exit codes are 0 on success, 1 for usage or configuration errors, 2 for
data errors (unreadable or malformed inputs) and 3 when an internal
invariant fails (leakage, monotonicity, bundle size).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import config as cfgmod
from .cohortgen import CohortFormatError, HORIZONS, generate_knees, group_counts, cohort_to_csv, read_cohort_csv
from .config import ConfigError, RunConfig
from .cvharness import (AnalyticalCohort, Approach, BundleMember, SplitPlan, TrainedBundle, ensemble_predict,
                        klg_report, leakage_free, run_nested_cv, subgroup_report)
from .gradnet import dumps_checkpoint, loads_checkpoint
from .metrics import PredictionRecord, metric_report, records_to_arrays

log = logging.getLogger("progrisk")

MANIFEST_SCHEMA_VERSION = 1
REPORT_SCHEMA_VERSION = 1
ABSENT = "—"

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3


class DataError(Exception):
    """Input files are missing, malformed or inconsistent with each other."""


class InvariantError(Exception):
    """A guarantee of the pipeline failed to hold."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- helpers ------------------------------------------------------------------

def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def _clean(obj):
    """Make ``obj`` JSON-safe: NaN and infinities become null, tuples lists."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps_json(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _writable(path: Path) -> Path:
    parent = path.parent if str(path.parent) else Path(".")
    if not parent.is_dir():
        raise ConfigError(f"output directory does not exist: {parent}")
    return path


def _read_cohort(path):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"cohort CSV not found: {path}")
    try:
        return read_cohort_csv(path)
    except CohortFormatError as exc:
        raise DataError(f"{path}: {exc}") from None


def bundle_dir_for(root, approach: str, horizon: int) -> Path:
    return Path(root) / f"{approach}-h{horizon}"


# -- bundles ------------------------------------------------------------------

def write_bundle(bundle: TrainedBundle, out_dir, cfg: RunConfig, cohort_sha: str) -> Path:
    """Write one checkpoint per member plus ``manifest.json``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    members = []
    for m in bundle.members:
        name = f"member_o{m.outer}_i{m.inner}.json"
        text = dumps_checkpoint(m.models, {"outer": m.outer, "inner": m.inner})
        (out_dir / name).write_text(text, encoding="utf-8")
        members.append({"outer": m.outer, "inner": m.inner, "checkpoint": name,
                        "sha256": sha256_bytes(text.encode("utf-8")), "best_epoch": m.best_epoch,
                        "selection": m.selection, "log": m.log})
    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "kind": "progrisk.bundle",
        "approach": bundle.approach.value,
        "horizon": bundle.horizon,
        "config": cfgmod.embedded(cfg),
        "config_hash": cfgmod.config_hash(cfg),
        "cohort_sha256": cohort_sha,
        "split_plan": bundle.split_plan.to_dict(),
        "members": members,
    }
    path = out_dir / "manifest.json"
    path.write_text(dumps_json(manifest), encoding="utf-8")
    return path


def load_bundle(manifest_path) -> TrainedBundle:
    """Read a manifest and its checkpoints, verifying hashes and bundle size."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DataError(f"bundle manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path}: not valid JSON ({exc})") from None
    if manifest.get("kind") != "progrisk.bundle" or manifest.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise DataError(f"{manifest_path}: not a bundle manifest of schema version {MANIFEST_SCHEMA_VERSION}")
    expected = manifest["config"]["cv.outer"] * manifest["config"]["cv.inner"]
    if len(manifest["members"]) != expected:
        raise InvariantError(f"{manifest_path}: bundle has {len(manifest['members'])} members, expected {expected}")
    members = []
    for entry in manifest["members"]:
        ckpt = manifest_path.parent / entry["checkpoint"]
        if not ckpt.is_file():
            raise DataError(f"missing checkpoint {ckpt}")
        data = ckpt.read_bytes()
        if sha256_bytes(data) != entry["sha256"]:
            raise DataError(f"checkpoint {ckpt} does not match its manifest hash")
        try:
            models = loads_checkpoint(data.decode("utf-8"))
        except (ValueError, KeyError) as exc:
            raise DataError(f"checkpoint {ckpt}: {exc}") from None
        members.append(BundleMember(entry["outer"], entry["inner"], models, entry.get("log", []),
                                    entry.get("best_epoch", -1), entry.get("selection", "val_auroc")))
    bundle = TrainedBundle(Approach(manifest["approach"]), int(manifest["horizon"]), members,
                           SplitPlan.from_dict(manifest["split_plan"]), manifest["config"])
    bundle.manifest_sha256 = sha256_file(manifest_path)
    return bundle


# -- evaluation ---------------------------------------------------------------

def check_monotone(records: Sequence[PredictionRecord]) -> List[str]:
    """Knee ids whose scan-2 risk falls below the scan-1 risk."""
    first = {r.knee_id: r.risk for r in records if r.scan_index == 1}
    return [r.knee_id for r in records if r.scan_index == 2 and r.risk < first[r.knee_id]]


def klg_details(records: Sequence[PredictionRecord]) -> Dict[int, dict]:
    values = klg_report(records)
    out = {}
    for grade in range(5):
        labels = [r.label for r in records if r.klg == grade]
        n_pos = int(sum(labels))
        reason = None
        if values[grade] is None:
            reason = "empty" if not labels else "single_class"
        out[grade] = {"auroc": values[grade], "n_pos": n_pos, "n_neg": len(labels) - n_pos, "reason": reason}
    return out


def _predict(bundle: TrainedBundle, knees, scope: str) -> List[PredictionRecord]:
    try:
        records = ensemble_predict(bundle, knees, scope)
    except KeyError as exc:
        raise DataError(f"internal scope needs every subject in the split plan: {exc.args[0]}") from None
    if scope == "internal" and not leakage_free(records, bundle):
        raise InvariantError("an internal prediction came from a model trained on its subject")
    if bundle.approach in (Approach.RISKFORM1, Approach.RISKFORM2):
        bad = check_monotone(records)
        if bad:
            raise InvariantError(f"scan-2 risk below scan-1 risk for {len(bad)} knees, e.g. {bad[0]}")
    return records


def evaluate_bundle(bundle: TrainedBundle, knees, cfg: RunConfig, scope: str,
                    reference: Optional[TrainedBundle] = None) -> dict:
    """One report entry for ``bundle`` on ``knees``."""
    records = _predict(bundle, knees, scope)
    scores, labels = records_to_arrays(records)
    ref_scores = None
    if reference is not None:
        if reference.horizon != bundle.horizon:
            raise DataError(f"reference bundle horizon {reference.horizon} differs from {bundle.horizon}")
        ref_records = _predict(reference, knees, scope)
        ref_by_key = {(r.knee_id, r.scan_index): r for r in ref_records}
        aligned = [ref_by_key.get((r.knee_id, r.scan_index)) for r in records]
        if any(a is None or a.label != r.label for a, r in zip(aligned, records)):
            raise DataError("reference bundle predictions do not align with the evaluated scans")
        ref_scores = np.array([a.risk for a in aligned])
    n_boot = cfg.bootstrap.n_resamples
    report = metric_report(scores, labels, n_boot, cfg.bootstrap.level, cfg.seed, ref_scores)
    subgroups = subgroup_report(records, tuple(AnalyticalCohort), n_boot, cfg.bootstrap.level, cfg.seed)
    return {
        "approach": bundle.approach.value,
        "horizon": bundle.horizon,
        "scope": scope,
        "config": cfgmod.embedded(cfg),
        "config_hash": cfgmod.config_hash(cfg),
        "bundle_config_hash": _bundle_hash(bundle),
        "bundle_manifest_sha256": getattr(bundle, "manifest_sha256", None),
        "reference": None if reference is None else {
            "approach": reference.approach.value, "horizon": reference.horizon,
            "manifest_sha256": getattr(reference, "manifest_sha256", None)},
        "n_records": len(records),
        "n_knees": len(knees),
        "metrics": report.to_dict(),
        "subgroups": {name: r.to_dict() for name, r in subgroups.items()},
        "klg": klg_details(records),
    }


def _bundle_hash(bundle: TrainedBundle) -> Optional[str]:
    if not bundle.config:
        return None
    return sha256_bytes(json.dumps(bundle.config, sort_keys=True).encode())


# -- report rendering ---------------------------------------------------------

def load_reports(paths: Sequence) -> List[dict]:
    entries = []
    for path in paths:
        path = Path(path)
        if not path.is_file():
            raise DataError(f"report not found: {path}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: not valid JSON ({exc})") from None
        version = doc.get("schema_version")
        if version != REPORT_SCHEMA_VERSION:
            raise DataError(f"{path}: report schema version {version!r}, expected {REPORT_SCHEMA_VERSION}")
        entries.extend(doc.get("entries", []))
    order = {a.value: j for j, a in enumerate(Approach)}
    entries.sort(key=lambda e: (order.get(e["approach"], 99), e["horizon"], e["scope"]))
    return entries


def _fmt(value, digits=3):
    return ABSENT if value is None else f"{value:.{digits}f}"


def _fmt_ci(point, ci, digits=3):
    if point is None:
        return ABSENT
    if ci is None:
        return _fmt(point, digits)
    return f"{point:.{digits}f} [{ci[0]:.{digits}f}, {ci[1]:.{digits}f}]"


def _absent(reason):
    return f"{ABSENT} ({reason})" if reason else ABSENT


def main_rows(entries) -> List[List[str]]:
    rows = []
    for e in entries:
        m = e["metrics"]
        if m["auroc"] is None:
            auroc_cell = auprc_cell = _absent(m.get("reason"))
        else:
            auroc_cell = _fmt_ci(m["auroc"], m["auroc_ci"])
            auprc_cell = _fmt_ci(m["auprc"], m["auprc_ci"])
        ref = e.get("reference")
        rows.append([e["approach"], str(e["horizon"]), e["scope"], auroc_cell, auprc_cell, str(m["n_pos"]),
                     str(m["n_neg"]), _fmt(m.get("delong_p_vs_reference"), 4),
                     ref["approach"] if ref else ABSENT])
    return rows


MAIN_HEADER = ["approach", "horizon", "scope", "AUROC [95% CI]", "AUPRC [95% CI]", "n_pos", "n_neg",
               "DeLong p", "reference"]
SUBGROUP_HEADER = ["approach", "horizon", "scope", "cohort", "AUROC", "AUPRC", "n_pos", "n_neg"]


def subgroup_rows(entries) -> List[List[str]]:
    rows = []
    for e in entries:
        for name in (c.value for c in AnalyticalCohort):
            r = e["subgroups"][name]
            if r["auroc"] is None:
                cells = [_absent(r.get("reason"))] * 2
            else:
                cells = [_fmt_ci(r["auroc"], r["auroc_ci"]), _fmt_ci(r["auprc"], r["auprc_ci"])]
            rows.append([e["approach"], str(e["horizon"]), e["scope"], name, *cells, str(r["n_pos"]),
                         str(r["n_neg"])])
    return rows


def klg_table(entries):
    header = ["KLG"] + [f"{e['approach']} h{e['horizon']} {e['scope']}" for e in entries]
    rows = []
    for grade in range(5):
        row = [str(grade)]
        for e in entries:
            cell = e["klg"][str(grade)]
            row.append(_fmt(cell["auroc"]) if cell["auroc"] is not None else _absent(cell.get("reason")))
        rows.append(row)
    return header, rows


def render_table(header, rows) -> str:
    widths = [max(len(str(c)) for c in col) for col in zip(header, *rows)]
    fmt = lambda r: "  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip()
    lines = [fmt(header), "  ".join("-" * w for w in widths)] + [fmt(r) for r in rows]
    return "\n".join(lines)


def render_report(entries) -> str:
    parts = ["Scan-level discrimination", render_table(MAIN_HEADER, main_rows(entries)), "",
             "Analytical cohorts", render_table(SUBGROUP_HEADER, subgroup_rows(entries)), "",
             "AUROC by KL grade", render_table(*klg_table(entries))]
    return "\n".join(parts) + "\n"


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def write_csv_exports(entries, out_dir) -> List[Path]:
    out_dir = Path(out_dir)
    if not out_dir.is_dir():
        raise ConfigError(f"CSV export directory does not exist: {out_dir}")
    files = {"main.csv": (MAIN_HEADER, main_rows(entries)),
             "subgroups.csv": (SUBGROUP_HEADER, subgroup_rows(entries)),
             "klg.csv": klg_table(entries)}
    written = []
    for name, (header, rows) in files.items():
        path = out_dir / name
        path.write_text(_csv_text(header, rows), encoding="utf-8")
        written.append(path)
    return written


# -- commands -----------------------------------------------------------------

def cmd_simulate(cfg: RunConfig, args) -> int:
    out = _writable(Path(args.output or cfg.paths.cohort_csv))
    knees, match, cohort = generate_knees(cfg.cohort, cfg.seed)
    text = cohort_to_csv(knees)
    out.write_text(text, encoding="utf-8")
    counts = group_counts(knees)
    paired = sum(k.scan2 is not None for k in knees)
    meta = {"config": cfgmod.embedded(cfg), "config_hash": cfgmod.config_hash(cfg),
            "cohort_sha256": sha256_bytes(text.encode("utf-8")), "n_knees": len(knees),
            "n_paired_knees": paired, "n_excluded_subjects": len(match.excluded),
            "groups": {str(h): counts[h] for h in HORIZONS}}
    Path(str(out) + ".meta.json").write_text(dumps_json(meta), encoding="utf-8")
    print(f"wrote {out}: {len(knees)} knees, {paired} with two scans, "
          f"{len(match.excluded)} subjects left unmatched")
    for h in HORIZONS:
        c = counts[h]
        print(f"  {h}-year: Set1={c['Set1']} Set2={c['Set2']} Set3={c['Set3']}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    cohort_path = Path(args.cohort or cfg.paths.cohort_csv)
    knees = _read_cohort(cohort_path)
    out_dir = bundle_dir_for(args.out_dir or cfg.paths.bundle_dir, cfg.approach, cfg.horizon)
    if not out_dir.parent.is_dir():
        raise ConfigError(f"bundle directory does not exist: {out_dir.parent}")
    try:
        bundle = run_nested_cv(knees, cfg.approach, cfg.horizon, cfg.train_config(), cfg.seed, n_jobs=cfg.n_jobs,
                               n_outer=cfg.cv.outer, n_inner=cfg.cv.inner, config_snapshot=cfgmod.embedded(cfg))
    except ValueError as exc:
        raise DataError(f"{cohort_path}: {exc}") from None
    expected = cfg.cv.outer * cfg.cv.inner
    if len(bundle.members) != expected:
        raise InvariantError(f"trained {len(bundle.members)} members, expected {expected}")
    manifest = write_bundle(bundle, out_dir, cfg, sha256_file(cohort_path))
    single = sum(m.selection != "val_auroc" for m in bundle.members)
    print(f"wrote {manifest}: {len(bundle.members)} members for {cfg.approach} at {cfg.horizon} year(s)"
          + (f"; {single} selected by validation loss" if single else ""))
    return EXIT_OK


def _default_manifest(cfg: RunConfig, approach: str) -> Path:
    return bundle_dir_for(cfg.paths.bundle_dir, approach, cfg.horizon) / "manifest.json"


def cmd_evaluate(cfg: RunConfig, args) -> int:
    manifest = Path(args.manifest) if args.manifest else _default_manifest(cfg, cfg.approach)
    bundle = load_bundle(manifest)
    default_cohort = cfg.paths.cohort_csv if cfg.scope == "internal" else cfg.paths.external_csv
    knees = _read_cohort(args.cohort or default_cohort)
    ref_path = Path(args.reference) if args.reference else None
    if ref_path is None and bundle.approach is not Approach.BASELINE:
        candidate = manifest.parent.parent / f"{Approach.BASELINE.value}-h{bundle.horizon}" / "manifest.json"
        if candidate.is_file():
            ref_path = candidate
    reference = load_bundle(ref_path) if ref_path is not None else None
    entry = evaluate_bundle(bundle, knees, cfg, cfg.scope, reference)
    out = _writable(Path(args.output or cfg.paths.report))
    out.write_text(dumps_json({"schema_version": REPORT_SCHEMA_VERSION, "kind": "progrisk.report",
                               "entries": [entry]}), encoding="utf-8")
    m = entry["metrics"]
    p = m["delong_p_vs_reference"]
    print(f"wrote {out}: {bundle.approach.value} {bundle.horizon}-year {cfg.scope} AUROC {_fmt(m['auroc'])} "
          f"AUPRC {_fmt(m['auprc'])} over {entry['n_records']} scans"
          + (f"; DeLong p={p:.4g} vs {entry['reference']['approach']}" if p is not None else ""))
    return EXIT_OK


def cmd_report(cfg: RunConfig, args) -> int:
    entries = load_reports(args.reports)
    text = render_report(entries)
    if args.output:
        _writable(Path(args.output)).write_text(text, encoding="utf-8")
    if args.csv_dir:
        write_csv_exports(entries, args.csv_dir)
    sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "evaluate": cmd_evaluate, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file (key = value lines)")
    common.add_argument("--seed", type=int, help="master seed, overrides the config")
    common.add_argument("--approach", choices=[a.value for a in Approach])
    common.add_argument("--horizon", type=int, choices=HORIZONS)
    common.add_argument("--scope", choices=cfgmod.SCOPES)
    common.add_argument("--jobs", type=int, help="parallel fold trainings; 0 means every available core")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="progrisk", description="Monotone knee-replacement risk models on simulated cohorts.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("simulate", parents=[common], help="generate a matched synthetic cohort CSV")
    p.add_argument("--output", help="cohort CSV path (default: paths.cohort_csv)")
    p = sub.add_parser("train", parents=[common], help="train the nested cross-validation bundle")
    p.add_argument("--cohort", help="cohort CSV path (default: paths.cohort_csv)")
    p.add_argument("--out-dir", help="root directory for bundles (default: paths.bundle_dir)")
    p = sub.add_parser("evaluate", parents=[common], help="score a bundle and write a report JSON")
    p.add_argument("--manifest", help="bundle manifest (default: <bundle_dir>/<approach>-h<horizon>/manifest.json)")
    p.add_argument("--cohort", help="cohort CSV to score (default depends on --scope)")
    p.add_argument("--reference", help="reference bundle manifest for the DeLong test")
    p.add_argument("--output", help="report JSON path (default: paths.report)")
    p = sub.add_parser("report", parents=[common], help="render report JSON files as tables")
    p.add_argument("reports", nargs="+", help="report JSON files")
    p.add_argument("--output", help="also write the text tables to this file")
    p.add_argument("--csv-dir", help="directory for main.csv, subgroups.csv and klg.csv")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = cfgmod.load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for key in ("seed", "approach", "horizon", "scope"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    if args.jobs is not None:
        overrides["runtime.n_jobs"] = args.jobs
    return cfg.replace(**overrides) if overrides else cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"progrisk: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"progrisk: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InvariantError as exc:
        print(f"progrisk: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
