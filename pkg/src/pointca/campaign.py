"""Campaign orchestration: pair loading, resumable attack runs, defense sweeps,
aggregate reports and the transfer matrix.

Campaign CSV columns (one row per pair, written in manifest order)::

    pair_id, method, mode, eta, budget_kind, eps, k, t, lam, latent_terms,
    source_class, target_class,
    t_re_cd, t_re_emd, t_nre_cd, t_nre_denominator, s_re, s_nre,
    perturbation_budget_cd, outlier_count

Defense sweep CSV columns::

    pair_id, input, defense, param, value, kept_points, s_re, s_nre

``input`` is ``adversarial`` or ``clean`` (the unattacked source partial).
Floats are written with ``repr`` so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import json
import logging
import multiprocessing
import os
from dataclasses import replace
from pathlib import Path

import numpy as np

from .attack import AttackConfig, AttackPair, attack_pair, denominators, pair_seed, transfer_evaluate
from .data import PairManifest, read_cloud, write_xyz
from .defense import DefenseConfig, apply_defense
from .errors import AllPointsRemoved, DataError, InvalidConfig
from .geometry import BUDGET_KINDS, as_points
from .metrics import MetricReport, chamfer, relative_asr

logger = logging.getLogger(__name__)

CONFIG_COLUMNS = ["pair_id", "method", "mode", "eta", "budget_kind", "eps", "k", "t", "lam", "latent_terms",
                  "source_class", "target_class"]
CAMPAIGN_COLUMNS = CONFIG_COLUMNS + MetricReport.header()
DEFENSE_COLUMNS = ["pair_id", "input", "defense", "param", "value", "kept_points", "s_re", "s_nre"]
METHODS = ("pointca", "random", "classification")

# Outlier-removal thresholds are absolute distances. Clean toy partials have
# a mean 2-NN spacing near 0.06, so the usual grid (0.03-0.07) would
# strip whole clouds; the grid is scaled by 4 to sit around that spacing.
OR_DENSITY_SCALE = 4.0
TOY_DEFENSE = DefenseConfig(or_threshold=0.05 * OR_DENSITY_SCALE)

# parameter grids of the defense sweep; "none" is the undefended reference
DEFENSE_GRID = {
    "srs": ("srs_drop_rate", (0.1, 0.2, 0.3)),
    "or": ("or_threshold", tuple(round(v * OR_DENSITY_SCALE, 6) for v in (0.03, 0.05, 0.07))),
    "sor_k": ("sor_k", (2, 8, 10)),
    "sor_alpha": ("sor_alpha", (0.7, 1.1, 1.5)),
}
ASR_THRESHOLDS = tuple(np.round(np.arange(0.5, 10.01, 0.5), 2))
ETA_SWEEP = (1.5, 2.5, 5.0)
K_SWEEP = (2, 4, 8, 16)
T_SWEEP = (0.0, 1.5, 3.0, 4.5, 6.0)
LATENT_SWEEP = ("kl", "l2", "both")


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_rows(path, columns, rows, append=False):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not append or not path.exists() or path.stat().st_size == 0
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def read_rows(path, columns=None):
    """Rows of a campaign or sweep CSV as dicts of strings."""
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if columns is not None and rd.fieldnames != list(columns):
            raise DataError(f"{path}: unexpected header {rd.fieldnames}")
        return list(rd)


# --------------------------------------------------------------------------
# training sets


def completion_training_set(samples, split="train"):
    """Stacked (N, m, 3) partial inputs and (N, n, 3) complete targets."""
    chosen = [s for s in samples if s.split == split]
    if not chosen:
        raise DataError(f"no {split} samples in the dataset")
    return (np.stack([as_points(s.partial) for s in chosen]),
            np.stack([as_points(s.complete) for s in chosen]))


def classifier_training_set(samples, class_names, split="train", include_complete=True):
    """Partial views (plus one complete cloud per object) with integer labels.

    Complete clouds are included so the classifier also recognizes completion
    outputs, which is where semantic evaluation applies it.
    """
    chosen = sorted((s for s in samples if s.split == split), key=lambda s: s.sample_id)
    if not chosen:
        raise DataError(f"no {split} samples in the dataset")
    clouds = [as_points(s.partial) for s in chosen]
    labels = [class_names.index(s.cls) for s in chosen]
    if include_complete:
        seen = {}
        for s in chosen:
            seen.setdefault(s.object_id, s)
        for oid in sorted(seen):
            clouds.append(as_points(seen[oid].complete))
            labels.append(class_names.index(seen[oid].cls))
    return clouds, labels


# --------------------------------------------------------------------------
# pairs


def load_pairs(manifest: PairManifest):
    pairs = []
    for e in manifest.entries:
        try:
            pairs.append(AttackPair(
                pair_id=e.pair_id,
                source_partial=read_cloud(manifest.resolve(e.source_partial_path), label=e.source_class),
                source_gt=read_cloud(manifest.resolve(e.source_gt_path), kind="complete"),
                target_partial=read_cloud(manifest.resolve(e.target_partial_path), label=e.target_class),
                target_gt=read_cloud(manifest.resolve(e.target_gt_path), kind="complete"),
                source_class=e.source_class,
                target_class=e.target_class,
                t_nre_denominator=e.t_nre_denominator,
                s_nre_denominator=e.s_nre_denominator,
            ))
        except FileNotFoundError as exc:
            raise DataError(f"pair {e.pair_id}: missing file {exc.filename}") from exc
    return pairs


def attach_denominators(manifest: PairManifest, pairs, model, check_tol=1e-9):
    """Compute clean-error denominators and store them on pairs and manifest.

    Cached values already present are checked against a recomputation.
    """
    for e, p in zip(manifest.entries, pairs):
        t_den, s_den = denominators(model, p)
        for name, cached, fresh in (("t_nre", e.t_nre_denominator, t_den), ("s_nre", e.s_nre_denominator, s_den)):
            if cached is not None and abs(cached - fresh) > check_tol:
                raise DataError(f"pair {e.pair_id}: cached {name} denominator {cached} != {fresh}")
        if not (t_den > 0 and s_den > 0):
            raise DataError(f"pair {e.pair_id}: zero clean reconstruction error")
        e.t_nre_denominator = p.t_nre_denominator = t_den
        e.s_nre_denominator = p.s_nre_denominator = s_den
    return manifest


# --------------------------------------------------------------------------
# attack campaigns

_WORKER = {}


def _worker_init(model, classifier):
    _WORKER["model"] = model
    _WORKER["classifier"] = classifier


def _run_one(job):
    pair, cfg, method, with_emd = job
    model, classifier = _WORKER["model"], _WORKER["classifier"]
    pcfg = replace(cfg, seed=pair_seed(cfg.seed, pair.pair_id))
    try:
        result = attack_pair(model, pair, pcfg, method, classifier, with_emd)
    except Exception as exc:
        raise RuntimeError(f"pair {pair.pair_id}: {exc}") from exc
    row = {
        "pair_id": pair.pair_id, "method": method, "mode": cfg.mode, "eta": cfg.eta,
        "budget_kind": cfg.budget_kind, "eps": cfg.eps, "k": cfg.k, "t": cfg.t, "lam": cfg.lam,
        "latent_terms": cfg.latent_terms, "source_class": pair.source_class, "target_class": pair.target_class,
    }
    row.update(zip(MetricReport.header(), result.metrics.to_row()))
    return row, as_points(result.adversarial)


def run_campaign(model, pairs, cfg: AttackConfig, out_csv, adv_dir=None, method="pointca", classifier=None,
                 workers=1, with_emd=False):
    """Attack every pair and append one row per pair to ``out_csv``.

    Pairs whose id already appears in an existing ``out_csv`` are skipped, so
    an interrupted campaign resumes where it stopped. Each pair's seed is
    derived from ``cfg.seed`` and the pair id, never from scheduling.
    Returns ``{pair_id: adversarial points}`` for the pairs run now.
    """
    if method not in METHODS:
        raise InvalidConfig(f"method must be one of {METHODS}")
    cfg.validate()
    out_csv = Path(out_csv)
    done = set()
    if out_csv.exists() and out_csv.stat().st_size > 0:
        done = {r["pair_id"] for r in read_rows(out_csv, CAMPAIGN_COLUMNS)}
    todo = [p for p in pairs if p.pair_id not in done]
    if done:
        logger.info("%s: resuming, %d of %d pairs already done", out_csv, len(done), len(pairs))
    jobs = [(p, cfg, method, with_emd) for p in todo]
    if workers > 1 and len(jobs) > 1:
        ctx = multiprocessing.get_context("fork" if "fork" in multiprocessing.get_all_start_methods() else None)
        pool = ctx.Pool(workers, initializer=_worker_init, initargs=(model, classifier))
        it = pool.imap(_run_one, jobs)
    else:
        _worker_init(model, classifier)
        pool, it = None, map(_run_one, jobs)
    produced = {}
    try:
        for row, adv in it:
            _write_rows(out_csv, CAMPAIGN_COLUMNS, [row], append=True)
            if adv_dir is not None:
                Path(adv_dir).mkdir(parents=True, exist_ok=True)
                write_xyz(Path(adv_dir) / f"{row['pair_id']}.xyz", adv)
            produced[row["pair_id"]] = adv
    finally:
        if pool is not None:
            pool.terminate()
            pool.join()
    if not out_csv.exists():
        _write_rows(out_csv, CAMPAIGN_COLUMNS, [])
    return produced


def load_adversarials(adv_dir, pairs):
    out = {}
    for p in pairs:
        path = Path(adv_dir) / f"{p.pair_id}.xyz"
        if not path.exists():
            raise DataError(f"missing adversarial cloud for pair {p.pair_id}")
        out[p.pair_id] = as_points(read_cloud(path, kind="adversarial"))
    return out


def sweep(model, pairs, base: AttackConfig, field_name, values, out_dir, prefix=None, **kw):
    """Run one campaign per value of an AttackConfig field.

    Files are named ``{prefix}_{field}{value}.csv``; returns a dict value -> path.
    """
    if field_name not in AttackConfig.__dataclass_fields__:
        raise InvalidConfig(f"unknown sweep field {field_name!r}")
    prefix = prefix or kw.get("method", "pointca")
    paths = {}
    for v in values:
        cfg = replace(base, **{field_name: v})
        path = Path(out_dir) / f"{prefix}_{field_name}{v}.csv"
        adv_dir = Path(out_dir) / f"{prefix}_{field_name}{v}_adv"
        run_campaign(model, pairs, cfg, path, adv_dir=adv_dir, **kw)
        paths[v] = path
    return paths


def median_budget(path):
    return float(np.median([float(r["perturbation_budget_cd"]) for r in read_rows(path, CAMPAIGN_COLUMNS)]))


def calibrate_eps(model, pairs, cfg: AttackConfig, target_budget, out_dir, lo=0.02, hi=0.4, rel_tol=0.05,
                  max_evals=8, **kw):
    """Uniform radius whose median perturbation budget matches a target.

    Probes ``cfg.eps = hi`` first, then bisects on a log scale, stopping at the
    first probe whose median CD_P budget lies within ``rel_tol`` of
    ``target_budget``. Each probe is a full campaign written to ``out_dir``.
    Returns ``(eps, csv path, median budget)``; when no probe matches, the
    closest one is returned.
    """
    if cfg.budget_kind == "adaptive":
        raise InvalidConfig("calibration applies to the uniform budget kinds")
    probes = {}

    def probe(eps):
        eps = float(f"{eps:.6g}")
        if eps not in probes:
            path = Path(out_dir) / f"calibrate_{cfg.budget_kind}_eps{eps}.csv"
            run_campaign(model, pairs, replace(cfg, eps=eps), path, **kw)
            probes[eps] = (path, median_budget(path))
        return eps, probes[eps][1]

    low, high = lo, hi
    eps = hi
    for _ in range(max_evals):
        eps, b = probe(eps)
        if abs(b - target_budget) <= rel_tol * target_budget:
            return eps, probes[eps][0], b
        if b < target_budget:
            low = eps
        else:
            high = eps
        if eps == hi and b < target_budget:
            break
        eps = float(np.sqrt(low * high))
    best = min(probes, key=lambda e: abs(probes[e][1] - target_budget))
    return best, probes[best][0], probes[best][1]


# --------------------------------------------------------------------------
# defenses


def defense_sweep(model, pairs, adversarials, out_csv, base: DefenseConfig = None, grid=None):
    """S-RE / S-NRE of adversarial and clean source clouds under every defense setting.

    Every pair gets a ``none`` row for both inputs plus one row per grid value.
    A setting that removes every point is recorded with ``kept_points`` 0 and
    infinite errors.
    """
    base = base or TOY_DEFENSE
    grid = DEFENSE_GRID if grid is None else grid
    settings = [("none", "", "", base)]
    for label, (param, values) in grid.items():
        name = label.split("_")[0]
        settings += [(name, param, v, replace(base, **{param: v})) for v in values]
    rows = []
    for p in pairs:
        if p.s_nre_denominator is None:
            p.t_nre_denominator, p.s_nre_denominator = denominators(model, p)
        inputs = (("adversarial", adversarials[p.pair_id]), ("clean", as_points(p.source_partial)))
        for input_kind, cloud in inputs:
            for name, param, value, cfg in settings:
                cfg = replace(cfg, seed=pair_seed(base.seed, p.pair_id)).validate()
                try:
                    kept = as_points(apply_defense(cloud, name, cfg))
                    s_re = chamfer(model.predict(kept), p.source_gt)
                except AllPointsRemoved:
                    kept, s_re = np.zeros((0, 3)), float("inf")
                rows.append({
                    "pair_id": p.pair_id, "input": input_kind, "defense": name, "param": param,
                    "value": value, "kept_points": kept.shape[0],
                    "s_re": s_re, "s_nre": s_re / p.s_nre_denominator,
                })
    _write_rows(out_csv, DEFENSE_COLUMNS, rows)
    return rows


# --------------------------------------------------------------------------
# reports

METRIC_COLUMNS = MetricReport.header()


def _group_key(r):
    return (r["method"], r["mode"], r["eta"], r["budget_kind"], r["eps"], r["k"], r["t"], r["lam"],
            r["latent_terms"])


def aggregate(rows):
    """Median and mean of every metric per attack setting."""
    groups = {}
    for r in rows:
        groups.setdefault(_group_key(r), []).append(r)
    out = []
    for key, rs in sorted(groups.items()):
        entry = dict(zip(["method", "mode", "eta", "budget_kind", "eps", "k", "t", "lam", "latent_terms"], key))
        entry["pairs"] = len(rs)
        for m in METRIC_COLUMNS:
            vals = np.array([float(r[m]) for r in rs])
            entry[f"median_{m}"] = float(np.median(vals))
            entry[f"mean_{m}"] = float(np.mean(vals))
        out.append(entry)
    return out


def verify_aggregate(report, rows, tol=1e-12):
    """Check stored aggregates against a recomputation from the rows."""
    fresh = aggregate(rows)
    if len(fresh) != len(report):
        raise DataError("aggregate group count does not match the rows")
    for a, b in zip(report, fresh):
        for k, v in b.items():
            if isinstance(v, float) and abs(a[k] - v) > tol:
                raise DataError(f"aggregate {k} = {a[k]} but rows give {v}")
            if not isinstance(v, float) and str(a[k]) != str(v):
                raise DataError(f"aggregate {k} = {a[k]} but rows give {v}")
    return True


def asr_curves(rows, thresholds=ASR_THRESHOLDS):
    """Plot-ready Relative-ASR rows: one curve per attack setting."""
    groups = {}
    for r in rows:
        groups.setdefault(_group_key(r), []).append(float(r["t_nre_cd"]))
    out = []
    for key, vals in sorted(groups.items()):
        for tau, frac in relative_asr(vals, thresholds):
            out.append({"method": key[0], "mode": key[1], "eta": key[2], "budget_kind": key[3],
                        "tau": tau, "relative_asr": frac})
    return out


def budget_comparison(rows):
    """One series per budget kind: median budget, outliers and T-NRE."""
    out = []
    for kind in BUDGET_KINDS:
        rs = [r for r in rows if r["budget_kind"] == kind]
        if not rs:
            continue
        med = lambda c: float(np.median([float(r[c]) for r in rs]))  # noqa: E731
        out.append({"budget_kind": kind, "pairs": len(rs),
                    "median_perturbation_budget_cd": med("perturbation_budget_cd"),
                    "median_outlier_count": med("outlier_count"),
                    "median_t_nre_cd": med("t_nre_cd")})
    return out


def defense_summary(rows):
    groups = {}
    for r in rows:
        groups.setdefault((r["input"], r["defense"], r["param"], str(r["value"])), []).append(float(r["s_nre"]))
    return [{"input": k[0], "defense": k[1], "param": k[2], "value": k[3], "pairs": len(v),
             "median_s_nre": float(np.median(v)), "mean_s_nre": float(np.mean(v))}
            for k, v in sorted(groups.items())]


def write_report(campaign_csvs, out_dir, defense_csv=None):
    """Aggregate JSON plus Relative-ASR and budget-comparison CSVs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for path in campaign_csvs:
        rows.extend(read_rows(path, CAMPAIGN_COLUMNS))
    if not rows:
        raise DataError("no campaign rows to report")
    report = {"campaigns": [str(p) for p in campaign_csvs], "aggregates": aggregate(rows)}
    if defense_csv is not None:
        report["defenses"] = defense_summary(read_rows(defense_csv, DEFENSE_COLUMNS))
    (out_dir / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    curves = asr_curves(rows)
    _write_rows(out_dir / "relative_asr.csv", list(curves[0]), curves)
    comp = budget_comparison(rows)
    _write_rows(out_dir / "budget_comparison.csv",
                ["budget_kind", "pairs", "median_perturbation_budget_cd", "median_outlier_count", "median_t_nre_cd"],
                comp)
    return report


def load_report(path, campaign_csvs=None):
    """Read a report JSON, verifying aggregates against the campaign rows."""
    report = json.loads(Path(path).read_text())
    sources = campaign_csvs if campaign_csvs is not None else report["campaigns"]
    rows = []
    for p in sources:
        rows.extend(read_rows(p, CAMPAIGN_COLUMNS))
    verify_aggregate(report["aggregates"], rows)
    return report


# --------------------------------------------------------------------------
# semantic evaluation and transfer


def semantic_accuracy(model, classifier, pairs, adversarials):
    """Classifier accuracy (source labels) on completions of clean and adversarial clouds."""
    clean = adv = 0
    for p in pairs:
        truth = classifier.class_names.index(p.source_class)
        clean += classifier.predict(model.predict(as_points(p.source_partial))) == truth
        adv += classifier.predict(model.predict(adversarials[p.pair_id])) == truth
    return clean / len(pairs), adv / len(pairs)


class _Adv:
    def __init__(self, pts):
        self.adversarial = pts


def transfer_matrix(models: dict, pairs, adversarials_by_model: dict):
    """Mean T-RE of every model completing adversarial clouds crafted on every model.

    Returns ``{crafted_on: {evaluated_on: mean T-RE}}``.
    """
    out = {}
    for src, advs in adversarials_by_model.items():
        results = [_Adv(advs[p.pair_id]) for p in pairs]
        out[src] = {dst: transfer_evaluate(results, pairs, m) for dst, m in models.items()}
    return out


def output_dir(default):
    """Output directory, overridable through ``POINTCA_OUTPUT_DIR``."""
    return Path(os.environ.get("POINTCA_OUTPUT_DIR") or default)
