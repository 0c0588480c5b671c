"""Command-line entry point.

Every subcommand reads an optional JSON config (``--config``) whose keys are
the subcommand's options; any key may also be given as a flag, and flags win.
Unknown config keys are errors. ``POINTCA_OUTPUT_DIR`` overrides the
``output_dir`` key of every subcommand unless the flag is given explicitly.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import campaign as cp
from .attack import AttackConfig, LATENT_TERMS, MODES
from .data import (
    SHAPE_CLASSES,
    DatasetConfig,
    PairManifest,
    build_pair_manifest,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from .defense import DefenseConfig
from .errors import (
    DataError,
    EmptyDataset,
    InvalidConfig,
    InvalidParam,
    InvalidSpec,
    ParseError,
    PointCAError,
    TooFewClasses,
    VersionMismatch,
)
from .geometry import BUDGET_KINDS
from .models import Classifier, CompletionModel, TrainConfig, load_weights, save_weights, train_classifier, train_completion

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
OUTPUT_ENV = "POINTCA_OUTPUT_DIR"

logger = logging.getLogger("pointca")


class Opt:
    def __init__(self, default, kind, help):
        self.default, self.kind, self.help = default, kind, help


def _train_opts(epochs):
    return {
        "epochs": Opt(epochs, int, "training epochs"),
        "batch_size": Opt(16, int, "minibatch size"),
        "learning_rate": Opt(1e-3, float, "Adam step size"),
        "beta1": Opt(0.9, float, "Adam first-moment decay"),
        "beta2": Opt(0.999, float, "Adam second-moment decay"),
        "adam_eps": Opt(1e-8, float, "Adam denominator epsilon"),
        "seed": Opt(0, int, "shuffling seed"),
    }


_ATTACK_HELP = {
    "mode": f"attack mode, one of {MODES}",
    "iterations": "signed-gradient iterations",
    "k": "neighbors in the density profile",
    "t": "weight of the neighbor-distance spread in the budget",
    "eta": "budget scale applied to each point's density score",
    "base_step": "initial step size",
    "decay_rate": "step size multiplier applied every decay_step iterations",
    "decay_step": "iterations between step decays",
    "lam": "weight of the KL term in latent mode",
    "latent_terms": f"latent loss terms, one of {LATENT_TERMS}",
    "budget_kind": f"budget constraint, one of {BUDGET_KINDS}",
    "eps": "radius of the uniform budget kinds",
    "init_noise_scale": "half-width of the uniform initial noise",
    "noise_std": "std of the random-noise baseline",
    "seed": "campaign seed; each pair's seed derives from it and the pair id",
}


def _attack_opts():
    d = AttackConfig()
    return {f.name: Opt(getattr(d, f.name), type(getattr(d, f.name)), _ATTACK_HELP[f.name]) for f in fields(d)}


_DEFENSE_HELP = {
    "srs_drop_rate": "base SRS drop rate",
    "or_threshold": "base outlier-removal threshold",
    "sor_k": "base defense neighborhood size (SOR and OR)",
    "sor_alpha": "base SOR interval multiplier",
    "seed": "seed for random subsampling",
}


def _defense_opts():
    d = cp.TOY_DEFENSE
    return {f.name: Opt(getattr(d, f.name), type(getattr(d, f.name)), _DEFENSE_HELP[f.name]) for f in fields(d)}


COMMANDS = {
    "gen-data": ("generate the synthetic dataset and the attack-pair manifest", {
        "output_dir": Opt("data", str, "dataset directory (created if missing)"),
        "classes": Opt(list(SHAPE_CLASSES), list, "shape classes"),
        "objects_per_class": Opt(30, int, "objects per class"),
        "views_per_object": Opt(4, int, "partial views per object"),
        "test_objects_per_class": Opt(10, int, "held-out objects per class"),
        "complete_size": Opt(1024, int, "points per complete cloud"),
        "partial_size": Opt(256, int, "points per partial cloud"),
        "raster": Opt(64, int, "depth-buffer raster size"),
        "camera_distance": Opt(3.0, float, "camera distance from the origin"),
        "seed": Opt(0, int, "dataset seed"),
        "sources_per_class": Opt(10, int, "source views per class in the manifest"),
        "targets_topN": Opt(3, int, "nearest target objects per foreign class"),
        "pair_limit": Opt(0, int, "keep a seeded subset of this many pairs (0 keeps all)"),
        "manifest_seed": Opt(0, int, "seed for source and view selection"),
    }),
    "train": ("train a completion model", {
        "dataset": Opt("data", str, "dataset directory"),
        "output_dir": Opt("models", str, "directory for weights and loss history"),
        "name": Opt("completion", str, "file stem of the outputs"),
        "enc_hidden": Opt(64, int, "encoder hidden width"),
        "feat": Opt(128, int, "global feature width"),
        "dec_hidden": Opt(256, int, "decoder hidden width"),
        "model_seed": Opt(0, int, "weight initialization seed"),
        **_train_opts(60),
    }),
    "train-classifier": ("train the shape classifier", {
        "dataset": Opt("data", str, "dataset directory"),
        "output_dir": Opt("models", str, "directory for weights and loss history"),
        "name": Opt("classifier", str, "file stem of the outputs"),
        "enc_hidden": Opt(64, int, "encoder hidden width"),
        "feat": Opt(128, int, "global feature width"),
        "head_hidden": Opt(64, int, "classification head hidden width"),
        "model_seed": Opt(0, int, "weight initialization seed"),
        "include_complete": Opt(True, bool, "also train on complete clouds"),
        **_train_opts(30),
    }),
    "attack": ("run an attack campaign over the manifest", {
        "manifest": Opt("data/manifest.json", str, "pair manifest"),
        "model": Opt("models/completion.bin", str, "completion model weights"),
        "classifier": Opt("", str, "classifier weights (classification baseline only)"),
        "output_dir": Opt("runs/attack", str, "campaign output directory"),
        "method": Opt("pointca", str, f"one of {cp.METHODS}"),
        "sweep_field": Opt("", str, "attack option to sweep (empty runs one campaign)"),
        "sweep_values": Opt([], list, "values of the swept option"),
        "workers": Opt(1, int, "parallel worker processes"),
        "with_emd": Opt(False, bool, "also compute the target EMD"),
        **_attack_opts(),
    }),
    "defend": ("evaluate defenses on adversarial and clean clouds", {
        "manifest": Opt("data/manifest.json", str, "pair manifest"),
        "model": Opt("models/completion.bin", str, "completion model weights"),
        "adversarial_dir": Opt("runs/attack/adv", str, "directory of adversarial XYZ files"),
        "output_dir": Opt("runs/defend", str, "output directory for defense.csv"),
        "srs_drop_rates": Opt([0.1, 0.2, 0.3], list, "SRS drop-rate grid"),
        "or_thresholds": Opt(list(cp.DEFENSE_GRID["or"][1]), list, "outlier-removal threshold grid"),
        "sor_ks": Opt([2, 8, 10], list, "SOR neighborhood-size grid"),
        "sor_alphas": Opt([0.7, 1.1, 1.5], list, "SOR interval grid"),
        **_defense_opts(),
    }),
    "report": ("aggregate campaign CSVs into a report", {
        "campaigns": Opt([], list, "campaign CSV files"),
        "defense_csv": Opt("", str, "optional defense sweep CSV"),
        "output_dir": Opt("runs/report", str, "report directory"),
        "manifest": Opt("", str, "manifest (semantic evaluation only)"),
        "model": Opt("", str, "completion weights (semantic evaluation only)"),
        "classifier": Opt("", str, "classifier weights (semantic evaluation only)"),
        "adversarial_dir": Opt("", str, "adversarial clouds (semantic evaluation only)"),
    }),
    "transfer": ("cross-model transfer matrix", {
        "manifest": Opt("data/manifest.json", str, "pair manifest"),
        "models": Opt({}, dict, "JSON object mapping model name to weight file"),
        "output_dir": Opt("runs/transfer", str, "output directory"),
        "workers": Opt(1, int, "parallel worker processes"),
        **_attack_opts(),
    }),
}


# --------------------------------------------------------------------------
# config parsing


def _parse_bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise InvalidConfig(f"not a boolean: {v!r}")


def _parse_list(v):
    if isinstance(v, list):
        return v
    s = str(v).strip()
    if s.startswith("["):
        return json.loads(s)
    items = [x.strip() for x in s.split(",") if x.strip()]
    out = []
    for x in items:
        try:
            out.append(json.loads(x))
        except json.JSONDecodeError:
            out.append(x)
    return out


def _coerce(key, opt, value):
    try:
        if opt.kind is bool:
            return _parse_bool(value)
        if opt.kind is list:
            return _parse_list(value)
        if opt.kind is dict:
            v = json.loads(value) if isinstance(value, str) else value
            if not isinstance(v, dict):
                raise InvalidConfig(f"{key} must be a JSON object")
            return v
        if opt.kind is int and isinstance(value, float) and not value.is_integer():
            raise InvalidConfig(f"{key} must be an integer, got {value}")
        return opt.kind(value)
    except (TypeError, ValueError, json.JSONDecodeError) as exc:
        raise InvalidConfig(f"bad value for {key}: {value!r} ({exc})") from exc


def build_parser():
    parser = argparse.ArgumentParser(prog="pointca", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (desc, opts) in COMMANDS.items():
        p = sub.add_parser(name, help=desc, description=f"{desc}. Every option below is also a config key.")
        p.add_argument("--config", help="JSON file of option values")
        for key, opt in opts.items():
            p.add_argument(f"--{key}", dest=key, default=None, metavar=opt.kind.__name__.upper(),
                           help=f"{opt.help} (default: {json.dumps(opt.default)})")
    return parser


def resolve_config(command, args):
    """Merge defaults, config file, output env override and flags."""
    opts = COMMANDS[command][1]
    cfg = {k: o.default for k, o in opts.items()}
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except FileNotFoundError as exc:
            raise InvalidConfig(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise InvalidConfig("config file must hold a JSON object")
        unknown = sorted(set(loaded) - set(opts))
        if unknown:
            raise InvalidConfig(f"unknown config keys for {command}: {unknown}")
        cfg.update({k: _coerce(k, opts[k], v) for k, v in loaded.items()})
    if os.environ.get(OUTPUT_ENV) and "output_dir" in opts:
        cfg["output_dir"] = os.environ[OUTPUT_ENV]
    for key, opt in opts.items():
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = _coerce(key, opt, v)
    return cfg


def _sub(cfg, cls):
    names = {f.name for f in fields(cls)}
    return {k: v for k, v in cfg.items() if k in names}


def _attack_config(cfg):
    try:
        return AttackConfig.from_dict(_sub(cfg, AttackConfig))
    except TypeError as exc:
        raise InvalidConfig(str(exc)) from exc


def _load_model(path, kind):
    if not path:
        raise InvalidConfig(f"{kind} weights path is required")
    try:
        model = load_weights(path)
    except FileNotFoundError as exc:
        raise DataError(f"weights not found: {path}") from exc
    expected = CompletionModel if kind == "completion" else Classifier
    if not isinstance(model, expected):
        raise InvalidConfig(f"{path} holds a {type(model).__name__}, expected {expected.__name__}")
    return model


def _load_manifest(path):
    try:
        return PairManifest.load(path)
    except FileNotFoundError as exc:
        raise DataError(f"manifest not found: {path}") from exc


def _load_samples(root):
    try:
        return load_dataset(root)
    except FileNotFoundError as exc:
        raise DataError(f"dataset not found under {root}") from exc


def _dump(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg):
    dcfg = DatasetConfig(**{**_sub(cfg, DatasetConfig), "classes": tuple(cfg["classes"])})
    out = Path(cfg["output_dir"])
    samples = generate_dataset(dcfg)
    save_dataset(samples, out, dcfg)
    manifest = build_pair_manifest(
        samples, cfg["sources_per_class"], cfg["targets_topN"], cfg["manifest_seed"],
        limit=cfg["pair_limit"] or None, root=out,
    )
    manifest.save(out / "manifest.json")
    return {"samples": len(samples), "pairs": len(manifest), "output_dir": str(out)}


def cmd_train(cfg):
    samples = _load_samples(cfg["dataset"])
    x, y = cp.completion_training_set(samples)
    model = CompletionModel(y.shape[1], cfg["enc_hidden"], cfg["feat"], cfg["dec_hidden"], cfg["model_seed"])
    result = train_completion(model, x, y, TrainConfig(**_sub(cfg, TrainConfig)))
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    save_weights(model, out / f"{cfg['name']}.bin")
    (out / f"{cfg['name']}_loss.csv").write_text(result.to_csv())
    return {"weights": str(out / f"{cfg['name']}.bin"), "final_loss": result.history[-1] if result.history else None}


def cmd_train_classifier(cfg):
    samples = _load_samples(cfg["dataset"])
    names = sorted({s.cls for s in samples}, key=lambda c: (SHAPE_CLASSES + (c,)).index(c))
    clouds, labels = cp.classifier_training_set(samples, names, include_complete=cfg["include_complete"])
    model = Classifier(len(names), cfg["enc_hidden"], cfg["feat"], cfg["head_hidden"], cfg["model_seed"], names)
    result = train_classifier(model, clouds, labels, TrainConfig(**_sub(cfg, TrainConfig)))
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    save_weights(model, out / f"{cfg['name']}.bin")
    (out / f"{cfg['name']}_loss.csv").write_text(result.to_csv())
    test = [s for s in samples if s.split == "test"]
    acc = None
    if test:
        from .models import accuracy

        acc = accuracy(model, [s.partial.points for s in test], [names.index(s.cls) for s in test])
    return {"weights": str(out / f"{cfg['name']}.bin"), "test_partial_accuracy": acc}


def _prepared_pairs(manifest_path, model, out_dir):
    manifest = _load_manifest(manifest_path)
    pairs = cp.load_pairs(manifest)
    cp.attach_denominators(manifest, pairs, model)
    out_dir.mkdir(parents=True, exist_ok=True)
    saved = PairManifest(manifest.entries, manifest.root)
    Path(out_dir / "manifest.json").write_text(saved.to_json())
    return manifest, pairs


def cmd_attack(cfg):
    if cfg["method"] not in cp.METHODS:
        raise InvalidConfig(f"method must be one of {cp.METHODS}")
    acfg = _attack_config(cfg)
    model = _load_model(cfg["model"], "completion")
    classifier = _load_model(cfg["classifier"], "classifier") if cfg["method"] == "classification" else None
    out = Path(cfg["output_dir"])
    _, pairs = _prepared_pairs(cfg["manifest"], model, out)
    kw = dict(method=cfg["method"], classifier=classifier, workers=cfg["workers"], with_emd=cfg["with_emd"])
    if cfg["sweep_field"]:
        if not cfg["sweep_values"]:
            raise InvalidConfig("sweep_values must be nonempty when sweep_field is set")
        for v in cfg["sweep_values"]:
            replace(acfg, **{cfg["sweep_field"]: v}).validate()
        paths = cp.sweep(model, pairs, acfg, cfg["sweep_field"], cfg["sweep_values"], out, **kw)
        return {"campaigns": [str(p) for p in paths.values()]}
    cp.run_campaign(model, pairs, acfg, out / "campaign.csv", adv_dir=out / "adv", **kw)
    return {"campaigns": [str(out / "campaign.csv")]}


def cmd_defend(cfg):
    base = DefenseConfig(**_sub(cfg, DefenseConfig)).validate()
    model = _load_model(cfg["model"], "completion")
    manifest = _load_manifest(cfg["manifest"])
    pairs = cp.load_pairs(manifest)
    advs = cp.load_adversarials(cfg["adversarial_dir"], pairs)
    grid = {
        "srs": ("srs_drop_rate", tuple(float(v) for v in cfg["srs_drop_rates"])),
        "or": ("or_threshold", tuple(float(v) for v in cfg["or_thresholds"])),
        "sor_k": ("sor_k", tuple(int(v) for v in cfg["sor_ks"])),
        "sor_alpha": ("sor_alpha", tuple(float(v) for v in cfg["sor_alphas"])),
    }
    for param, values in grid.values():
        for v in values:
            replace(base, **{param: v}).validate()
    out = Path(cfg["output_dir"])
    rows = cp.defense_sweep(model, pairs, advs, out / "defense.csv", base, grid)
    _dump(out / "defense_summary.json", cp.defense_summary(rows))
    return {"defense_csv": str(out / "defense.csv"), "rows": len(rows)}


def cmd_report(cfg):
    if not cfg["campaigns"]:
        raise InvalidConfig("report needs at least one campaign CSV")
    for p in cfg["campaigns"]:
        if not Path(p).exists():
            raise DataError(f"campaign file not found: {p}")
    out = Path(cfg["output_dir"])
    report = cp.write_report(cfg["campaigns"], out, cfg["defense_csv"] or None)
    semantic_keys = ("manifest", "model", "classifier", "adversarial_dir")
    if any(cfg[k] for k in semantic_keys):
        missing = [k for k in semantic_keys if not cfg[k]]
        if missing:
            raise InvalidConfig(f"semantic evaluation also needs {missing}")
        model = _load_model(cfg["model"], "completion")
        classifier = _load_model(cfg["classifier"], "classifier")
        pairs = cp.load_pairs(_load_manifest(cfg["manifest"]))
        advs = cp.load_adversarials(cfg["adversarial_dir"], pairs)
        clean, adv = cp.semantic_accuracy(model, classifier, pairs, advs)
        report["semantic"] = {"clean_accuracy": clean, "adversarial_accuracy": adv}
        _dump(out / "report.json", report)
    return {"report": str(out / "report.json")}


def cmd_transfer(cfg):
    if len(cfg["models"]) < 2:
        raise InvalidConfig("transfer needs at least two models")
    acfg = _attack_config(cfg)
    models = {name: _load_model(path, "completion") for name, path in sorted(cfg["models"].items())}
    out = Path(cfg["output_dir"])
    manifest = _load_manifest(cfg["manifest"])
    base_pairs = cp.load_pairs(manifest)
    advs = {}
    for name, model in models.items():
        pairs = [replace(p, t_nre_denominator=None, s_nre_denominator=None) for p in base_pairs]
        cp.attach_denominators(PairManifest([replace(e, t_nre_denominator=None, s_nre_denominator=None)
                                             for e in manifest.entries]), pairs, model)
        cp.run_campaign(model, pairs, acfg, out / f"{name}.csv", adv_dir=out / f"{name}_adv",
                        workers=cfg["workers"])
        advs[name] = cp.load_adversarials(out / f"{name}_adv", pairs)
    matrix = cp.transfer_matrix(models, base_pairs, advs)
    rows = [{"crafted_on": s, "evaluated_on": d, "mean_t_re": v} for s, row in matrix.items() for d, v in row.items()]
    cp._write_rows(out / "transfer.csv", ["crafted_on", "evaluated_on", "mean_t_re"], rows)
    _dump(out / "transfer.json", matrix)
    return {"transfer_csv": str(out / "transfer.csv")}


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "train-classifier": cmd_train_classifier,
    "attack": cmd_attack,
    "defend": cmd_defend,
    "report": cmd_report,
    "transfer": cmd_transfer,
}

CONFIG_ERRORS = (InvalidConfig, InvalidParam, InvalidSpec)
DATA_ERRORS = (DataError, ParseError, VersionMismatch, EmptyDataset, TooFewClasses, FileNotFoundError)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        summary = HANDLERS[args.command](cfg)
    except CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (PointCAError, RuntimeError, ArithmeticError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
