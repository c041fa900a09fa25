"""Command-line front end.

Subcommands: restructure, pretrain, finetune, generate, evaluate, privacy,
oracle-make. Every run that succeeds writes a manifest (resolved
configuration, fingerprints, wall-clock timings, sha256 of every emitted
file) atomically next to its outputs. Exit codes: 0 success, 1 usage or
validation failure, 2 runtime failure. Seeds are explicit flags; nothing is
seeded from the clock. ``POPSYNTH_REPORT_DIR`` overrides the default output
directory of ``evaluate`` and ``privacy`` only.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from . import evaluation, generation, oracle, training, vae
from .schema import (
    DataError,
    SchemaError,
    empirical_marginals,
    encode_onehot,
    load_microdata,
    load_schema,
    load_target_marginals,
    restructure,
    write_encoded,
    write_restructured,
    write_schema,
    write_target_marginals,
)

REPORT_DIR_ENV = "POPSYNTH_REPORT_DIR"


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage().rstrip()}")


# ---------------------------------------------------------------------------
# helpers


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_json_atomic(payload: dict, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _write_manifest(path, subcommand, config, outputs, started, fingerprints=None):
    manifest = {
        "subcommand": subcommand,
        "toolkit_version": __version__,
        "config": config,
        "fingerprints": fingerprints or {},
        "started_unix": started,
        "finished_unix": time.time(),
        "duration_s": time.time() - started,
        "outputs": {os.path.basename(p): _sha256(p) for p in outputs},
    }
    _write_json_atomic(manifest, path)


def _config_dict(args) -> dict:
    return {
        k: v for k, v in sorted(vars(args).items()) if k != "func" and v is not None
    }


def _load_tables(args, schema):
    records = load_microdata(args.microdata_hh, args.microdata_p, schema)
    return restructure(records, schema)


def _train_config(args, **overrides) -> training.TrainConfig:
    fields = dict(
        epochs=args.epochs,
        initial_lr=args.lr,
        min_lr=args.min_lr,
        decay_start_epoch=args.decay_start,
        batch_size=getattr(args, "batch_size", None),
        seed=args.seed,
    )
    fields.update(overrides)
    return training.TrainConfig(**fields)


def _add_train_flags(p, epochs):
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--min-lr", type=float, default=1e-4, dest="min_lr")
    p.add_argument("--decay-start", type=int, default=1000, dest="decay_start")


# ---------------------------------------------------------------------------
# subcommands


def _cmd_restructure(args) -> int:
    started = time.time()
    schema = load_schema(args.schema)
    table = _load_tables(args, schema)
    os.makedirs(args.out_dir, exist_ok=True)
    out = os.path.join(args.out_dir, "restructured.csv")
    write_restructured(table, out)
    outputs = [out]
    if args.write_encoded:
        enc_path = os.path.join(args.out_dir, "encoded.csv")
        write_encoded(encode_onehot(table), table.schema, enc_path)
        outputs.append(enc_path)
    _write_manifest(
        os.path.join(args.out_dir, "manifest.json"),
        "restructure",
        _config_dict(args),
        outputs,
        started,
        {"schema": table.schema.fingerprint()},
    )
    return 0


def _cmd_pretrain(args) -> int:
    started = time.time()
    schema = load_schema(args.schema)
    table = _load_tables(args, schema)
    data = encode_onehot(table)
    widths = tuple(int(w) for w in args.hidden_widths.split(",")) if args.hidden_widths else None
    model = vae.init_model(
        table.schema, latent_dim=args.latent_dim, hidden_widths=widths, seed=args.seed
    )
    config = _train_config(
        args,
        reparam_mode=args.reparam_mode,
        kl_weight=args.kl_weight,
        focal_alpha=args.focal_alpha,
        focal_gamma=args.focal_gamma,
    )
    result = training.pretrain(model, data, config)
    vae.save_model(model, args.out)
    history_path = args.history or f"{args.out}.history.csv"
    training.write_history(
        history_path, training.PRETRAIN_HISTORY_COLUMNS, result.history
    )
    _write_manifest(
        f"{args.out}.manifest.json",
        "pretrain",
        _config_dict(args) | {"focal_alpha_used": result.focal_alpha},
        [args.out, history_path],
        started,
        {"schema": table.schema.fingerprint(), "model": model.checksum()},
    )
    return 0


def _cmd_finetune(args) -> int:
    started = time.time()
    model = vae.load_model(args.model)
    schema = load_schema(args.schema)
    if schema.fingerprint() != model.schema_fingerprint:
        raise DataError("schema does not match the model's schema fingerprint")
    table = _load_tables(args, schema)
    data = encode_onehot(table)
    targets = load_target_marginals(args.tract_marginals, table.schema)
    latent = training.init_latent(targets.n_households, model.latent_dim, args.seed)
    config = _train_config(
        args,
        w_marginal=args.w_marginal,
        w_dbce=args.w_dbce,
        w_normkl=args.w_normkl,
        softmin_temperature=args.temperature,
        dbce_subsample=args.dbce_subsample,
    )
    before = model.decoder_checksum()
    result = training.finetune(model, latent, targets, data, config)
    if model.decoder_checksum() != before:
        raise RuntimeError("decoder parameters changed during fine-tuning")
    training.save_latent(
        latent, args.out_latent, model.schema_fingerprint, model.checksum()
    )
    history_path = args.history or f"{args.out_latent}.history.csv"
    training.write_history(
        history_path, training.FINETUNE_HISTORY_COLUMNS, result.history
    )
    marg_path = f"{args.out_latent}.soft_marginals.json"
    _write_json_atomic(
        {
            "household": {k: list(v) for k, v in result.household_marginals.items()},
            "person": {k: list(v) for k, v in result.person_marginals.items()},
            "final_losses": result.final_losses,
        },
        marg_path,
    )
    _write_manifest(
        f"{args.out_latent}.manifest.json",
        "finetune",
        _config_dict(args),
        [args.out_latent, history_path, marg_path],
        started,
        {"schema": schema.fingerprint(), "model": model.checksum()},
    )
    return 0


def _cmd_generate(args) -> int:
    started = time.time()
    model = vae.load_model(args.model)
    schema = load_schema(args.schema)
    latent, _ = training.load_latent(args.latent)
    inventory = generation.generate_inventory(
        model,
        latent,
        schema,
        mode=args.mode,
        seed=args.seed,
        tract_id=args.tract_id,
        toolkit_version=__version__,
    )
    os.makedirs(args.out_dir, exist_ok=True)
    paths = generation.write_inventory(inventory, args.out_dir)
    outputs = list(paths.values())
    if args.rules:
        report = generation.sanity_check(inventory, generation.load_rules(args.rules))
        report_path = os.path.join(args.out_dir, "sanity_report.json")
        generation.write_sanity_report(report, report_path)
        outputs.append(report_path)
    _write_manifest(
        os.path.join(args.out_dir, "manifest.json"),
        "generate",
        _config_dict(args),
        outputs,
        started,
        {"schema": schema.fingerprint(), "model": model.checksum()},
    )
    return 0


def _report_dir(args) -> str:
    if args.out_dir:
        return args.out_dir
    env = os.environ.get(REPORT_DIR_ENV)
    if env:
        return env
    raise UsageError(f"--out-dir is required (or set {REPORT_DIR_ENV})")


def emit_histograms(summary_path, out_dir) -> list[str]:
    """One CSV per variable from an evaluate summary: category, microdata,
    synthetic and (when present) target proportions."""
    if not os.path.exists(summary_path):
        raise DataError(f"report {summary_path} does not exist")
    with open(summary_path, "r", encoding="utf-8") as fh:
        summary = json.load(fh)
    paths = []
    for name, entry in summary["variables"].items():
        path = os.path.join(out_dir, f"hist_{name}.csv")
        target = entry.get("target")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["category", "microdata", "synthetic", "target"])
            for i, cat in enumerate(entry["categories"]):
                writer.writerow(
                    [
                        cat,
                        f"{entry['microdata'][i]:.12g}",
                        f"{entry['synthetic'][i]:.12g}",
                        f"{target[i]:.12g}" if target is not None else "",
                    ]
                )
        paths.append(path)
    return paths


def _cmd_evaluate(args) -> int:
    started = time.time()
    schema = load_schema(args.schema)
    micro_records = load_microdata(args.microdata_hh, args.microdata_p, schema)
    syn_records = load_microdata(args.syn_hh, args.syn_p, schema)
    if schema.n_window is None:
        window = max(
            max((len(r.persons) for r in micro_records), default=1),
            max((len(r.persons) for r in syn_records), default=1),
        )
        schema = schema.with_n_window(window)
    micro = restructure(micro_records, schema)
    syn = restructure(syn_records, schema)
    targets = (
        load_target_marginals(args.tract_marginals, schema)
        if args.tract_marginals
        else None
    )
    report = evaluation.marginal_report(syn, micro, targets)
    joint = evaluation.joint_pair_metrics(syn, micro)

    out_dir = _report_dir(args)
    os.makedirs(out_dir, exist_ok=True)
    outputs = []

    report_path = os.path.join(out_dir, "marginals_report.csv")
    keys = sorted({k for row in report.rows.values() for k in row})
    with open(report_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variable", *keys])
        for name, row in report.rows.items():
            writer.writerow([name, *[f"{row[k]:.12g}" if k in row else "" for k in keys]])
        writer.writerow(["__mean__", *[f"{report.means[k]:.12g}" for k in keys]])
    outputs.append(report_path)

    for metric_name, values in (
        ("rmse", joint.rmse),
        ("kl", joint.kl),
        ("chi2_p", joint.p_value),
    ):
        path = os.path.join(out_dir, f"joint_{metric_name}.csv")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variable_a", "variable_b", metric_name])
            for (a, b), v in values.items():
                writer.writerow([a, b, f"{v:.12g}"])
        outputs.append(path)

    micro_marg = empirical_marginals(micro)
    syn_marg = empirical_marginals(syn)
    variables = {}
    for var in schema.household_vars + schema.person_vars:
        is_hh = var.name in schema.household_names
        cats = list(var.categories if is_hh else var.categories[:-1])
        pick = lambda m: (
            m.household_targets[var.name] if is_hh else m.person_targets[var.name]
        )
        variables[var.name] = {
            "categories": cats,
            "microdata": [float(v) for v in pick(micro_marg)],
            "synthetic": [float(v) for v in pick(syn_marg)],
            "target": [float(v) for v in pick(targets)] if targets else None,
            "metrics": report.rows[var.name],
        }
    summary = {
        "variables": variables,
        "means": report.means,
        "joint": {
            "rmse": {f"{a}|{b}": v for (a, b), v in joint.rmse.items()},
            "kl": {f"{a}|{b}": v for (a, b), v in joint.kl.items()},
            "chi2_p": {f"{a}|{b}": v for (a, b), v in joint.p_value.items()},
        },
        "n_households": {"microdata": micro.n_rows, "synthetic": syn.n_rows},
    }
    summary_path = os.path.join(out_dir, "summary.json")
    _write_json_atomic(summary, summary_path)
    outputs.append(summary_path)
    outputs.extend(emit_histograms(summary_path, out_dir))

    _write_manifest(
        os.path.join(out_dir, "manifest.json"),
        "evaluate",
        _config_dict(args),
        outputs,
        started,
        {"schema": schema.fingerprint()},
    )
    return 0


def _cmd_privacy(args) -> int:
    started = time.time()
    schema = load_schema(args.schema)
    micro_records = load_microdata(args.microdata_hh, args.microdata_p, schema)
    a_records = load_microdata(args.a_hh, args.a_p, schema)
    b_records = load_microdata(args.b_hh, args.b_p, schema)
    if schema.n_window is None:
        window = max(
            max(len(r.persons) for r in micro_records),
            max(len(r.persons) for r in a_records),
            max(len(r.persons) for r in b_records),
        )
        schema = schema.with_n_window(window)
    micro = restructure(micro_records, schema)
    inv_a = restructure(a_records, schema)
    inv_b = restructure(b_records, schema)

    out_dir = _report_dir(args)
    os.makedirs(out_dir, exist_ok=True)
    outputs = []
    summary = {"binned": args.binned, "bins": args.bins, "levels": {}}

    dist_path = os.path.join(out_dir, "dcr_distances.csv")
    rows = []
    for level in ("household", "person"):
        if level == "household":
            m = evaluation.household_matrix(micro)
            xa = evaluation.household_matrix(inv_a)
            xb = evaluation.household_matrix(inv_b)
        else:
            m = evaluation.person_level_matrix(micro)
            xa = evaluation.person_level_matrix(inv_a)
            xb = evaluation.person_level_matrix(inv_b)
        da = evaluation.dcr(xa, m)
        db = evaluation.dcr(xb, m)
        ks = evaluation.ks_test(da, db, binned=args.binned, bins=args.bins)
        summary["levels"][level] = {
            "ks_statistic": ks.statistic,
            "ks_p_value": ks.p_value,
            "a_mean": float(da.mean()),
            "b_mean": float(db.mean()),
            "a_n": int(da.size),
            "b_n": int(db.size),
        }
        rows.extend(
            [(level, "a", i, d) for i, d in enumerate(da)]
            + [(level, "b", i, d) for i, d in enumerate(db)]
        )
        lo = float(min(da.min(), db.min()))
        hi = float(max(da.max(), db.max()))
        edges = np.linspace(lo, hi if hi > lo else lo + 1e-12, args.bins + 1)
        hist_a, _ = np.histogram(da, bins=edges)
        hist_b, _ = np.histogram(db, bins=edges)
        hist_path = os.path.join(out_dir, f"dcr_histogram_{level}.csv")
        with open(hist_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_low", "bin_high", "count_a", "count_b"])
            for i in range(args.bins):
                writer.writerow(
                    [f"{edges[i]:.12g}", f"{edges[i + 1]:.12g}", hist_a[i], hist_b[i]]
                )
        outputs.append(hist_path)
    with open(dist_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["level", "inventory", "row", "distance"])
        for level, inv, i, d in rows:
            writer.writerow([level, inv, i, f"{d:.12g}"])
    outputs.append(dist_path)

    summary_path = os.path.join(out_dir, "privacy_summary.json")
    _write_json_atomic(summary, summary_path)
    outputs.append(summary_path)
    _write_manifest(
        os.path.join(out_dir, "manifest.json"),
        "privacy",
        _config_dict(args),
        outputs,
        started,
        {"schema": schema.fingerprint()},
    )
    return 0


def _parse_weights(text):
    if not text:
        return None
    out = {}
    for part in text.split(","):
        name, _, value = part.partition("=")
        if not value:
            raise UsageError(f"bad type weight {part!r}; expected name=weight")
        out[name.strip()] = float(value)
    return out


def _cmd_oracle_make(args) -> int:
    started = time.time()
    schema = oracle.desk_schema()
    records = oracle.sample_records(
        args.households, args.seed, _parse_weights(args.type_weights)
    )
    os.makedirs(args.out_dir, exist_ok=True)

    schema_path = os.path.join(args.out_dir, "schema.json")
    write_schema(schema, schema_path)
    hh_path = os.path.join(args.out_dir, "households.csv")
    p_path = os.path.join(args.out_dir, "persons.csv")
    with open(hh_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["household_id", *schema.household_names])
        for rec in records:
            writer.writerow([rec.household_id, *rec.values])
    with open(p_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["household_id", *schema.person_names])
        for rec in records:
            for person in rec.persons:
                writer.writerow([rec.household_id, *person])

    tract_weights = _parse_weights(args.tract_type_weights)
    targets = oracle.analytic_marginals(
        tract_weights if tract_weights is not None else oracle.SHIFTED_TYPE_WEIGHTS,
        n_households=args.tract_households,
    )
    tract_path = os.path.join(args.out_dir, "tract_marginals.csv")
    write_target_marginals(targets, schema, tract_path)

    rules_path = os.path.join(args.out_dir, "rules.json")
    generation.write_rules(oracle.desk_rules(), rules_path)

    _write_manifest(
        os.path.join(args.out_dir, "manifest.json"),
        "oracle-make",
        _config_dict(args),
        [schema_path, hh_path, p_path, tract_path, rules_path],
        started,
        {"schema": schema.fingerprint()},
    )
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    parser = _Parser(prog="popsynth", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def microdata_flags(p):
        p.add_argument("--schema", required=True)
        p.add_argument("--microdata-hh", required=True, dest="microdata_hh")
        p.add_argument("--microdata-p", required=True, dest="microdata_p")

    p = sub.add_parser("restructure", help="fold persons into household rows")
    microdata_flags(p)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--write-encoded", action="store_true", dest="write_encoded")
    p.set_defaults(func=_cmd_restructure)

    p = sub.add_parser("pretrain", help="fit the autoencoder to microdata")
    microdata_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    _add_train_flags(p, epochs=4000)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--latent-dim", type=int, default=vae.DEFAULT_LATENT_DIM, dest="latent_dim")
    p.add_argument(
        "--hidden-widths",
        default=None,
        dest="hidden_widths",
        help="six comma-separated encoder widths; decoder mirrors them",
    )
    p.add_argument(
        "--reparam-mode",
        choices=["paper-literal", "standard"],
        default="paper-literal",
        dest="reparam_mode",
    )
    p.add_argument("--kl-weight", type=float, default=1.0, dest="kl_weight")
    p.add_argument("--focal-gamma", type=float, default=2.0, dest="focal_gamma")
    p.add_argument("--focal-alpha", type=float, default=None, dest="focal_alpha")
    p.add_argument("--history", default=None)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("finetune", help="fit a latent matrix to tract marginals")
    microdata_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--tract-marginals", required=True, dest="tract_marginals")
    p.add_argument("--out-latent", required=True, dest="out_latent")
    p.add_argument("--seed", type=int, required=True)
    _add_train_flags(p, epochs=4000)
    p.add_argument("--w-marginal", type=float, default=1.0, dest="w_marginal")
    p.add_argument("--w-dbce", type=float, default=1.0, dest="w_dbce")
    p.add_argument("--w-normkl", type=float, default=0.1, dest="w_normkl")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--dbce-subsample", type=int, default=None, dest="dbce_subsample")
    p.add_argument("--history", default=None)
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("generate", help="decode a latent matrix into an inventory")
    p.add_argument("--model", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--latent", required=True)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--mode", choices=["argmax", "sample"], default="argmax")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--tract-id", default=None, dest="tract_id")
    p.add_argument("--rules", default=None)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("evaluate", help="fidelity report: synthetic vs microdata")
    microdata_flags(p)
    p.add_argument("--syn-hh", required=True, dest="syn_hh")
    p.add_argument("--syn-p", required=True, dest="syn_p")
    p.add_argument("--tract-marginals", default=None, dest="tract_marginals")
    p.add_argument("--out-dir", default=None, dest="out_dir")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("privacy", help="DCR distributions of two inventories")
    microdata_flags(p)
    p.add_argument("--a-hh", required=True, dest="a_hh")
    p.add_argument("--a-p", required=True, dest="a_p")
    p.add_argument("--b-hh", required=True, dest="b_hh")
    p.add_argument("--b-p", required=True, dest="b_p")
    p.add_argument("--out-dir", default=None, dest="out_dir")
    p.add_argument("--binned", action="store_true")
    p.add_argument("--bins", type=int, default=20)
    p.set_defaults(func=_cmd_privacy)

    p = sub.add_parser("oracle-make", help="desk-scale ground-truth dataset")
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--households", type=int, default=2000)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--tract-households", type=int, default=400, dest="tract_households")
    p.add_argument("--type-weights", default=None, dest="type_weights")
    p.add_argument(
        "--tract-type-weights", default=None, dest="tract_type_weights"
    )
    p.set_defaults(func=_cmd_oracle_make)

    return parser


def run(argv) -> int:
    """Execute one subcommand; returns the process exit code."""
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (UsageError, SchemaError, DataError, vae.ModelFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (training.TrainingDivergedError, OSError, RuntimeError, ValueError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


def main(argv=None) -> None:
    sys.exit(run(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
