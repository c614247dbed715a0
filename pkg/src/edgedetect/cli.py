"""Command-line experiment runner.

Usage::

    edgedetect <command> [--config FILE] [--out DIR] [--set section.key=value ...]

Commands: prep, train-central, fed, ablate, attack, bench-crypto.

Every run writes into its output directory:

* ``config.ini``   fully resolved configuration (rerunning it reproduces
                   every number in ``summary.csv``)
* ``seeds.json``   seed manifest
* ``status.json``  ``incomplete`` while running, then ``complete`` or ``failed``
* ``summary.csv``  fixed column order per command (see ``SUMMARY_COLUMNS``)
* ``rounds.jsonl`` per-round statistics (federated commands)

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import itertools
import json
import logging
import math
import re
import sys
import time
import traceback
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import crypto, dataio, features, fed, privacy, smartify
from . import model as mdl

log = logging.getLogger("edgedetect")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
BALANCE = ("none", "undersample", "smote", "adaptive")
COMMANDS = ("prep", "train-central", "fed", "ablate", "attack", "bench-crypto")


class ConfigError(Exception):
    pass


# --------------------------------------------------------------------------
# configuration schema


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text: str):
    return None if text.strip() in ("", "none") else int(text)


def _ints(text: str) -> tuple:
    return tuple(int(t) for t in re.split(r"[,\s]+", text.strip()) if t)


def _show(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


# section -> key -> (parser, default)
SCHEMA = {
    "data": {
        "source": (str, "synthetic"),
        "label_column": (str, "Label"),
        "n_rows": (int, 20000),
        "n_classes": (int, 7),
        "n_features": (int, 20),
        "separation": (float, 1.0),
        "noise_frac": (float, 0.15),
        "heavy_tail_df": (float, 3.0),
        "latent_dim": (_opt_int, None),
        "data_seed": (int, 0),
        "sample_fraction": (float, 1.0),
        "test_fraction": (float, 0.2),
        "split_seed": (int, 42),
    },
    "preprocess": {
        "impute": (_bool, True),
        "standardize": (_bool, True),
        "pca": (_bool, True),
        "pca_variance": (float, 0.993),
        "pca_batch": (int, 1000),
        "balance": (str, "smote"),
        "smote_k": (int, 5),
    },
    "model": {
        "arch": (str, "logistic"),
        "hidden": (_ints, (128, 64)),
        "epochs": (int, 5),
        "batch_size": (int, 32),
        "learning_rate": (float, 0.01),
        "enet_alpha": (float, 0.01),
        "enet_rho": (float, 0.5),
        "dropout": (float, 0.5),
        "early_stop_patience": (int, 10),
    },
    "fed": {
        "algorithm": (str, "edgedetect"),
        "K": (int, 10),
        "participation": (float, 1.0),
        "rounds_max": (int, 50),
        "global_step": (float, 0.01),
        "momentum": (float, 0.9),
        "prox_mu": (float, 0.01),
        "mode": (str, "signed_median"),
        "smartify": (_bool, True),
        "encrypt": (_bool, True),
        "full_precision_encrypt": (_bool, False),
        "batch_crypto": (_bool, True),
        "key_bits": (int, 2048),
        "dp": (_bool, True),
        "clip_C": (float, 0.1),
        "sigma": (float, 0.01),
        "partition": (str, "iid"),
        "dirichlet_alpha": (float, 0.5),
        "stop_at_target": (_bool, True),
        "target95": (float, 0.95),
        "target98": (float, 0.98),
    },
    "attack": {
        "trials": (int, 20),
        "steps": (int, 500),
        "aggregate_clients": (int, 10),
    },
    "bench": {
        "bits": (_ints, (512, 1024, 2048)),
        "repeats": (int, 5),
    },
    "run": {
        "seeds": (_ints, (0, 1, 2, 3, 4)),
    },
}


def _line_of(text: str, section: str, key: str) -> int | None:
    cur = None
    for i, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        m = re.match(r"\[(.+)\]$", s)
        if m:
            cur = m.group(1).strip()
            continue
        if cur == section and re.match(rf"{re.escape(key)}\s*[=:]", s, re.IGNORECASE):
            return i
    return None


@dataclass
class ExperimentConfig:
    values: dict

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    # -- builders -----------------------------------------------------------

    def synthetic_spec(self) -> dataio.SyntheticSpec:
        d = self["data"]
        return dataio.SyntheticSpec(
            n_rows=d["n_rows"], n_classes=d["n_classes"], heavy_tail_df=d["heavy_tail_df"],
            seed=d["data_seed"], n_features=d["n_features"], separation=d["separation"],
            noise_frac=d["noise_frac"], latent_dim=d["latent_dim"])

    def train_config(self, seed: int = 0) -> mdl.TrainConfig:
        m = self["model"]
        return mdl.TrainConfig(epochs=m["epochs"], batch_size=m["batch_size"], learning_rate=m["learning_rate"],
                               enet_alpha=m["enet_alpha"], enet_rho=m["enet_rho"], dropout=m["dropout"],
                               early_stop_patience=m["early_stop_patience"], seed=seed)

    def arch(self, d: int, n_classes: int) -> mdl.Arch:
        m = self["model"]
        return mdl.logistic(d, n_classes) if m["arch"] == "logistic" else mdl.mlp(d, n_classes, m["hidden"])

    def dp_config(self) -> privacy.DPConfig | None:
        f = self["fed"]
        return privacy.DPConfig(f["clip_C"], f["sigma"]) if f["dp"] else None

    def fed_config(self) -> fed.FedConfig:
        f = self["fed"]
        return fed.FedConfig(
            algorithm=f["algorithm"], K=f["K"], participation=f["participation"], rounds_max=f["rounds_max"],
            global_step=f["global_step"], momentum=f["momentum"], train=self.train_config(),
            prox_mu=f["prox_mu"], mode=f["mode"], smartify=f["smartify"], encrypt=f["encrypt"],
            batch_crypto=f["batch_crypto"], key_bits=f["key_bits"], dp=self.dp_config(),
            targets=(f["target95"], f["target98"]), stop_at_target=f["stop_at_target"])

    def partition_plan(self) -> fed.PartitionPlan:
        f = self["fed"]
        return fed.PartitionPlan(f["partition"], f["K"], self["data"]["data_seed"], f["dirichlet_alpha"])

    def with_values(self, **sections) -> "ExperimentConfig":
        vals = {s: dict(v) for s, v in self.values.items()}
        for s, kv in sections.items():
            vals[s].update(kv)
        cfg = ExperimentConfig(vals)
        cfg.validate()
        return cfg

    # -- validation and echo -------------------------------------------------

    def validate(self) -> None:
        d, p, m, f = self["data"], self["preprocess"], self["model"], self["fed"]
        if p["balance"] not in BALANCE:
            raise ConfigError(f"[preprocess] balance: must be one of {BALANCE}, got {p['balance']!r}")
        if m["arch"] not in ("logistic", "mlp"):
            raise ConfigError(f"[model] arch: must be logistic or mlp, got {m['arch']!r}")
        if f["algorithm"] not in fed.ALGORITHMS:
            raise ConfigError(f"[fed] algorithm: must be one of {fed.ALGORITHMS}, got {f['algorithm']!r}")
        if f["partition"] not in fed.STRATEGIES:
            raise ConfigError(f"[fed] partition: must be one of {fed.STRATEGIES}, got {f['partition']!r}")
        if f["algorithm"] == "edgedetect" and f["encrypt"] and not f["smartify"] and not f["full_precision_encrypt"]:
            raise ConfigError("[fed] encrypt: encrypting full-precision updates requires full_precision_encrypt = true")
        if not 0 < d["sample_fraction"] <= 1:
            raise ConfigError("[data] sample_fraction: must lie in (0, 1]")
        if not 0 < d["test_fraction"] < 1:
            raise ConfigError("[data] test_fraction: must lie in (0, 1)")
        if not self["run"]["seeds"]:
            raise ConfigError("[run] seeds: at least one seed is required")
        try:
            self.fed_config()
            self.train_config()
            self.synthetic_spec().validate() if d["source"] == "synthetic" else None
            self.dp_config()
        except (ValueError, fed.FedError) as exc:
            raise ConfigError(str(exc)) from None

    def echo(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        for section, keys in SCHEMA.items():
            cp[section] = {k: _show(self.values[section][k]) for k in keys}
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in cp[section].items()]
            lines.append("")
        return "\n".join(lines)


def parse_config(text: str = "", overrides=()) -> ExperimentConfig:
    """Parse INI text plus ``section.key=value`` overrides against ``SCHEMA``."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    raw = {s: {} for s in SCHEMA}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, val in cp[section].items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"[{section}] unknown key {key!r} (line {_line_of(text, section, key)})")
            raw[section][key] = (val, _line_of(text, section, key))
    for item in overrides:
        lhs, sep, val = item.partition("=")
        section, dot, key = lhs.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {lhs.strip()!r} in override")
        raw[section][key] = (val, None)
    values = {}
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (parse, default) in keys.items():
            if key in raw[section]:
                text_val, line = raw[section][key]
                try:
                    values[section][key] = parse(text_val)
                except ValueError as exc:
                    where = f" (line {line})" if line else ""
                    raise ConfigError(f"[{section}] {key}{where}: {exc}") from None
            else:
                values[section][key] = default
    cfg = ExperimentConfig(values)
    cfg.validate()
    return cfg


def load_config(path, overrides=()) -> ExperimentConfig:
    try:
        text = Path(path).read_text() if path else ""
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text, overrides)


# --------------------------------------------------------------------------
# data pipeline


@dataclass
class Prepared:
    train: dataio.Dataset
    test: dataio.Dataset
    info: dict
    scaler: features.Scaler | None = None
    pca: features.PCAModel | None = None


def prepare(cfg: ExperimentConfig, pca: bool | None = None, balance: str | None = None) -> Prepared:
    """Load, sample, impute, split, standardize, reduce and rebalance.

    Scaler, PCA and rebalancing are fitted on the training split only.
    """
    d, p = cfg["data"], cfg["preprocess"]
    pca = p["pca"] if pca is None else pca
    balance = p["balance"] if balance is None else balance
    if d["source"] == "synthetic":
        ds = dataio.generate_synthetic(cfg.synthetic_spec())
    else:
        ds = dataio.load_csv(d["source"], d["label_column"])
    info = {"rows_loaded": ds.n_rows, "features_loaded": ds.n_features}
    if d["sample_fraction"] < 1.0:
        sample = dataio.stratified_sample(ds, d["sample_fraction"], d["data_seed"])
        ks = dataio.ks_validate(ds, sample)
        info["ks_rejections"] = ks.rejections
        ds = sample
    if p["impute"]:
        rep = dataio.ImputeReport()
        ds = dataio.impute_median(ds, rep)
        info["imputed_cells"] = rep.replaced
    train, test = dataio.train_test_split(ds, d["test_fraction"], d["split_seed"])
    scaler = pca_model = None
    if p["standardize"]:
        scaler = features.fit_standardize(train)
        train, test = features.apply_standardize(train, scaler), features.apply_standardize(test, scaler)
    if pca:
        pca_model = features.fit_incremental_pca(train, p["pca_batch"], p["pca_variance"])
        train, test = features.transform_pca(train, pca_model), features.transform_pca(test, pca_model)
        info["pca_k"] = pca_model.k
        info["pca_variance_retained"] = pca_model.variance_retained
    if balance == "undersample":
        train = features.undersample(train, d["data_seed"])
    elif balance in ("smote", "adaptive"):
        mode = "uniform" if balance == "smote" else "adaptive"
        train = features.smote(train, features.SmoteConfig(p["smote_k"], mode, None, d["data_seed"]))
    info.update(train_rows=train.n_rows, test_rows=test.n_rows, n_features=train.n_features,
                train_class_counts=train.class_counts().tolist(), test_class_counts=test.class_counts().tolist())
    return Prepared(train, test, info, scaler, pca_model)


# --------------------------------------------------------------------------
# outputs


SUMMARY_COLUMNS = {
    "prep": ("train_rows", "test_rows", "n_features", "pca_k", "pca_variance_retained", "ks_rejections"),
    "train-central": ("seed", "accuracy", "macro_f1", "macro_precision", "macro_recall", "kappa"),
    "fed": fed.TABLE_COLUMNS,
    "ablate": ("smartify", "encrypt", "dp", "pca", "smote", "acc", "acc_std", "f1", "delta_acc",
               "comm_per_round_MB", "ratio", "total_GB", "psnr_db", "label_recovery"),
    "attack": ("trials", "psnr_full_db", "psnr_binarized_db", "psnr_gap_db", "label_recovery_full",
               "label_recovery_binarized", "label_recovery_aggregate"),
    "bench-crypto": ("bits", "keygen_s", "encrypt_ms", "he_add_ms", "decrypt_ms", "backend"),
}


def _cell(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return "" if v is None else v


def write_summary(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({c: _cell(r.get(c)) for c in columns})


class RunDir:
    def __init__(self, out: Path, cfg: ExperimentConfig, command: str):
        self.path = Path(out)
        self.path.mkdir(parents=True, exist_ok=True)
        (self.path / "config.ini").write_text(cfg.echo())
        (self.path / "seeds.json").write_text(json.dumps({"command": command, "seeds": list(cfg["run"]["seeds"]),
                                                          "data_seed": cfg["data"]["data_seed"],
                                                          "split_seed": cfg["data"]["split_seed"]}, indent=1))
        self.status("incomplete")

    def status(self, state: str, **extra) -> None:
        (self.path / "status.json").write_text(json.dumps({"status": state, **extra}))

    def file(self, name: str) -> Path:
        return self.path / name


# --------------------------------------------------------------------------
# commands


def cmd_prep(cfg: ExperimentConfig, run: RunDir) -> None:
    prep = prepare(cfg)
    if prep.scaler is not None:
        features.save_artifact(prep.scaler, run.file("scaler.json"))
    if prep.pca is not None:
        features.save_artifact(prep.pca, run.file("pca.json"))
    (run.file("prep.json")).write_text(json.dumps(prep.info, indent=1, sort_keys=True))
    write_summary(run.file("summary.csv"), SUMMARY_COLUMNS["prep"], [prep.info])


def cmd_train_central(cfg: ExperimentConfig, run: RunDir) -> None:
    prep = prepare(cfg)
    arch = cfg.arch(prep.train.n_features, prep.train.n_classes)
    rows = []
    for seed in cfg["run"]["seeds"]:
        m = mdl.train_centralized(arch, prep.train, cfg.train_config(seed), seed)
        met = mdl.evaluate(m, prep.test)
        rows.append({"seed": seed, "accuracy": met.accuracy, "macro_f1": met.macro_f1,
                     "macro_precision": met.macro_precision, "macro_recall": met.macro_recall, "kappa": met.kappa})
        mdl.save_checkpoint(m, run.file(f"model_seed{seed}.ckpt"))
    write_summary(run.file("summary.csv"), SUMMARY_COLUMNS["train-central"], rows)


def _fed_report(cfg: ExperimentConfig, prep: Prepared, rounds_path: Path) -> fed.ExperimentReport:
    fcfg = cfg.fed_config()
    arch = cfg.arch(prep.train.n_features, prep.train.n_classes)
    with open(rounds_path, "w") as fh:
        def on_round(seed, st):
            fh.write(json.dumps(fed._jsonable({"seed": seed, **st.to_dict()}), sort_keys=True) + "\n")
            fh.flush()

        return fed.run_experiment(fcfg, arch, prep.train, prep.test, cfg.partition_plan(),
                                  cfg["run"]["seeds"], on_round=on_round)


def cmd_fed(cfg: ExperimentConfig, run: RunDir) -> None:
    prep = prepare(cfg)
    rep = _fed_report(cfg, prep, run.file("rounds.jsonl"))
    fed.write_table([rep], run.file("summary.csv"))
    detail = {"summary": rep.summary(), "runs": [
        {"seed": r.seed, "reference_accuracy": r.reference_accuracy, "initial_accuracy": r.initial_accuracy,
         "r95": r.r95, "r98": r.r98, "final_accuracy": r.final_accuracy, "final_f1": r.final_f1,
         "rounds_run": len(r.rounds)} for r in rep.runs]}
    run.file("report.json").write_text(json.dumps(fed._jsonable(detail), indent=1, sort_keys=True))


def cell_attack(cfg: ExperimentConfig, m: mdl.ModelParams, test: dataio.Dataset, smartify_on: bool, dp_on: bool,
                encrypt_on: bool, seed: int) -> tuple[float, float]:
    """Single-sample inversion against what the server observes in one ablation cell.

    The target's gradient goes through DP (if on) and binarization (if
    on). With encryption the server only sees the mean over
    ``aggregate_clients`` such updates.
    """
    a = cfg["attack"]
    rng = np.random.default_rng([seed, 7])
    dp = cfg.dp_config() if dp_on else None
    n_agg = a["aggregate_clients"] if encrypt_on else 1
    psnrs, recs = [], []
    for t in range(a["trials"]):
        idx = rng.choice(test.n_rows, size=n_agg, replace=False)
        views = []
        for j, i in enumerate(idx):
            g = privacy.sample_gradient(m, test.features[i:i + 1], test.labels[i:i + 1])
            if dp is not None:
                g = privacy.dp_sanitize(g, dp, fed.derive_seed(seed, t, j))
            views.append(smartify.binarize(g).unpack() if smartify_on else g)
        obs = np.mean(views, axis=0)
        if smartify_on:
            obs = smartify.binarize(obs)
        x, y = test.features[idx[0]:idx[0] + 1], test.labels[idx[0]:idx[0] + 1]
        _, _, rep = privacy.invert_gradient(obs, m, x.shape, a["steps"], fed.derive_seed(seed, t),
                                            x_true=x, y_true=y)
        psnrs.append(rep.psnr_db)
        recs.append(rep.label_recovery_rate)
    return privacy.mean_psnr(psnrs), float(np.mean(recs))


def cmd_ablate(cfg: ExperimentConfig, run: RunDir) -> None:
    cells_dir = run.file("cells")
    cells_dir.mkdir(exist_ok=True)
    rows = []
    preps = {}
    for smart, enc, dp, pca, smote in itertools.product((True, False), repeat=5):
        balance = cfg["preprocess"]["balance"] if smote else "undersample"
        if smote and balance in ("none", "undersample"):
            balance = "smote"
        key = (pca, balance)
        if key not in preps:
            preps[key] = prepare(cfg, pca=pca, balance=balance)
        prep = preps[key]
        cell = cfg.with_values(fed={"algorithm": "edgedetect", "smartify": smart, "encrypt": enc, "dp": dp,
                                    "full_precision_encrypt": True})
        name = "cell_" + "".join("1" if b else "0" for b in (smart, enc, dp, pca, smote))
        rep = _fed_report(cell, prep, cells_dir / f"{name}.jsonl")
        s = rep.summary()
        arch = cell.arch(prep.train.n_features, prep.train.n_classes)
        final = mdl.ModelParams(arch, rep.runs[0].final_W)
        psnr_db, rec = cell_attack(cell, final, prep.test, smart, dp, enc, cfg["run"]["seeds"][0])
        rows.append({"smartify": smart, "encrypt": enc, "dp": dp, "pca": pca, "smote": smote,
                     "acc": s["acc_mean"], "acc_std": s["acc_std"], "f1": s["f1_mean"],
                     "comm_per_round_MB": s["comm_per_round_MB"],
                     "ratio": 32 * arch.n_params / cell.fed_config().logical_bits_per_client(arch.n_params),
                     "total_GB": s["total_GB_mean"],
                     "psnr_db": psnr_db, "label_recovery": rec})
    full = rows[0]["acc"]
    for r in rows:
        r["delta_acc"] = r["acc"] - full
    write_summary(run.file("summary.csv"), SUMMARY_COLUMNS["ablate"], rows)


def cmd_attack(cfg: ExperimentConfig, run: RunDir) -> None:
    prep = prepare(cfg)
    arch = cfg.arch(prep.train.n_features, prep.train.n_classes)
    a = cfg["attack"]
    seed = cfg["run"]["seeds"][0]
    m = mdl.train_centralized(arch, prep.train, cfg.train_config(seed), seed)
    rng = np.random.default_rng([seed, 11])
    full, binr = [], []
    with open(run.file("attack.jsonl"), "w") as fh:
        for t in range(a["trials"]):
            i = int(rng.integers(prep.test.n_rows))
            f_rep, b_rep = privacy.paired_attack(m, prep.test.features[i:i + 1], prep.test.labels[i:i + 1],
                                                 a["steps"], fed.derive_seed(seed, t))
            full.append(f_rep)
            binr.append(b_rep)
            fh.write(f_rep.to_json() + "\n")
            fh.write(b_rep.to_json() + "\n")
    agg = privacy.aggregate_label_recovery(a["trials"], a["aggregate_clients"], prep.train.n_classes,
                                           prep.train.n_features, cfg["model"]["batch_size"], seed)
    pf = privacy.mean_psnr([r.psnr_db for r in full])
    pb = privacy.mean_psnr([r.psnr_db for r in binr])
    row = {"trials": a["trials"], "psnr_full_db": pf, "psnr_binarized_db": pb, "psnr_gap_db": pf - pb,
           "label_recovery_full": float(np.mean([r.label_recovery_rate for r in full])),
           "label_recovery_binarized": float(np.mean([r.label_recovery_rate for r in binr])),
           "label_recovery_aggregate": agg}
    write_summary(run.file("summary.csv"), SUMMARY_COLUMNS["attack"], [row])


def bench_crypto(bits: int, repeats: int, seed: int = 0) -> dict:
    t0 = time.perf_counter()
    kp = crypto.keygen(bits, seed=seed)
    t_key = time.perf_counter() - t0
    nonces = crypto.NonceSource(seed)
    pk, sk = kp.public, kp.secret
    ms = [nonces.randrange(0, pk.n) for _ in range(repeats)]
    t0 = time.perf_counter()
    cts = [crypto.encrypt(pk, m, nonces) for m in ms]
    t_enc = (time.perf_counter() - t0) / repeats
    t0 = time.perf_counter()
    acc = cts[0]
    for c in cts[1:] or cts:
        acc = crypto.he_add(pk, acc, c)
    t_add = (time.perf_counter() - t0) / max(1, len(cts) - 1)
    t0 = time.perf_counter()
    for c in cts:
        crypto.decrypt(sk, c)
    t_dec = (time.perf_counter() - t0) / repeats
    return {"bits": bits, "keygen_s": t_key, "encrypt_ms": 1e3 * t_enc, "he_add_ms": 1e3 * t_add,
            "decrypt_ms": 1e3 * t_dec, "backend": crypto.BIGINT_BACKEND}


def cmd_bench_crypto(cfg: ExperimentConfig, run: RunDir) -> None:
    b = cfg["bench"]
    rows = [bench_crypto(bits, b["repeats"], cfg["run"]["seeds"][0]) for bits in b["bits"]]
    write_summary(run.file("summary.csv"), SUMMARY_COLUMNS["bench-crypto"], rows)


HANDLERS = {
    "prep": cmd_prep,
    "train-central": cmd_train_central,
    "fed": cmd_fed,
    "ablate": cmd_ablate,
    "attack": cmd_attack,
    "bench-crypto": cmd_bench_crypto,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="edgedetect", description="Federated intrusion-detection experiments")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", "-c", help="INI configuration file (defaults apply when omitted)")
    ap.add_argument("--out", "-o", default="runs/latest", help="output directory")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                    help="override one configuration value (repeatable)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    run = RunDir(Path(args.out), cfg, args.command)
    t0 = time.perf_counter()
    try:
        HANDLERS[args.command](cfg, run)
    except Exception as exc:  # noqa: BLE001 - reported through the exit code
        run.status("failed", error=f"{type(exc).__name__}: {exc}")
        log.debug("%s", traceback.format_exc())
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    run.status("complete", seconds=round(time.perf_counter() - t0, 3))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
