"""Command-line entry point: ``cldd generate | train | eval | predict | analyze``.

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import tomli

from . import checkpoint
from .analysis import discrepancy_rank, export_embeddings, write_discrepancy_csv
from .data import DataError, load_dataset, synth_generate, write_synthetic
from .evaluation import case_report, evaluate, write_case_report
from .model import ConfigError, ModelConfig, PropagationGraph, final_embeddings, forward, init_state
from .training import TrainConfig, TrainingDiverged, fit, write_log

log = logging.getLogger("cldd")

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "out": ".",
    # generate
    "patients": 300,
    "diseases": 150,
    "rank": 8,
    "density": 0.05,
    "confound": False,
    # data
    "data": None,
    "max_diseases": 2000,
    "split_ratio": 0.8,
    # model
    "k": 64,
    "f": 43,
    "layers": 3,
    "hops": 3,
    "layer_dim": 64,
    "dropout": 0.1,
    "leaky_slope": 0.2,
    # training
    "epochs": 30,
    "lr": 1e-3,
    "batch_size": 1024,
    "reg": 1e-5,
    "reg_scope": "all",
    "negatives": 1,
    "adam_beta1": 0.9,
    "adam_beta2": 0.999,
    "adam_eps": 1e-8,
    "checkpoint_every": 0,
    # eval / predict / analyze
    "checkpoint": None,
    "k_eval": 20,
    "baseline": None,
    "patient": None,
    "top": 50,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _global_flags(parser, suppress: bool):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="flat key = value TOML file")
    parser.add_argument("--seed", type=int, default=default)
    parser.add_argument("--threads", type=int, default=default)
    parser.add_argument("--out", default=default, help="output directory")


def _data_flags(p):
    p.add_argument("--data", help="directory with interactions.csv and demographics.csv (default: --out)")
    p.add_argument("--max-diseases", type=int, dest="max_diseases")
    p.add_argument("--split-ratio", type=float, dest="split_ratio")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cldd", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a planted synthetic dataset")
    _global_flags(g, suppress=True)
    g.add_argument("--patients", type=int)
    g.add_argument("--diseases", type=int)
    g.add_argument("--rank", type=int)
    g.add_argument("--density", type=float)
    g.add_argument("--confound", action="store_const", const=True)

    t = sub.add_parser("train", help="fit CLDD and write checkpoint.json and train_log.csv")
    _global_flags(t, suppress=True)
    _data_flags(t)
    t.add_argument("--k", type=int, help="embedding width (default 64)")
    t.add_argument("--f", type=int, help="fixed attribute width (default 43)")
    t.add_argument("--layers", type=int)
    t.add_argument("--hops", type=int, help="max hop order per layer")
    t.add_argument("--layer-dim", type=int, dest="layer_dim")
    t.add_argument("--dropout", type=float)
    t.add_argument("--leaky-slope", type=float, dest="leaky_slope")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--reg", type=float, help="L2 weight lambda")
    t.add_argument("--reg-scope", choices=["all", "embeddings"], dest="reg_scope")
    t.add_argument("--negatives", type=int)
    t.add_argument("--adam-beta1", type=float, dest="adam_beta1")
    t.add_argument("--adam-beta2", type=float, dest="adam_beta2")
    t.add_argument("--adam-eps", type=float, dest="adam_eps")
    t.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")

    e = sub.add_parser("eval", help="write report.csv and report.json")
    _global_flags(e, suppress=True)
    _data_flags(e)
    e.add_argument("--checkpoint")
    e.add_argument("--k", type=int, dest="k_eval")
    e.add_argument("--baseline", choices=["mfbpr"])

    p = sub.add_parser("predict", help="top-K case report for one patient")
    _global_flags(p, suppress=True)
    _data_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--patient", required=True)
    p.add_argument("--k", type=int, dest="k_eval")

    a = sub.add_parser("analyze", help="discrepancy ranking and embedding export")
    _global_flags(a, suppress=True)
    _data_flags(a)
    a.add_argument("--checkpoint")
    a.add_argument("--top", type=int)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults < config file < flags."""
    cfg = dict(DEFAULTS)
    if args.command == "predict":
        cfg["k_eval"] = 5
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        with open(path, "rb") as fh:
            try:
                file_cfg = tomli.load(fh)
            except tomli.TOMLDecodeError as exc:
                raise UsageError(f"{path}: {exc}") from None
        for key, value in file_cfg.items():
            key = key.replace("-", "_")
            if key not in DEFAULTS or isinstance(value, dict):
                raise UsageError(f"{path}: unknown key {key!r}")
            cfg[key] = value
    for key, value in vars(args).items():
        if key in cfg and value is not None:
            cfg[key] = value
    cfg["command"] = args.command
    if cfg["data"] is None:
        cfg["data"] = cfg["out"]
    if cfg["checkpoint"] is None:
        cfg["checkpoint"] = str(Path(cfg["out"]) / "checkpoint.json")
    return cfg


def model_config(cfg) -> ModelConfig:
    return ModelConfig(
        k=cfg["k"], f=cfg["f"], num_layers=cfg["layers"], max_hop=cfg["hops"],
        layer_dims=[cfg["layer_dim"]] * cfg["layers"], dropout=cfg["dropout"],
        leaky_slope=cfg["leaky_slope"], seed=cfg["seed"],
    )


def train_config(cfg) -> TrainConfig:
    return TrainConfig(
        learning_rate=cfg["lr"], batch_size=cfg["batch_size"], epochs=cfg["epochs"], reg=cfg["reg"],
        reg_scope=cfg["reg_scope"], negatives_per_positive=cfg["negatives"], beta1=cfg["adam_beta1"],
        beta2=cfg["adam_beta2"], eps=cfg["adam_eps"], seed=cfg["seed"],
    )


def _fingerprint(data_dir: Path) -> dict:
    out = {}
    for name in ("interactions.csv", "demographics.csv"):
        path = data_dir / name
        if not path.exists():
            raise UsageError(f"missing data file: {path}")
        out[name] = hashlib.sha256(path.read_bytes()).hexdigest()
    return out


def _out_dir(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data_options(cfg) -> dict:
    return {"max_diseases": cfg["max_diseases"], "split_ratio": cfg["split_ratio"]}


def _load_data(cfg, options=None):
    data_dir = Path(cfg["data"])
    fingerprint = _fingerprint(data_dir)
    options = options or _data_options(cfg)
    dataset = load_dataset(data_dir, options["max_diseases"], options["split_ratio"])
    return dataset, fingerprint


def cmd_generate(cfg) -> int:
    if not 0 < cfg["density"] < 0.5:
        raise UsageError("--density must lie in (0, 0.5)")
    if min(cfg["patients"], cfg["diseases"], cfg["rank"]) < 1:
        raise UsageError("--patients, --diseases and --rank must be positive")
    if cfg["rank"] > min(cfg["patients"], cfg["diseases"]):
        raise UsageError("--rank must not exceed min(patients, diseases)")
    params = {k: cfg[k] for k in ("patients", "diseases", "rank", "density", "seed", "confound")}
    inter, demo, truth = synth_generate(cfg["patients"], cfg["diseases"], cfg["rank"], cfg["density"],
                                        cfg["seed"], bool(cfg["confound"]))
    for path in write_synthetic(_out_dir(cfg), inter, demo, truth, params):
        print(path)
    return 0


def _provenance(cfg, keys) -> dict:
    return {k: cfg[k] for k in keys}


TRAIN_KEYS = ("seed", "max_diseases", "split_ratio", "k", "f", "layers", "hops", "layer_dim", "dropout",
              "leaky_slope", "epochs", "lr", "batch_size", "reg", "reg_scope", "negatives",
              "adam_beta1", "adam_beta2", "adam_eps")


def cmd_train(cfg) -> int:
    try:
        mc, tc = model_config(cfg), train_config(cfg)
    except (ConfigError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    dataset, fingerprint = _load_data(cfg)
    out = _out_dir(cfg)
    extra = {
        "config": _provenance(cfg, TRAIN_KEYS),
        "data_options": _data_options(cfg),
        "data_sha256": fingerprint,
        "patient_ids": dataset.patient_ids,
        "disease_codes": dataset.disease_codes,
    }

    def on_epoch(epoch, state):
        every = cfg["checkpoint_every"]
        if every and epoch % every == 0:
            checkpoint.save(state, out / f"checkpoint_epoch{epoch:04d}.json", extra)

    try:
        state, history = fit(dataset.train, dataset.features, mc, tc, on_epoch=on_epoch, threads=cfg["threads"])
    except TrainingDiverged as exc:
        if exc.last_good is not None:
            checkpoint.save(exc.last_good, out / "checkpoint_last_good.json", extra)
        log.error("training diverged at epoch %d: %s", exc.epoch, exc)
        return 2
    checkpoint.save(state, out / "checkpoint.json", extra)
    write_log(history, out / "train_log.csv")
    if history:
        print(f"epoch 1 loss {history[0].mean_loss:.6f} -> epoch {history[-1].epoch} loss {history[-1].mean_loss:.6f}")
    print(out / "checkpoint.json")
    return 0


def _restore(cfg):
    state, extra = checkpoint.load(cfg["checkpoint"])
    dataset, fingerprint = _load_data(cfg, extra.get("data_options"))
    if extra.get("patient_ids") not in (None, dataset.patient_ids) or \
            extra.get("disease_codes") not in (None, dataset.disease_codes):
        raise UsageError("checkpoint was trained on a different dataset")
    return state, extra, dataset


def cmd_eval(cfg) -> int:
    state, extra, dataset = _restore(cfg)
    k = cfg["k_eval"]
    graph = PropagationGraph(dataset.train, threads=cfg["threads"])
    report = evaluate(state, dataset, k, graph)
    echo = {"k": k, "model": "cldd", "train": extra.get("config", {}), "data_sha256": extra.get("data_sha256")}
    out = _out_dir(cfg)
    report.write_csv(out / "report.csv")
    report.write_json(out / "report.json", echo)
    rows = [("cldd", report.means())]
    if cfg["baseline"] == "mfbpr":
        train_cfg = dict(DEFAULTS, **extra.get("config", {}))
        mf = ModelConfig(k=train_cfg["k"], f=0, num_layers=0, seed=train_cfg["seed"])
        mf_state, _ = fit(dataset.train, np.zeros((dataset.num_patients, 0)), mf, train_config(train_cfg))
        mf_report = evaluate(mf_state, dataset, k)
        mf_report.write_csv(out / "report_mfbpr.csv")
        mf_report.write_json(out / "report_mfbpr.json", dict(echo, model="mfbpr"))
        rows.append(("mfbpr", mf_report.means()))
    print(f"K={k} evaluated_patients={report.num_evaluated}")
    for name, means in rows:
        print(name.ljust(6), " ".join(f"{m}={v:.4f}" for m, v in means.items()))
    return 0


def cmd_predict(cfg) -> int:
    state, extra, dataset = _restore(cfg)
    if cfg["patient"] not in dataset.patient_ids:
        raise UsageError(f"unknown patient id {cfg['patient']!r}")
    rows = case_report(state, dataset, cfg["patient"], cfg["k_eval"])
    path = _out_dir(cfg) / f"case_{cfg['patient']}.csv"
    write_case_report(rows, path, cfg["patient"], {"k": cfg["k_eval"], "train": extra.get("config", {})})
    for r in rows:
        print(f"{r.rank:>3} {r.disease_code:<12} {r.score: .6f} {'hit' if r.hit else '-'}")
    return 0


def cmd_analyze(cfg) -> int:
    state, extra, dataset = _restore(cfg)
    graph = PropagationGraph(dataset.train, threads=cfg["threads"])
    z = final_embeddings(forward(state, graph, train_mode=False))
    full = dataset.full()
    records = discrepancy_rank(full, z[dataset.num_patients:], dataset.disease_codes, cfg["top"])
    out = _out_dir(cfg)
    write_discrepancy_csv(records, out / "discrepancy.csv")
    export_embeddings(z, dataset.patient_ids, dataset.disease_codes, full, out / "embeddings.csv")
    with open(out / "analysis.json", "w") as fh:
        json.dump({"top": cfg["top"], "records": len(records), "train": extra.get("config", {})},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"{len(records)} pairs -> {out / 'discrepancy.csv'}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "analyze": cmd_analyze,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve(args)
        if cfg["threads"] < 1:
            raise UsageError("--threads must be >= 1")
        return COMMANDS[args.command](cfg)
    except (UsageError, FileNotFoundError, DataError, checkpoint.CheckpointError) as exc:
        print(f"cldd: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("runtime failure: %s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
