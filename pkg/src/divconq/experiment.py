"""Run configuration, dataset resolution and on-disk run artifacts."""

from __future__ import annotations

import copy
import csv
import json
import os
import time
from pathlib import Path

import numpy as np

from .dataset import LabeledDataset, SyntheticSpec, generate_synthetic, \
    load_features, load_group_map, zero_shot_split
from .embedder import EmbeddingNetwork
from .metrics import evaluate, pca_project, recall_at_k
from .partition import Partition
from .subspace import MaskSet, save_masks_csv
from .trainer import ConfigError, TrainConfig, embed_final, fit

OUTPUT_ENV = "DIVCONQ_OUTPUT_ROOT"
CHECKPOINT_VERSION = "divconq-run/1"
SECTIONS = ("data", "trainer", "eval", "name", "output")

DEFAULT_RUN = {
    "name": "run",
    "data": {
        "synthetic": {"class_count": 32, "samples_per_class": 50,
                      "feature_dim": 20, "mode_count_per_class": 2,
                      "intra_mode_sigma": 0.5, "nuisance_dims": 10,
                      "nuisance_sigma": 2.0, "seed": 0},
        "train_fraction": 0.5,
        "split_seed": None,
    },
    "trainer": {},
    "eval": {"ks": [1, 2, 4, 8], "ed_neighbors": 10},
}


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: dict, overrides) -> dict:
    """Apply ``key.path=value`` overrides.  Keys not starting with a known
    section are taken relative to ``trainer``."""
    config = copy.deepcopy(config)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, raw = item.split("=", 1)
        path = key.strip().split(".")
        if path[0] not in SECTIONS:
            path = ["trainer"] + path
        node = config
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(key, "cannot descend into a scalar")
        node[path[-1]] = _parse_value(raw)
    return config


def merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_run_config(path=None, overrides=()) -> dict:
    """Defaults, then the JSON file at ``path``, then CLI overrides.

    A file without any section key is read as a bare trainer config.  A
    ``data.path`` entry replaces the synthetic generator.
    """
    cfg = copy.deepcopy(DEFAULT_RUN)
    if path is not None:
        user = json.loads(Path(path).read_text(encoding="utf-8"))
        if not any(k in user for k in SECTIONS):
            user = {"trainer": user}
        cfg = merge(cfg, user)
    cfg = apply_overrides(cfg, overrides)
    if "path" in cfg["data"]:
        cfg["data"].pop("synthetic", None)
    trainer_config(cfg)
    return cfg


def trainer_config(run_cfg: dict) -> TrainConfig:
    t = dict(run_cfg.get("trainer", {}))
    groups = run_cfg.get("data", {}).get("class_groups")
    if groups is not None and "class_groups" not in t:
        t["class_groups"] = (load_group_map(groups)
                             if isinstance(groups, str) else groups)
    try:
        return TrainConfig.from_dict(t)
    except TypeError as exc:
        raise ConfigError("trainer", str(exc)) from None


def build_dataset(data_cfg: dict) -> LabeledDataset:
    if "path" in data_cfg:
        return load_features(data_cfg["path"])
    return generate_synthetic(SyntheticSpec(**data_cfg.get("synthetic", {})))


def split_dataset(run_cfg: dict):
    d = run_cfg["data"]
    ds = build_dataset(d)
    return zero_shot_split(ds, d.get("train_fraction", 0.5),
                           d.get("split_seed"))


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def checkpoint_dict(run_cfg, state) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "config": run_cfg,
        "epoch": state.epoch,
        "network": state.net.to_dict(),
        "masks": state.masks.to_dict(),
        "partition": state.partition.to_dict(),
        "beta": None if state.beta is None else float(state.beta[0]),
    }


def load_checkpoint(path):
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if data.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version "
                         f"{data.get('version')!r}")
    net = EmbeddingNetwork.from_dict(data["network"])
    masks = MaskSet.from_dict(data["masks"])
    part = Partition.from_dict(data["partition"])
    return data, net, masks, part


EPOCH_FIELDS = ["epoch", "k", "phase", "mean_loss", "train_recall@1",
                "test_recall@1", "consistency_nmi", "retained"]


def run_experiment(run_cfg: dict, out_dir) -> dict:
    """Train, evaluate and write all run artifacts into ``out_dir``.

    Files: config.json, checkpoint.json, events.jsonl, metrics.csv
    (per epoch), report.json (final metrics), masks.csv.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = split_dataset(run_cfg)
    cfg = trainer_config(run_cfg)
    rows = []
    seen = [0]

    def on_epoch(state):
        new = state.events[seen[0]:]
        seen[0] = len(state.events)
        losses = [e["loss"] for e in new if "loss" in e]
        div = [e for e in new if e.get("event") == "division"]
        rows.append({
            "epoch": state.epoch,
            "k": state.partition.k,
            "phase": state.phase,
            "mean_loss": float(np.mean(losses)) if losses else "",
            "train_recall@1": recall_at_k(
                embed_final(state.net, state.masks, train.features),
                train.labels, 1),
            "test_recall@1": recall_at_k(
                embed_final(state.net, state.masks, test.features),
                test.labels, 1),
            "consistency_nmi": div[-1].get("consistency_nmi", "")
            if div else "",
            "retained": div[-1].get("retained", "") if div else "",
        })

    state = fit(train.features, train.labels, cfg, callback=on_epoch)
    ev = run_cfg.get("eval", {})
    ks = ev.get("ks", [1, 2, 4, 8])
    nbrs = ev.get("ed_neighbors", 10)
    test_report = evaluate(embed_final(state.net, state.masks, test.features),
                           test.labels, ks, nbrs)
    train_report = evaluate(
        embed_final(state.net, state.masks, train.features), train.labels,
        ks, nbrs)
    report = {"test": test_report.to_dict(), "train": train_report.to_dict()}

    (out / "config.json").write_text(_dump(run_cfg), encoding="utf-8")
    (out / "checkpoint.json").write_text(_dump(checkpoint_dict(run_cfg, state)),
                                         encoding="utf-8")
    with open(out / "events.jsonl", "w", encoding="utf-8") as fh:
        for e in state.events:
            fh.write(json.dumps(e, sort_keys=True) + "\n")
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, EPOCH_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    (out / "report.json").write_text(_dump(report), encoding="utf-8")
    save_masks_csv(state.masks, out / "masks.csv")
    return report


def evaluate_checkpoint(path, dataset: LabeledDataset | None = None,
                        ks=(1, 2, 4, 8)):
    data, net, masks, _ = load_checkpoint(path)
    if dataset is None:
        _, dataset = split_dataset(data["config"])
    if dataset.feature_dim != net.input_dim:
        raise ValueError(f"checkpoint expects {net.input_dim} features, "
                         f"dataset has {dataset.feature_dim}")
    return evaluate(embed_final(net, masks, dataset.features),
                    dataset.labels, ks)


def project_checkpoint(path, out_csv, dataset: LabeledDataset | None = None):
    """Write 2-D PCA coordinates of the final embedding (x,y,label,split)."""
    data, net, masks, _ = load_checkpoint(path)
    if dataset is None:
        train, test = split_dataset(data["config"])
        parts = [("train", train), ("test", test)]
    else:
        parts = [("data", dataset)]
    for _, ds in parts:
        if ds.feature_dim != net.input_dim:
            raise ValueError(f"checkpoint expects {net.input_dim} features, "
                             f"dataset has {ds.feature_dim}")
    E = np.vstack([embed_final(net, masks, ds.features) for _, ds in parts])
    xy = pca_project(E, 2)
    with open(out_csv, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "label", "split"])
        row = 0
        for name, ds in parts:
            for lab in ds.labels:
                w.writerow([repr(float(xy[row, 0])), repr(float(xy[row, 1])),
                            int(lab), name])
                row += 1


SUMMARY_FIELDS = ["name", "k_max", "E", "recall@1", "nmi", "marp",
                  "effective_dim", "runtime_s", "status"]


def run_sweep(plan: dict, output=None, resume=False, log=print):
    """Run every entry of a plan; failures are recorded and the sweep goes
    on.  Returns ``(summary_rows, n_failed)``."""
    root = Path(output or plan.get("output") or default_output_root())
    base = plan.get("base", {})
    names = [r["name"] for r in plan["runs"]]
    if len(set(names)) != len(names):
        raise ConfigError("runs", "run names must be unique")
    rows, failed = [], 0
    for entry in plan["runs"]:
        name = entry["name"]
        run_dir = root / name
        run_cfg = None
        t0 = time.perf_counter()
        try:
            run_cfg = apply_overrides(
                merge(merge(DEFAULT_RUN, base), entry.get("config", {})),
                [f"{k}={json.dumps(v)}" for k, v in
                 entry.get("set", {}).items()])
            run_cfg["name"] = name
            tc = trainer_config(run_cfg)
            report_path = run_dir / "report.json"
            if resume and report_path.exists():
                log(f"[skip] {name}: already complete")
                report = json.loads(report_path.read_text(encoding="utf-8"))
                status = "resumed"
            else:
                report = run_experiment(run_cfg, run_dir)
                status = "ok"
            t = report["test"]
            rows.append({"name": name, "k_max": tc.k_max,
                         "E": tc.epochs_between_divisions,
                         "recall@1": t["recall_at"].get("1", ""),
                         "nmi": t["nmi"], "marp": t["marp"],
                         "effective_dim": t["effective_dim"],
                         "runtime_s": round(time.perf_counter() - t0, 3),
                         "status": status})
            log(f"[done] {name}: R@1={rows[-1]['recall@1']}")
        except Exception as exc:  # noqa: BLE001 - sweep records and continues
            failed += 1
            rows.append({"name": name, "k_max": "", "E": "", "recall@1": "",
                         "nmi": "", "marp": "", "effective_dim": "",
                         "runtime_s": round(time.perf_counter() - t0, 3),
                         "status": f"error: {exc}"})
            log(f"[fail] {name}: {exc}")
    rows.sort(key=lambda r: r["name"])
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, SUMMARY_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return rows, failed
