"""Batch experiments: victim capture, attack and metrics over a grid of configs.

A config is one JSON document. Every field has a default (``DEFAULTS``); a
``grid`` maps dotted field paths to lists of values and the cartesian product
of those lists defines the cells. Each (cell, repeat) run writes

    <out>/<cell>/<repeat>/result.json, trace.csv, metrics.json, recon.pgm|ppm, truth.pgm|ppm

and the coordinator writes ``summary.csv`` and ``metrics.csv`` at the top.
"""

from __future__ import annotations

import copy
import csv
import io
import itertools
import json
import logging
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imageio
from .attack import AttackConfig, run_attack
from .distance import KIND_ALIASES, REDUCTIONS
from .metrics import best_assignment, cost_matrix, match_batch
from .models import ModelSpec, WeightInit, init_weights
from .patterns import builtin_patterns, one_hot
from .serialization import fnv1a64
from .victim import capture, train

log = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1

DEFAULTS = {
    "seed": 0,
    "model": {"architecture": "lenet_lite", "input_shape": [1, 8, 8], "num_classes": 4},
    "init": {"scheme": "uniform"},
    "data": {"source": "builtin", "kind": "mixed", "size": 8, "per_class": 4, "channels": 1},
    "epochs_before_attack": 0,
    "train_lr": 0.1,
    "label_scale": 1.0,
    "batch_size": 1,
    "distance": {"kind": "sapag", "sigma_mode": "per_layer", "q_schedule": "harmonic", "gamma": 0.5,
                 "sigma_floor": 1e-8, "reduction": "elementwise"},
    "attack": {"optimizer": "lbfgs_lite"},
    "repeat": 1,
    "output_dir": "out",
    "grid": {},
}

SUMMARY_FIELDS = ["run_id", "cell", "repeat", "seed", "distance_kind", "init_scheme", "optimizer", "epochs",
                  "batch_size", "iters_run", "best_iter", "best_loss", "label_accuracy", "mse", "psnr", "ssim",
                  "aborted"]
METRICS_FIELDS = ["run_id", "distance_kind", "init_scheme", "epochs", "mse", "psnr", "ssim"]

_ATTACK_KEYS = {"dummy_init", "constant", "init_scale", "label_init", "label_logit", "optimizer", "lr",
                "weight_decay", "history", "max_iters", "stop_tol", "clamp"}


class ConfigError(ValueError):
    """Invalid experiment config; ``path`` is the dotted field path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def derive_seed(master: int, key: str) -> int:
    """Independent 64-bit stream seed for ``key`` under ``master``."""
    return splitmix64((int(master) & MASK64) ^ fnv1a64(key.encode()))


# -- config ---------------------------------------------------------------

def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}.{k}" if path else k
        if k not in base and path == "":
            raise ConfigError(where, "unknown field")
        if isinstance(v, dict) and isinstance(base.get(k), dict) and k != "grid":
            out[k] = _merge(base[k], v, where)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _get(cfg: dict, path: str):
    node = cfg
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            raise KeyError(path)
        node = node[part]
    return node


def _set(cfg: dict, path: str, value) -> None:
    parts = path.split(".")
    node = cfg
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(path, "grid path goes through a non-object field")
    node[parts[-1]] = value


def _normalize(cfg: dict) -> dict:
    if isinstance(cfg.get("distance"), str):
        cfg["distance"] = dict(DEFAULTS["distance"], kind=cfg["distance"])
    return cfg


def load_config(source, overrides: dict | None = None) -> dict:
    """Parse a path, JSON string or dict, fill defaults and validate."""
    if isinstance(source, dict):
        raw = copy.deepcopy(source)
    else:
        text = Path(source).read_text() if Path(str(source)).exists() else None
        if text is None:
            raise ConfigError("", f"config file not found: {source}")
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("", "config must be a JSON object")
    raw = _normalize(raw)
    cfg = _merge(DEFAULTS, raw)
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = v
    validate(cfg)
    return cfg


def _check_cell(cfg: dict, prefix: str = "") -> None:
    def fail(path, msg):
        raise ConfigError(prefix + path, msg)

    try:
        spec = ModelSpec.from_dict(cfg["model"])
    except (TypeError, ValueError) as exc:
        fail("model", str(exc))
    if not spec.is_image:
        fail("model.architecture", "experiments run image models; use the text command for text models")
    if spec.input_shape[0] not in (1, 3):
        fail("model.input_shape", "images need 1 or 3 channels")
    try:
        WeightInit(**cfg["init"])
    except (TypeError, ValueError) as exc:
        fail("init", str(exc))
    dist = cfg["distance"]
    if KIND_ALIASES.get(dist.get("kind")) is None:
        fail("distance.kind", f"unknown distance {dist.get('kind')!r}")
    if dist.get("reduction", "elementwise") not in REDUCTIONS:
        fail("distance.reduction", f"must be one of {list(REDUCTIONS)}")
    unknown = set(cfg["attack"]) - _ATTACK_KEYS
    if unknown:
        fail(f"attack.{sorted(unknown)[0]}", "unknown field")
    try:
        attack_config(cfg, 0)
    except (TypeError, ValueError) as exc:
        fail("attack", str(exc))
    for key in ("epochs_before_attack",):
        if not isinstance(cfg[key], int) or cfg[key] < 0:
            fail(key, "must be an integer >= 0")
    if not isinstance(cfg["batch_size"], int) or cfg["batch_size"] < 1:
        fail("batch_size", "must be an integer >= 1")
    if not cfg["train_lr"] > 0:
        fail("train_lr", "must be positive")
    data = cfg["data"]
    source = data.get("source")
    if source == "builtin":
        if data.get("size") not in (4, 8, 16):
            fail("data.size", "must be 4, 8 or 16")
        if tuple(spec.input_shape) != (data.get("channels", 1), data["size"], data["size"]):
            fail("model.input_shape", "does not match the builtin pattern size and channels")
        per_class = data.get("per_class", 1)
        n = per_class * (4 if data.get("kind", "mixed") == "mixed" else 1)
        if cfg["batch_size"] > n:
            fail("batch_size", f"larger than the dataset ({n} items)")
    elif source == "directory":
        path = data.get("path")
        if not path or not Path(path).is_dir():
            fail("data.path", f"directory does not exist: {path}")
    else:
        fail("data.source", "must be 'builtin' or 'directory'")


def validate(cfg: dict) -> None:
    if not isinstance(cfg["repeat"], int) or cfg["repeat"] < 1:
        raise ConfigError("repeat", "must be an integer >= 1")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed", "must be a non-negative integer")
    grid = cfg["grid"]
    if not isinstance(grid, dict):
        raise ConfigError("grid", "must map field paths to lists")
    for path, values in grid.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"grid.{path}", "must be a non-empty list")
        try:
            _get(cfg, path)
        except KeyError:
            raise ConfigError(f"grid.{path}", "no such field") from None
    for cell_id, cell in expand_grid(cfg):
        _check_cell(cell, prefix="" if not grid else f"[{cell_id}] ")


def _slug(v) -> str:
    return re.sub(r"[^A-Za-z0-9.]+", "", str(v)) or "x"


def expand_grid(cfg: dict) -> list:
    """``[(cell_id, resolved_config)]`` in grid order; one cell when the grid is empty."""
    grid = cfg["grid"]
    base = {k: v for k, v in cfg.items() if k != "grid"}
    if not grid:
        return [("c0", copy.deepcopy(base))]
    keys = list(grid)
    cells = []
    for i, combo in enumerate(itertools.product(*(grid[k] for k in keys))):
        cell = copy.deepcopy(base)
        for k, v in zip(keys, combo):
            _set(cell, k, v)
        cells.append((f"c{i}-" + "-".join(_slug(v) for v in combo), _normalize(cell)))
    return cells


def attack_config(cell: dict, seed: int) -> AttackConfig:
    dist = cell["distance"]
    return AttackConfig(
        distance=dist["kind"],
        sigma_mode=dist.get("sigma_mode", "per_layer"),
        q_schedule=dist.get("q_schedule", "harmonic"),
        gamma=dist.get("gamma", 0.5),
        sigma_floor=dist.get("sigma_floor", 1e-8),
        reduction=dist.get("reduction", "elementwise"),
        seed=seed,
        log_every=0,
        **cell["attack"],
    )


# -- one run --------------------------------------------------------------

def _victim_key(cell: dict, grid_keys) -> str:
    """Seed key built from every grid axis that shapes the victim, not the attack.

    Cells that differ only in distance or attack settings therefore attack the
    same victim and image, so their results pair up.
    """
    parts = [f"{k}={json.dumps(_get(cell, k), sort_keys=True)}" for k in grid_keys
             if not (k.startswith("distance") or k.startswith("attack"))]
    return "|".join(parts)


def load_dataset(data: dict, seed: int, num_classes: int):
    if data["source"] == "builtin":
        return builtin_patterns(data.get("kind", "mixed"), data["size"], seed=data.get("seed", seed),
                                per_class=data.get("per_class", 1), channels=data.get("channels", 1))
    X = imageio.load_directory(data["path"])
    labels = data.get("labels")
    labels = np.asarray(labels, dtype=np.int64) if labels is not None else np.arange(len(X)) % num_classes
    if len(labels) != len(X):
        raise ConfigError("data.labels", f"{len(labels)} labels for {len(X)} images")
    return X, labels


@dataclass
class RunOutcome:
    row: dict
    aborted: bool


def _fmt(v) -> str:
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return str(v)


def execute_run(cell_id: str, cell: dict, repeat: int, master: int, grid_keys, out_dir) -> RunOutcome:
    """Victim capture, attack and metrics for one (cell, repeat); writes that run's artifacts."""
    victim_seed = derive_seed(master, f"victim/{_victim_key(cell, grid_keys)}/{repeat}")
    attack_seed = derive_seed(master, f"attack/{cell_id}/{repeat}")
    spec = ModelSpec.from_dict(cell["model"])
    X_all, labels = load_dataset(cell["data"], master, spec.num_classes)
    if X_all.shape[1:] != spec.input_shape:
        raise ConfigError("model.input_shape", f"data items have shape {X_all.shape[1:]}")
    rng = np.random.default_rng(victim_seed)
    weight_seed = int(rng.integers(2**31))
    idx = np.sort(rng.choice(len(X_all), size=cell["batch_size"], replace=False))
    Y_all = one_hot(labels % spec.num_classes, spec.num_classes)

    weights = init_weights(spec, WeightInit(**dict(cell["init"], seed=weight_seed)))
    epochs = cell["epochs_before_attack"]
    if epochs:
        weights, _ = train(spec, weights, (X_all, Y_all), epochs, cell["train_lr"],
                           label_scale=cell["label_scale"], seed=weight_seed)
    X, Y = X_all[idx], Y_all[idx]
    snapshot = capture(spec, weights, X, Y, label_scale=cell["label_scale"], epochs=epochs, seed=victim_seed)

    truth_mse = {}

    def observer(it, Xd, d):
        cost = cost_matrix(Xd, X)
        truth_mse[it] = float(cost[np.arange(len(X)), best_assignment(cost)].mean())

    cfg = attack_config(cell, attack_seed)
    result = run_attack(spec, weights, snapshot, cfg, observer=observer)
    report = match_batch(result.X_recon, X)
    predicted = result.predicted_label
    true_labels = labels[idx]
    acc = float(np.mean([predicted[i] == true_labels[j] for i, j in enumerate(report.assignment)]))

    run_dir = Path(out_dir) / cell_id / str(repeat)
    run_dir.mkdir(parents=True, exist_ok=True)
    ext = "pgm" if spec.input_shape[0] == 1 else "ppm"
    recon = result.X_recon[np.argsort(report.assignment)]  # reorder to truth order
    imageio.save_image(run_dir / f"recon.{ext}", imageio.tile(recon))
    imageio.save_image(run_dir / f"truth.{ext}", imageio.tile(X))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iter", "distance", "mse_vs_truth"])
    for i, d in enumerate(result.loss_trace):
        w.writerow([i, repr(d), repr(truth_mse[i]) if i in truth_mse else ""])
    (run_dir / "trace.csv").write_text(buf.getvalue())
    metrics = report.to_dict()
    metrics["label_accuracy"] = acc
    (run_dir / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    manifest = {
        "run_id": f"{cell_id}/{repeat}",
        "cell": cell_id,
        "repeat": repeat,
        "seeds": {"master": master, "victim": victim_seed, "attack": attack_seed, "weights": weight_seed},
        "config": cell,
        "attack_config": cfg.to_dict(),
        "items": [int(i) for i in idx],
        "result": {
            "iters_run": result.iters_run,
            "best_iter": result.best_iter,
            "best_loss": result.best_loss,
            "aborted": result.aborted,
            "error": result.error,
            "predicted_labels": [int(p) for p in predicted],
            "true_labels": [int(t) for t in true_labels],
        },
        "metrics": metrics,
        "timing": {"wall_seconds": result.wall_seconds},
    }
    (run_dir / "result.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    log.info("%s/%d ssim %.4f mse %.3e", cell_id, repeat, report.ssim, report.mse)

    row = {
        "run_id": f"{cell_id}/{repeat}",
        "cell": cell_id,
        "repeat": repeat,
        "seed": attack_seed,
        "distance_kind": KIND_ALIASES[cell["distance"]["kind"]],
        "init_scheme": cell["init"]["scheme"],
        "optimizer": cfg.optimizer,
        "epochs": epochs,
        "batch_size": cell["batch_size"],
        "iters_run": result.iters_run,
        "best_iter": result.best_iter,
        "best_loss": result.best_loss,
        "label_accuracy": acc,
        "mse": report.mse,
        "psnr": report.psnr,
        "ssim": report.ssim,
        "aborted": int(result.aborted),
    }
    return RunOutcome(row, result.aborted)


def _execute(args) -> RunOutcome:
    return execute_run(*args)


# -- driver ---------------------------------------------------------------

def _write_csv(path: Path, fields, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_fmt(r[f]) for f in fields])
    path.write_text(buf.getvalue())


@dataclass
class ExperimentReport:
    rows: list
    out_dir: Path

    @property
    def aborted(self) -> list:
        return [r["run_id"] for r in self.rows if r["aborted"]]

    @property
    def exit_code(self) -> int:
        return 2 if self.aborted else 0


def run_experiment(config, *, seed: int | None = None, out: str | None = None, threads: int = 1) -> ExperimentReport:
    """Run every (cell, repeat) and write the aggregate CSVs.

    ``seed`` and ``out`` override the config's ``seed`` and ``output_dir``.
    With ``threads > 1`` runs go to a process pool; results are gathered in
    grid order so the aggregates do not depend on scheduling.
    """
    cfg = load_config(config, {"seed": seed, "output_dir": out})
    out_dir = Path(cfg["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    grid_keys = list(cfg["grid"])
    jobs = [(cell_id, cell, r, cfg["seed"], grid_keys, str(out_dir))
            for cell_id, cell in expand_grid(cfg) for r in range(cfg["repeat"])]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(_execute, jobs))
    else:
        outcomes = [_execute(j) for j in jobs]
    rows = [o.row for o in outcomes]
    _write_csv(out_dir / "summary.csv", SUMMARY_FIELDS, rows)
    _write_csv(out_dir / "metrics.csv", METRICS_FIELDS, rows)
    report = ExperimentReport(rows, out_dir)
    if report.aborted:
        log.warning("%d of %d runs aborted: %s", len(report.aborted), len(rows), ", ".join(report.aborted))
    return report
