"""Experiment driver: resolved run configuration, the budgeted epoch loop,
evaluation, metrics/manifest emission, and the recipe comparison matrix."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .data import (
    Dataset,
    NormStats,
    fit_whitening,
    load_cifar_binary,
    normalize,
    sample_subset,
)
from .mltp import MltpConfig, mltp_train, split_tasks
from .models import ModelSpec, build_resnet9, save_checkpoint
from .optim import OptConfig, OptState, schedule_lr
from .tensor import ConfigError, set_default_dtype
from .train import BudgetClock, calibrate_batchnorm, evaluate, run_epoch

IP_LS_ALPHA = 0.1
IP_CELU_ALPHA = 0.3
IP_DECAY = 0.0005


@dataclass
class RunConfig:
    """Full experiment description; flag combinations map onto the recipes."""

    data_dir: str = ""
    per_class: int = 500
    seed: int = 0
    budget_seconds: float = 600.0
    optimizer: str = "sgd"  # "sgd" | "sam"
    gc: bool = False
    ip: bool = False
    mltp: bool = False
    max_epochs: int = 200
    batch_size: int = 256
    lr_peak: float = 0.4
    momentum: float = 0.9
    rho: float = 0.05
    decay: Optional[float] = None  # None -> 0.0005 with ip, else 0
    precision: int = 32
    metrics_out: str = "metrics.csv"
    checkpoint_out: Optional[str] = None
    deterministic: bool = True
    augment: bool = True
    widths: tuple = (64, 128, 256, 512)
    beta: float = 0.5  # meta-learning outer rate
    meta_iterations: Optional[int] = None  # None -> max_epochs

    def __post_init__(self):
        if self.budget_seconds <= 0:
            raise ConfigError(f"budget_seconds must be positive, got {self.budget_seconds}")
        if self.optimizer not in ("sgd", "sam"):
            raise ConfigError(f"optimizer must be sgd or sam, got {self.optimizer!r}")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        self.widths = tuple(self.widths)

    @property
    def recipe(self) -> str:
        parts = []
        if self.optimizer == "sam":
            parts.append("sam")
        if self.ip:
            parts.append("ip")
        if self.gc:
            parts.append("gc")
        if self.mltp:
            parts.append("mltp")
        return "+".join(parts) if parts else "baseline"

    def resolved_decay(self) -> float:
        if self.decay is not None:
            return self.decay
        return IP_DECAY if self.ip else 0.0

    def ls_alpha(self) -> float:
        return IP_LS_ALPHA if self.ip else 0.0


@dataclass
class MetricsRecord:
    epoch: int
    wall_seconds: float
    train_loss: float
    test_accuracy: float
    lr: float
    recipe: str


CSV_HEADER = ["epoch", "wall_seconds", "train_loss", "test_accuracy", "lr", "recipe"]


def manifest_path(metrics_out) -> Path:
    return Path(metrics_out).with_suffix(".manifest.json")


def check_writable(path) -> None:
    """Pre-flight: fail before training if the output location is unusable."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "a", encoding="utf-8"):
        pass


def write_metrics(records: list[MetricsRecord], manifest: dict, path) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow([
                r.epoch,
                f"{r.wall_seconds:.6f}",
                f"{r.train_loss:.6f}",
                f"{r.test_accuracy:.6f}",
                f"{r.lr:.6f}",
                r.recipe,
            ])
    with open(manifest_path(p), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, default=str)


def read_metrics(path) -> list[MetricsRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            records.append(MetricsRecord(
                epoch=int(row["epoch"]),
                wall_seconds=float(row["wall_seconds"]),
                train_loss=float(row["train_loss"]),
                test_accuracy=float(row["test_accuracy"]),
                lr=float(row["lr"]),
                recipe=row["recipe"],
            ))
    return records


def find_data_files(data_dir) -> tuple[list[Path], list[Path]]:
    d = Path(data_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"data directory {d} does not exist")
    train = sorted(d.glob("data_batch*.bin"))
    test = sorted(d.glob("test_batch*.bin"))
    if not train:
        raise FileNotFoundError(f"no data_batch*.bin files under {d}")
    if not test:
        raise FileNotFoundError(f"no test_batch*.bin files under {d}")
    return train, test


def _derived_seeds(seed: int) -> dict[str, int]:
    kids = np.random.SeedSequence(seed).spawn(4)
    names = ["subset", "init", "whitening", "augment"]
    return {n: int(k.generate_state(1)[0]) for n, k in zip(names, kids)}


@dataclass
class RunResult:
    records: list[MetricsRecord]
    manifest: dict
    final_accuracy: float
    epochs_completed: int
    model: object = field(repr=False, default=None)
    params: object = field(repr=False, default=None)


def run_training(cfg: RunConfig, clock=time.monotonic, extra_manifest: Optional[dict] = None) -> RunResult:
    """Execute one recipe end to end under the wall-clock budget.

    The clock starts before data loading; an epoch only starts if the longest
    epoch observed so far still fits in the remaining budget, so total time
    never exceeds budget + one epoch duration.
    """
    budget = BudgetClock(cfg.budget_seconds, clock=clock)
    set_default_dtype(cfg.precision)
    dtype = np.float32 if cfg.precision == 32 else np.float64
    check_writable(cfg.metrics_out)
    seeds = _derived_seeds(cfg.seed)

    train_files, test_files = find_data_files(cfg.data_dir)
    full_train = load_cifar_binary(train_files, split="train")
    test_ds = load_cifar_binary(test_files, split="test")
    subset = sample_subset(full_train, cfg.per_class, seeds["subset"])
    stats = NormStats.fit(subset)
    train_x = normalize(subset.images, stats, dtype=dtype)
    test_x = normalize(test_ds.images, stats, dtype=dtype)

    whitening = None
    if cfg.ip:
        whitening = fit_whitening(train_x, seed=seeds["whitening"])
    spec = ModelSpec(
        widths=cfg.widths,
        activation="celu" if cfg.ip else "relu",
        celu_alpha=IP_CELU_ALPHA,
        stem="whitened" if cfg.ip else "plain",
        classes=10,
        head_scale=0.125,
    )
    model, params = build_resnet9(
        spec, seeds["init"],
        whitening_filters=whitening.filters if whitening else None,
        dtype=dtype,
    )

    steps_per_epoch = max(1, math.ceil(len(subset) / cfg.batch_size))
    opt_cfg = OptConfig(
        lr_peak=cfg.lr_peak,
        momentum=cfg.momentum,
        decay=cfg.resolved_decay(),
        rho=cfg.rho,
        gc_enabled=cfg.gc,
        sam_enabled=cfg.optimizer == "sam",
        schedule="onecycle",
        total_steps=cfg.max_epochs * steps_per_epoch,
    )

    manifest = {
        "config": asdict(cfg),
        "recipe": cfg.recipe,
        "version": __version__,
        "seeds": seeds,
        "source_digest": full_train.source_digest,
        "subset_size": len(subset),
        "subset_digest": _dataset_digest(subset),
        "norm_stats": stats.to_dict(),
        "whitening": {"fit_digest": whitening.fit_digest, "eps": whitening.eps} if whitening else None,
        "param_count": params.num_elements(),
        "deterministic": cfg.deterministic,
    }
    if extra_manifest:
        manifest.update(extra_manifest)

    records: list[MetricsRecord] = []
    augment_rng = np.random.default_rng(seeds["augment"]) if cfg.augment else None

    if cfg.mltp:
        split = split_tasks(subset, seeds["subset"])
        tasks = [(normalize(t.images, stats, dtype=dtype), t.labels) for t in split.tasks]
        mcfg = MltpConfig(
            inner_opt=opt_cfg,
            beta=cfg.beta,
            meta_iterations=cfg.meta_iterations or cfg.max_epochs,
            batch_size=cfg.batch_size,
            ls_alpha=cfg.ls_alpha(),
        )

        def on_round(rec):
            calibrate_batchnorm(model, train_x, batch_size=cfg.batch_size)
            acc = evaluate(model, test_x, test_ds.labels, cfg.batch_size)
            records.append(MetricsRecord(
                epoch=rec["round"] + 1,
                wall_seconds=budget.elapsed(),
                train_loss=float(np.mean(rec["task_losses"])),
                test_accuracy=acc,
                lr=cfg.lr_peak,
                recipe=cfg.recipe,
            ))

        mltp_train(model, params, tasks, mcfg, budget=budget,
                   calibration_images=train_x, on_round=on_round)
    else:
        state = OptState.create(params)
        max_epoch_time = 0.0
        for epoch in range(1, cfg.max_epochs + 1):
            if not budget.should_start(max_epoch_time):
                break
            t0 = clock()
            loss = run_epoch(
                model, params, state, opt_cfg,
                train_x, subset.labels, cfg.batch_size, cfg.ls_alpha(),
                shuffle_seed=cfg.seed, epoch=epoch,
                augment_rng=augment_rng,
            )
            acc = evaluate(model, test_x, test_ds.labels, cfg.batch_size)
            max_epoch_time = max(max_epoch_time, clock() - t0)
            records.append(MetricsRecord(
                epoch=epoch,
                wall_seconds=budget.elapsed(),
                train_loss=loss,
                test_accuracy=acc,
                lr=schedule_lr(opt_cfg, state.step_index),
                recipe=cfg.recipe,
            ))

    if not records:
        # Nothing fit in the budget; still report where the model stands.
        acc = evaluate(model, test_x, test_ds.labels, cfg.batch_size)
        records.append(MetricsRecord(
            epoch=0,
            wall_seconds=budget.elapsed(),
            train_loss=float("nan"),
            test_accuracy=acc,
            lr=0.0,
            recipe=cfg.recipe,
        ))
        epochs_completed = 0
    else:
        epochs_completed = records[-1].epoch

    manifest["final_accuracy"] = records[-1].test_accuracy
    manifest["epochs_completed"] = epochs_completed
    manifest["total_wall_seconds"] = budget.elapsed()
    write_metrics(records, manifest, cfg.metrics_out)
    if cfg.checkpoint_out:
        save_checkpoint(model, cfg.checkpoint_out, seed=seeds["init"])
    return RunResult(
        records=records,
        manifest=manifest,
        final_accuracy=records[-1].test_accuracy,
        epochs_completed=epochs_completed,
        model=model,
        params=params,
    )


def _dataset_digest(ds: Dataset) -> str:
    import hashlib

    h = hashlib.sha256()
    h.update(ds.images.tobytes())
    h.update(ds.labels.tobytes())
    return h.hexdigest()


RECIPES = {
    "baseline": {"optimizer": "sgd", "gc": False, "ip": False, "mltp": False},
    "sam": {"optimizer": "sam", "gc": False, "ip": False, "mltp": False},
    "sam+ip": {"optimizer": "sam", "gc": False, "ip": True, "mltp": False},
    "sam+gc": {"optimizer": "sam", "gc": True, "ip": False, "mltp": False},
    "mltp": {"optimizer": "sgd", "gc": False, "ip": False, "mltp": True},
}


def recipe_matrix(base: RunConfig, recipes: Optional[list[str]] = None) -> list[dict]:
    """Run each recipe with its own budget and collect a comparison table.

    A failing recipe is recorded and the rest still run.
    """
    rows = []
    out_base = Path(base.metrics_out)
    for name in recipes or list(RECIPES):
        if name not in RECIPES:
            raise ConfigError(f"unknown recipe {name!r}; choose from {sorted(RECIPES)}")
        tag = name.replace("+", "_")
        cfg = replace(base, metrics_out=str(out_base.with_name(f"{out_base.stem}_{tag}.csv")),
                      **RECIPES[name])
        try:
            result = run_training(cfg)
            rows.append({
                "recipe": name,
                "status": "ok",
                "final_accuracy": result.final_accuracy,
                "epochs": result.epochs_completed,
                "wall_seconds": result.manifest["total_wall_seconds"],
            })
        except Exception as exc:  # noqa: BLE001 - a bad recipe must not kill the matrix
            rows.append({"recipe": name, "status": f"failed: {exc}",
                         "final_accuracy": float("nan"), "epochs": 0,
                         "wall_seconds": float("nan")})
    return rows
