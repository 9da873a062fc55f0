"""Training loop with validation-based model selection, and MAE evaluation."""

from __future__ import annotations

import csv
import json
import math
import platform
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Adam, clip_grad_norm, global_grad_norm, mse_loss
from .data import (
    Dataset,
    Volume,
    drop_all_but_kth,
    drop_random_fraction,
    impute_nearest,
    slice_volume,
    stack_slices,
)
from .errors import ConfigurationError, NumericalError
from .models import Model, save_checkpoint

REPORT_SCHEMA = 1
EVAL_RUNS = 10
DIVERGENCE_REMEDY_LR = 1e-5


@dataclass
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 8
    grad_clip: float | None = None
    seed: int = 0
    subsample_n: int | None = None
    fixed_updates: int | None = None

    @classmethod
    def for_family(cls, family: str, **overrides) -> "TrainConfig":
        """Defaults for a model family: the LSTM baseline clips gradients at norm 1."""
        if family == "slice_rnn":
            overrides.setdefault("grad_clip", 1.0)
        return cls(**overrides)

    def steps_per_epoch(self, full_n: int) -> int:
        return math.ceil(full_n / self.batch_size)


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    val_mae: float
    seconds: float
    max_grad_norm: float


@dataclass
class RunReport:
    epochs: list[EpochRecord]
    best_epoch: int
    test_mae: float
    param_count: int
    steps: int
    initial_loss: float
    output_bias_init: float
    config: dict
    model: dict
    environment: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)
    schema: int = REPORT_SCHEMA

    def results(self) -> dict:
        """Everything except wall-clock timings and the environment stamp."""
        d = asdict(self)
        d.pop("environment")
        for e in d["epochs"]:
            e.pop("seconds")
        return d

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        d = json.loads(text)
        d["epochs"] = [EpochRecord(**e) for e in d["epochs"]]
        return cls(**d)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json())
        with open(out / "curve.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_mse", "val_mae", "seconds"])
            for e in self.epochs:
                w.writerow([e.epoch, repr(e.train_mse), repr(e.val_mae), f"{e.seconds:.3f}"])


def environment_stamp() -> dict:
    return {"python": sys.version.split()[0], "numpy": np.__version__, "platform": platform.platform()}


# -- evaluation ----------------------------------------------------------------------------

@dataclass(frozen=True)
class DropSpec:
    kind: str = "none"      # none | kth | rand
    value: float = 1.0

    @classmethod
    def parse(cls, text: str | None) -> "DropSpec":
        if text is None or text == "none":
            return cls()
        kind, _, raw = text.partition(":")
        if kind == "kth":
            k = int(raw)
            if k < 1:
                raise ConfigurationError(f"kth drop needs k >= 1, got {k}")
            return cls("kth", k)
        if kind == "rand":
            frac = float(raw)
            if not 0 < frac <= 1:
                raise ConfigurationError(f"rand drop needs a fraction in (0, 1], got {frac}")
            return cls("rand", frac)
        raise ConfigurationError(f"bad drop spec {text!r}; use none, kth:<k> or rand:<fraction>")

    def __str__(self) -> str:
        if self.kind == "none":
            return "none"
        return f"kth:{int(self.value)}" if self.kind == "kth" else f"rand:{self.value:g}"


def _scan_inputs(model: Model, volumes: Sequence[Volume], axis: str, drop: DropSpec,
                 impute: bool, rng: np.random.Generator | None) -> list:
    cnn = model.spec.family == "cnn3d"
    if cnn and drop.kind != "none" and not impute:
        raise ConfigurationError(
            "the 3D-CNN needs complete volumes: evaluate it with imputation when slices are dropped")
    if drop.kind == "none" and (cnn or axis == model.spec.axis):
        return [model.prepare(v) for v in volumes]
    inputs = []
    for v in volumes:
        s = slice_volume(v, axis)
        if drop.kind == "kth":
            s = drop_all_but_kth(s, int(drop.value))
        elif drop.kind == "rand":
            s = drop_random_fraction(s, drop.value, rng)
        if impute:
            s = impute_nearest(s)
        inputs.append(stack_slices(s) if cnn else s)
    return inputs


def mae(pred: np.ndarray, ages: np.ndarray) -> float:
    return float(np.mean(np.abs(np.asarray(pred, dtype=np.float64) - ages)))


def evaluate_runs(model: Model, volumes: Sequence[Volume], axis: str | None = None,
                  drop: DropSpec | str | None = None, impute: bool = False, seed: int = 0,
                  runs: int | Sequence[int] = EVAL_RUNS, batch_size: int = 8) -> list[float]:
    """Per-run test MAE. Random drops are redrawn per scan in every run.

    ``runs`` is either a run count or an explicit list of run ids; run ``r``
    draws its drops from ``default_rng([seed, r])``. Deterministic drop specs
    need only one run.
    """
    drop = drop if isinstance(drop, DropSpec) else DropSpec.parse(drop)
    axis = axis or model.spec.axis
    ages = np.array([v.age for v in volumes], dtype=np.float64)
    run_ids = list(range(runs)) if isinstance(runs, int) else [int(r) for r in runs]
    if not run_ids:
        raise ConfigurationError("need at least one evaluation run")
    if drop.kind != "rand":
        run_ids = run_ids[:1]
    out = []
    for r in run_ids:
        rng = np.random.default_rng([seed, r]) if drop.kind == "rand" else None
        inputs = _scan_inputs(model, volumes, axis, drop, impute, rng)
        out.append(mae(model.predict(inputs, batch_size), ages))
    return out


def evaluate_mae(model: Model, volumes: Sequence[Volume], axis: str | None = None,
                 drop: DropSpec | str | None = None, impute: bool = False, seed: int = 0,
                 runs: int | Sequence[int] = EVAL_RUNS) -> float:
    return float(np.mean(evaluate_runs(model, volumes, axis, drop, impute, seed, runs)))


# -- training -------------------------------------------------------------------------------

def subsample(dataset: Dataset, n: int, seed: int, config: TrainConfig) -> TrainConfig:
    """Config for training on ``n`` subjects with the optimizer-step count of full-data training."""
    full_n = len(dataset.train)
    if not 1 <= n <= full_n:
        raise ValueError(f"subsample size must be in [1, {full_n}], got {n}")
    return replace(config, seed=seed, subsample_n=n,
                   fixed_updates=config.epochs * config.steps_per_epoch(full_n))


def _divergence_message(model: Model, step: int, lr: float, grad_norm: float) -> str:
    msg = f"non-finite loss at step {step} (lr={lr:g}, last grad norm={grad_norm:.4g})"
    if model.spec.family == "slice_rnn":
        msg += f"; the slice-RNN baseline can fail to learn on some axes, retry with lr={DIVERGENCE_REMEDY_LR:g}"
    return msg


def train(model: Model, dataset: Dataset, config: TrainConfig, checkpoint_path=None,
          log: Callable[[str], None] | None = None) -> RunReport:
    """Train in place; the model ends up holding the best-validation parameters."""
    if not dataset.train or not dataset.val:
        raise ConfigurationError("training needs non-empty train and val splits")
    if config.batch_size < 1 or config.epochs < 1:
        raise ConfigurationError("batch_size and epochs must be >= 1")

    rng = np.random.default_rng(config.seed)
    train_vols = list(dataset.train)
    if config.subsample_n is not None:
        keep = np.sort(rng.choice(len(train_vols), size=config.subsample_n, replace=False))
        train_vols = [train_vols[i] for i in keep]
    inputs = [model.prepare(v) for v in train_vols]
    ages = np.array([v.age for v in train_vols], dtype=model.dtype)
    mean_age = float(np.mean(np.asarray(ages, dtype=np.float64)))
    model.set_output_bias(mean_age)

    per_epoch = config.steps_per_epoch(len(dataset.train))
    total = config.fixed_updates or config.epochs * per_epoch
    n_epochs = math.ceil(total / per_epoch)
    val_inputs = [model.prepare(v) for v in dataset.val]
    val_ages = np.array([v.age for v in dataset.val], dtype=np.float64)

    opt = Adam(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    records: list[EpochRecord] = []
    best_state, best_val, best_epoch = None, math.inf, 0
    initial_loss = math.nan
    step, grad_norm = 0, 0.0
    order: list[int] = []

    for epoch in range(1, n_epochs + 1):
        t0 = time.perf_counter()
        losses, max_norm = [], 0.0
        for _ in range(min(per_epoch, total - step)):
            if not order:
                order = list(rng.permutation(len(inputs)))
            batch, order = order[:config.batch_size], order[config.batch_size:]
            pred = model.forward([inputs[i] for i in batch])
            loss = mse_loss(pred, ages[batch])
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericalError(_divergence_message(model, step, opt.lr, grad_norm),
                                     step=step, lr=opt.lr, grad_norm=grad_norm)
            if step == 0:
                initial_loss = value
            loss.backward()
            if config.grad_clip is not None:
                clip_grad_norm(model.parameters(), config.grad_clip)
            grad_norm = global_grad_norm(model.parameters())
            max_norm = max(max_norm, grad_norm)
            opt.step(zero_grad=True)
            losses.append(value)
            step += 1

        val = mae(model.predict(val_inputs), val_ages)
        records.append(EpochRecord(epoch, float(np.mean(losses)), val,
                                   time.perf_counter() - t0, max_norm))
        if log:
            log(f"epoch {epoch:3d}  train_mse {records[-1].train_mse:9.3f}  val_mae {val:7.3f}")
        if val < best_val:
            best_val, best_epoch, best_state = val, epoch, model.state_dict()

    model.load_state_dict(best_state)
    test_mae = evaluate_mae(model, dataset.test) if dataset.test else math.nan
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)

    spec = asdict(model.spec)
    return RunReport(
        epochs=records, best_epoch=best_epoch, test_mae=test_mae, param_count=model.param_count(),
        steps=step, initial_loss=initial_loss, output_bias_init=mean_age,
        config=asdict(config), model={k: list(v) if isinstance(v, tuple) else v for k, v in spec.items()},
        environment=environment_stamp(),
        notes=["targets are raw ages in years",
               "weight decay is decoupled from the Adam update",
               "nearest-slice imputation breaks ties toward the lower index"],
    )
