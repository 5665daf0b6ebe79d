"""Semi-supervised training: warmup on labeled data, confidence-filtered
pseudo-labeling, weighted pseudo passes, optional noise-consistency term.

Epoch structure (0-indexed epoch e):
  (a) labeled mini-batch pass, unweighted cross-entropy;
  (b) if e >= warmup_epochs: regenerate pseudo-labels from the current
      model over the unlabeled pool, then a pseudo pass weighted by
      pseudo_weight (skipped silently when the set is empty);
  (c) if consistency_weight > 0: noise-consistency pass on unlabeled data;
  (d) scheduler step.

Every stochastic choice draws from a named per-seed stream, and streams
are only consumed by passes that actually run, so tau = 1.0 reproduces
the plain supervised loop bit for bit.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .data import ArrayDataset, DatasetSplit
from .diffusion import NoiseSchedule, consistency_loss, forward_diffuse
from .errors import ConfigError, FormatError
from .metrics import (ConfusionMatrix, MetricsReport, aggregate_runs,
                      evaluate_predictions, write_predictions_jsonl)
from .model import DCSWin, ModelConfig
from .rng import restore, state_of, stream
from .serialization import config_to_text, load_checkpoint, save_checkpoint
from .tensor import Tensor, backward, cross_entropy, no_grad

OPTIMIZER_KINDS = ("adam", "sgd")
SCHEDULER_KINDS = ("cosine", "step")
_STREAM_NAMES = ("shuffle-labeled", "shuffle-pseudo", "shuffle-unlabeled",
                 "diffusion-noise", "augment-noise")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    initial_lr: float = 1e-4
    batch_size: int = 16
    tau: float = 0.9
    pseudo_weight: float = 0.8
    warmup_epochs: int = 2
    optimizer: str = "adam"
    momentum: float = 0.9
    scheduler: str = "cosine"
    min_lr_fraction: float = 0.01
    step_size: int = 20
    step_gamma: float = 0.5
    consistency_weight: float = 0.0
    consistency_t_max: int = 10
    augment_t: int = 0
    diffusion_steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    checkpoint_every: int = 10
    num_runs: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.initial_lr <= 0:
            raise ConfigError(f"initial_lr must be positive, got {self.initial_lr}")
        # tau = 1.0 is the supervised arm (set saturates empty), so the
        # closed upper end is allowed.
        if not (0.0 < self.tau <= 1.0):
            raise ConfigError(f"tau must be in (0, 1], got {self.tau}")
        if not (0.0 < self.pseudo_weight <= 1.0):
            raise ConfigError(f"pseudo_weight must be in (0, 1], got "
                              f"{self.pseudo_weight}")
        # warmup_epochs = epochs degenerates to fully-supervised training.
        if not (0 <= self.warmup_epochs <= self.epochs):
            raise ConfigError(f"warmup_epochs must be in [0, epochs], got "
                              f"{self.warmup_epochs}")
        if self.optimizer not in OPTIMIZER_KINDS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZER_KINDS}, "
                              f"got {self.optimizer!r}")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.scheduler not in SCHEDULER_KINDS:
            raise ConfigError(f"scheduler must be one of {SCHEDULER_KINDS}, "
                              f"got {self.scheduler!r}")
        if not (0.0 < self.min_lr_fraction <= 1.0):
            raise ConfigError(f"min_lr_fraction must be in (0, 1], got "
                              f"{self.min_lr_fraction}")
        if self.step_size < 1:
            raise ConfigError(f"step_size must be >= 1, got {self.step_size}")
        if not (0.0 < self.step_gamma <= 1.0):
            raise ConfigError(f"step_gamma must be in (0, 1], got "
                              f"{self.step_gamma}")
        if self.consistency_weight < 0:
            raise ConfigError(f"consistency_weight must be >= 0, got "
                              f"{self.consistency_weight}")
        if self.diffusion_steps < 1:
            raise ConfigError(f"diffusion_steps must be >= 1, got "
                              f"{self.diffusion_steps}")
        if not (1 <= self.consistency_t_max <= self.diffusion_steps):
            raise ConfigError(f"consistency_t_max must be in [1, "
                              f"{self.diffusion_steps}], got "
                              f"{self.consistency_t_max}")
        if not (0 <= self.augment_t <= self.diffusion_steps):
            raise ConfigError(f"augment_t must be in [0, "
                              f"{self.diffusion_steps}], got {self.augment_t}")
        if self.checkpoint_every < 1:
            raise ConfigError(f"checkpoint_every must be >= 1, got "
                              f"{self.checkpoint_every}")
        if self.num_runs < 1:
            raise ConfigError(f"num_runs must be >= 1, got {self.num_runs}")

    def learning_rate(self, epoch: int) -> float:
        """lr as a function of epoch index; cosine runs from initial_lr at
        epoch 0 down to min_lr_fraction * initial_lr at epoch == epochs."""
        if self.scheduler == "cosine":
            lo = self.min_lr_fraction * self.initial_lr
            return lo + 0.5 * (self.initial_lr - lo) * \
                (1.0 + math.cos(math.pi * epoch / self.epochs))
        return self.initial_lr * self.step_gamma ** (epoch // self.step_size)

    def to_mapping(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = repr(v) if isinstance(v, float) else str(v)
        return out

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, str]) -> "TrainConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in mapping:
                continue
            raw = mapping[f.name]
            if f.type == "int":
                kwargs[f.name] = int(raw)
            elif f.type == "float":
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = str(raw)
        return cls(**kwargs)


# ---- optimizers -------------------------------------------------------------

class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8).

    A parameter whose moments are zero and whose gradient is zero (or
    absent) is left exactly unchanged.
    """
    kind = "adam"

    def __init__(self, params: Mapping[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float) -> None:
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad if p.grad is not None else 0.0
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2)
                                                 + self.eps)
            p.data = p.data - update

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"opt.m.{name}"] = self.m[name].copy()
            out[f"opt.v.{name}"] = self.v[name].copy()
        return out

    def load_state_tensors(self, tensors: Mapping[str, np.ndarray],
                           step_count: int) -> None:
        for name in self.params:
            try:
                self.m[name] = np.asarray(tensors[f"opt.m.{name}"]).copy()
                self.v[name] = np.asarray(tensors[f"opt.v.{name}"]).copy()
            except KeyError as e:
                raise FormatError(f"checkpoint missing optimizer state "
                                  f"{e.args[0]!r}") from None
        self.step_count = step_count


class SGD:
    """SGD with classical momentum."""
    kind = "sgd"

    def __init__(self, params: Mapping[str, Tensor], momentum: float = 0.9):
        self.params = dict(params)
        self.momentum = momentum
        self.step_count = 0
        self.vel = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float) -> None:
        self.step_count += 1
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad if p.grad is not None else 0.0
            self.vel[name] = self.momentum * self.vel[name] + g
            p.data = p.data - lr * self.vel[name]

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {f"opt.vel.{k}": v.copy() for k, v in self.vel.items()}

    def load_state_tensors(self, tensors: Mapping[str, np.ndarray],
                           step_count: int) -> None:
        for name in self.params:
            try:
                self.vel[name] = np.asarray(tensors[f"opt.vel.{name}"]).copy()
            except KeyError as e:
                raise FormatError(f"checkpoint missing optimizer state "
                                  f"{e.args[0]!r}") from None
        self.step_count = step_count


def make_optimizer(cfg: TrainConfig, params: Mapping[str, Tensor]):
    if cfg.optimizer == "adam":
        return Adam(params)
    return SGD(params, momentum=cfg.momentum)


# ---- pseudo-labels ----------------------------------------------------------

@dataclass(frozen=True)
class PseudoLabel:
    id: str
    label: int
    confidence: float


@dataclass(frozen=True)
class PseudoLabelSet:
    records: tuple[PseudoLabel, ...]
    tau: float

    def __post_init__(self):
        for rec in self.records:
            if not rec.confidence > self.tau:
                raise ConfigError(f"pseudo-label {rec.id!r} has confidence "
                                  f"{rec.confidence} <= tau {self.tau}")

    def __len__(self) -> int:
        return len(self.records)

    def ids(self) -> list[str]:
        return [rec.id for rec in self.records]

    def labels(self) -> np.ndarray:
        return np.array([rec.label for rec in self.records], dtype=np.int64)


def generate_pseudo_labels(model: DCSWin, dataset: ArrayDataset,
                           unlabeled_ids: Sequence[str], tau: float,
                           batch_size: int = 64) -> PseudoLabelSet:
    """Inference over the unlabeled pool in manifest (lexicographic) order;
    keep argmax labels whose max softmax probability is strictly above tau."""
    ids = sorted(unlabeled_ids)
    records: list[PseudoLabel] = []
    with no_grad():
        for start in range(0, len(ids), batch_size):
            chunk = ids[start:start + batch_size]
            logits = model(Tensor(dataset.batch(chunk)))
            probs = T.softmax(logits, axis=1).data
            labels = probs.argmax(axis=1)
            confidences = probs.max(axis=1)
            for i, sample_id in enumerate(chunk):
                if confidences[i] > tau:
                    records.append(PseudoLabel(sample_id, int(labels[i]),
                                               float(confidences[i])))
    return PseudoLabelSet(tuple(records), tau)


# ---- checkpoint state -------------------------------------------------------

def _checkpoint_config(model: DCSWin, cfg: TrainConfig, epoch_next: int,
                       opt, rngs: dict, dataset: ArrayDataset) -> dict[str, str]:
    config = model.cfg.to_mapping()
    for key, value in cfg.to_mapping().items():
        config[f"train.{key}"] = value
    config["progress.epoch_next"] = str(epoch_next)
    config["opt.kind"] = opt.kind
    config["opt.step"] = str(opt.step_count)
    for name in _STREAM_NAMES:
        config[f"rng.{name}"] = json.dumps(state_of(rngs[name]))
    config["norm.mean"] = json.dumps([float(v) for v in dataset.norm_mean])
    config["norm.std"] = json.dumps([float(v) for v in dataset.norm_std])
    config["data.classes"] = json.dumps(list(dataset.class_names))
    return config


def _save_state(path: Path, model: DCSWin, cfg: TrainConfig, epoch_next: int,
                opt, rngs: dict, dataset: ArrayDataset) -> None:
    tensors = model.state_dict()
    tensors.update(opt.state_tensors())
    tmp = path.with_name(path.name + ".tmp")
    save_checkpoint(tmp, _checkpoint_config(model, cfg, epoch_next, opt, rngs,
                                            dataset), tensors)
    tmp.replace(path)


def _load_state(path: Path, model: DCSWin, cfg: TrainConfig, opt,
                dataset: ArrayDataset) -> tuple[int, dict]:
    config, tensors = load_checkpoint(path)
    for key, value in model.cfg.to_mapping().items():
        if config.get(key) != value:
            raise FormatError(f"checkpoint/config mismatch: {key!r} is "
                              f"{config.get(key)!r} in checkpoint, {value!r} "
                              "in the requested run")
    for key, value in cfg.to_mapping().items():
        if config.get(f"train.{key}") != value:
            raise FormatError(f"checkpoint/config mismatch: train.{key} is "
                              f"{config.get('train.' + key)!r} in checkpoint, "
                              f"{value!r} in the requested run")
    stored_mean = json.loads(config["norm.mean"])
    if not np.array_equal(np.asarray(stored_mean), dataset.norm_mean):
        raise FormatError("checkpoint/config mismatch: normalization stats "
                          "differ from the current labeled pool")
    model.load_state({k: v for k, v in tensors.items()
                      if not k.startswith("opt.")})
    opt.load_state_tensors(tensors, int(config["opt.step"]))
    rngs = {name: restore(json.loads(config[f"rng.{name}"]))
            for name in _STREAM_NAMES}
    return int(config["progress.epoch_next"]), rngs


# ---- the loop ---------------------------------------------------------------

def _batches(order: Sequence[str], batch_size: int):
    for start in range(0, len(order), batch_size):
        yield list(order[start:start + batch_size])


def train(model: DCSWin, dataset: ArrayDataset, split: DatasetSplit,
          cfg: TrainConfig, run_dir: Optional[Union[str, Path]] = None,
          *, resume: bool = True, stop_after: Optional[int] = None,
          step_listener: Optional[Callable[[dict], None]] = None
          ) -> list[dict]:
    """Run the loop; returns the per-epoch log records.

    With `run_dir` set, appends `epochs.jsonl` and checkpoints `state.dcsm`
    at the configured cadence; an existing state file resumes the run at
    its recorded epoch. `stop_after` ends the run early after that many
    epochs (checkpointing first), simulating an interruption.
    `step_listener` receives {kind, epoch, ids, loss} after every
    optimizer step.
    """
    labeled_ids = sorted(split.labeled)
    unlabeled_ids = sorted(split.unlabeled)
    if not labeled_ids:
        raise ConfigError("labeled split is empty")
    if dataset.norm_mean is None:
        dataset.fit_normalization(labeled_ids)

    opt = make_optimizer(cfg, model.named_params())
    rngs = {name: stream(cfg.seed, name) for name in _STREAM_NAMES}
    schedule = (NoiseSchedule.linear(cfg.diffusion_steps, cfg.beta_start,
                                     cfg.beta_end)
                if (cfg.consistency_weight > 0 or cfg.augment_t > 0)
                else None)

    def augment(batch: np.ndarray) -> np.ndarray:
        """Forward-diffusion jitter on a training batch; pseudo-label
        inference and evaluation always see clean inputs."""
        if cfg.augment_t == 0:
            return batch
        rng = rngs["augment-noise"]
        ts = rng.integers(1, cfg.augment_t + 1, size=batch.shape[0])
        out = np.empty_like(batch)
        for i in range(batch.shape[0]):
            out[i] = forward_diffuse(batch[i], int(ts[i]), schedule, rng)
        return out

    run_dir = Path(run_dir) if run_dir is not None else None
    state_path = log_path = None
    start_epoch = 0
    records: list[dict] = []
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        state_path = run_dir / "state.dcsm"
        log_path = run_dir / "epochs.jsonl"
        if resume and state_path.exists():
            start_epoch, rngs = _load_state(state_path, model, cfg, opt, dataset)
        # keep only the log lines the checkpoint vouches for
        lines = (log_path.read_text(encoding="utf-8").splitlines()
                 if log_path.exists() else [])[:start_epoch]
        if len(lines) < start_epoch:
            raise FormatError(f"epoch log {log_path} has {len(lines)} lines "
                              f"but checkpoint resumes at epoch {start_epoch}")
        records = [json.loads(line) for line in lines]
        log_path.write_text("".join(line + "\n" for line in lines),
                            encoding="utf-8")

    def emit(kind: str, epoch: int, ids: Sequence[str], loss: float) -> None:
        if step_listener is not None:
            step_listener({"kind": kind, "epoch": epoch, "ids": tuple(ids),
                           "loss": loss})

    truth_all = dataset.labels  # synthetic pools carry ground truth

    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        lr = cfg.learning_rate(epoch)

        perm = rngs["shuffle-labeled"].permutation(len(labeled_ids))
        order = [labeled_ids[i] for i in perm]
        total, seen = 0.0, 0
        for chunk in _batches(order, cfg.batch_size):
            x = Tensor(augment(dataset.batch(chunk)))
            y = dataset.labels_for(chunk)
            model.zero_grad()
            loss = cross_entropy(model(x), y)
            backward(loss)
            opt.step(lr)
            total += float(loss.data) * len(chunk)
            seen += len(chunk)
            emit("labeled", epoch, chunk, float(loss.data))
        labeled_loss = total / seen

        pseudo_loss: Optional[float] = None
        pseudo_count = 0
        pseudo_precision: Optional[float] = None
        if epoch >= cfg.warmup_epochs and unlabeled_ids:
            pseudo = generate_pseudo_labels(model, dataset, unlabeled_ids,
                                            cfg.tau, cfg.batch_size)
            pseudo_count = len(pseudo)
            if pseudo_count > 0:
                truth = truth_all[dataset.rows(pseudo.ids())]
                pseudo_precision = float(np.mean(pseudo.labels() == truth))
                perm = rngs["shuffle-pseudo"].permutation(pseudo_count)
                p_ids = pseudo.ids()
                p_labels = pseudo.labels()
                total, seen = 0.0, 0
                for idx in _batches([int(i) for i in perm], cfg.batch_size):
                    chunk = [p_ids[i] for i in idx]
                    y = p_labels[idx]
                    model.zero_grad()
                    ce = cross_entropy(model(Tensor(augment(
                        dataset.batch(chunk)))), y)
                    loss = T.scale(ce, cfg.pseudo_weight)
                    backward(loss)
                    opt.step(lr)
                    total += float(loss.data) * len(chunk)
                    seen += len(chunk)
                    emit("pseudo", epoch, chunk, float(loss.data))
                pseudo_loss = total / seen

        if cfg.consistency_weight > 0 and unlabeled_ids:
            perm = rngs["shuffle-unlabeled"].permutation(len(unlabeled_ids))
            order = [unlabeled_ids[i] for i in perm]
            for chunk in _batches(order, cfg.batch_size):
                model.zero_grad()
                closs = consistency_loss(model, dataset.batch(chunk), schedule,
                                         cfg.consistency_t_max,
                                         rngs["diffusion-noise"])
                loss = T.scale(closs, cfg.consistency_weight)
                backward(loss)
                opt.step(lr)
                emit("consistency", epoch, chunk, float(loss.data))

        record = {
            "epoch": epoch,
            "labeled_loss": labeled_loss,
            "pseudo_loss": pseudo_loss,
            "pseudo_count": pseudo_count,
        }
        if pseudo_precision is not None:
            record["pseudo_precision"] = pseudo_precision
        record["lr"] = lr
        record["wall_ms"] = (time.perf_counter() - t0) * 1000.0
        records.append(record)

        done = epoch + 1
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record) + "\n")
        if state_path is not None and (done % cfg.checkpoint_every == 0
                                       or done == cfg.epochs
                                       or done == stop_after):
            _save_state(state_path, model, cfg, done, opt, rngs, dataset)
        if stop_after is not None and done >= stop_after:
            break

    return records


# ---- evaluation helpers -----------------------------------------------------

def predict_probs(model: DCSWin, dataset: ArrayDataset, ids: Sequence[str],
                  batch_size: int = 64) -> np.ndarray:
    """[n, num_classes] softmax probabilities, rows in id order."""
    out = []
    with no_grad():
        for start in range(0, len(ids), batch_size):
            chunk = list(ids[start:start + batch_size])
            logits = model(Tensor(dataset.batch(chunk)))
            out.append(T.softmax(logits, axis=1).data)
    return np.concatenate(out, axis=0)


def evaluate_model(model: DCSWin, dataset: ArrayDataset, ids: Sequence[str],
                   batch_size: int = 64
                   ) -> tuple[dict[str, float], ConfusionMatrix, np.ndarray]:
    probs = predict_probs(model, dataset, ids, batch_size)
    truth = dataset.labels_for(ids)
    values, cm = evaluate_predictions(truth, probs, len(dataset.class_names),
                                      dataset.class_names)
    return values, cm, probs


# ---- multi-seed orchestration -------------------------------------------------

def write_run_config(path: Union[str, Path], model_cfg: ModelConfig,
                     cfg: TrainConfig, seeds: Sequence[int],
                     extra: Optional[Mapping[str, str]] = None) -> None:
    mapping: dict[str, str] = {}
    for key, value in model_cfg.to_mapping().items():
        mapping[f"model.{key}"] = value
    for key, value in cfg.to_mapping().items():
        mapping[f"train.{key}"] = value
    mapping["run.seeds"] = ",".join(str(s) for s in seeds)
    for key, value in (extra or {}).items():
        mapping[str(key)] = str(value)
    Path(path).write_text(config_to_text(mapping), encoding="utf-8")


def load_run_config(path: Union[str, Path]
                    ) -> tuple[ModelConfig, TrainConfig, dict[str, str]]:
    """Parse a run config file of `model.*` / `train.*` keys; remaining keys
    are returned verbatim."""
    from .serialization import load_config_file
    mapping = load_config_file(path)
    model_map = {k[len("model."):]: v for k, v in mapping.items()
                 if k.startswith("model.")}
    train_map = {k[len("train."):]: v for k, v in mapping.items()
                 if k.startswith("train.")}
    rest = {k: v for k, v in mapping.items()
            if not k.startswith(("model.", "train."))}
    return (ModelConfig.from_mapping(model_map),
            TrainConfig.from_mapping(train_map), rest)


def run_experiment(dataset: ArrayDataset, split: DatasetSplit,
                   model_cfg: ModelConfig, cfg: TrainConfig,
                   out_dir: Union[str, Path], seeds: Sequence[int],
                   *, resume: bool = True,
                   extra_config: Optional[Mapping[str, str]] = None
                   ) -> MetricsReport:
    """One training run per seed, each in `out_dir/seed<k>/` with its epoch
    log, checkpoint, test predictions, metrics, and confusion matrix; the
    aggregate report lands in `out_dir/report.json`."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if dataset.norm_mean is None:
        dataset.fit_normalization(split.labeled)
    write_run_config(out_dir / "run_config.txt", model_cfg, cfg, seeds,
                     extra_config)
    test_ids = sorted(split.test)
    run_values = []
    for seed in seeds:
        run_cfg = replace(cfg, seed=int(seed))
        model = DCSWin(model_cfg, seed=int(seed))
        seed_dir = out_dir / f"seed{seed}"
        train(model, dataset, split, run_cfg, run_dir=seed_dir, resume=resume)
        values, cm, probs = evaluate_model(model, dataset, test_ids)
        write_predictions_jsonl(seed_dir / "predictions.jsonl", test_ids,
                                dataset.labels_for(test_ids), probs)
        (seed_dir / "metrics.json").write_text(
            json.dumps(values, indent=2, sort_keys=True) + "\n",
            encoding="utf-8")
        cm.to_csv(seed_dir / "confusion.csv")
        run_values.append(values)
    report = aggregate_runs(run_values, [int(s) for s in seeds])
    report.save(out_dir / "report.json")
    return report
