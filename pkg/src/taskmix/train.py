"""Episode-level optimization loop, episodic evaluation, and metrics logging.

One synthesized episode is one optimizer step: build the task, embed it
with the frozen extractor, run the Q query sequences through the model,
take the mean query cross-entropy, backpropagate, and apply one Adam
update at the scheduled rate. Validation at each epoch end samples
supervised episodes from held-out labeled data and measures single-pass
accuracy. Everything is derived from (config, seed): two runs with the
same inputs produce bit-identical logs and checkpoints.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .datasets import Dataset
from .episodes import (Episode, MixConfig, build_episode,
                       build_episode_augment_only, build_test_episode,
                       multi_dataset_sample)
from .errors import ConfigError, ContractError, TrainingAborted
from .model import (InContextClassifier, ModelConfig, episode_embeddings,
                    forward, init_model, save_checkpoint)
from .optim import AdamState, LrSchedule, adam_step, lr_at
from .rng import derive
from .tensor import Tape, Tensor


@dataclass
class TrainConfig:
    epochs: int = 20
    episodes_per_epoch: int = 200
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 10
    base_lr: float = 5e-4
    final_lr: float = 1e-5
    warmup_steps: int = 200
    aug_count: int = 3
    task_mode: str = "mix"            # "mix" or "augment"
    mix: MixConfig = field(default_factory=MixConfig)
    seed: int = 0
    val_episodes: int = 100
    checkpoint_every: int = 10

    def __post_init__(self):
        if min(self.epochs, self.episodes_per_epoch, self.n_way, self.k_shot,
               self.n_query, self.val_episodes, self.checkpoint_every) < 1:
            raise ConfigError("all counts in the training config must be positive")
        if self.n_query % self.n_way != 0:
            raise ConfigError(
                f"n_query {self.n_query} must be divisible by n_way {self.n_way} "
                "so validation episodes stay class-balanced")
        if self.task_mode not in ("mix", "augment"):
            raise ConfigError(f"task_mode must be 'mix' or 'augment', got {self.task_mode!r}")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.episodes_per_epoch

    def schedule(self) -> LrSchedule:
        return LrSchedule(base_lr=self.base_lr, final_lr=self.final_lr,
                          warmup_steps=self.warmup_steps, total_steps=self.total_steps)


@dataclass
class MetricsLog:
    """Append-only per-epoch records; persisted as a deterministic CSV."""

    val_ids: list[str]
    rows: list[dict] = field(default_factory=list)
    wall_clock: list[float] = field(default_factory=list)

    def append(self, epoch: int, loss: float, lr: float,
               val: dict[str, tuple[float, float]], elapsed: float) -> None:
        row = {"epoch": epoch, "loss": loss, "lr": lr}
        for ds_id in self.val_ids:
            acc, se = val[ds_id]
            row[f"acc_{ds_id}"] = acc
            row[f"se_{ds_id}"] = se
        self.rows.append(row)
        self.wall_clock.append(elapsed)

    def columns(self) -> list[str]:
        cols = ["epoch", "loss", "lr"]
        for ds_id in self.val_ids:
            cols += [f"acc_{ds_id}", f"se_{ds_id}"]
        return cols

    def to_csv(self, path) -> None:
        lines = [",".join(self.columns())]
        for row in self.rows:
            cells = []
            for col in self.columns():
                v = row[col]
                cells.append(str(v) if isinstance(v, int) else format(v, ".17g"))
            lines.append(",".join(cells))
        Path(path).write_text("\n".join(lines) + "\n")

    @staticmethod
    def read_csv(path) -> dict[str, np.ndarray]:
        lines = Path(path).read_text().strip().splitlines()
        header = lines[0].split(",")
        cols = {h: [] for h in header}
        for line in lines[1:]:
            for h, cell in zip(header, line.split(",")):
                cols[h].append(float(cell))
        return {h: np.array(v) for h, v in cols.items()}


def episode_loss(model: InContextClassifier, episode: Episode,
                 embeddings=None) -> Tensor:
    """Mean query cross-entropy; differentiable w.r.t. the trainable params."""
    logits = forward(model, episode, embeddings=embeddings)
    return T.cross_entropy_mean(logits, episode.query_labels)


def _episode_accuracy(model: InContextClassifier, episode: Episode) -> float:
    logits = forward(model, episode)
    pred = logits.data.argmax(axis=1)  # argmax ties resolve to the lowest index
    return float((pred == episode.query_labels).mean())


def evaluate(model: InContextClassifier, ds: Dataset, n_tasks: int = 500,
             n_way: int = 5, k_shot: int = 1, n_query: int = 15,
             seed: int = 0) -> tuple[float, float]:
    """Mean single-pass episodic accuracy and its standard error.

    Evaluation never updates parameters; a checksum taken before and after
    guards the invariant.
    """
    if n_tasks < 1:
        raise ContractError(f"n_tasks must be >= 1, got {n_tasks}")
    before = model.checksum()
    accs = np.empty(n_tasks)
    for t in range(n_tasks):
        episode = build_test_episode(ds, n_way, k_shot, n_query,
                                     seed=derive(seed, "eval-task", t))
        accs[t] = _episode_accuracy(model, episode)
    if model.checksum() != before:
        raise ContractError("evaluation mutated model parameters")
    se = float(accs.std(ddof=0) / np.sqrt(n_tasks))
    return float(accs.mean()), se


def relative_accuracy(series) -> np.ndarray:
    """Accuracy gain over the first epoch: out[t] = in[t] - in[0]."""
    series = np.asarray(series, dtype=np.float64)
    if series.size == 0:
        raise ContractError("relative_accuracy needs a non-empty series")
    return series - series[0]


def _build_train_episode(cfg: TrainConfig, ds: Dataset, seed: int) -> Episode:
    if cfg.task_mode == "augment":
        return build_episode_augment_only(ds, cfg.n_way, cfg.k_shot, cfg.n_query,
                                          aug_count=cfg.aug_count, seed=seed)
    return build_episode(ds, cfg.n_way, cfg.k_shot, cfg.n_query, mix=cfg.mix,
                         aug_count=cfg.aug_count, seed=seed)


def train(cfg: TrainConfig, train_datasets: list[Dataset],
          val_datasets: list[Dataset] | None = None, out_dir=None,
          model: InContextClassifier | None = None,
          model_cfg: ModelConfig | None = None,
          adam: AdamState | None = None,
          start_epoch: int = 0,
          log_fn=None) -> tuple[InContextClassifier, MetricsLog]:
    """Run the optimization loop; returns the trained model and its log.

    Pass `model`/`adam`/`start_epoch` from a loaded checkpoint to resume.
    When several training datasets are given, each episode first picks one
    uniformly. A non-finite loss aborts with the episode's provenance.
    """
    if not train_datasets:
        raise ConfigError("train() needs at least one training dataset")
    val_datasets = val_datasets or []
    train_datasets = [ds.without_labels() if ds.labeled else ds for ds in train_datasets]
    if model is None:
        from .model import desk_config

        model_cfg = model_cfg or desk_config(extractor_seed=derive(cfg.seed, "extractor"))
        model = init_model(model_cfg, seed=derive(cfg.seed, "model"))
    if adam is None:
        adam = AdamState.init(model.params)
    schedule = cfg.schedule()
    metrics = MetricsLog(val_ids=[ds.id for ds in val_datasets])
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.monotonic()
        loss_sum = 0.0
        lr = schedule.base_lr
        for i in range(cfg.episodes_per_epoch):
            step = epoch * cfg.episodes_per_epoch + i
            ep_seed = derive(cfg.seed, "train", epoch, i)
            if len(train_datasets) > 1:
                ds = train_datasets[multi_dataset_sample(train_datasets,
                                                         derive(ep_seed, "pick"))]
            else:
                ds = train_datasets[0]
            episode = _build_train_episode(cfg, ds, ep_seed)
            with Tape() as tape:
                loss = episode_loss(model, episode)
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingAborted(
                        f"non-finite loss {value} at step {step}", step,
                        episode.provenance)
                grads = T.backward(tape, loss)
            lr = lr_at(schedule, step)
            new_params, adam = adam_step(model.params, grads, adam, lr)
            model.replace_params(new_params)
            loss_sum += value
        val_results = {}
        for vi, ds in enumerate(val_datasets):
            acc, se = evaluate(model, ds, n_tasks=cfg.val_episodes,
                               n_way=cfg.n_way, k_shot=cfg.k_shot,
                               n_query=cfg.n_query,
                               seed=derive(cfg.seed, "val", epoch, vi))
            val_results[ds.id] = (acc, se)
        elapsed = time.monotonic() - t0
        metrics.append(epoch, loss_sum / cfg.episodes_per_epoch, lr, val_results, elapsed)
        if log_fn is not None:
            log_fn(metrics.rows[-1], elapsed)
        if out_dir is not None and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"checkpoint_epoch{epoch + 1:04d}.cmlt", model,
                            meta={"epoch": epoch + 1, "train_config": _cfg_dict(cfg)},
                            adam=adam)
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint_final.cmlt", model,
                        meta={"epoch": cfg.epochs, "train_config": _cfg_dict(cfg)},
                        adam=adam)
        metrics.to_csv(out_dir / "metrics.csv")
    return model, metrics


def _cfg_dict(cfg: TrainConfig) -> dict:
    out = asdict(cfg)
    out["mix"] = asdict(cfg.mix)
    return out
