"""End-to-end training under average-MSE loss with a randomized per-iteration SNR."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch

from snrjscc.channel import awgn, derive_seed, snr_to_variance
from snrjscc.data import batches
from snrjscc.evaluation import mean_test_psnr
from snrjscc.model import JSCC, ModelConfig, build_model, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainSchedule:
    initial_lr: float = 1e-4
    decay_factor: float = 0.9
    decay_every: int = 10
    batch_size: int = 64
    train_snr_list: list[float] = field(default_factory=lambda: [0.0, 5.0, 10.0, 15.0, 20.0, 25.0])
    test_snr_list: list[float] = field(default_factory=lambda: [0.0, 5.0, 10.0, 15.0, 20.0])
    single_snr: float | None = None
    per_image_snr: bool = False
    patience: int = 15
    max_epochs: int = 300
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self) -> None:
        self.betas = tuple(self.betas)  # type: ignore[assignment]
        if self.single_snr is None and not self.train_snr_list:
            raise ValueError("need a non-empty train_snr_list or a single_snr")
        if self.batch_size < 1 or self.decay_every < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ValueError("batch_size, decay_every and max_epochs must be >= 1; patience >= 0")

    @property
    def baseline_mode(self) -> bool:
        return self.single_snr is not None

    def eval_snrs(self) -> list[float]:
        return [float(self.single_snr)] if self.baseline_mode else [float(s) for s in self.test_snr_list]

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainSchedule":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown TrainSchedule keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    best_metric: float = -math.inf
    epochs_since_improvement: int = 0
    best_epoch: int = -1


def lr_at_epoch(schedule: TrainSchedule, epoch: int) -> float:
    return schedule.initial_lr * schedule.decay_factor ** (epoch // schedule.decay_every)


def mse_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean over images of the per-image ``||x - x_hat||^2 / n``."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    per_image = (x - x_hat).pow(2).reshape(x.shape[0], -1).mean(dim=1)
    return per_image.mean()


def sample_train_snr(schedule: TrainSchedule, step: int) -> float:
    """Uniform draw from the training SNR list, fixed by ``(seed, step)``."""
    if schedule.baseline_mode:
        return float(schedule.single_snr)
    rng = np.random.default_rng([schedule.seed, step])
    return float(schedule.train_snr_list[rng.integers(len(schedule.train_snr_list))])


def sample_train_snrs(schedule: TrainSchedule, step: int, n: int) -> np.ndarray:
    """Per-image variant: ``n`` independent draws for one step."""
    if schedule.baseline_mode:
        return np.full(n, float(schedule.single_snr))
    rng = np.random.default_rng([schedule.seed, step, 1])
    return np.asarray(schedule.train_snr_list, dtype=np.float64)[rng.integers(len(schedule.train_snr_list), size=n)]


class Trainer:
    """Holds model, Adam optimizer and counters; one instance per training run."""

    def __init__(self, model: JSCC, schedule: TrainSchedule, state: TrainState | None = None):
        self.model = model
        self.schedule = schedule
        self.state = state or TrainState()
        self.optimizer = torch.optim.Adam(
            model.parameters(), lr=lr_at_epoch(schedule, self.state.epoch), betas=schedule.betas, eps=schedule.eps
        )

    def set_lr(self, lr: float) -> None:
        for g in self.optimizer.param_groups:
            g["lr"] = lr

    def train_step(self, images: torch.Tensor) -> float:
        """Forward through a channel at the sampled SNR, backward, Adam update.

        The decoder is told the true noise variance of the sampled channel.
        """
        sch, st = self.schedule, self.state
        if sch.per_image_snr:
            variance: Any = torch.tensor([snr_to_variance(s) for s in sample_train_snrs(sch, st.step, len(images))])
        else:
            variance = snr_to_variance(sample_train_snr(sch, st.step))
        gen = torch.Generator().manual_seed(derive_seed(sch.seed, st.step, 7))
        self.model.train()
        y = self.model.encode(images)
        z = awgn(y, variance, generator=gen).received
        loss = mse_loss(images, self.model.decode(z, variance))
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite loss {loss.item()} at step {st.step} (epoch {st.epoch})")
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        st.step += 1
        return float(loss.detach())


@dataclass
class TrainResult:
    model: JSCC
    state: TrainState
    history: list[dict[str, Any]]
    checkpoint: Path | None = None


def train(
    train_images: np.ndarray,
    test_images: np.ndarray,
    schedule: TrainSchedule,
    config: ModelConfig,
    out_dir: str | Path | None = None,
    resume: bool = False,
    on_epoch: Callable[[dict[str, Any]], None] | None = None,
) -> TrainResult:
    """Train with lr decay and early stopping on mean test PSNR; keep the best weights.

    With ``out_dir`` the run writes ``best.ckpt``, ``last.ckpt`` (optimizer
    state included, for ``resume=True``) and an append-only ``train_log.jsonl``.
    """
    out = Path(out_dir) if out_dir is not None else None
    model = build_model(config)
    trainer = Trainer(model, schedule)
    best_state = copy.deepcopy(model.state_dict())
    history: list[dict[str, Any]] = []

    if resume and out is not None and (out / "last.ckpt").exists():
        last, extras = load_checkpoint(out / "last.ckpt")
        model.load_state_dict(last.state_dict())
        trainer.state = TrainState(**extras["train_state"])
        trainer.optimizer.load_state_dict(extras["optimizer"])
        if (out / "best.ckpt").exists():
            best_state = copy.deepcopy(load_checkpoint(out / "best.ckpt")[0].state_dict())
        log.info("resumed at epoch %d, step %d", trainer.state.epoch, trainer.state.step)

    st = trainer.state
    while st.epoch < schedule.max_epochs:
        lr = lr_at_epoch(schedule, st.epoch)
        trainer.set_lr(lr)
        losses = [
            trainer.train_step(torch.from_numpy(b.pixels))
            for b in batches(train_images, schedule.batch_size, shuffle_seed=schedule.seed, epoch=st.epoch)
        ]
        per_snr = mean_test_psnr(model, test_images, schedule.eval_snrs(), seed=schedule.seed)
        metric = float(np.mean(list(per_snr.values())))
        improved = metric > st.best_metric
        if improved:
            st.best_metric, st.best_epoch, st.epochs_since_improvement = metric, st.epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            st.epochs_since_improvement += 1
        row = {
            "epoch": st.epoch,
            "step": st.step,
            "lr": lr,
            "train_loss": float(np.mean(losses)) if losses else float("nan"),
            "test_psnr": {repr(k): v for k, v in per_snr.items()},
            "mean_test_psnr": metric,
        }
        history.append(row)
        log.info("epoch %d lr %.3g loss %.5f test PSNR %.3f dB", st.epoch, lr, row["train_loss"], metric)
        if on_epoch is not None:
            on_epoch(row)
        st.epoch += 1
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            with open(out / "train_log.jsonl", "a") as f:
                f.write(json.dumps(row, sort_keys=True) + "\n")
            if improved:
                save_checkpoint(out / "best.ckpt", model, asdict(st))
            save_checkpoint(out / "last.ckpt", model, asdict(st), trainer.optimizer)
        if st.epochs_since_improvement > 0 and st.epochs_since_improvement >= schedule.patience:
            log.info("no improvement for %d epochs, stopping", st.epochs_since_improvement)
            break

    model.load_state_dict(best_state)
    ckpt = out / "best.ckpt" if out is not None else None
    return TrainResult(model, st, history, ckpt)
