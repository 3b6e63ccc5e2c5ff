"""Both training objectives, the alternating update schedule, learning-rate
decay, checkpointing, and seed sweeps.

Objectives: "gan" is the plain adversarial game; "gan_freq" adds
lambda_freq x the L1 distance between DC-excluded DFT magnitude spectra of
synthetic and real ECG windows. The generator steps every iteration, the
discriminator every ``d_update_period``-th. Learning rates hold for
``lr_constant_epochs`` epochs, then decay linearly (per iteration) to exactly
zero at the end of training. Given a seed, a run is fully deterministic: the
only randomness is the seeded parameter init and the seeded batch order.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .dataset import PairStore, batches_per_epoch, iter_batches
from .evaluation import evaluate_store, mape
from .models import (
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    build_discriminator,
    build_generator,
    save_checkpoint,
    load_checkpoint,
)

log = logging.getLogger(__name__)

OBJECTIVES = ("gan", "gan_freq")
GENERATOR_VARIANTS = ("non_saturating", "minimax")
SCORE_EPS = 1e-7

_DEFAULT_EPOCHS = {"gan": 15, "gan_freq": 11}
_DEFAULT_CONSTANT_EPOCHS = {"gan": 4, "gan_freq": 5}


@dataclass
class TrainConfig:
    objective: str = "gan_freq"
    seed: int = 0
    lr_g: float = 1e-4
    lr_d: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 128
    d_update_period: int = 5
    epochs: int | None = None              # None -> 15 (gan) / 11 (gan_freq)
    lr_constant_epochs: int | None = None  # None -> 4 (gan) / 5 (gan_freq)
    lambda_freq: float = 0.1
    generator_variant: str = "non_saturating"
    drop_last: bool = True
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.generator_variant not in GENERATOR_VARIANTS:
            raise ValueError(f"unknown generator variant {self.generator_variant!r}")
        if self.epochs is None:
            self.epochs = _DEFAULT_EPOCHS[self.objective]
        if self.lr_constant_epochs is None:
            self.lr_constant_epochs = _DEFAULT_CONSTANT_EPOCHS[self.objective]
        if not (self.lr_g > 0 and self.lr_d > 0):
            raise ValueError("learning rates must be positive")
        if not 0 <= self.lr_constant_epochs < self.epochs:
            raise ValueError("need 0 <= lr_constant_epochs < epochs")
        if self.lambda_freq < 0:
            raise ValueError("lambda_freq must be non-negative")

    @property
    def effective_lambda(self) -> float:
        return self.lambda_freq if self.objective == "gan_freq" else 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        if "betas" in data:
            data["betas"] = tuple(data["betas"])
        if "generator" in data and isinstance(data["generator"], dict):
            g = dict(data["generator"])
            g["encoder_filters"] = tuple(g["encoder_filters"])
            g["encoder_strides"] = tuple(g["encoder_strides"])
            data["generator"] = GeneratorConfig(**g)
        if "discriminator" in data and isinstance(data["discriminator"], dict):
            d = dict(data["discriminator"])
            d["filters"] = tuple(d["filters"])
            data["discriminator"] = DiscriminatorConfig(**d)
        return cls(**data)


@dataclass
class ClampStats:
    """Counts scores that had to be clamped away from {0, 1} before a log."""

    events: int = 0


def _safe_log(scores: torch.Tensor, stats: ClampStats | None) -> torch.Tensor:
    if stats is not None:
        stats.events += int((scores <= SCORE_EPS).sum() + (scores >= 1 - SCORE_EPS).sum())
    return torch.log(scores.clamp(SCORE_EPS, 1.0 - SCORE_EPS))


def adversarial_loss(d_real: torch.Tensor, d_fake: torch.Tensor,
                     variant: str = "non_saturating",
                     clamp_stats: ClampStats | None = None,
                     ) -> tuple[torch.Tensor, torch.Tensor]:
    """(discriminator loss, generator loss) from real/fake scores in (0, 1).

    loss_d = -mean log D(real) - mean log(1 - D(fake)). The default generator
    loss is the non-saturating -mean log D(fake); "minimax" selects the
    literal +mean log(1 - D(fake)).
    """
    loss_d = -_safe_log(d_real, clamp_stats).mean() \
        - _safe_log(1.0 - d_fake, clamp_stats).mean()
    if variant == "non_saturating":
        loss_g = -_safe_log(d_fake, clamp_stats).mean()
    elif variant == "minimax":
        loss_g = _safe_log(1.0 - d_fake, clamp_stats).mean()
    else:
        raise ValueError(f"unknown generator variant {variant!r}")
    return loss_d, loss_g


def freq_loss(y_fake: torch.Tensor, y_real: torch.Tensor) -> torch.Tensor:
    """Batch-mean L1 distance between DC-excluded DFT magnitude spectra.

    Unnormalized transform; invariant to circular time shifts of either
    argument, which is what makes it latency-tolerant.
    """
    if y_fake.shape != y_real.shape:
        raise ValueError(f"shape mismatch {tuple(y_fake.shape)} vs {tuple(y_real.shape)}")
    mag_fake = torch.abs(torch.fft.rfft(y_fake.squeeze(1), dim=-1))[:, 1:]
    mag_real = torch.abs(torch.fft.rfft(y_real.squeeze(1), dim=-1))[:, 1:]
    return torch.sum(torch.abs(mag_fake - mag_real), dim=-1).mean()


def combined_generator_loss(adv_g: torch.Tensor, lf: torch.Tensor,
                            lambda_freq: float) -> torch.Tensor:
    if lambda_freq < 0:
        raise ValueError("lambda_freq must be non-negative")
    return adv_g + lambda_freq * lf


def lr_multiplier(iteration: int, total_iterations: int, decay_start: int) -> float:
    """1.0 through the constant phase, then affine down to exactly 0.0 at
    ``total_iterations``. Monotone non-increasing in ``iteration``."""
    if iteration < decay_start:
        return 1.0
    remaining = total_iterations - iteration
    return max(0.0, remaining / (total_iterations - decay_start))


class NumericalAbortError(RuntimeError):
    """A loss went non-finite; carries a state dump for diagnosis."""

    def __init__(self, message: str, dump: dict):
        super().__init__(f"{message}: {dump}")
        self.dump = dump


@dataclass
class LossRecord:
    iteration: int
    loss_d: float
    loss_d_real: float   # -mean log D(real)
    loss_d_fake: float   # -mean log(1 - D(fake))
    loss_g_adv: float
    loss_freq: float
    loss_g_total: float
    lr_g: float
    lr_d: float


@dataclass
class TrainState:
    config: TrainConfig
    generator: Generator
    discriminator: torch.nn.Module
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    total_iterations: int
    decay_start: int
    iteration: int = 0   # completed generator updates
    epoch: int = 0       # completed epochs
    clamp_stats: ClampStats = field(default_factory=ClampStats)
    history: list[LossRecord] = field(default_factory=list)
    val_mape_per_epoch: list[float] = field(default_factory=list)

    @property
    def d_updates(self) -> int:
        return self.iteration // self.config.d_update_period


def make_state(config: TrainConfig, n_pairs: int) -> TrainState:
    per_epoch = batches_per_epoch(n_pairs, config.batch_size, config.drop_last)
    if per_epoch == 0:
        raise ValueError(
            f"{n_pairs} pairs cannot fill a single batch of {config.batch_size}")
    generator = build_generator(config.generator, seed=config.seed)
    discriminator = build_discriminator(config.discriminator, seed=config.seed)
    return TrainState(
        config=config,
        generator=generator,
        discriminator=discriminator,
        opt_g=torch.optim.Adam(generator.parameters(), lr=config.lr_g,
                               betas=config.betas, eps=config.adam_eps),
        opt_d=torch.optim.Adam(discriminator.parameters(), lr=config.lr_d,
                               betas=config.betas, eps=config.adam_eps),
        total_iterations=config.epochs * per_epoch,
        decay_start=config.lr_constant_epochs * per_epoch,
    )


def _grad_norms(model: torch.nn.Module) -> dict[str, float]:
    return {name: float(p.grad.norm()) for name, p in model.named_parameters()
            if p.grad is not None}


def gan_step(state: TrainState, x: np.ndarray, y: np.ndarray) -> LossRecord:
    """One training iteration: maybe-update D, always update G."""
    cfg = state.config
    xb = torch.from_numpy(np.ascontiguousarray(x))
    yb = torch.from_numpy(np.ascontiguousarray(y))
    mult = lr_multiplier(state.iteration, state.total_iterations, state.decay_start)
    lr_g, lr_d = cfg.lr_g * mult, cfg.lr_d * mult
    for group in state.opt_g.param_groups:
        group["lr"] = lr_g
    for group in state.opt_d.param_groups:
        group["lr"] = lr_d

    update_d = (state.iteration + 1) % cfg.d_update_period == 0
    if update_d:
        with torch.no_grad():
            fake_detached = state.generator(xb)
        d_real = state.discriminator(yb)
        d_fake = state.discriminator(fake_detached)
        loss_d, _ = adversarial_loss(d_real, d_fake, cfg.generator_variant,
                                     state.clamp_stats)
        state.opt_d.zero_grad()
        loss_d.backward()
        state.opt_d.step()

    fake = state.generator(xb)
    d_fake_scores = state.discriminator(fake)
    with torch.no_grad():
        d_real_scores = state.discriminator(yb)
        real_term = float(-_safe_log(d_real_scores, None).mean())
        fake_term = float(-_safe_log(1.0 - d_fake_scores.detach(), None).mean())
    _, loss_g_adv = adversarial_loss(
        d_real_scores, d_fake_scores, cfg.generator_variant, state.clamp_stats)
    loss_d_value = float(loss_d.detach()) if update_d else real_term + fake_term
    lam = cfg.effective_lambda
    if lam > 0:
        lf = freq_loss(fake, yb)
        loss_g = combined_generator_loss(loss_g_adv, lf, lam)
    else:
        # Kept out of the graph so a zero-weight frequency term cannot perturb
        # the gradient computation even at the bit level.
        with torch.no_grad():
            lf = freq_loss(fake, yb)
        loss_g = loss_g_adv
    state.opt_g.zero_grad()
    loss_g.backward()
    state.opt_g.step()

    record = LossRecord(
        iteration=state.iteration + 1,
        loss_d=loss_d_value,
        loss_d_real=real_term,
        loss_d_fake=fake_term,
        loss_g_adv=float(loss_g_adv.detach()),
        loss_freq=float(lf.detach()),
        loss_g_total=float(loss_g.detach()),
        lr_g=lr_g, lr_d=lr_d,
    )
    if not all(math.isfinite(v) for v in
               (record.loss_d, record.loss_g_adv, record.loss_freq)):
        raise NumericalAbortError("non-finite loss", {
            "iteration": record.iteration,
            "loss_d": record.loss_d,
            "loss_g_adv": record.loss_g_adv,
            "loss_freq": record.loss_freq,
            "generator_grad_norms": _grad_norms(state.generator),
            "discriminator_grad_norms": _grad_norms(state.discriminator),
        })
    state.iteration += 1
    state.history.append(record)
    return record


METRICS_COLUMNS = ("iteration", "loss_d", "loss_g_adv", "loss_freq", "lr_g", "lr_d")


def _append_metrics(path: Path, records: list[LossRecord]) -> None:
    new = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(METRICS_COLUMNS)
        for r in records:
            writer.writerow([r.iteration, f"{r.loss_d:.6f}", f"{r.loss_g_adv:.6f}",
                             f"{r.loss_freq:.6f}", f"{r.lr_g:.8g}", f"{r.lr_d:.8g}"])


def _validation_mape(state: TrainState, val_store: PairStore | None) -> float:
    if val_store is None:
        return math.inf
    records = evaluate_store(state.generator, val_store)
    state.generator.train()
    try:
        return mape(records).mape_percent
    except ValueError:
        return math.inf


def _checkpoint_extra(state: TrainState) -> dict:
    return {
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
        "clamp_events": state.clamp_stats.events,
        "val_mape_per_epoch": list(state.val_mape_per_epoch),
        "train_config": state.config.to_dict(),
    }


def train(config: TrainConfig, pairs: PairStore,
          val_pairs: PairStore | None = None,
          run_dir: str | Path | None = None,
          resume: bool = False) -> TrainState:
    """Run the full schedule over a pair store.

    When ``run_dir`` is given, writes config.json, metrics.csv, one
    checkpoint per epoch under checkpoints/, and a final summary.json naming
    the best epoch by validation MAPE. ``resume=True`` picks up after the
    last complete epoch checkpoint and reproduces the uninterrupted run.
    """
    state = make_state(config, len(pairs))
    per_epoch = batches_per_epoch(len(pairs), config.batch_size, config.drop_last)
    start_epoch = 0

    ckpt_dir = metrics_path = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        ckpt_dir = run_dir / "checkpoints"
        ckpt_dir.mkdir(exist_ok=True)
        metrics_path = run_dir / "metrics.csv"
        (run_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2))
        if resume:
            existing = sorted(ckpt_dir.glob("epoch_*.ckpt"),
                              key=lambda p: int(p.stem.split("_")[1]))
            if existing:
                payload = load_checkpoint(existing[-1])
                state.generator.load_state_dict(payload["generator_state"])
                state.discriminator.load_state_dict(payload["discriminator_state"])
                state.opt_g.load_state_dict(payload["extra"]["opt_g"])
                state.opt_d.load_state_dict(payload["extra"]["opt_d"])
                state.clamp_stats.events = payload["extra"]["clamp_events"]
                state.val_mape_per_epoch = list(payload["extra"]["val_mape_per_epoch"])
                state.epoch = payload["epoch"]
                state.iteration = payload["iteration"]
                start_epoch = state.epoch
                log.info("resuming after epoch %d", start_epoch)

    state.generator.train()
    state.discriminator.train()
    for epoch in range(start_epoch, config.epochs):
        epoch_records: list[LossRecord] = []
        for x, y in iter_batches(pairs, config.batch_size, config.seed, epoch,
                                 config.drop_last):
            epoch_records.append(gan_step(state, x, y))
        state.epoch = epoch + 1
        val = _validation_mape(state, val_pairs)
        state.val_mape_per_epoch.append(val)
        if metrics_path is not None:
            _append_metrics(metrics_path, epoch_records)
        if ckpt_dir is not None:
            save_checkpoint(
                ckpt_dir / f"epoch_{state.epoch}.ckpt",
                generator=state.generator, discriminator=state.discriminator,
                seed=config.seed, epoch=state.epoch, iteration=state.iteration,
                extra=_checkpoint_extra(state))
        log.info("epoch %d/%d: %d iterations, val MAPE %.3f",
                 state.epoch, config.epochs, state.iteration, val)

    assert state.iteration == config.epochs * per_epoch
    if run_dir is not None:
        finite = [v for v in state.val_mape_per_epoch if math.isfinite(v)]
        best_epoch = (1 + state.val_mape_per_epoch.index(min(finite))
                      if finite else None)
        summary = {
            "objective": config.objective,
            "generator_variant": config.generator_variant,
            "seed": config.seed,
            "epochs": config.epochs,
            "iterations": state.iteration,
            "d_updates": state.d_updates,
            "clamp_events": state.clamp_stats.events,
            "val_mape_per_epoch": state.val_mape_per_epoch,
            "best_epoch": best_epoch,
            "best_val_mape": min(finite) if finite else None,
            "best_checkpoint": (str(ckpt_dir / f"epoch_{best_epoch}.ckpt")
                                if best_epoch else None),
        }
        (run_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    return state


@dataclass
class SweepResult:
    seed: int
    run_dir: str
    best_checkpoint: str | None
    val_mape: float | None
    error: str | None = None


def _sweep_one(args) -> SweepResult:
    config, seed, pairs, val_pairs, out_dir = args
    run_dir = Path(out_dir) / f"{config.objective}_seed{seed:03d}"
    try:
        run_config = replace(config, seed=seed)
        train(run_config, pairs, val_pairs, run_dir=run_dir)
        summary = json.loads((run_dir / "summary.json").read_text())
        return SweepResult(seed=seed, run_dir=str(run_dir),
                           best_checkpoint=summary["best_checkpoint"],
                           val_mape=summary["best_val_mape"])
    except Exception as exc:  # individual failures must not kill the sweep
        log.exception("seed %d failed", seed)
        return SweepResult(seed=seed, run_dir=str(run_dir),
                           best_checkpoint=None, val_mape=None, error=str(exc))


def seed_sweep(config: TrainConfig, seeds: list[int], pairs: PairStore,
               val_pairs: PairStore | None = None,
               out_dir: str | Path = "sweep", jobs: int = 1) -> list[SweepResult]:
    """Independent training runs, one per seed, with a distribution summary.

    Failed runs are recorded and skipped; the sweep always completes. The
    subject split is fixed; seeds vary only weights and batch order.
    """
    if len(set(seeds)) != len(seeds):
        raise ValueError("seeds must be distinct")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    work = [(config, seed, pairs, val_pairs, out_dir) for seed in seeds]
    if jobs > 1:
        # spawn, not fork: the parent's torch thread pools do not survive a
        # fork, which can deadlock worker processes
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
            results = list(pool.map(_sweep_one, work))
    else:
        results = [_sweep_one(w) for w in work]

    mapes = [r.val_mape for r in results if r.val_mape is not None]
    summary = {
        "objective": config.objective,
        "seeds": seeds,
        "per_seed": [asdict(r) for r in results],
        "mean_val_mape": float(np.mean(mapes)) if mapes else None,
        "std_val_mape": float(np.std(mapes, ddof=1)) if len(mapes) > 1 else 0.0,
        "n_failed_runs": sum(1 for r in results if r.error is not None),
    }
    (out_dir / f"sweep_{config.objective}.json").write_text(
        json.dumps(summary, indent=2))
    return results
