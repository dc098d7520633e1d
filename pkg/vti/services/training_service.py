# vti/services/training_service.py
"""
Training Loop

Adam with bias correction, global-norm gradient clipping, cyclical KL annealing,
per-epoch validation on the posterior-mean ELBO and early stopping. Every random draw
(shuffling, reparameterization noise, dropout masks) comes from one generator seeded
with TrainConfig.seed, whose state travels with checkpoints so a resumed run continues
step for step.
"""

import copy
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd

from vti.core.errors import ContractViolation, DatasetIOError, TrainingError
from vti.core.logger import log
from vti.engine import Tape, Tensor, add, backward, scale
from vti.schemas.config import TrainConfig
from vti.schemas.records import ReportExample
from vti.services.checkpoint_service import Checkpoint
from vti.services.latent_service import AnnealSchedule, beta_at
from vti.services.model_service import VtiModel, elbo_loss

MOMENT_DTYPE = np.float32


# ============================================================================
# Optimizer
# ============================================================================

@dataclass
class AdamState:
    """First and second moments per parameter name"""
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(
            m={name: np.zeros(p.shape, dtype=MOMENT_DTYPE) for name, p in params.items()},
            v={name: np.zeros(p.shape, dtype=MOMENT_DTYPE) for name, p in params.items()},
        )


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], moments: AdamState,
              t: int, cfg: TrainConfig) -> None:
    """
    One Adam update, in place

    All gradients are checked before anything is touched, so a non-finite gradient leaves
    parameters and moments unchanged.

    Raises:
        TrainingError: non-finite gradient (names the parameter)
    """
    if t < 1:
        raise ContractViolation("adam_step: t must be >= 1")
    for name, g in grads.items():
        if name not in params:
            raise ContractViolation(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ContractViolation(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}", param_name=name)

    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        if name not in moments.m:
            moments.m[name] = np.zeros(p.shape, dtype=MOMENT_DTYPE)
            moments.v[name] = np.zeros(p.shape, dtype=MOMENT_DTYPE)
        m = (b1 * moments.m[name] + (1.0 - b1) * g).astype(MOMENT_DTYPE)
        v = (b2 * moments.v[name] + (1.0 - b2) * g * g).astype(MOMENT_DTYPE)
        moments.m[name], moments.v[name] = m, v
        update = cfg.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + cfg.adam_epsilon)
        p.data = (p.data - update).astype(p.data.dtype)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is at most max_norm; returns the norm before clipping"""
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * factor
    return norm


# ============================================================================
# Fit
# ============================================================================

@dataclass
class EpochStats:
    epoch: int
    step: int
    beta: float
    train_loss: float
    train_ce: float
    train_kl: float
    train_accuracy: float
    val_loss: float
    val_ce: float
    val_kl: float
    val_accuracy: float
    grad_norm: float


@dataclass
class FitResult:
    best: Checkpoint
    last: Checkpoint
    history: list[EpochStats]
    stopped_early: bool = False


def evaluate_loss(model: VtiModel, examples: list[ReportExample],
                  supervise_empty_slots: bool = True) -> tuple[float, float, float, float]:
    """Mean (loss, CE, KL per sentence, token accuracy) at beta = 1 with posterior means"""
    rng = np.random.default_rng(0)  # posterior means: no draws
    losses, ces, kls, accs = [], [], [], []
    for ex in examples:
        loss, parts = elbo_loss(model, ex, beta=1.0, L=1, rng=rng, use_posterior_mean=True,
                                supervise_empty_slots=supervise_empty_slots)
        losses.append(loss.item())
        ces.append(float(np.mean(parts.ce)))
        kls.extend(parts.kl_per_sentence)
        accs.append(parts.token_accuracy)
    return (float(np.mean(losses)), float(np.mean(ces)),
            float(np.mean(kls)) if kls else 0.0, float(np.mean(accs)))


def _anneal_schedule(cfg: TrainConfig, steps_per_epoch: int) -> AnnealSchedule:
    total = cfg.max_steps if cfg.max_steps > 0 else cfg.max_epochs * steps_per_epoch
    return AnnealSchedule(
        beta_max=cfg.beta_max,
        total_steps=total,
        cycles=max(1, min(cfg.anneal_cycles, total)),
        ramp_ratio=cfg.anneal_ramp_ratio,
    )


def _snapshot(model: VtiModel, moments: AdamState, rng: np.random.Generator, config: dict,
              epoch: int, step: int, best_val: float, best_epoch: int, bad_epochs: int,
              history: list[EpochStats]) -> Checkpoint:
    return Checkpoint(
        tensors={name: a.astype(np.float32) for name, a in model.state().items()},
        config=copy.deepcopy(config),
        adam_m={name: a.copy() for name, a in moments.m.items()},
        adam_v={name: a.copy() for name, a in moments.v.items()},
        rng_state=copy.deepcopy(rng.bit_generator.state),
        best_val_loss=best_val,
        best_epoch=best_epoch,
        epoch=epoch,
        step=step,
        bad_epochs=bad_epochs,
        history=[asdict(h) for h in history],
    )


def fit(model: VtiModel, train: list[ReportExample], val: list[ReportExample], cfg: TrainConfig,
        resume: Checkpoint | None = None, resume_best: Checkpoint | None = None,
        config_snapshot: dict | None = None,
        on_epoch: Callable[[EpochStats, Checkpoint], None] | None = None) -> FitResult:
    """
    Train until early stopping, max_epochs or max_steps

    Args:
        resume: a "last" checkpoint from an earlier run with the same data and config
        resume_best: the best checkpoint of that run (defaults to resume itself)
        config_snapshot: extra configuration stored in every checkpoint
        on_epoch: called after each validation with the stats and the current last checkpoint

    Raises:
        TrainingError: loss became non-finite; the model is restored to the best parameters
            and the best checkpoint is attached
    """
    if not train or not val:
        raise ContractViolation("fit needs non-empty train and validation splits")
    config = {"network": model.cfg.model_dump(), "train": cfg.model_dump(), **(config_snapshot or {})}
    params = model.named_parameters()
    rng = np.random.default_rng(cfg.seed)
    moments = AdamState.zeros(params)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    schedule = _anneal_schedule(cfg, steps_per_epoch)

    epoch, step = 0, 0
    best_val, best_epoch, bad_epochs = math.inf, 0, 0
    history: list[EpochStats] = []
    best = last = None
    if resume is not None:
        model.load_state(resume.tensors)
        moments = AdamState(m={k: v.copy() for k, v in resume.adam_m.items()},
                            v={k: v.copy() for k, v in resume.adam_v.items()})
        if resume.rng_state is not None:
            rng.bit_generator.state = copy.deepcopy(resume.rng_state)
        epoch, step = resume.epoch, resume.step
        best_val, best_epoch, bad_epochs = resume.best_val_loss, resume.best_epoch, resume.bad_epochs
        history = [EpochStats(**h) for h in resume.history]
        last = resume.copy()
        best = (resume_best or resume).copy()
        log.info(f"Resuming at epoch {epoch}, step {step} (best val {best_val:.4f})")
    else:
        # fallback when the run diverges before its first validation
        best = _snapshot(model, moments, rng, config, epoch, step, best_val, best_epoch, bad_epochs, history)

    log.info(f"Training {model.num_parameters()} parameters on {len(train)} reports "
             f"({steps_per_epoch} steps/epoch, lr={cfg.learning_rate})")
    stopped_early = False
    while epoch < cfg.max_epochs and not (cfg.max_steps and step >= cfg.max_steps):
        epoch += 1
        order = rng.permutation(len(train))
        sums = {"loss": 0.0, "ce": 0.0, "kl": 0.0, "acc": 0.0, "kl_n": 0, "n": 0}
        beta, grad_norm = 0.0, 0.0
        touched: set[str] = set()
        for start in range(0, len(train), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            beta = beta_at(schedule, step)
            model.zero_grad()
            with Tape() as tape:
                total = None
                for i in batch:
                    loss, parts = elbo_loss(model, train[i], beta, cfg.mc_samples, rng, cfg.dropout_rate,
                                            supervise_empty_slots=cfg.supervise_empty_slots)
                    total = loss if total is None else add(total, loss)
                    sums["ce"] += float(np.mean(parts.ce))
                    sums["kl"] += sum(parts.kl_per_sentence)
                    sums["kl_n"] += len(parts.kl_per_sentence)
                    sums["acc"] += parts.token_accuracy
                batch_loss = scale(total, 1.0 / len(batch))
            value = batch_loss.item()
            if not math.isfinite(value):
                raise _diverged(model, best, f"loss became {value} at step {step + 1} in epoch {epoch}")
            backward(batch_loss, tape)
            grads = {name: p.grad if p.grad is not None else np.zeros_like(p.data) for name, p in params.items()}
            grad_norm = clip_by_global_norm(grads, cfg.grad_clip)
            touched.update(name for name, g in grads.items() if np.any(g != 0))
            step += 1
            try:
                adam_step(params, grads, moments, step, cfg)
            except TrainingError as e:
                raise _diverged(model, best, f"{e} in epoch {epoch}", param_name=e.param_name) from e
            sums["loss"] += value * len(batch)
            sums["n"] += len(batch)
            if cfg.max_steps and step >= cfg.max_steps:
                break

        untouched = sorted(set(params) - touched)
        if untouched and not model.cfg.deterministic_topics:
            log.warning(f"{len(untouched)} parameter(s) received no gradient this epoch: {', '.join(untouched[:5])}")

        val_loss, val_ce, val_kl, val_acc = evaluate_loss(model, val, cfg.supervise_empty_slots)
        n = max(sums["n"], 1)
        stats = EpochStats(
            epoch=epoch, step=step, beta=beta,
            train_loss=sums["loss"] / n, train_ce=sums["ce"] / n,
            train_kl=sums["kl"] / max(sums["kl_n"], 1), train_accuracy=sums["acc"] / n,
            val_loss=val_loss, val_ce=val_ce, val_kl=val_kl, val_accuracy=val_acc,
            grad_norm=grad_norm,
        )
        history.append(stats)
        if not math.isfinite(val_loss):
            raise _diverged(model, best, f"validation loss became {val_loss} in epoch {epoch}")

        if val_loss < best_val:
            best_val, best_epoch, bad_epochs = val_loss, epoch, 0
        else:
            bad_epochs += 1
        last = _snapshot(model, moments, rng, config, epoch, step, best_val, best_epoch, bad_epochs, history)
        if bad_epochs == 0:
            best = last.copy()
        log.info(
            f"epoch {epoch:3d} step {step:6d} beta {beta:.3f} | train {stats.train_loss:.4f} "
            f"(ce {stats.train_ce:.4f}, kl/sent {stats.train_kl:.4f}, acc {stats.train_accuracy:.3f}) | "
            f"val {val_loss:.4f} (kl/sent {val_kl:.4f}, acc {val_acc:.3f}) | patience {bad_epochs}/{cfg.patience}"
        )
        if on_epoch is not None:
            on_epoch(stats, last)
        if bad_epochs >= cfg.patience:
            stopped_early = True
            log.info(f"Early stopping after epoch {epoch}; best epoch {best_epoch} (val {best_val:.4f})")
            break

    if last is None:
        last = _snapshot(model, moments, rng, config, epoch, step, best_val, best_epoch, bad_epochs, history)
    return FitResult(best=best, last=last, history=history, stopped_early=stopped_early)


def _diverged(model: VtiModel, best: Checkpoint, message: str,
              param_name: str | None = None) -> TrainingError:
    model.load_state(best.tensors)
    message += f"; restored parameters from epoch {best.epoch}"
    log.error(f"Training diverged: {message}")
    return TrainingError(message, param_name=param_name, checkpoint=best)


def write_history(history: list[EpochStats], path: str | Path) -> Path:
    path = Path(path)
    try:
        pd.DataFrame([asdict(h) for h in history], columns=list(EpochStats.__dataclass_fields__)).to_csv(
            path, index=False
        )
    except OSError as e:
        raise DatasetIOError(f"cannot write training history ({e.strerror})", path) from e
    return path
