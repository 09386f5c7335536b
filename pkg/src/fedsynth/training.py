"""pix2pix objective, learning-rate schedule and one client's local training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Sequence, TextIO

import numpy as np
import torch
import torch.nn.functional as F

from .data import SlicePair, to_model_range
from .models import ParameterSet

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class Hyperparams:
    total_epochs: int = 200
    initial_lr: float = 5e-4
    batch_size: int = 1
    l1_weight: float = 100.0
    optimizer_betas: tuple[float, float] = (0.5, 0.999)
    seed: int = 0
    # "linear": decay from epoch 0; "constant-then-linear": hold for
    # constant_epochs, then decay linearly over the remainder
    decay_mode: str = "linear"
    constant_epochs: int = 0

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.l1_weight < 0:
            raise ValueError("l1_weight must be >= 0")
        if self.decay_mode not in ("linear", "constant-then-linear"):
            raise ValueError(f"unknown decay_mode {self.decay_mode!r}")
        if not 0 <= self.constant_epochs < self.total_epochs:
            raise ValueError("constant_epochs must lie in [0, total_epochs)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        d = dict(d)
        if "optimizer_betas" in d:
            d["optimizer_betas"] = tuple(d["optimizer_betas"])
        return cls(**d)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_g_loss: float
    mean_d_loss: float
    mean_l1: float
    lr_used: float

    CSV_HEADER = "epoch,lr,mean_g_loss,mean_d_loss,mean_l1"

    def csv_line(self) -> str:
        return (
            f"{self.epoch},{self.lr_used:.9g},{self.mean_g_loss:.9g},"
            f"{self.mean_d_loss:.9g},{self.mean_l1:.9g}"
        )


def lr_schedule(epoch: int, hyper: Hyperparams) -> float:
    n = hyper.total_epochs
    if not 0 <= epoch < n:
        raise ValueError(f"epoch {epoch} outside [0, {n})")
    if hyper.decay_mode == "linear":
        return hyper.initial_lr * (1.0 - epoch / n)
    hold = hyper.constant_epochs
    if epoch < hold:
        return hyper.initial_lr
    return hyper.initial_lr * (1.0 - (epoch - hold) / (n - hold))


def bce_with_logits(logits: torch.Tensor, target_value: float) -> torch.Tensor:
    # max(x,0) - x*y + log(1 + exp(-|x|))
    return F.binary_cross_entropy_with_logits(logits, torch.full_like(logits, target_value))


def pix2pix_losses(real_logits, fake_logits, fake, real, l1_weight: float):
    """Returns ``(g_loss, d_loss, l1)`` as scalar tensors.

    The generator's adversarial term and the discriminator's fake term both
    read ``fake_logits``; callers doing alternating updates pass logits from
    detached fakes for the discriminator step.
    """
    if l1_weight < 0:
        raise ValueError("l1_weight must be >= 0")
    if fake.shape != real.shape:
        raise ValueError(f"fake {tuple(fake.shape)} and real {tuple(real.shape)} differ")
    if real_logits.shape != fake_logits.shape:
        raise ValueError("real and fake logit maps differ in shape")
    for name, t in (("real_logits", real_logits), ("fake_logits", fake_logits), ("fake", fake), ("real", real)):
        if not torch.isfinite(t).all():
            raise NonFiniteLossError(f"non-finite values in {name}")
    l1 = (fake - real).abs().mean()
    g_loss = bce_with_logits(fake_logits, 1.0) + l1_weight * l1
    d_loss = 0.5 * (bce_with_logits(real_logits, 1.0) + bce_with_logits(fake_logits, 0.0))
    return g_loss, d_loss, l1


@dataclass
class Optimizers:
    generator: torch.optim.Adam
    discriminator: torch.optim.Adam

    def set_lr(self, lr: float) -> None:
        for opt in (self.generator, self.discriminator):
            for group in opt.param_groups:
                group["lr"] = lr


def make_optimizers(gen, disc, hyper: Hyperparams) -> Optimizers:
    return Optimizers(
        torch.optim.Adam(gen.parameters(), lr=hyper.initial_lr, betas=hyper.optimizer_betas),
        torch.optim.Adam(disc.parameters(), lr=hyper.initial_lr, betas=hyper.optimizer_betas),
    )


def optimizer_state_sets(opt: torch.optim.Adam, model, prefix: str) -> tuple[dict[str, ParameterSet], int]:
    """Adam moments as ParameterSets (for checkpointing) plus the step count."""
    m1, m2, step = [], [], 0
    for name, p in model.named_parameters():
        st = opt.state.get(p)
        if not st:
            return {}, 0
        m1.append((name, st["exp_avg"].numpy()))
        m2.append((name, st["exp_avg_sq"].numpy()))
        step = int(st["step"])
    return {f"{prefix}.exp_avg": ParameterSet(m1), f"{prefix}.exp_avg_sq": ParameterSet(m2)}, step


def restore_optimizer_state(opt, model, sets: dict[str, ParameterSet], prefix: str, step: int) -> None:
    if f"{prefix}.exp_avg" not in sets:
        return
    m1, m2 = sets[f"{prefix}.exp_avg"], sets[f"{prefix}.exp_avg_sq"]
    for name, p in model.named_parameters():
        opt.state[p] = {
            "step": torch.tensor(float(step)),
            "exp_avg": torch.from_numpy(np.array(m1[name])),
            "exp_avg_sq": torch.from_numpy(np.array(m2[name])),
        }


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    """The generator a training run uses for one epoch; resumable by construction."""
    return np.random.default_rng([int(seed), int(epoch)])


def _batch(pairs: Sequence[SlicePair]) -> tuple[torch.Tensor, torch.Tensor]:
    src = np.stack([p.source for p in pairs]).astype(np.float32)[:, None]
    tgt = np.stack([p.target for p in pairs]).astype(np.float32)[:, None]
    return torch.from_numpy(to_model_range(src)), torch.from_numpy(to_model_range(tgt))


def train_local_epoch(
    gen,
    disc,
    dataset: Sequence[SlicePair],
    hyper: Hyperparams,
    epoch: int,
    rng: np.random.Generator,
    optimizers: Optimizers | None = None,
    lr: float | None = None,
    log_stream: TextIO | None = None,
) -> EpochStats:
    """One pass over ``dataset``: a discriminator step then a generator step per batch.

    Dropout draws come from a torch seed taken from ``rng`` inside a forked
    RNG context, so the outcome depends only on (rng state, models, data).
    ``lr`` overrides the schedule.  ``optimizers`` must be reused across
    epochs for Adam moments to persist; a fresh pair is created otherwise.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if optimizers is None:
        optimizers = make_optimizers(gen, disc, hyper)
    lr = lr_schedule(epoch, hyper) if lr is None else lr
    optimizers.set_lr(lr)

    order = rng.permutation(len(dataset))
    torch_seed = int(rng.integers(0, 2**62))
    bs = hyper.batch_size
    g_sum = d_sum = l1_sum = 0.0
    n_batches = 0

    gen.train()
    disc.train()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(torch_seed)
        for b, start in enumerate(range(0, len(order), bs)):
            batch = [dataset[i] for i in order[start : start + bs]]
            src, tgt = _batch(batch)
            try:
                fake = gen(src)

                optimizers.discriminator.zero_grad(set_to_none=True)
                real_logits = disc(src, tgt)
                fake_logits_d = disc(src, fake.detach())
                _, d_loss, _ = pix2pix_losses(real_logits, fake_logits_d, fake.detach(), tgt, hyper.l1_weight)
                if not math.isfinite(d_loss.item()):
                    raise NonFiniteLossError("non-finite discriminator loss")
                d_loss.backward()
                optimizers.discriminator.step()

                optimizers.generator.zero_grad(set_to_none=True)
                fake_logits_g = disc(src, fake)
                g_loss, _, l1 = pix2pix_losses(
                    real_logits.detach(), fake_logits_g, fake, tgt, hyper.l1_weight
                )
                if not math.isfinite(g_loss.item()):
                    raise NonFiniteLossError("non-finite generator loss")
                g_loss.backward()
                optimizers.generator.step()
                # discriminator grads left by the generator step are cleared next batch
            except NonFiniteLossError as exc:
                raise NonFiniteLossError(f"batch {b} (epoch {epoch}): {exc}") from exc

            g_sum += g_loss.item()
            d_sum += d_loss.item()
            l1_sum += l1.item()
            n_batches += 1

    stats = EpochStats(
        epoch=epoch,
        mean_g_loss=g_sum / n_batches,
        mean_d_loss=d_sum / n_batches,
        mean_l1=l1_sum / n_batches,
        lr_used=lr,
    )
    if log_stream is not None:
        log_stream.write(stats.csv_line() + "\n")
        log_stream.flush()
    log.debug("epoch %d: %s", epoch, stats)
    return stats


def train_centralized(
    gen,
    disc,
    dataset: Sequence[SlicePair],
    hyper: Hyperparams,
    num_epochs: int | None = None,
    optimizers: Optimizers | None = None,
    start_epoch: int = 0,
    log_stream: TextIO | None = None,
) -> list[EpochStats]:
    """Plain single-site training for ``num_epochs`` epochs (default: all)."""
    if optimizers is None:
        optimizers = make_optimizers(gen, disc, hyper)
    end = hyper.total_epochs if num_epochs is None else start_epoch + num_epochs
    return [
        train_local_epoch(
            gen, disc, dataset, hyper, e, epoch_rng(hyper.seed, e), optimizers, log_stream=log_stream
        )
        for e in range(start_epoch, end)
    ]
