"""Alternating critic/generator optimization, checkpoints and run management."""
from __future__ import annotations

import copy
import csv
import logging
import math
import os
import time
from dataclasses import dataclass, asdict, field, fields
from pathlib import Path
from typing import Sequence

import torch

from . import losses as L
from .data import Batch, DatasetHandle, make_batches
from .evaluation import evaluate_models
from .networks import (
    Discriminator,
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    build_discriminator,
    build_generator,
    select,
)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class NumericalDivergence(FloatingPointError):
    pass


class VersionMismatch(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    critic_updates_per_gen: int = 5
    batch_size: int = 8
    max_epochs: int = 100
    seed: int = 0
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    checkpoint_interval: int = 10
    # x_hat partner of the penalty: "same_class" uses a_c = G_c(r_c),
    # "translated" uses a_cbar = G_cbar(r_c)
    gp_partner: str = "same_class"
    # which critic scores G_cbar(r_c) in the critic loss: "target" = D_cbar
    fake_critic: str = "target"
    eval_batch_size: int = 16
    device: str = "cpu"

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        w = d.pop("weights", {})
        known = {f.name for f in fields(cls)}
        return cls(weights=L.LossWeights(**w), **{k: v for k, v in d.items() if k in known})


@dataclass
class TrainState:
    generator: Generator
    discriminator: Discriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    rng: torch.Generator
    epoch: int = 0
    step: int = 0
    g_updates: int = 0
    d_updates: int = 0
    best_score: float = -math.inf
    best_epoch: int = -1


def init_state(
    config: TrainConfig,
    gcfg: GeneratorConfig | None = None,
    dcfg: DiscriminatorConfig | None = None,
) -> TrainState:
    torch.manual_seed(config.seed)
    gen = build_generator(gcfg).to(config.device)
    disc = build_discriminator(dcfg).to(config.device)
    betas = (config.adam_beta1, config.adam_beta2)
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.learning_rate, betas=betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.learning_rate, betas=betas)
    rng = torch.Generator(device="cpu").manual_seed(config.seed)
    return TrainState(gen, disc, opt_g, opt_d, rng)


def _finite(report: dict, state: TrainState) -> None:
    bad = {k: v for k, v in report.items() if not math.isfinite(v)}
    if bad:
        raise NumericalDivergence(f"non-finite losses at step {state.step}, epoch {state.epoch}: {bad}")


def discriminator_step(state: TrainState, batch: Batch, config: TrainConfig) -> dict:
    gen, disc = state.generator, state.discriminator
    real = batch.images.to(config.device)
    labels = batch.labels.to(config.device)
    target = 1 - labels
    with torch.no_grad():
        pair = gen(real)
        fake = select(pair, target)
        same = select(pair, labels)
    partner = same if config.gp_partner == "same_class" else fake
    w = config.weights

    t = torch.rand(real.shape[0], generator=state.rng).to(real)
    adv, gp = L.adv_loss_d(
        disc.critics, real, labels, fake, lambda_gp=w.gp, gp_partner=partner,
        fake_critic=config.fake_critic, t=t,
    )
    cls = L.cls_loss_d(L.probabilities(disc.classify(real)), labels)
    total = L.total_d(adv, cls, w)
    state.opt_d.zero_grad(set_to_none=True)
    total.backward()
    terms = {"adv_d": adv.item(), "gp": gp.item(), "cls_d": cls.item(), "total_d": total.item()}
    _finite(terms, state)
    state.opt_d.step()
    state.d_updates += 1
    return terms


def generator_step(state: TrainState, batch: Batch, config: TrainConfig) -> dict:
    gen, disc = state.generator, state.discriminator
    real = batch.images.to(config.device)
    labels = batch.labels.to(config.device)
    target = 1 - labels
    w = config.weights
    for p in disc.parameters():
        p.requires_grad_(False)
    try:
        pair = gen(real)
        fake = select(pair, target)
        same = select(pair, labels)
        cycled = select(gen(fake), labels)
        scores, logits = disc.all_outputs(fake)
        adv = L.adv_loss_g(scores, target)
        cls = L.cls_loss_g(L.probabilities(logits), target)
        idl = L.identity_loss(real, same)
        rec = L.reconstruction_loss(real, cycled)
        total = L.total_g(adv, rec, idl, cls, w)
        state.opt_g.zero_grad(set_to_none=True)
        total.backward()
    finally:
        for p in disc.parameters():
            p.requires_grad_(True)
    terms = {"adv_g": adv.item(), "id": idl.item(), "rec": rec.item(), "cls_g": cls.item(), "total_g": total.item()}
    _finite(terms, state)
    state.opt_g.step()
    state.g_updates += 1
    return terms


def train_step(state: TrainState, batches: Sequence[Batch], config: TrainConfig) -> L.BatchLossReport:
    """One critic update per batch, then one generator update on the last batch.

    ``batches`` should hold ``critic_updates_per_gen`` distinct batches.
    """
    if len(batches) != config.critic_updates_per_gen:
        raise ValueError(f"expected {config.critic_updates_per_gen} batches, got {len(batches)}")
    state.generator.train()
    state.discriminator.train()
    d_terms = [discriminator_step(state, b, config) for b in batches]
    g_terms = generator_step(state, batches[-1], config)
    state.step += 1
    d_mean = {k: sum(t[k] for t in d_terms) / len(d_terms) for k in d_terms[0]}
    return L.BatchLossReport(**d_mean, **g_terms)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    generator: dict
    discriminator: dict
    opt_g: dict
    opt_d: dict
    rng: torch.Tensor
    epoch: int
    step: int
    g_updates: int
    d_updates: int
    best_score: float
    best_epoch: int
    config: dict
    generator_config: dict
    discriminator_config: dict
    version: int = CHECKPOINT_VERSION
    # global torch generator (dropout draws from it)
    torch_rng: torch.Tensor | None = None


def snapshot(state: TrainState, config: TrainConfig) -> Checkpoint:
    return Checkpoint(
        generator=copy.deepcopy(state.generator.state_dict()),
        discriminator=copy.deepcopy(state.discriminator.state_dict()),
        opt_g=copy.deepcopy(state.opt_g.state_dict()),
        opt_d=copy.deepcopy(state.opt_d.state_dict()),
        rng=state.rng.get_state(),
        epoch=state.epoch,
        step=state.step,
        g_updates=state.g_updates,
        d_updates=state.d_updates,
        best_score=state.best_score,
        best_epoch=state.best_epoch,
        config=config.as_dict(),
        generator_config=asdict(state.generator.cfg),
        discriminator_config=asdict(state.discriminator.cfg),
        torch_rng=torch.get_rng_state(),
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write atomically (temp file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(asdict(ckpt), tmp)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    raw = torch.load(path, map_location="cpu", weights_only=False)
    if raw.get("version") != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {raw.get('version')} != {CHECKPOINT_VERSION}")
    return Checkpoint(**raw)


def _tupled(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def restore(ckpt: Checkpoint, device: str = "cpu") -> tuple[TrainState, TrainConfig]:
    config = TrainConfig.from_dict(ckpt.config)
    config.device = device
    state = init_state(
        config,
        GeneratorConfig(**_tupled(ckpt.generator_config)),
        DiscriminatorConfig(**_tupled(ckpt.discriminator_config)),
    )
    state.generator.load_state_dict(ckpt.generator)
    state.discriminator.load_state_dict(ckpt.discriminator)
    state.opt_g.load_state_dict(ckpt.opt_g)
    state.opt_d.load_state_dict(ckpt.opt_d)
    state.rng.set_state(ckpt.rng)
    if ckpt.torch_rng is not None:
        torch.set_rng_state(ckpt.torch_rng)
    for name in ("epoch", "step", "g_updates", "d_updates", "best_score", "best_epoch"):
        setattr(state, name, getattr(ckpt, name))
    return state, config


def load_models(path, device: str = "cpu") -> tuple[Generator, Discriminator]:
    state, _ = restore(load_checkpoint(path), device)
    state.generator.eval()
    state.discriminator.eval()
    return state.generator, state.discriminator


# ---------------------------------------------------------------------------
# epochs
# ---------------------------------------------------------------------------

LOG_COLUMNS = ("step", "epoch") + tuple(f.name for f in fields(L.BatchLossReport)) + ("wall_time",)
VAL_COLUMNS = ("epoch", "val_accuracy", "val_dice", "score")


def epoch_shuffle_seed(seed: int, epoch: int) -> int:
    return seed * 100_003 + epoch


def validation_score(state: TrainState, val: DatasetHandle, config: TrainConfig) -> tuple[float, dict]:
    """Dice when the set carries ground truth, classification accuracy otherwise."""
    report = evaluate_models(
        state.generator, state.discriminator, val, device=config.device, batch_size=config.eval_batch_size
    )
    metrics = {"val_accuracy": report.accuracy_cls, "val_dice": report.dice}
    score = report.dice if val.has_gt and report.dice is not None else report.accuracy_cls
    return (score if score is not None else -math.inf), metrics


def train(
    config: TrainConfig,
    train_handle: DatasetHandle,
    val_handle: DatasetHandle | None = None,
    run_dir=None,
    gcfg: GeneratorConfig | None = None,
    dcfg: DiscriminatorConfig | None = None,
    resume_from=None,
) -> tuple[Checkpoint, list[dict]]:
    """Train for ``config.max_epochs`` epochs and return the best checkpoint.

    One epoch walks once over the class-balanced training batches; each
    batch drives one critic update and every ``critic_updates_per_gen``-th
    batch also a generator update. Trailing batches that do not fill a group
    are skipped. The best checkpoint maximizes validation Dice (sets with
    ground truth) or accuracy; without a validation set the last epoch wins.
    """
    if resume_from is not None:
        state, saved = restore(load_checkpoint(resume_from), config.device)
        config = TrainConfig.from_dict({**saved.as_dict(), "max_epochs": config.max_epochs, "device": config.device})
    else:
        state = init_state(config, gcfg, dcfg)
    run = Path(run_dir) if run_dir is not None else None
    log_path = None
    if run is not None:
        (run / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_path = run / "train_log.csv"
        val_path = run / "val_log.csv"
        for path, columns in ((log_path, LOG_COLUMNS), (val_path, VAL_COLUMNS)):
            if resume_from is None or not path.exists():
                with open(path, "w", newline="") as fh:
                    csv.writer(fh).writerow(columns)

    best = snapshot(state, config)
    if resume_from is not None and run is not None and (run / "best.ckpt").exists():
        best = load_checkpoint(run / "best.ckpt")
    rows: list[dict] = []
    k = config.critic_updates_per_gen
    t0 = time.time()
    while state.epoch < config.max_epochs:
        batches = list(make_batches(train_handle, config.batch_size, epoch_shuffle_seed(config.seed, state.epoch)))
        epoch_rows = []
        for start in range(0, len(batches) - k + 1, k):
            report = train_step(state, batches[start:start + k], config)
            row = {"step": state.step, "epoch": state.epoch, **report.as_dict(), "wall_time": time.time() - t0}
            epoch_rows.append(row)
        state.epoch += 1
        rows.extend(epoch_rows)
        if log_path is not None:
            with open(log_path, "a", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
                writer.writerows(epoch_rows)

        improved = True
        if val_handle is not None and len(val_handle):
            score, metrics = validation_score(state, val_handle, config)
            log.info("epoch %d: %s", state.epoch, metrics)
            if run is not None:
                with open(val_path, "a", newline="") as fh:
                    csv.writer(fh).writerow([state.epoch, metrics["val_accuracy"], metrics["val_dice"], score])
            improved = score > state.best_score
            if improved:
                state.best_score, state.best_epoch = score, state.epoch
        else:
            state.best_epoch = state.epoch
        ckpt = snapshot(state, config)
        if improved:
            best = ckpt
        if run is not None:
            if improved:
                save_checkpoint(best, run / "best.ckpt")
            if config.checkpoint_interval and state.epoch % config.checkpoint_interval == 0:
                save_checkpoint(ckpt, run / "checkpoints" / f"epoch_{state.epoch:04d}.ckpt")
            save_checkpoint(ckpt, run / "checkpoints" / "last.ckpt")

    if run is not None and not (run / "best.ckpt").exists():
        save_checkpoint(best, run / "best.ckpt")
    return best, rows
