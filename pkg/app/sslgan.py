# app/sslgan.py
"""
Single-pair SSL-GAN training: the baseline trainer and the mutation
operator of the co-evolutionary loop.

Per unlabeled batch B_U:
  1. fresh z → fakes; D step on L_D = L_D,s(B_L) + L_D,u(fakes, B_U)
  2. fresh z → fakes; G step on L_G, with D frozen
B_L is the whole labeled set whenever it fits in one batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from pydantic import ConfigDict, Field

from app.data import BatchIterator, MixturePool, SslDataset, one_hot
from app.linalg import RngStream, sample_standard_normal
from app.losses import (
    LossReport,
    discriminator_supervised_loss,
    discriminator_unsupervised_loss,
    generator_loss,
)
from app.metrics import classification_accuracy
from app.neuralnet import (
    AdamConfig,
    ArchConfig,
    DiscriminatorNet,
    GeneratorNet,
    apply_gradients,
    backward_and_step,
)
from core.exceptions import ArgumentError, ArgumentModel, NonFiniteError, TrainingDivergenceError
from core.logging import get_logger

logger = get_logger(__name__)


class TrainBudget(ArgumentModel):
    model_config = ConfigDict(frozen=True)

    epochs: int = Field(ge=1)
    batch_size: int = Field(default=100, ge=1)


EpochCallback = Callable[[int, GeneratorNet, DiscriminatorNet, LossReport], None]


@dataclass
class TrainResult:
    generator: GeneratorNet
    discriminator: DiscriminatorNet
    trace: list[LossReport] = field(default_factory=list)


def check_pair(g: GeneratorNet, d: DiscriminatorNet, data: SslDataset) -> None:
    if g.output_dim != data.sample_dim or d.input_dim != data.sample_dim:
        raise ArgumentError("network widths do not match the data",
                            generator_out=g.output_dim, discriminator_in=d.input_dim,
                            sample_dim=data.sample_dim)
    if d.num_classes != data.num_classes:
        raise ArgumentError("class head width must equal K",
                            class_head=d.num_classes, num_classes=data.num_classes)
    if data.num_labeled == 0:
        raise ArgumentError("SSL-GAN training needs at least one labeled sample")
    if data.num_unlabeled == 0:
        raise ArgumentError("SSL-GAN training needs unlabeled samples")


def pair_losses(real_on_fake: np.ndarray, real_on_unlabeled: np.ndarray,
                class_on_labeled: np.ndarray, labels: np.ndarray) -> LossReport:
    """LossReport from discriminator outputs on one batch."""
    return LossReport.build(
        l_g=generator_loss(real_on_fake).value,
        l_d_sup=discriminator_supervised_loss(class_on_labeled, labels).value,
        l_d_unsup=discriminator_unsupervised_loss(real_on_fake, real_on_unlabeled).value,
    )


def discriminator_step(g: GeneratorNet, d: DiscriminatorNet, unlabeled: np.ndarray,
                       labeled_x: np.ndarray, labeled_y: np.ndarray,
                       rng: RngStream, adam: AdamConfig) -> tuple[float, float]:
    """One Adam step of D on L_D; returns (L_D,s, L_D,u) before the update."""
    n_lab, n_unl = labeled_x.shape[0], unlabeled.shape[0]
    fake, _ = g.forward(sample_standard_normal(rng, n_unl, g.latent_dim))
    # single pass over [labeled | fake | unlabeled]
    real_probs, class_probs, cache = d.forward(np.vstack([labeled_x, fake, unlabeled]))
    sup = discriminator_supervised_loss(class_probs[:n_lab], labeled_y)
    unsup = discriminator_unsupervised_loss(real_probs[n_lab:n_lab + n_unl], real_probs[n_lab + n_unl:])
    if not np.isfinite(sup.value + unsup.value):
        raise TrainingDivergenceError("non-finite discriminator loss")

    grad_real = np.concatenate([np.zeros(n_lab), unsup.grad_fake, unsup.grad_unlabeled])
    grad_class = np.zeros_like(class_probs)
    grad_class[:n_lab] = sup.grad
    backward_and_step(d, cache, (grad_real, grad_class), adam)
    return sup.value, unsup.value


def generator_step(g: GeneratorNet, d: DiscriminatorNet, batch_size: int,
                   rng: RngStream, adam: AdamConfig) -> float:
    """One Adam step of G on L_G through a frozen D; returns L_G before the update."""
    fake, g_cache = g.forward(sample_standard_normal(rng, batch_size, g.latent_dim))
    real_probs, _, d_cache = d.forward(fake)
    loss = generator_loss(real_probs)
    if not np.isfinite(loss.value):
        raise TrainingDivergenceError("non-finite generator loss")
    # D's parameter gradients are discarded; only dL/dx flows on into G
    _, grad_fake = d.backward(d_cache, loss.grad, None)
    backward_and_step(g, g_cache, grad_fake, adam)
    return loss.value


def train_pair(g: GeneratorNet, d: DiscriminatorNet, data: SslDataset, budget: TrainBudget,
               adam: AdamConfig, rng: RngStream, on_epoch: EpochCallback | None = None) -> TrainResult:
    """
    Train a generator/discriminator couple in place for ``budget.epochs`` epochs.

    An epoch is one reshuffled pass over the unlabeled pool. Returns the same
    network objects plus one mean LossReport per epoch.
    """
    check_pair(g, d, data)
    batches = BatchIterator(data, budget.batch_size, rng.child("batches"))
    noise = rng.child("noise")
    trace: list[LossReport] = []
    last_finite: LossReport | None = None

    for epoch in range(1, budget.epochs + 1):
        reports: list[LossReport] = []
        for batch_index, unlabeled in enumerate(batches.epoch_batches()):
            try:
                labeled_x, labeled_y = batches.labeled_batch()
                sup, unsup = discriminator_step(g, d, unlabeled, labeled_x, labeled_y, noise, adam)
                l_g = generator_step(g, d, unlabeled.shape[0], noise, adam)
            except (TrainingDivergenceError, NonFiniteError) as exc:
                raise TrainingDivergenceError(
                    exc.detail, last_report=last_finite, **{**exc.context, "epoch": epoch, "batch": batch_index}
                ) from exc
            report = LossReport.build(l_g=l_g, l_d_sup=sup, l_d_unsup=unsup)
            if not report.is_finite():
                raise TrainingDivergenceError("non-finite loss", last_report=last_finite,
                                              epoch=epoch, batch=batch_index)
            reports.append(report)
            last_finite = report

        epoch_report = LossReport.mean(reports)
        trace.append(epoch_report)
        logger.debug("Epoch finished", extra={"epoch": epoch, **epoch_report.model_dump()})
        if on_epoch is not None:
            on_epoch(epoch, g, d, epoch_report)

    return TrainResult(generator=g, discriminator=d, trace=trace)


# ─── Evaluation ──────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class EvalBatch:
    z: np.ndarray
    unlabeled: np.ndarray
    labeled_x: np.ndarray
    labeled_y: np.ndarray


def draw_eval_batches(data: SslDataset, n_batches: int | None, batch_size: int,
                      latent_dim: int, rng: RngStream) -> list[EvalBatch]:
    """
    Fresh evaluation batches. ``n_batches=None`` means one full reshuffled
    pass over the unlabeled pool.
    """
    if n_batches is not None and n_batches < 1:
        raise ArgumentError("n_batches must be >= 1", n_batches=n_batches)
    iterator = BatchIterator(data, batch_size, rng.child("batches"))
    noise = rng.child("noise")
    if n_batches is None:
        unlabeled_batches = list(iterator.epoch_batches())
    else:
        unlabeled_batches = [iterator.random_unlabeled(batch_size) for _ in range(n_batches)]
    out = []
    for unlabeled in unlabeled_batches:
        labeled_x, labeled_y = iterator.labeled_batch()
        z = sample_standard_normal(noise, unlabeled.shape[0], latent_dim)
        out.append(EvalBatch(z=z, unlabeled=unlabeled, labeled_x=labeled_x, labeled_y=labeled_y))
    return out


def evaluate_pair_on_batches(g: GeneratorNet, d: DiscriminatorNet, batches: list[EvalBatch]) -> LossReport:
    reports = []
    for batch in batches:
        fake, _ = g.forward(batch.z)
        n_lab, n_unl = batch.labeled_x.shape[0], batch.unlabeled.shape[0]
        real_probs, class_probs, _ = d.forward(np.vstack([batch.labeled_x, fake, batch.unlabeled]))
        reports.append(pair_losses(real_probs[n_lab:n_lab + n_unl], real_probs[n_lab + n_unl:],
                                   class_probs[:n_lab], batch.labeled_y))
    return LossReport.mean(reports)


def evaluate_pair(g: GeneratorNet, d: DiscriminatorNet, data: SslDataset, n_batches: int | None,
                  rng: RngStream, batch_size: int = 100) -> LossReport:
    """Mean LossReport over freshly drawn batches; no parameter is updated."""
    check_pair(g, d, data)
    return evaluate_pair_on_batches(g, d, draw_eval_batches(data, n_batches, batch_size, g.latent_dim, rng))


# ─── Fully supervised reference ──────────────────────────────────────────────

def train_supervised_reference(pool: MixturePool, arch: ArchConfig, adam: AdamConfig, epochs: int,
                               batch_size: int, rng: RngStream) -> tuple[DiscriminatorNet, float]:
    """
    Train the discriminator's trunk + class head on every training label
    (supervised loss only) and report its test accuracy: the empirical
    accuracy ceiling a semi-supervised run can be compared against.
    """
    if epochs < 1:
        raise ArgumentError("epochs must be >= 1", epochs=epochs)
    k = pool.num_classes
    d = DiscriminatorNet.initialize(arch, k, rng.child("init"))
    labels = one_hot(pool.train_y, k)
    order_rng = rng.child("order")
    n = pool.train_x.shape[0]
    for _ in range(epochs):
        order = order_rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            _, class_probs, cache = d.forward(pool.train_x[idx])
            sup = discriminator_supervised_loss(class_probs, labels[idx])
            grads, _ = d.backward(cache, None, sup.grad)
            apply_gradients(d, grads, adam)
    accuracy = classification_accuracy(d, pool.test_x, pool.test_y)
    logger.info("Supervised reference trained", extra={"epochs": epochs, "accuracy": accuracy})
    return d, accuracy
