# app/losses.py
"""
SSL-GAN objectives with φ(y) = −log y, as batch means.

Each loss returns its value together with the gradient with respect to the
network outputs it consumes (probabilities), ready for
``DiscriminatorNet.backward`` / ``GeneratorNet.backward``.

Probabilities are clamped to [PROB_EPS, 1 − PROB_EPS] before any log.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from core.exceptions import ArgumentError

PROB_EPS = 1e-7


class LossReport(BaseModel):
    """Generator loss and the discriminator loss split; l_d_total == l_d_sup + l_d_unsup."""
    model_config = ConfigDict(frozen=True)

    l_g: float
    l_d_sup: float
    l_d_unsup: float
    l_d_total: float

    @model_validator(mode="after")
    def _total_is_sum(self) -> "LossReport":
        if self.l_d_total != self.l_d_sup + self.l_d_unsup:
            raise ValueError("l_d_total must equal l_d_sup + l_d_unsup")
        return self

    @classmethod
    def build(cls, l_g: float, l_d_sup: float, l_d_unsup: float) -> "LossReport":
        return cls(l_g=l_g, l_d_sup=l_d_sup, l_d_unsup=l_d_unsup,
                   l_d_total=discriminator_total_loss(l_d_sup, l_d_unsup))

    @classmethod
    def mean(cls, reports: list["LossReport"]) -> "LossReport":
        if not reports:
            raise ArgumentError("cannot average zero loss reports")
        n = len(reports)
        return cls.build(
            l_g=sum(r.l_g for r in reports) / n,
            l_d_sup=sum(r.l_d_sup for r in reports) / n,
            l_d_unsup=sum(r.l_d_unsup for r in reports) / n,
        )

    def is_finite(self) -> bool:
        return bool(np.isfinite([self.l_g, self.l_d_sup, self.l_d_unsup, self.l_d_total]).all())


@dataclass
class LossGrad:
    value: float
    grad: np.ndarray


@dataclass
class UnsupervisedLossGrad:
    value: float
    grad_fake: np.ndarray
    grad_unlabeled: np.ndarray


def _clamp(probs: np.ndarray) -> np.ndarray:
    return np.clip(probs, PROB_EPS, 1.0 - PROB_EPS)


def _require_batch(probs: np.ndarray, name: str) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64).reshape(-1)
    if probs.size == 0:
        raise ArgumentError(f"{name} batch is empty")
    return probs


def generator_loss(real_probs_on_fake: np.ndarray) -> LossGrad:
    """mean −log D_real(G(z)); gradient −1/(B·p)."""
    p = _clamp(_require_batch(real_probs_on_fake, "fake"))
    n = p.size
    return LossGrad(value=float(np.mean(-np.log(p))), grad=-1.0 / (n * p))


def discriminator_unsupervised_loss(real_probs_on_fake: np.ndarray,
                                    real_probs_on_unlabeled: np.ndarray) -> UnsupervisedLossGrad:
    """mean −log(1 − D_real(G(z))) + mean −log D_real(x_unlabeled)."""
    pf = _clamp(_require_batch(real_probs_on_fake, "fake"))
    pu = _clamp(_require_batch(real_probs_on_unlabeled, "unlabeled"))
    value = float(np.mean(-np.log(1.0 - pf)) + np.mean(-np.log(pu)))
    return UnsupervisedLossGrad(
        value=value,
        grad_fake=1.0 / (pf.size * (1.0 - pf)),
        grad_unlabeled=-1.0 / (pu.size * pu),
    )


def validate_one_hot(labels_onehot: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels_onehot, dtype=np.float64)
    if labels.ndim != 2 or labels.shape[0] == 0:
        raise ArgumentError("labels must be a non-empty (batch, K) matrix", shape=labels.shape)
    binary = np.all((labels == 0.0) | (labels == 1.0), axis=1)
    single = labels.sum(axis=1) == 1.0
    bad = np.flatnonzero(~(binary & single))
    if bad.size:
        raise ArgumentError("label rows must be exact one-hot", first_bad_row=int(bad[0]))
    return labels


def discriminator_supervised_loss(class_probs: np.ndarray, labels_onehot: np.ndarray) -> LossGrad:
    """mean −log p(true class); gradient −1/(B·p) on the true-class entry, 0 elsewhere."""
    labels = validate_one_hot(labels_onehot)
    probs = np.asarray(class_probs, dtype=np.float64)
    if probs.shape != labels.shape:
        raise ArgumentError("class_probs and labels differ in shape",
                            probs=probs.shape, labels=labels.shape)
    n = labels.shape[0]
    p_true = _clamp(np.sum(probs * labels, axis=1))
    grad = labels * (-1.0 / (n * p_true))[:, None]
    return LossGrad(value=float(np.mean(-np.log(p_true))), grad=grad)


def discriminator_total_loss(sup: float, unsup: float) -> float:
    return sup + unsup
