"""Mini-batch momentum-SGD training of the multi-task CNN."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import SampleCrop
from .losses import (LossReport, identification_loss, identification_loss_grad,
                     localization_loss, localization_loss_grad, total_loss)
from .net import CnnArch, ModelParams, build_cnn, cnn_backward, cnn_forward

log = logging.getLogger(__name__)


@dataclass
class CnnHyper:
    epochs: int = 15
    batch_size: int = 24
    learning_rate: float = 1e-3
    lr_decay: float = 0.4
    lr_decay_every: int = 20000
    weight_decay: float = 1e-4
    momentum: float = 0.9
    lam: float = 0.12
    seed: int = 0


def batch_step(params: ModelParams, batch: list[SampleCrop], lam: float):
    """Loss report and summed gradients of the batch loss.

    The identification mean uses the batch size and the localization mean
    the positive count, both known before the forward passes, so each
    sample is backpropagated on its own and no activations are kept.
    """
    n = len(batch)
    targets = [s.target for s in batch]
    m = sum(t.positive for t in targets)
    grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    probs, offsets = [], []
    for s in batch:
        cache = {}
        logits, offset, _ = cnn_forward(params, s.tensor, cache)
        probs.append(T.softmax(logits))
        offsets.append(offset)
        d_logits = identification_loss_grad(logits, [s.target])[0] / n
        d_off = np.zeros(3)
        if s.target.positive:
            d_off = lam * localization_loss_grad(offset[None], [s.target])[0] / m
        for k, g in cnn_backward(params, cache, d_logits, d_off).items():
            grads[k] += g
    lid = identification_loss(np.array(probs), targets)
    lloc, mm = localization_loss(np.array(offsets), targets)
    return LossReport(lid, lloc, total_loss(lid, lloc, lam), mm, lam), grads


def train_cnn(samples: list[SampleCrop], hyper: CnnHyper | None = None,
              params: ModelParams | None = None, arch: CnnArch | None = None,
              history: list | None = None) -> ModelParams:
    hyper = hyper or CnnHyper()
    if not samples:
        raise ValueError("train_cnn needs at least one sample")
    params = params or build_cnn(hyper.seed, arch)
    state = T.OptimState(hyper.learning_rate, hyper.momentum, hyper.weight_decay)
    rng = np.random.default_rng(hyper.seed + 1)
    it = 0
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(samples))
        sums = np.zeros(3)
        nb = 0
        for lo in range(0, len(order), hyper.batch_size):
            batch = [samples[k] for k in order[lo:lo + hyper.batch_size]]
            report, grads = batch_step(params, batch, hyper.lam)
            if not np.isfinite(report.total):
                raise FloatingPointError(f"non-finite CNN loss at epoch {epoch}, iteration {it}: {report}")
            state.learning_rate = hyper.learning_rate * hyper.lr_decay ** (it // hyper.lr_decay_every)
            T.sgd_step(params.tensors, grads, state)
            sums += (report.id_loss, report.loc_loss, report.total)
            nb += 1
            it += 1
        rec = {"epoch": epoch, "id_loss": sums[0] / nb, "loc_loss": sums[1] / nb,
               "total": sums[2] / nb, "lambda": hyper.lam, "lr": state.learning_rate}
        log.info("cnn epoch %(epoch)d id %(id_loss).5f loc %(loc_loss).5f total %(total).5f", rec)
        if history is not None:
            history.append(rec)
    return params


def predict_samples(params: ModelParams, samples: list[SampleCrop]):
    """Argmax labels and predicted offsets for each sample."""
    labels = np.empty(len(samples), dtype=int)
    offsets = np.empty((len(samples), 3))
    for i, s in enumerate(samples):
        logits, off, _ = cnn_forward(params, s.tensor)
        labels[i] = int(np.argmax(logits))
        offsets[i] = off
    return labels, offsets
