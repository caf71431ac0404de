"""Dataset condensation by per-class gradient matching, with encoding-cost
regularization of the synthetic images.

The matching objective compares, separately for each class, the classifier
gradients induced by a real batch and by the synthetic batch, summing one
minus the cosine similarity over per-layer flattened gradients. Synthetic
pixels are projected back into [0, 1] after every optimizer step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .datasets import LabeledDataset
from .errors import TrainingError, ValidationError
from .flow import BpdReport, FlowScorer, bpd
from .joint import _score_ready, batch_bpd
from .nets import (
    ModelState,
    OptimizerState,
    apply_update,
    evaluate_accuracy,
    forward,
    init_convnet,
    train_classifier,
)

log = logging.getLogger(__name__)


@dataclass
class CondensedSet:
    images: torch.Tensor  # (num_classes * ipc, C, H, W), values in [0, 1]
    labels: torch.Tensor  # fixed, exactly ipc per class, class-major order
    ipc: int

    def __post_init__(self):
        counts = torch.bincount(self.labels)
        if not bool((counts == self.ipc).all()):
            raise ValidationError("labels must be exactly balanced at ipc per class")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValidationError("image/label count mismatch")


@dataclass
class MatchConfig:
    lambda_sim: float = 0.0
    ipc: int = 1
    outer_loops: int = 200
    inner_model_steps: int = 1
    reinit_every: int = 10
    real_batch_per_class: int = 64
    image_lr: float = 0.05
    model_lr: float = 1e-3
    width: int = 128
    seed: int = 0
    init: str = "real"  # or "noise"

    def __post_init__(self):
        if self.ipc < 1:
            raise ValidationError("ipc must be >= 1")
        if self.init not in ("real", "noise"):
            raise ValidationError(f"unknown init {self.init!r}")


def layerwise_cosine_distance(
    grads_a: dict[str, torch.Tensor], grads_b: dict[str, torch.Tensor]
) -> torch.Tensor:
    """Sum of (1 - cos) over per-layer flattened gradient pairs.

    Layers where either gradient has zero norm are skipped (with a warning)
    rather than scored, so dead layers at initialization contribute nothing.
    """
    total = None
    for name, ga in grads_a.items():
        gb = grads_b[name]
        fa, fb = ga.flatten(), gb.flatten()
        na, nb = fa.norm(), fb.norm()
        if na.item() == 0.0 or nb.item() == 0.0:
            log.warning("zero-norm gradient in layer %s; skipped in matching loss", name)
            continue
        cos = torch.dot(fa, fb) / (na * nb)
        term = 1.0 - cos
        total = term if total is None else total + term
    if total is None:
        raise TrainingError("all layers had zero-norm gradients")
    return total


def gradient_matching_loss(
    f: ModelState,
    x_orig_c: torch.Tensor,
    x_syn_c: torch.Tensor,
    y_c: torch.Tensor,
) -> torch.Tensor:
    """Matching loss for one class; differentiable w.r.t. the synthetic images."""
    if y_c.unique().numel() != 1:
        raise ValidationError("gradient matching is computed separately per class")
    names = list(f.params.keys())
    tensors = [f.params[k] for k in names]

    real_loss = F.cross_entropy(forward(f, x_orig_c), y_c.expand(x_orig_c.shape[0]))
    g_real = torch.autograd.grad(real_loss, tensors)
    g_real = {k: g.detach() for k, g in zip(names, g_real)}

    syn_loss = F.cross_entropy(forward(f, x_syn_c), y_c.expand(x_syn_c.shape[0]))
    g_syn = dict(zip(names, torch.autograd.grad(syn_loss, tensors, create_graph=True)))
    return layerwise_cosine_distance(g_real, g_syn)


def _init_synthetic(dataset: LabeledDataset, config: MatchConfig, rng) -> tuple[torch.Tensor, torch.Tensor]:
    k = dataset.num_classes
    shape = (k * config.ipc, *dataset.images.shape[1:])
    labels = torch.arange(k).repeat_interleave(config.ipc)
    if config.init == "noise":
        images = torch.from_numpy(rng.uniform(0, 1, size=shape).astype(np.float32))
    else:
        picks = []
        for c in range(k):
            idx = np.flatnonzero(dataset.labels.numpy() == c)
            picks.append(rng.choice(idx, size=config.ipc, replace=False))
        images = dataset.images[torch.from_numpy(np.concatenate(picks))].clone()
    return images, labels


def condense(
    dataset: LabeledDataset,
    scorer: FlowScorer | None,
    config: MatchConfig,
) -> tuple[CondensedSet, BpdReport]:
    """Learn a small synthetic set whose gradients match the real data's.

    Alternates synthetic-image updates with short classifier training on the
    synthetic set, re-initializing the classifier on the configured schedule.
    """
    if config.lambda_sim > 0 and scorer is None:
        raise TrainingError("a scorer is required when lambda_sim > 0")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    k = dataset.num_classes
    images, syn_labels = _init_synthetic(dataset, config, rng)
    x_syn = images.clone().requires_grad_(True)
    img_opt = torch.optim.Adam([x_syn], lr=config.image_lr)

    class_indices = [np.flatnonzero(dataset.labels.numpy() == c) for c in range(k)]
    in_channels = dataset.images.shape[1]

    f = None
    model_opt = None
    for it in range(config.outer_loops):
        if it % config.reinit_every == 0:
            f = init_convnet(num_classes=k, in_channels=in_channels, width=config.width,
                             seed=config.seed + it)
            model_opt = OptimizerState("adam", lr=config.model_lr)

        loss = torch.zeros(())
        for c in range(k):
            take = min(config.real_batch_per_class, class_indices[c].size)
            ridx = rng.choice(class_indices[c], size=take, replace=False)
            x_real_c = dataset.images[torch.from_numpy(ridx)]
            x_syn_c = x_syn[c * config.ipc : (c + 1) * config.ipc]
            loss = loss + gradient_matching_loss(f, x_real_c, x_syn_c, torch.tensor([c]))
        if config.lambda_sim > 0:
            loss = loss + config.lambda_sim * batch_bpd(scorer, x_syn).sum()
        if not torch.isfinite(loss):
            raise TrainingError(f"condensation loss diverged at outer loop {it}")

        img_opt.zero_grad()
        loss.backward()
        img_opt.step()
        with torch.no_grad():
            x_syn.clamp_(0.0, 1.0)

        for _ in range(config.inner_model_steps):
            model_loss = F.cross_entropy(forward(f, x_syn.detach()), syn_labels)
            grads = torch.autograd.grad(model_loss, list(f.params.values()))
            new_params = apply_update(f.params, dict(zip(f.params.keys(), grads)), model_opt)
            f = ModelState(f.template, {kk: p.detach().requires_grad_(True) for kk, p in new_params.items()}, dict(f.arch))

    final = CondensedSet(images=x_syn.detach().clamp(0, 1), labels=syn_labels, ipc=config.ipc)
    report = bpd(scorer, _score_ready(final.images), dequantize=True, seed=0) if scorer is not None else BpdReport(np.array([]), float("nan"))
    return final, report


def retrain_on_condensed(
    condensed: CondensedSet,
    test_dataset: LabeledDataset,
    epochs: int = 300,
    reinits: int = 3,
    lr: float = 5e-4,
    width: int = 128,
    seed: int = 0,
) -> float:
    """Train fresh classifiers to convergence on the synthetic set (no
    augmentation) and report mean accuracy on the real test split."""
    accs = []
    k = int(test_dataset.num_classes)
    for r in range(reinits):
        f = init_convnet(num_classes=k, in_channels=condensed.images.shape[1], width=width,
                         seed=seed + r)
        f, _ = train_classifier(
            f, condensed.images, condensed.labels, epochs=epochs,
            batch_size=max(len(condensed.labels), 1), lr=lr, weight_decay=0.0, seed=seed + r,
        )
        accs.append(evaluate_accuracy(f, test_dataset.images, test_dataset.labels))
    return float(np.mean(accs))


def total_variation(images: torch.Tensor) -> float:
    """Mean absolute difference between neighboring pixels; a smoothness proxy."""
    dh = (images[:, :, 1:, :] - images[:, :, :-1, :]).abs().mean()
    dw = (images[:, :, :, 1:] - images[:, :, :, :-1]).abs().mean()
    return float(dh + dw)
