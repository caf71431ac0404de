"""Joint simplifier/classifier training with one unrolled classifier step.

Per batch: the simplifier maps the original images to simplified ones, the
classifier takes a *differentiable* SGD step on the simplified batch, and the
simplifier is scored on (a) the post-step classifier's loss on the original
images (weighted 10x), (b) the pre- and post-step losses on the simplified
images, and (c) the encoding cost of the simplified images, gated off
per-example whenever the post-step original-image loss exceeds a threshold.
The gradient of (a) w.r.t. the simplifier flows through the unrolled step,
which is what credits the simplifier for keeping the batch trainable. The
classifier then takes its real AdamW step on the simplified batch.

The encoding-cost term uses bits/dimension (the negative log-density divided
by d*ln 2) so the trade-off weight is comparable across image sizes.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .datasets import LabeledDataset
from .errors import TrainingError
from .flow import FlowScorer, bpd, log_prob
from .nets import (
    ModelState,
    OptimizerState,
    apply_update,
    classifier_forward,
    evaluate_accuracy,
    init_classifier,
    init_simplifier,
    save_model,
    simplifier_forward,
    train_step,
)
from .viz import save_image_grid


@dataclass
class JointConfig:
    lambda_sim: float = 0.0
    batch_size: int = 32
    epochs: int = 10
    lr: float = 5e-4
    weight_decay: float = 1e-5
    inner_lr: float | None = None  # unrolled SGD step size; defaults to lr
    gating_threshold: float = 0.1
    orig_loss_weight: float = 10.0
    seed: int = 0
    ngf: int = 64
    snapshot_every: int = 1
    max_train_images: int | None = None
    include_orig_term: bool = True  # disabled only by the collapse-guard test

    def __post_init__(self):
        if self.lambda_sim < 0:
            raise TrainingError("lambda_sim must be nonnegative")
        if self.gating_threshold <= 0:
            raise TrainingError("gating_threshold must be positive")

    @property
    def inner_step_lr(self) -> float:
        return self.lr if self.inner_lr is None else self.inner_lr


@dataclass
class StepRecord:
    step: int
    loss_total: float
    sim_bpd: float  # mean bits/dim of the simplified batch (gated subset; nan if all gated)
    cls_orig_post: float
    cls_sim_pre: float
    cls_sim_post: float
    gate_fraction: float
    acc_orig: float
    acc_sim: float


@dataclass
class JointTrace:
    records: list[StepRecord] = field(default_factory=list)
    epoch_test_acc: list[float] = field(default_factory=list)

    def append(self, rec: StepRecord):
        if self.records and rec.step <= self.records[-1].step:
            raise TrainingError("trace steps must be strictly increasing")
        self.records.append(rec)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f.name for f in StepRecord.__dataclass_fields__.values()])
            for rec in self.records:
                writer.writerow([getattr(rec, f) for f in StepRecord.__dataclass_fields__])


def _score_ready(x: torch.Tensor) -> torch.Tensor:
    """Channel-lift grayscale batches so the 3-channel scorer can rate them."""
    return x.repeat(1, 3, 1, 1) if x.shape[1] == 1 else x


def batch_bpd(scorer: FlowScorer, x: torch.Tensor) -> torch.Tensor:
    """Noiseless per-example bits/dimension, differentiable w.r.t. x."""
    lifted = _score_ready(x)
    d = lifted[0].numel()
    return -log_prob(scorer, lifted, dequantize=False) / (d * math.log(2.0))


@dataclass
class JointLossParts:
    loss: torch.Tensor
    x_sim: torch.Tensor
    gate: torch.Tensor
    per_ex_orig: torch.Tensor
    logits_sim_pre: torch.Tensor
    cls_sim_pre: torch.Tensor
    cls_sim_post: torch.Tensor
    sim_bpd_mean: float


def joint_loss(
    f: ModelState,
    simplifier: ModelState,
    scorer: FlowScorer | None,
    batch: tuple[torch.Tensor, torch.Tensor],
    config: JointConfig,
) -> JointLossParts:
    """The simplifier's training objective, fully connected for autograd."""
    x_orig, y = batch
    if scorer is None and config.lambda_sim > 0:
        raise TrainingError("a scorer is required when lambda_sim > 0")

    x_sim = simplifier_forward(simplifier, x_orig)
    logits_sim_pre = classifier_forward(f, x_sim)
    inner_loss = F.cross_entropy(logits_sim_pre, y)
    f_prime = train_step(f, inner_loss, OptimizerState("sgd", lr=config.inner_step_lr))

    per_ex_orig = F.cross_entropy(classifier_forward(f_prime, x_orig), y, reduction="none")
    cls_sim_pre = inner_loss
    cls_sim_post = F.cross_entropy(classifier_forward(f_prime, x_sim), y)

    loss = cls_sim_pre + cls_sim_post
    if config.include_orig_term:
        loss = loss + config.orig_loss_weight * per_ex_orig.mean()

    gate = per_ex_orig.detach() <= config.gating_threshold
    sim_bpd_mean = float("nan")
    if config.lambda_sim > 0 and bool(gate.any()):
        gated_bpd = batch_bpd(scorer, x_sim[gate])
        # Masked examples are excluded outright: their gradient contribution
        # through this term is identically zero, not merely small.
        loss = loss + config.lambda_sim * gated_bpd.sum() / x_orig.shape[0]
        sim_bpd_mean = gated_bpd.mean().item()
    return JointLossParts(
        loss=loss,
        x_sim=x_sim,
        gate=gate,
        per_ex_orig=per_ex_orig,
        logits_sim_pre=logits_sim_pre,
        cls_sim_pre=cls_sim_pre,
        cls_sim_post=cls_sim_post,
        sim_bpd_mean=sim_bpd_mean,
    )


def joint_step(
    f: ModelState,
    simplifier: ModelState,
    scorer: FlowScorer | None,
    batch: tuple[torch.Tensor, torch.Tensor],
    config: JointConfig,
    f_opt: OptimizerState,
    s_opt: OptimizerState,
    step: int = 0,
):
    """One joint update; returns (f_next, simplifier_next, StepRecord)."""
    x_orig, y = batch
    parts = joint_loss(f, simplifier, scorer, batch, config)
    if not torch.isfinite(parts.loss):
        raise TrainingError(f"joint loss diverged at step {step}")

    # Real classifier step: gradient of the pre-step loss on the simplified
    # batch w.r.t. the classifier only (the simplifier sees none of it).
    f_grads = torch.autograd.grad(parts.cls_sim_pre, list(f.params.values()), retain_graph=True)
    s_grads = torch.autograd.grad(parts.loss, list(simplifier.params.values()))

    f_new_params = apply_update(f.params, dict(zip(f.params.keys(), f_grads)), f_opt)
    s_new_params = apply_update(simplifier.params, dict(zip(simplifier.params.keys(), s_grads)), s_opt)
    f_next = ModelState(f.template, {k: p.detach().requires_grad_(True) for k, p in f_new_params.items()}, dict(f.arch))
    s_next = ModelState(simplifier.template, {k: p.detach().requires_grad_(True) for k, p in s_new_params.items()}, dict(simplifier.arch))

    with torch.no_grad():
        acc_orig = (classifier_forward(f, x_orig).argmax(1) == y).float().mean().item()
        acc_sim = (parts.logits_sim_pre.argmax(1) == y).float().mean().item()
    record = StepRecord(
        step=step,
        loss_total=parts.loss.item(),
        sim_bpd=parts.sim_bpd_mean,
        cls_orig_post=parts.per_ex_orig.mean().item(),
        cls_sim_pre=parts.cls_sim_pre.item(),
        cls_sim_post=parts.cls_sim_post.item(),
        gate_fraction=parts.gate.float().mean().item(),
        acc_orig=acc_orig,
        acc_sim=acc_sim,
    )
    return f_next, s_next, record


@dataclass
class JointResult:
    classifier: ModelState
    simplifier: ModelState
    trace: JointTrace
    config: JointConfig
    out_dir: Path | None = None


def simplify_dataset(simplifier: ModelState, images: torch.Tensor, batch_size: int = 128) -> torch.Tensor:
    """Regenerate the full simplified image set from a final simplifier."""
    outs = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            outs.append(simplifier_forward(simplifier, images[start : start + batch_size]))
    return torch.cat(outs)


def run_joint_training(
    dataset: LabeledDataset,
    config: JointConfig,
    scorer: FlowScorer | None,
    test_dataset: LabeledDataset | None = None,
    out_dir: str | Path | None = None,
) -> JointResult:
    """Full joint run over the dataset; optionally persists states/trace/snapshots."""
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    images, labels = dataset.images, dataset.labels
    if config.max_train_images is not None and images.shape[0] > config.max_train_images:
        sub = dataset.subset(config.max_train_images, seed=config.seed)
        images, labels = sub.images, sub.labels

    in_channels = images.shape[1]
    f = init_classifier(num_classes=dataset.num_classes, in_channels=in_channels, seed=config.seed)
    simplifier = init_simplifier(in_channels=in_channels, ngf=config.ngf, seed=config.seed + 1)
    f_opt = OptimizerState("adamw", lr=config.lr, weight_decay=config.weight_decay)
    s_opt = OptimizerState("adamw", lr=config.lr, weight_decay=config.weight_decay)

    trace = JointTrace()
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        (out_path / "config.json").write_text(json.dumps(asdict(config), indent=2))

    step = 0
    n = images.shape[0]
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = torch.from_numpy(order[start : start + config.batch_size].copy())
            if idx.shape[0] < 2:
                continue
            try:
                f, simplifier, rec = joint_step(
                    f, simplifier, scorer, (images[idx], labels[idx]), config, f_opt, s_opt, step=step
                )
            except TrainingError:
                if out_path is not None:  # abort, but leave the trace behind
                    trace.write_csv(out_path / "trace.csv")
                raise
            trace.append(rec)
            step += 1
        if test_dataset is not None:
            trace.epoch_test_acc.append(
                evaluate_accuracy(f, test_dataset.images, test_dataset.labels)
            )
        if out_path is not None and (epoch + 1) % config.snapshot_every == 0:
            with torch.no_grad():
                sample = images[:8]
                sim = simplifier_forward(simplifier, sample)
            save_image_grid(torch.cat([sample, sim]), out_path / f"snapshot_epoch{epoch:03d}.png", nrow=8)

    if out_path is not None:
        trace.write_csv(out_path / "trace.csv")
        save_model(f, out_path / "classifier.pt")
        save_model(simplifier, out_path / "simplifier.pt")
        if trace.epoch_test_acc:
            (out_path / "metrics.json").write_text(json.dumps({"epoch_test_acc": trace.epoch_test_acc}))
    return JointResult(classifier=f, simplifier=simplifier, trace=trace, config=config, out_dir=out_path)


@dataclass
class SweepRow:
    lambda_sim: float
    mean_bpd: float
    acc_joint: float
    out_dir: str | None = None
    error: str | None = None


def sweep_lambda(
    dataset: LabeledDataset,
    lambdas: list[float],
    config: JointConfig,
    scorer: FlowScorer,
    test_dataset: LabeledDataset,
    out_root: str | Path | None = None,
) -> list[SweepRow]:
    """One joint run per lambda; failures are recorded and the sweep continues.

    mean_bpd is the dequantized bits/dim of the regenerated simplified train
    set under the shared scorer, so rows are comparable across methods.
    """
    if len(lambdas) < 1:
        raise TrainingError("sweep needs at least one lambda")
    rows = []
    for lam in lambdas:
        run_dir = Path(out_root) / f"lambda_{lam:g}" if out_root is not None else None
        cfg = JointConfig(**{**asdict(config), "lambda_sim": lam})
        try:
            result = run_joint_training(dataset, cfg, scorer, test_dataset=test_dataset, out_dir=run_dir)
            train_images = dataset.images
            if cfg.max_train_images is not None:
                train_images = dataset.subset(cfg.max_train_images, seed=cfg.seed).images
            sim_images = simplify_dataset(result.simplifier, train_images)
            report = bpd(scorer, _score_ready(sim_images), dequantize=True, seed=0)
            acc = evaluate_accuracy(result.classifier, test_dataset.images, test_dataset.labels)
            rows.append(SweepRow(lam, report.mean_bpd, acc, str(run_dir) if run_dir else None))
        except TrainingError as exc:
            rows.append(SweepRow(lam, float("nan"), float("nan"), str(run_dir) if run_dir else None, error=str(exc)))
    return rows


def write_sweep_csv(rows: list[SweepRow], path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lambda_sim", "mean_bpd", "acc_joint", "out_dir", "error"])
        for r in rows:
            writer.writerow([r.lambda_sim, r.mean_bpd, r.acc_joint, r.out_dir or "", r.error or ""])
