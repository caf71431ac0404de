"""Fixed and learned simplification baselines plus the trade-off protocol.

Baselines replace the jointly learned simplifier with either a simplifier
trained purely on reconstruction-plus-encoding-cost (no classifier in the
loop), a Gaussian blur, or JPEG re-encoding. Every method's images are
scored by the same frozen density model so bits/dim are comparable across
methods, and every method is evaluated by retraining a classifier on the
transformed training set and testing on the original test split.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .datasets import LabeledDataset
from .errors import ConfigurationError, TrainingError, ValidationError
from .flow import FlowScorer, bpd
from .joint import JointResult, _score_ready, batch_bpd, simplify_dataset
from .nets import (
    OptimizerState,
    apply_update,
    evaluate_accuracy,
    forward,
    init_classifier,
    init_simplifier,
    load_model,
    simplifier_forward,
    train_classifier,
)

METHODS = ("joint", "mse_simplifier", "gaussian_blur", "jpeg")


@dataclass
class TradeoffPoint:
    method: str
    knob: float  # lambda, encoding-cost weight, sigma, or JPEG quality
    mean_bpd: float
    acc_retrain: float
    acc_joint: float = float("nan")
    acc_finetune: float = float("nan")
    seed: int = 0
    retrain_curve: list[float] = field(default_factory=list)
    error: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown method {self.method!r}")
        for acc in (self.acc_retrain, self.acc_joint, self.acc_finetune):
            if not math.isnan(acc) and not (0.0 <= acc <= 1.0):
                raise ValidationError(f"accuracy {acc} outside [0, 1]")


@dataclass
class BaselineConfig:
    epochs_simplifier: int = 5
    epochs_retrain: int = 8
    finetune_epochs: int = 10
    finetune_lr: float = 5e-5
    batch_size: int = 32
    lr: float = 5e-4
    weight_decay: float = 1e-5
    ngf: int = 32
    seed: int = 0
    max_train_images: int | None = None


def _train_subset(ds: LabeledDataset, cfg: BaselineConfig) -> LabeledDataset:
    if cfg.max_train_images is not None and len(ds) > cfg.max_train_images:
        return ds.subset(cfg.max_train_images, seed=cfg.seed)
    return ds


def retrain_classifier(
    images: torch.Tensor,
    labels: torch.Tensor,
    test_ds: LabeledDataset,
    cfg: BaselineConfig,
    num_classes: int,
) -> tuple[float, list[float]]:
    """Fresh classifier on the given (transformed) train set; original test acc."""
    f = init_classifier(num_classes=num_classes, in_channels=images.shape[1], seed=cfg.seed)
    f, curve = train_classifier(
        f, images, labels, epochs=cfg.epochs_retrain, batch_size=cfg.batch_size,
        lr=cfg.lr, weight_decay=cfg.weight_decay, seed=cfg.seed,
        eval_images=test_ds.images, eval_labels=test_ds.labels,
    )
    return curve[-1], curve


def mean_bpd_of(scorer: FlowScorer, images: torch.Tensor) -> float:
    return bpd(scorer, _score_ready(images), dequantize=True, seed=0).mean_bpd


def train_mse_simplifier(
    train_images: torch.Tensor, scorer: FlowScorer, weight: float, cfg: BaselineConfig
):
    """Simplifier trained on encoding cost + reconstruction error only."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    s = init_simplifier(in_channels=train_images.shape[1], ngf=cfg.ngf, seed=cfg.seed)
    opt = OptimizerState("adamw", lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = train_images.shape[0]
    for _ in range(cfg.epochs_simplifier):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = torch.from_numpy(order[start : start + cfg.batch_size].copy())
            x = train_images[idx]
            x_sim = simplifier_forward(s, x)
            loss = F.mse_loss(x_sim, x)
            if weight > 0:
                loss = loss + weight * batch_bpd(scorer, x_sim).mean()
            if not torch.isfinite(loss):
                raise TrainingError("reconstruction simplifier diverged")
            grads = torch.autograd.grad(loss, list(s.params.values()))
            new_params = apply_update(s.params, dict(zip(s.params.keys(), grads)), opt)
            s = type(s)(s.template, {k: p.detach().requires_grad_(True) for k, p in new_params.items()}, dict(s.arch))
    return s


def mse_simplifier_baseline(
    train_ds: LabeledDataset,
    test_ds: LabeledDataset,
    scorer: FlowScorer,
    weight: float,
    cfg: BaselineConfig,
) -> TradeoffPoint:
    """No classifier in the loop: simplify for reconstruction + low encoding cost."""
    sub = _train_subset(train_ds, cfg)
    try:
        s = train_mse_simplifier(sub.images, scorer, weight, cfg)
        sim_images = simplify_dataset(s, sub.images)
        acc, curve = retrain_classifier(sim_images, sub.labels, test_ds, cfg, train_ds.num_classes)
        return TradeoffPoint(
            method="mse_simplifier", knob=weight, mean_bpd=mean_bpd_of(scorer, sim_images),
            acc_retrain=acc, seed=cfg.seed, retrain_curve=curve,
        )
    except TrainingError as exc:
        return TradeoffPoint(method="mse_simplifier", knob=weight, mean_bpd=float("nan"),
                             acc_retrain=float("nan"), seed=cfg.seed, error=str(exc))


def blur_images(images: torch.Tensor, sigma: float) -> torch.Tensor:
    from .posthoc import gaussian_blur

    if sigma == 0:
        return images.clone()
    return gaussian_blur(images, sigma).clamp(0, 1)


def blur_baseline(
    train_ds: LabeledDataset,
    test_ds: LabeledDataset,
    scorer: FlowScorer,
    sigma: float,
    cfg: BaselineConfig,
) -> TradeoffPoint:
    if sigma < 0:
        raise ConfigurationError("sigma must be nonnegative")
    sub = _train_subset(train_ds, cfg)
    blurred = blur_images(sub.images, sigma)
    acc, curve = retrain_classifier(blurred, sub.labels, test_ds, cfg, train_ds.num_classes)
    return TradeoffPoint(
        method="gaussian_blur", knob=sigma, mean_bpd=mean_bpd_of(scorer, blurred),
        acc_retrain=acc, seed=cfg.seed, retrain_curve=curve,
    )


def jpeg_roundtrip(images: torch.Tensor, quality: int) -> torch.Tensor:
    """8-bit JPEG encode/decode per image, renormalized to [0, 1]."""
    from .viz import to_uint8

    arrs = to_uint8(images)
    out = np.zeros_like(arrs)
    for i, arr in enumerate(arrs):
        buf = io.BytesIO()
        Image.fromarray(arr.squeeze()).save(buf, format="JPEG", quality=quality)
        buf.seek(0)
        back = np.asarray(Image.open(buf))
        if back.ndim == 2:
            back = back[:, :, None]
        out[i] = back
    tensor = torch.from_numpy(out.astype(np.float32) / 255.0).permute(0, 3, 1, 2)
    return tensor


def jpeg_baseline(
    train_ds: LabeledDataset,
    test_ds: LabeledDataset,
    scorer: FlowScorer,
    quality: int,
    cfg: BaselineConfig,
) -> TradeoffPoint:
    if not (1 <= quality <= 100):
        raise ConfigurationError("JPEG quality must lie in [1, 100]")
    sub = _train_subset(train_ds, cfg)
    coded = jpeg_roundtrip(sub.images, quality)
    acc, curve = retrain_classifier(coded, sub.labels, test_ds, cfg, train_ds.num_classes)
    return TradeoffPoint(
        method="jpeg", knob=float(quality), mean_bpd=mean_bpd_of(scorer, coded),
        acc_retrain=acc, seed=cfg.seed, retrain_curve=curve,
    )


def png_size_report(images: torch.Tensor) -> float:
    """Mean PNG byte size of the 8-bit-quantized images (lossless encoding)."""
    from .viz import to_uint8

    sizes = []
    for arr in to_uint8(images):
        buf = io.BytesIO()
        Image.fromarray(arr.squeeze()).save(buf, format="PNG")
        sizes.append(buf.tell())
    return float(np.mean(sizes))


# ---------------------------------------------------------------------------
# Trade-off protocol for joint runs
# ---------------------------------------------------------------------------


def _load_joint_artifacts(run_dir: Path):
    classifier_path = run_dir / "classifier.pt"
    simplifier_path = run_dir / "simplifier.pt"
    if not classifier_path.exists() or not simplifier_path.exists():
        raise ValidationError(f"missing joint-run artifacts under {run_dir}")
    return load_model(classifier_path), load_model(simplifier_path)


def evaluate_tradeoff(
    run: JointResult | str | Path,
    train_ds: LabeledDataset,
    test_ds: LabeledDataset,
    scorer: FlowScorer,
    cfg: BaselineConfig,
    knob: float = float("nan"),
) -> TradeoffPoint:
    """Three-way evaluation of one joint run: joint / retrain / finetune.

    * acc_joint: the jointly trained classifier on the original test set;
    * acc_retrain: a fresh classifier trained on the final simplifier's
      regenerated train set, tested on the original test set;
    * acc_finetune: the joint classifier continued on the simplified set.
    """
    if isinstance(run, (str, Path)):
        classifier, simplifier = _load_joint_artifacts(Path(run))
        if math.isnan(knob):
            cfg_file = Path(run) / "config.json"
            if cfg_file.exists():
                knob = json.loads(cfg_file.read_text()).get("lambda_sim", float("nan"))
    else:
        classifier, simplifier = run.classifier, run.simplifier
        if math.isnan(knob):
            knob = run.config.lambda_sim

    sub = _train_subset(train_ds, cfg)
    sim_images = simplify_dataset(simplifier, sub.images)

    acc_joint = evaluate_accuracy(classifier, test_ds.images, test_ds.labels)
    acc_retrain, curve = retrain_classifier(sim_images, sub.labels, test_ds, cfg, train_ds.num_classes)
    finetuned, _ = train_classifier(
        classifier, sim_images, sub.labels, epochs=cfg.finetune_epochs,
        batch_size=cfg.batch_size, lr=cfg.finetune_lr, weight_decay=cfg.weight_decay,
        seed=cfg.seed,
    )
    acc_finetune = evaluate_accuracy(finetuned, test_ds.images, test_ds.labels)
    return TradeoffPoint(
        method="joint", knob=knob, mean_bpd=mean_bpd_of(scorer, sim_images),
        acc_retrain=acc_retrain, acc_joint=acc_joint, acc_finetune=acc_finetune,
        seed=cfg.seed, retrain_curve=curve,
    )


def write_tradeoff_csv(points: list[TradeoffPoint], path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "knob", "mean_bpd", "acc_joint", "acc_retrain",
                         "acc_finetune", "seed", "error"])
        for p in points:
            writer.writerow([p.method, p.knob, p.mean_bpd, p.acc_joint, p.acc_retrain,
                             p.acc_finetune, p.seed, p.error or ""])


def tradeoff_plot(points: list[TradeoffPoint], path):
    """Accuracy-vs-bits scatter, one series per (method, protocol)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4.5))
    series: dict[str, list[tuple[float, float]]] = {}
    for p in points:
        if p.error:
            continue
        series.setdefault(f"{p.method} (retrain)", []).append((p.mean_bpd, p.acc_retrain))
        if not math.isnan(p.acc_joint):
            series.setdefault("joint (joint)", []).append((p.mean_bpd, p.acc_joint))
        if not math.isnan(p.acc_finetune):
            series.setdefault("joint (finetune)", []).append((p.mean_bpd, p.acc_finetune))
    for label, pts in sorted(series.items()):
        pts = sorted(pts)
        ax.plot([a for a, _ in pts], [b for _, b in pts], marker="o", label=label)
    ax.set_xlabel("mean bits per dimension")
    ax.set_ylabel("test accuracy")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
