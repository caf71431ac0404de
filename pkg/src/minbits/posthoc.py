"""Post-training audit: synthesize a simplified input whose effect on a
down-scaled ("partially forgotten") classifier matches the original's.

The simplified image lives in the scorer's latent space. Each optimization
step samples a scaling factor per parameter tensor and an interpolation
point between the original's latent code and the current simplified code,
then descends three terms:

* a cosine distance between the scaling-factor gradients of the prediction
  divergence, computed for the original vs the interpolated input (optionally
  restricted to coordinates where the original's gradient is negative, i.e.
  directions that would restore the original network);
* prediction-matching KL terms for the scaled and unscaled classifier;
* the encoding cost of the simplified image.

Region edits (erase / desaturate / blur) and re-prediction support the
hypothesis-testing loop around these simplifications.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, NumericError, ShapeError, ValidationError
from .flow import FlowScorer, bpd
from .joint import _score_ready, batch_bpd
from .nets import ModelState, classifier_forward, scale_parameters


@dataclass
class PosthocConfig:
    lambda_sim: float = 0.0
    steps: int = 500
    latent_lr: float = 5e-2
    s_low: float = 0.8
    s_high: float = 0.95
    mask_negative: bool = True
    interpolate_path: bool = True  # False applies the losses at the simplified point only
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.s_low < self.s_high < 1.0):
            raise ConfigurationError("scaling range must satisfy 0 < low < high < 1")
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")


@dataclass
class PosthocStep:
    step: int
    loss_grad: float
    loss_pred: float
    loss_sim: float
    total: float


@dataclass
class PosthocResult:
    x_sim: torch.Tensor
    trace: list[PosthocStep]
    h_orig: torch.Tensor
    h_sim: torch.Tensor
    h_orig_scd: torch.Tensor
    h_sim_scd: torch.Tensor
    bpd_orig: float
    bpd_sim: float


def kl_divergence(logits_p: torch.Tensor, logits_q: torch.Tensor) -> torch.Tensor:
    """KL(softmax(p) || softmax(q)), mean over the batch.

    Accumulated in float64 so the -1e-9 nonnegativity floor genuinely flags
    computation bugs rather than float32 rounding of near-identical inputs.
    """
    logp = F.log_softmax(logits_p.double(), dim=1)
    logq = F.log_softmax(logits_q.double(), dim=1)
    kl = (logp.exp() * (logp - logq)).sum(dim=1).mean()
    if kl.item() < -1e-9:
        raise NumericError(f"KL fell below the numeric floor: {kl.item()}")
    return kl


def masked_cosine_distance(a: torch.Tensor, b: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """1 - cos over the masked coordinates; hard zero when nothing survives.

    Masked-out coordinates are index-dropped, so they contribute nothing to
    the value or to gradients of either vector.
    """
    am, bm = a[mask], b[mask]
    if am.numel() == 0:
        return torch.zeros((), dtype=a.dtype)
    na, nb = am.norm(), bm.norm()
    if na.item() == 0.0 or nb.item() == 0.0:
        return torch.zeros((), dtype=a.dtype)
    return 1.0 - torch.dot(am, bm) / (na * nb)


def _to_classifier_channels(x: torch.Tensor, channels: int) -> torch.Tensor:
    if x.shape[1] == channels:
        return x
    if channels == 1:
        return x.mean(dim=1, keepdim=True)
    if x.shape[1] == 1 and channels == 3:
        return x.repeat(1, 3, 1, 1)
    raise ShapeError(f"cannot adapt {x.shape[1]} channels to classifier's {channels}")


def grad_kl_wrt_scale(f: ModelState, x: torch.Tensor, s: torch.Tensor,
                      h_ref_logits: torch.Tensor, create_graph: bool = False) -> torch.Tensor:
    """Gradient w.r.t. the per-tensor scaling factors of KL(ref || f_scaled(x))."""
    f_scd = scale_parameters(f, s)
    kl = kl_divergence(h_ref_logits, classifier_forward(f_scd, x))
    (grad,) = torch.autograd.grad(kl, s, create_graph=create_graph)
    return grad


def posthoc_loss(
    f: ModelState,
    scorer: FlowScorer,
    x_orig: torch.Tensor,
    z_sim: torch.Tensor,
    s: torch.Tensor,
    alpha: float,
    config: PosthocConfig,
    z_orig: torch.Tensor | None = None,
):
    """Total audit loss and its parts for one sampled (s, alpha)."""
    if not bool(((s > 0) & (s < 1)).all()):
        raise ConfigurationError("all scaling factors must lie strictly inside (0, 1)")
    channels = x_orig.shape[1]
    x_scored = _score_ready(x_orig)
    if z_orig is None:
        with torch.no_grad():
            z_orig = scorer.encode(x_scored)

    x_simple = scorer.decode(z_sim)
    if config.interpolate_path:
        z_mix = alpha * z_sim + (1.0 - alpha) * z_orig
        x_mix = scorer.decode(z_mix)
    else:
        x_mix = x_simple
    x_mix_cls = _to_classifier_channels(x_mix, channels)

    logits_orig = classifier_forward(f, x_orig)
    logits_mix = classifier_forward(f, x_mix_cls)
    f_scd = scale_parameters(f, s)
    logits_orig_scd = classifier_forward(f_scd, x_orig)
    logits_mix_scd = classifier_forward(f_scd, x_mix_cls)

    grad_orig = grad_kl_wrt_scale(f, x_orig, s, logits_orig, create_graph=False).detach()
    kl_mix_scd = kl_divergence(logits_orig, logits_mix_scd)
    (grad_mix,) = torch.autograd.grad(kl_mix_scd, s, create_graph=True)

    mask = grad_orig < 0 if config.mask_negative else torch.ones_like(grad_orig, dtype=torch.bool)
    loss_grad = masked_cosine_distance(grad_orig, grad_mix, mask)

    loss_pred = kl_divergence(logits_orig, logits_mix) + kl_divergence(logits_orig_scd, logits_mix_scd)
    loss_sim = batch_bpd(scorer, x_simple).sum()
    total = loss_grad + loss_pred + config.lambda_sim * loss_sim
    parts = {
        "loss_grad": loss_grad,
        "loss_pred": loss_pred,
        "loss_sim": loss_sim,
        "grad_orig": grad_orig,
        "grad_mix": grad_mix,
        "mask": mask,
        "x_mix": x_mix,
        "x_simple": x_simple,
    }
    return total, parts


def posthoc_simplify(
    f: ModelState,
    scorer: FlowScorer,
    x_orig: torch.Tensor,
    config: PosthocConfig,
    progress=None,
) -> PosthocResult:
    """Optimize the simplified image's latent code with Adam.

    Tracks the best-so-far total loss; the returned image decodes the best
    latent seen, clamped into [0, 1].
    """
    if x_orig.dim() != 4 or x_orig.shape[0] != 1:
        raise ShapeError("posthoc audits operate on a single image batch (1, C, H, W)")
    torch.manual_seed(config.seed)
    channels = x_orig.shape[1]
    with torch.no_grad():
        z_orig = scorer.encode(_score_ready(x_orig))
    z_sim = z_orig.clone().requires_grad_(True)
    opt = torch.optim.Adam([z_sim], lr=config.latent_lr)
    num_tensors = len(f.params)

    trace: list[PosthocStep] = []
    best_loss, best_z = math.inf, z_orig.clone()
    for step in range(config.steps):
        alpha = torch.rand(()).item()
        s = (config.s_low + (config.s_high - config.s_low) * torch.rand(num_tensors)).requires_grad_(True)
        total, parts = posthoc_loss(f, scorer, x_orig, z_sim, s, alpha, config, z_orig=z_orig)
        if not torch.isfinite(total):
            raise NumericError(f"audit loss diverged at step {step}")
        opt.zero_grad()
        total.backward()
        opt.step()
        rec = PosthocStep(step, parts["loss_grad"].item(), parts["loss_pred"].item(),
                          parts["loss_sim"].item(), total.item())
        trace.append(rec)
        if rec.total < best_loss:
            best_loss, best_z = rec.total, z_sim.detach().clone()
        if progress is not None:
            progress(step + 1)

    with torch.no_grad():
        x_sim = scorer.decode(best_z).clamp(0.0, 1.0)
        x_sim_cls = _to_classifier_channels(x_sim, channels)
        s_mid = torch.full((num_tensors,), (config.s_low + config.s_high) / 2.0)
        f_scd = scale_parameters(f, s_mid)
        result = PosthocResult(
            x_sim=x_sim_cls,
            trace=trace,
            h_orig=F.softmax(classifier_forward(f, x_orig), dim=1)[0],
            h_sim=F.softmax(classifier_forward(f, x_sim_cls), dim=1)[0],
            h_orig_scd=F.softmax(classifier_forward(f_scd, x_orig), dim=1)[0],
            h_sim_scd=F.softmax(classifier_forward(f_scd, x_sim_cls), dim=1)[0],
            bpd_orig=bpd(scorer, _score_ready(x_orig), dequantize=True, seed=0).mean_bpd,
            bpd_sim=bpd(scorer, _score_ready(x_sim_cls), dequantize=True, seed=0).mean_bpd,
        )
    return result


# ---------------------------------------------------------------------------
# Region edits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Rect:
    y0: int
    x0: int
    height: int
    width: int

    def validate(self, image_h: int, image_w: int):
        if self.height < 1 or self.width < 1:
            raise ValidationError("rect must have positive size")
        if self.y0 < 0 or self.x0 < 0 or self.y0 + self.height > image_h or self.x0 + self.width > image_w:
            raise ValidationError(
                f"rect {self} out of bounds for {image_h}x{image_w} image"
            )

    def slices(self):
        return slice(self.y0, self.y0 + self.height), slice(self.x0, self.x0 + self.width)


@dataclass(frozen=True)
class EditOp:
    """One region edit: kind in {erase, desaturate, blur}."""

    kind: str
    rect: Rect
    fill: float = 0.5  # erase only
    sigma: float = 1.0  # blur only

    def __post_init__(self):
        if self.kind not in ("erase", "desaturate", "blur"):
            raise ValidationError(f"unknown edit kind {self.kind!r}")
        if self.kind == "blur" and self.sigma <= 0:
            raise ValidationError("blur sigma must be positive")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "rect": [self.rect.y0, self.rect.x0, self.rect.height, self.rect.width],
                "fill": self.fill, "sigma": self.sigma}

    @staticmethod
    def from_dict(d: dict) -> "EditOp":
        rect = Rect(*[int(v) for v in d["rect"]])
        return EditOp(kind=d["kind"], rect=rect, fill=float(d.get("fill", 0.5)),
                      sigma=float(d.get("sigma", 1.0)))


def gaussian_blur(x: torch.Tensor, sigma: float) -> torch.Tensor:
    radius = max(1, int(math.ceil(3.0 * sigma)))
    coords = torch.arange(-radius, radius + 1, dtype=x.dtype)
    kernel = torch.exp(-(coords**2) / (2.0 * sigma * sigma))
    kernel = kernel / kernel.sum()
    c = x.shape[1]
    kh = kernel.view(1, 1, -1, 1).expand(c, 1, -1, 1)
    kw = kernel.view(1, 1, 1, -1).expand(c, 1, 1, -1)
    out = F.conv2d(F.pad(x, (0, 0, radius, radius), mode="reflect"), kh, groups=c)
    return F.conv2d(F.pad(out, (radius, radius, 0, 0), mode="reflect"), kw, groups=c)


def apply_edits(x: torch.Tensor, edits: list[EditOp]) -> torch.Tensor:
    """Apply region edits in order; pure function of (x, edits)."""
    out = x.clone()
    h, w = x.shape[2], x.shape[3]
    for op in edits:
        op.rect.validate(h, w)
        ys, xs = op.rect.slices()
        if op.kind == "erase":
            out[:, :, ys, xs] = op.fill
        elif op.kind == "desaturate":
            region = out[:, :, ys, xs]
            out[:, :, ys, xs] = region.mean(dim=1, keepdim=True)
        else:
            blurred = gaussian_blur(out, op.sigma)
            out[:, :, ys, xs] = blurred[:, :, ys, xs]
    return out


def edit_and_predict(f: ModelState, x: torch.Tensor, edits: list[EditOp]):
    """Apply edits, re-predict, and return (edited image, class probabilities)."""
    if x.dim() != 4 or x.shape[0] != 1:
        raise ShapeError("edit_and_predict operates on a single image batch")
    edited = apply_edits(x, edits)
    with torch.no_grad():
        probs = F.softmax(classifier_forward(f, edited), dim=1)[0]
    return edited, probs
