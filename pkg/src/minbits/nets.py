"""Classifier and simplifier architectures with functional parameter handling.

Every model is represented as a ModelState: an architecture template plus a
dict of named parameter tensors. Forward passes go through
``torch.func.functional_call``, so a parameter dict can be a node in an
autograd graph. That is what makes one-step-unrolled training
(``train_step`` with a graph-connected loss) and differentiable global
parameter scaling possible.

The classifier is a normalizer-free Wide ResNet (depth 16, widen factor 2):
weight-standardized convolutions, gain-scaled ELU nonlinearities, and
residual branches downscaled by 0.2 in place of any normalization layer.
The simplifier is a residual UNet whose output perturbs the input in
inverse-sigmoid space, guaranteeing outputs in (0, 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from .errors import ConfigurationError, NumericError, ShapeError, TrainingError

# Variance-preserving gain for ELU under a unit Gaussian input, the standard
# constant used by normalizer-free networks.
ELU_GAIN = 1.2716004848480225

RESIDUAL_SCALE = 0.2
WS_EPS = 1e-5
LOGIT_CLIP = 1e-4


def scaled_weight_standardize(weight: torch.Tensor, eps: float = WS_EPS) -> torch.Tensor:
    """Row-standardize a weight tensor and rescale by 1/sqrt(fan-in).

    Rows are output units; fan-in is everything else. With eps=0 a constant
    row is a hard error rather than silently producing infinities.
    """
    flat = weight.flatten(1)
    n = flat.shape[1]
    if n < 2 and eps <= 0:
        raise ConfigurationError("fan-in must be >= 2 unless the eps guard is enabled")
    mu = flat.mean(dim=1, keepdim=True)
    var = ((flat - mu) ** 2).mean(dim=1, keepdim=True)
    if eps <= 0 and (var == 0).any():
        raise NumericError("constant weight row with eps guard disabled")
    out = (flat - mu) / (math.sqrt(n) * (var.sqrt() + eps))
    return out.view_as(weight)


def gamma_elu(x: torch.Tensor) -> torch.Tensor:
    return ELU_GAIN * F.elu(x)


class WSConv2d(nn.Conv2d):
    """Conv2d whose weight is standardized at forward time (never baked in)."""

    def forward(self, x):
        return self._conv_forward(x, scaled_weight_standardize(self.weight), self.bias)


class _NFBlock(nn.Module):
    """Pre-activation residual block, branch scaled by RESIDUAL_SCALE."""

    def __init__(self, c_in, c_out, stride):
        super().__init__()
        self.conv1 = WSConv2d(c_in, c_out, 3, stride=stride, padding=1)
        self.conv2 = WSConv2d(c_out, c_out, 3, padding=1)
        self.shortcut = (
            None if (c_in == c_out and stride == 1) else WSConv2d(c_in, c_out, 1, stride=stride)
        )

    def forward(self, h):
        a = gamma_elu(h)
        branch = self.conv2(gamma_elu(self.conv1(a)))
        skip = h if self.shortcut is None else self.shortcut(a)
        return skip + RESIDUAL_SCALE * branch


class NormFreeWideResNet(nn.Module):
    def __init__(self, depth=16, widen=2, num_classes=10, in_channels=3):
        super().__init__()
        if (depth - 4) % 6 != 0:
            raise ConfigurationError("depth must be 6n+4")
        n = (depth - 4) // 6
        widths = [16, 16 * widen, 32 * widen, 64 * widen]
        self.stem = WSConv2d(in_channels, widths[0], 3, padding=1)
        blocks = []
        c_in = widths[0]
        for gi, c_out in enumerate(widths[1:]):
            for bi in range(n):
                stride = 2 if (gi > 0 and bi == 0) else 1
                blocks.append(_NFBlock(c_in, c_out, stride))
                c_in = c_out
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Linear(c_in, num_classes, bias=False)

    def forward(self, x):
        h = self.blocks(self.stem(x))
        h = gamma_elu(h).mean(dim=(2, 3))
        return self.head(h)


class _Affine(nn.Module):
    """Learnable per-channel scale and shift; the norm-layer stand-in."""

    def __init__(self, channels):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(1, channels, 1, 1))
        self.bias = nn.Parameter(torch.zeros(1, channels, 1, 1))

    def forward(self, x):
        return x * self.weight + self.bias


class ResidualUNet(nn.Module):
    """Image-to-image network producing a residual in inverse-sigmoid space."""

    def __init__(self, in_channels=3, ngf=64, num_down=5):
        super().__init__()
        chans = [min(ngf * (2**i), ngf * 8) for i in range(num_down)]
        downs, ups = [], []
        c_prev = in_channels
        for c in chans:
            downs.append(
                nn.Sequential(nn.Conv2d(c_prev, c, 4, stride=2, padding=1), _Affine(c), nn.ELU())
            )
            c_prev = c
        for i in reversed(range(num_down)):
            c_out = chans[i - 1] if i > 0 else in_channels
            c_in = chans[i] if i == num_down - 1 else 2 * chans[i]
            if i > 0:
                ups.append(
                    nn.Sequential(
                        nn.ConvTranspose2d(c_in, c_out, 4, stride=2, padding=1),
                        _Affine(c_out),
                        nn.ELU(),
                    )
                )
            else:
                final = nn.ConvTranspose2d(c_in, c_out, 4, stride=2, padding=1)
                nn.init.zeros_(final.weight)
                nn.init.zeros_(final.bias)
                ups.append(final)
        self.downs = nn.ModuleList(downs)
        self.ups = nn.ModuleList(ups)

    def forward(self, x):
        xc = torch.clamp(x, LOGIT_CLIP, 1.0 - LOGIT_CLIP)
        h = xc.log() - (1.0 - xc).log()
        skips = []
        r = xc
        for down in self.downs:
            r = down(r)
            skips.append(r)
        out = skips[-1]
        for i, up in enumerate(self.ups):
            if i > 0:
                out = torch.cat([out, skips[-1 - i]], dim=1)
            out = up(out)
        return torch.sigmoid(h + out)


class CondenseConvNet(nn.Module):
    """Compact conv net used by the condensation routines (norm-free blocks)."""

    def __init__(self, in_channels=3, width=128, num_classes=10, image_size=32):
        super().__init__()
        layers = []
        c_prev = in_channels
        size = image_size
        for _ in range(3):
            layers += [nn.Conv2d(c_prev, width, 3, padding=1), _Affine(width), nn.ELU(), nn.AvgPool2d(2)]
            c_prev = width
            size //= 2
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(width * size * size, num_classes)

    def forward(self, x):
        return self.head(self.features(x).flatten(1))


# ---------------------------------------------------------------------------
# Functional states
# ---------------------------------------------------------------------------


@dataclass
class ModelState:
    """Named parameters bound to an architecture template.

    The template's own parameters are never used; forward passes substitute
    ``params`` via functional_call. States are treated as immutable values:
    the update operations below always return a new ModelState.
    """

    template: nn.Module
    params: dict[str, torch.Tensor]
    arch: dict

    def detached(self, requires_grad: bool = True) -> "ModelState":
        return ModelState(
            self.template,
            {k: p.detach().clone().requires_grad_(requires_grad) for k, p in self.params.items()},
            dict(self.arch),
        )

    def param_vector_names(self) -> list[str]:
        return list(self.params.keys())


# Aliases documenting intent at call sites.
ClassifierState = ModelState
SimplifierState = ModelState


def _make_template(arch: dict) -> nn.Module:
    kind = arch["kind"]
    if kind == "nf_wrn":
        return NormFreeWideResNet(
            depth=arch.get("depth", 16),
            widen=arch.get("widen", 2),
            num_classes=arch.get("num_classes", 10),
            in_channels=arch.get("in_channels", 3),
        )
    if kind == "res_unet":
        return ResidualUNet(
            in_channels=arch.get("in_channels", 3),
            ngf=arch.get("ngf", 64),
            num_down=arch.get("num_down", 5),
        )
    if kind == "convnet":
        return CondenseConvNet(
            in_channels=arch.get("in_channels", 3),
            width=arch.get("width", 128),
            num_classes=arch.get("num_classes", 10),
        )
    raise ConfigurationError(f"unknown architecture kind {kind!r}")


def _state_from_arch(arch: dict, seed: int) -> ModelState:
    torch.manual_seed(seed)
    template = _make_template(arch)
    params = {k: v.detach().clone().requires_grad_(True) for k, v in template.named_parameters()}
    return ModelState(template=template, params=params, arch=arch)


def init_classifier(num_classes=10, in_channels=3, depth=16, widen=2, seed=0) -> ClassifierState:
    return _state_from_arch(
        {"kind": "nf_wrn", "depth": depth, "widen": widen, "num_classes": num_classes,
         "in_channels": in_channels},
        seed,
    )


def init_simplifier(in_channels=3, ngf=64, num_down=5, seed=0) -> SimplifierState:
    return _state_from_arch(
        {"kind": "res_unet", "in_channels": in_channels, "ngf": ngf, "num_down": num_down}, seed
    )


def init_convnet(num_classes=10, in_channels=3, width=128, seed=0) -> ClassifierState:
    return _state_from_arch(
        {"kind": "convnet", "width": width, "num_classes": num_classes, "in_channels": in_channels},
        seed,
    )


def state_from_module(module: nn.Module, arch: dict | None = None) -> ModelState:
    """Wrap an ad-hoc module (e.g. a test toy) as a functional state."""
    params = {k: v.detach().clone().requires_grad_(True) for k, v in module.named_parameters()}
    return ModelState(template=module, params=params, arch=arch or {"kind": "custom"})


def forward(state: ModelState, x: torch.Tensor) -> torch.Tensor:
    return functional_call(state.template, state.params, x)


def classifier_forward(state: ClassifierState, x: torch.Tensor) -> torch.Tensor:
    if x.dim() != 4:
        raise ShapeError(f"expected (N, C, H, W) input, got {tuple(x.shape)}")
    return forward(state, x)


def simplifier_forward(state: SimplifierState, x: torch.Tensor) -> torch.Tensor:
    if x.dim() != 4:
        raise ShapeError(f"expected (N, C, H, W) input, got {tuple(x.shape)}")
    out = forward(state, x)
    if not torch.isfinite(out).all():
        raise NumericError("simplifier produced non-finite values")
    return out


# ---------------------------------------------------------------------------
# Functional optimizers
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """Single-step functional optimizer.

    SGD steps stay differentiable end-to-end (the unrolled-training path).
    Adam and AdamW treat their moment statistics as constants, so only the
    direct dependence on the parameters remains in the graph; moment buffers
    are updated in place.
    """

    algorithm: str = "sgd"
    lr: float = 5e-4
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    moments: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.algorithm not in ("sgd", "adam", "adamw"):
            raise ConfigurationError(f"unknown optimizer {self.algorithm!r}")


def apply_update(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor],
                 opt: OptimizerState) -> dict[str, torch.Tensor]:
    """One optimizer step over a parameter dict, returning new tensors."""
    new = {}
    b1, b2 = opt.betas
    for k, p in params.items():
        g = grads[k]
        if opt.algorithm == "sgd":
            if opt.weight_decay:
                g = g + opt.weight_decay * p
            new[k] = p - opt.lr * g
            continue
        buf = opt.moments.get(k)
        if buf is None:
            buf = {"m": torch.zeros_like(p, requires_grad=False),
                   "v": torch.zeros_like(p, requires_grad=False), "t": 0}
            opt.moments[k] = buf
        with torch.no_grad():
            gd = g.detach()
            if opt.algorithm == "adam" and opt.weight_decay:
                gd = gd + opt.weight_decay * p.detach()
            buf["t"] += 1
            buf["m"].mul_(b1).add_(gd, alpha=1 - b1)
            buf["v"].mul_(b2).addcmul_(gd, gd, value=1 - b2)
            m_hat = buf["m"] / (1 - b1 ** buf["t"])
            v_hat = buf["v"] / (1 - b2 ** buf["t"])
            update = m_hat / (v_hat.sqrt() + opt.eps)
        if opt.algorithm == "adamw" and opt.weight_decay:
            new[k] = p - opt.lr * update - opt.lr * opt.weight_decay * p
        else:
            new[k] = p - opt.lr * update
    return new


def train_step(f: ModelState, loss: torch.Tensor, opt: OptimizerState,
               create_graph: bool = True) -> ModelState:
    """Advance one optimizer step on a loss computed from f's parameters.

    Returns a new state; f is untouched. With create_graph (and an SGD
    optimizer) the returned parameters remain differentiable w.r.t. anything
    upstream of the loss, which is the unrolled-training requirement.
    """
    names = list(f.params.keys())
    grads = torch.autograd.grad(loss, [f.params[k] for k in names], create_graph=create_graph,
                                allow_unused=True)
    grad_map = {}
    for k, g in zip(names, grads):
        if g is None:
            g = torch.zeros_like(f.params[k])
        if not torch.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {k}")
        grad_map[k] = g
    return ModelState(f.template, apply_update(f.params, grad_map, opt), dict(f.arch))


def scale_parameters(f: ModelState, s) -> ModelState:
    """Multiply every parameter tensor by its own scalar factor.

    ``s`` may be a float (broadcast) or a 1-D tensor/sequence with exactly one
    entry per parameter tensor, ordered like ``f.params``. Differentiable in s.
    """
    names = list(f.params.keys())
    if isinstance(s, (int, float)):
        factors = [torch.as_tensor(float(s))] * len(names)
    else:
        s = torch.as_tensor(s) if not torch.is_tensor(s) else s
        if s.dim() != 1 or s.shape[0] != len(names):
            raise ShapeError(f"need {len(names)} scale factors, got {tuple(s.shape)}")
        factors = list(s)
    new_params = {k: f.params[k] * factors[i] for i, k in enumerate(names)}
    return ModelState(f.template, new_params, dict(f.arch))


# ---------------------------------------------------------------------------
# Plain training / evaluation loops
# ---------------------------------------------------------------------------


def batches(n: int, batch_size: int, rng) -> list[torch.Tensor]:
    order = rng.permutation(n)
    return [torch.from_numpy(order[i : i + batch_size].copy()) for i in range(0, n, batch_size)]


def evaluate_accuracy(state: ModelState, images: torch.Tensor, labels: torch.Tensor,
                      batch_size: int = 512) -> float:
    correct = 0
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            logits = forward(state, images[start : start + batch_size])
            correct += (logits.argmax(dim=1) == labels[start : start + batch_size]).sum().item()
    return correct / images.shape[0]


def train_classifier(
    state: ModelState,
    images: torch.Tensor,
    labels: torch.Tensor,
    epochs: int,
    batch_size: int = 32,
    lr: float = 5e-4,
    weight_decay: float = 1e-5,
    seed: int = 0,
    eval_images: torch.Tensor | None = None,
    eval_labels: torch.Tensor | None = None,
    loss_fn: Callable = F.cross_entropy,
) -> tuple[ModelState, list[float]]:
    """Conventional supervised training with AdamW; returns per-epoch accuracy
    on the eval split (or train loss when no eval split is given)."""
    import numpy as np

    rng = np.random.default_rng(seed)
    opt = OptimizerState(algorithm="adamw", lr=lr, weight_decay=weight_decay)
    cur = state.detached()
    history = []
    for _ in range(epochs):
        epoch_loss, seen = 0.0, 0
        for idx in batches(images.shape[0], batch_size, rng):
            loss = loss_fn(forward(cur, images[idx]), labels[idx])
            if not torch.isfinite(loss):
                raise TrainingError("classification loss diverged")
            grads = torch.autograd.grad(loss, list(cur.params.values()))
            grad_map = dict(zip(cur.params.keys(), grads))
            new_params = apply_update(cur.params, grad_map, opt)
            cur = ModelState(
                cur.template,
                {k: p.detach().requires_grad_(True) for k, p in new_params.items()},
                dict(cur.arch),
            )
            epoch_loss += loss.item() * idx.shape[0]
            seen += idx.shape[0]
        if eval_images is not None:
            history.append(evaluate_accuracy(cur, eval_images, eval_labels))
        else:
            history.append(epoch_loss / seen)
    return cur, history


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_model(state: ModelState, path):
    torch.save(
        {"kind": "model_state", "arch": state.arch,
         "params": {k: v.detach() for k, v in state.params.items()}},
        path,
    )


def load_model(path) -> ModelState:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("kind") != "model_state":
        raise TrainingError(f"{path} is not a model checkpoint")
    template = _make_template(payload["arch"])
    params = {k: v.clone().requires_grad_(True) for k, v in payload["params"].items()}
    return ModelState(template=template, params=params, arch=payload["arch"])
