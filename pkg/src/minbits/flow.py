"""Invertible density scorer: exact log-likelihood, bits/dimension, latent codes.

A multiscale affine-coupling flow (activation normalization, invertible 1x1
channel mixing, channel-split couplings) with a logit pre-transform mapping
pixel space [0, 1] into an unconstrained domain. Encoding is exact and
differentiable in both directions, so the same model serves three roles:

* complexity measurement (bits per dimension of an image),
* differentiable simplification loss (negative log-density),
* latent-space editing (encode / interpolate / decode).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericError, ShapeError, TrainingError

LOG_256 = math.log(256.0)


@dataclass(frozen=True)
class FlowConfig:
    input_shape: tuple[int, int, int] = (3, 32, 32)
    num_levels: int = 2
    blocks_per_level: int | tuple[int, ...] = 8
    width: int = 128
    # The logit pre-transform's boundary slope acts as a fixed per-pixel
    # discount for values near 0/1; 0.2 keeps that geometric bonus small so
    # the learned density, not the preprocessing, decides what is simple.
    logit_alpha: float = 0.2
    scale_eps: float = 1e-6
    # Couplings rescale by exp(b * tanh(raw / b)): smooth, exactly 1 at the
    # zero-initialized start, and able to expand as well as contract, which is
    # what lets the density concentrate on predictable (simple) content.
    scale_log_bound: float = 2.0

    def __post_init__(self):
        c, h, w = self.input_shape
        if h % (2**self.num_levels) or w % (2**self.num_levels):
            raise ShapeError(
                f"spatial size {h}x{w} not divisible by 2^{self.num_levels}"
            )
        if isinstance(self.blocks_per_level, tuple) and len(self.blocks_per_level) != self.num_levels:
            raise ShapeError("blocks_per_level tuple must have one entry per level")

    def blocks_at(self, level: int) -> int:
        if isinstance(self.blocks_per_level, tuple):
            return self.blocks_per_level[level]
        return self.blocks_per_level


class _ActNorm(nn.Module):
    """Per-channel affine with data-dependent initialization on the first batch."""

    def __init__(self, channels: int):
        super().__init__()
        self.log_scale = nn.Parameter(torch.zeros(1, channels, 1, 1))
        self.bias = nn.Parameter(torch.zeros(1, channels, 1, 1))
        self.register_buffer("initialized", torch.tensor(False))

    def _maybe_init(self, x):
        if self.training and not bool(self.initialized):
            with torch.no_grad():
                mean = x.mean(dim=(0, 2, 3), keepdim=True)
                std = x.std(dim=(0, 2, 3), keepdim=True).clamp_min(1e-6)
                self.bias.copy_(-mean / std)
                self.log_scale.copy_(-std.log())
                self.initialized.fill_(True)

    def forward(self, x):
        self._maybe_init(x)
        y = x * self.log_scale.exp() + self.bias
        logdet = self.log_scale.sum() * x.shape[2] * x.shape[3]
        return y, logdet.expand(x.shape[0])

    def inverse(self, y):
        return (y - self.bias) * (-self.log_scale).exp()


class _Invertible1x1(nn.Module):
    """1x1 channel mixing parameterized by a PLU decomposition."""

    def __init__(self, channels: int):
        super().__init__()
        q, _ = torch.linalg.qr(torch.randn(channels, channels))
        p, l, u = torch.linalg.lu(q)
        s = torch.diagonal(u)
        self.register_buffer("perm", p)
        self.register_buffer("sign_s", torch.sign(s))
        self.lower = nn.Parameter(torch.tril(l, diagonal=-1))
        self.upper = nn.Parameter(torch.triu(u, diagonal=1))
        self.log_s = nn.Parameter(s.abs().log())
        eye = torch.eye(channels)
        self.register_buffer("eye", eye)
        self.register_buffer("lower_mask", torch.tril(torch.ones(channels, channels), -1))

    def _weight(self):
        l = self.lower * self.lower_mask + self.eye
        u = self.upper * self.lower_mask.T + torch.diag(self.sign_s * self.log_s.exp())
        return self.perm @ l @ u

    def forward(self, x):
        w = self._weight()
        y = torch.einsum("oc,nchw->nohw", w, x)
        logdet = self.log_s.sum() * x.shape[2] * x.shape[3]
        return y, logdet.expand(x.shape[0])

    def inverse(self, y):
        l = self.lower * self.lower_mask + self.eye
        u = self.upper * self.lower_mask.T + torch.diag(self.sign_s * self.log_s.exp())
        n, c, h, w = y.shape
        flat = self.perm.T @ y.permute(1, 0, 2, 3).reshape(c, -1)
        flat = torch.linalg.solve_triangular(l, flat, upper=False, unitriangular=True)
        flat = torch.linalg.solve_triangular(u, flat, upper=True)
        return flat.reshape(c, n, h, w).permute(1, 0, 2, 3)


class _CouplingNet(nn.Module):
    def __init__(self, c_in: int, c_out: int, width: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 1)
        self.conv3 = nn.Conv2d(width, 2 * c_out, 3, padding=1)
        nn.init.zeros_(self.conv3.weight)
        nn.init.zeros_(self.conv3.bias)

    def forward(self, x):
        h = F.elu(self.conv1(x))
        h = F.elu(self.conv2(h))
        return self.conv3(h)


class _AffineCoupling(nn.Module):
    """Transforms the second half of the channels conditioned on the first."""

    def __init__(self, channels: int, width: int, scale_eps: float, scale_log_bound: float = 2.0):
        super().__init__()
        self.c1 = (channels + 1) // 2
        self.c2 = channels - self.c1
        self.net = _CouplingNet(self.c1, self.c2, width)
        self.scale_eps = scale_eps
        self.scale_log_bound = scale_log_bound

    def _shift_scale(self, x1):
        shift, raw = self.net(x1).chunk(2, dim=1)
        b = self.scale_log_bound
        scale = torch.exp(b * torch.tanh(raw / b)) + self.scale_eps
        return shift, scale

    def forward(self, x):
        x1, x2 = x[:, : self.c1], x[:, self.c1 :]
        shift, scale = self._shift_scale(x1)
        y2 = (x2 + shift) * scale
        logdet = scale.log().flatten(1).sum(dim=1)
        return torch.cat([x1, y2], dim=1), logdet

    def inverse(self, y):
        y1, y2 = y[:, : self.c1], y[:, self.c1 :]
        shift, scale = self._shift_scale(y1)
        x2 = y2 / scale - shift
        return torch.cat([y1, x2], dim=1)


def _squeeze(x):
    n, c, h, w = x.shape
    x = x.view(n, c, h // 2, 2, w // 2, 2)
    return x.permute(0, 1, 3, 5, 2, 4).reshape(n, 4 * c, h // 2, w // 2)


def _unsqueeze(x):
    n, c, h, w = x.shape
    x = x.view(n, c // 4, 2, 2, h, w)
    return x.permute(0, 1, 4, 2, 5, 3).reshape(n, c // 4, 2 * h, 2 * w)


class FlowScorer(nn.Module):
    """Invertible generative model with exact log-density over 32x32-style images."""

    def __init__(self, config: FlowConfig):
        super().__init__()
        self.config = config
        c, h, w = config.input_shape
        self.levels = nn.ModuleList()
        self.latent_shapes: list[tuple[int, int, int]] = []
        for level in range(config.num_levels):
            c, h, w = 4 * c, h // 2, w // 2
            blocks = nn.ModuleList()
            for _ in range(config.blocks_at(level)):
                blocks.append(
                    nn.ModuleDict(
                        {
                            "actnorm": _ActNorm(c),
                            "mix": _Invertible1x1(c),
                            "coupling": _AffineCoupling(c, config.width, config.scale_eps,
                                                        config.scale_log_bound),
                        }
                    )
                )
            self.levels.append(blocks)
            if level < config.num_levels - 1:
                split = c // 2
                self.latent_shapes.append((split, h, w))
                c = c - split
            else:
                self.latent_shapes.append((c, h, w))

    @property
    def d(self) -> int:
        c, h, w = self.config.input_shape
        return c * h * w

    def _check_finite(self, h, name):
        if not torch.isfinite(h).all():
            raise NumericError(f"non-finite values after layer {name}")

    def _preprocess(self, x):
        a = self.config.logit_alpha
        u = a + (1.0 - 2.0 * a) * x
        y = u.log() - (1.0 - u).log()
        logdet = (math.log(1.0 - 2.0 * a) - u.log() - (1.0 - u).log()).flatten(1).sum(dim=1)
        return y, logdet

    def _postprocess(self, y):
        a = self.config.logit_alpha
        u = torch.sigmoid(y)
        return (u - a) / (1.0 - 2.0 * a)

    def _forward_flow(self, x):
        if tuple(x.shape[1:]) != self.config.input_shape:
            raise ShapeError(
                f"expected {self.config.input_shape}, got {tuple(x.shape[1:])}"
            )
        h, logdet = self._preprocess(x)
        self._check_finite(h, "preprocess")
        latents = []
        for li, blocks in enumerate(self.levels):
            h = _squeeze(h)
            for bi, block in enumerate(blocks):
                h, ld = block["actnorm"](h)
                self._check_finite(h, f"level{li}.block{bi}.actnorm")
                logdet = logdet + ld
                h, ld = block["mix"](h)
                self._check_finite(h, f"level{li}.block{bi}.mix")
                logdet = logdet + ld
                h, ld = block["coupling"](h)
                self._check_finite(h, f"level{li}.block{bi}.coupling")
                logdet = logdet + ld
            if li < len(self.levels) - 1:
                split = self.latent_shapes[li][0]
                latents.append(h[:, :split])
                h = h[:, split:]
            else:
                latents.append(h)
        return latents, logdet

    def _inverse_flow(self, latents):
        h = None
        for li in reversed(range(len(self.levels))):
            z = latents[li]
            h = z if h is None else torch.cat([z, h], dim=1)
            for block in reversed(self.levels[li]):
                h = block["coupling"].inverse(h)
                h = block["mix"].inverse(h)
                h = block["actnorm"].inverse(h)
            h = _unsqueeze(h)
        return self._postprocess(h)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Map images to flat latent vectors of dimension ``d``."""
        latents, _ = self._forward_flow(x)
        return torch.cat([z.flatten(1) for z in latents], dim=1)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """Invert :meth:`encode`. Accepts any (N, d) latent batch."""
        if z.dim() != 2 or z.shape[1] != self.d:
            raise ShapeError(f"latent must be (N, {self.d}), got {tuple(z.shape)}")
        latents, start = [], 0
        for c, h, w in self.latent_shapes:
            size = c * h * w
            latents.append(z[:, start : start + size].view(-1, c, h, w))
            start += size
        return self._inverse_flow(latents)

    def continuous_log_prob(self, x: torch.Tensor) -> torch.Tensor:
        """Log-density (nats) of the continuous model at x, per image."""
        latents, logdet = self._forward_flow(x)
        base = sum(
            (-0.5 * (z**2 + math.log(2 * math.pi))).flatten(1).sum(dim=1) for z in latents
        )
        return base + logdet


@dataclass
class BpdReport:
    per_image_bpd: np.ndarray
    mean_bpd: float


def dequantized_log_prob(density_fn, x: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    """Discrete-model log-probability (nats) under uniform dequantization.

    Treats x as 8-bit data scaled to [0, 1], jitters each value inside its
    quantization cell, evaluates the continuous density there, and applies
    the -d*log(256) cell-volume correction.
    """
    u = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device)
    y = (x * 255.0 + u) / 256.0
    d = x[0].numel()
    return density_fn(y) - d * LOG_256


def log_prob(scorer: FlowScorer, x: torch.Tensor, dequantize: bool = False,
             generator: torch.Generator | None = None) -> torch.Tensor:
    """Per-image log-probability in nats.

    With ``dequantize`` the result is the discrete 8-bit code length (used for
    reporting); without it the continuous density is returned unchanged, which
    is deterministic and suitable for optimization.
    """
    if dequantize:
        return dequantized_log_prob(scorer.continuous_log_prob, x, generator)
    return scorer.continuous_log_prob(x)


def bpd(scorer: FlowScorer, x: torch.Tensor, dequantize: bool = True, seed: int = 0) -> BpdReport:
    """Bits per dimension: -log2 p(x) / d."""
    generator = torch.Generator(device=x.device).manual_seed(seed) if dequantize else None
    with torch.no_grad():
        lp = log_prob(scorer, x, dequantize=dequantize, generator=generator)
    per_image = (-lp / (scorer.d * math.log(2.0))).cpu().numpy()
    return BpdReport(per_image_bpd=per_image, mean_bpd=float(per_image.mean()))


def simplification_loss(scorer: FlowScorer, x: torch.Tensor, reduce: str = "sum") -> torch.Tensor:
    """Negative log-density of a batch, without dequantization noise.

    Deterministic and differentiable w.r.t. ``x``; the workhorse objective for
    every simplification optimizer in the package.
    """
    nll = -log_prob(scorer, x, dequantize=False)
    if reduce == "sum":
        return nll.sum()
    if reduce == "mean":
        return nll.mean()
    if reduce == "none":
        return nll
    raise ValueError(f"unknown reduce {reduce!r}")


def freeze(scorer: FlowScorer) -> FlowScorer:
    scorer.eval()
    for p in scorer.parameters():
        p.requires_grad_(False)
    return scorer


# ---------------------------------------------------------------------------
# Training and checkpointing
# ---------------------------------------------------------------------------


@dataclass
class ScorerTrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    grad_clip: float = 50.0
    seed: int = 0
    max_images: int | None = None
    checkpoint_path: str | None = None


@dataclass
class ScorerTrainReport:
    epoch_nll: list[float] = field(default_factory=list)

    def monotone_within(self, tol: float = 0.05) -> bool:
        """Each epoch's mean NLL stays within tol of the best seen so far."""
        best = math.inf
        for nll in self.epoch_nll:
            if nll > best * (1.0 + tol) + 1e-12:
                return False
            best = min(best, nll)
        return True


def _corpus_checksum(images: torch.Tensor) -> str:
    u8 = (images.numpy() * 255.0).round().astype(np.uint8)
    return hashlib.sha256(u8.tobytes()).hexdigest()


def train_scorer(
    corpus: torch.Tensor,
    flow_config: FlowConfig | None = None,
    train_config: ScorerTrainConfig | None = None,
) -> tuple[FlowScorer, ScorerTrainReport]:
    """Fit the density model on a pixel corpus by maximum likelihood.

    Training batches are dequantized (noise inside each 8-bit cell) so the
    model learns a proper discrete code; evaluation-time losses stay noiseless.
    Divergence raises TrainingError; the last finished epoch's checkpoint is
    kept if a checkpoint path was configured.
    """
    cfg = train_config or ScorerTrainConfig()
    fcfg = flow_config or FlowConfig(input_shape=tuple(corpus.shape[1:]))
    if tuple(corpus.shape[1:]) != fcfg.input_shape:
        raise ShapeError("corpus shape does not match flow config")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    if cfg.max_images is not None and corpus.shape[0] > cfg.max_images:
        keep = rng.choice(corpus.shape[0], size=cfg.max_images, replace=False)
        corpus = corpus[torch.from_numpy(np.sort(keep))]

    scorer = FlowScorer(fcfg)
    opt = torch.optim.Adam(scorer.parameters(), lr=cfg.lr)
    deq_gen = torch.Generator().manual_seed(cfg.seed + 1)
    report = ScorerTrainReport()
    n = corpus.shape[0]
    scorer.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            batch = corpus[torch.from_numpy(order[start : start + cfg.batch_size])]
            lp = log_prob(scorer, batch, dequantize=True, generator=deq_gen)
            loss = -lp.mean()
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"NLL diverged at epoch {epoch}; "
                    f"last good checkpoint: {cfg.checkpoint_path or 'none saved'}"
                )
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(scorer.parameters(), cfg.grad_clip)
            opt.step()
            total += loss.item() * batch.shape[0]
            count += batch.shape[0]
        report.epoch_nll.append(total / count)
        if cfg.checkpoint_path:
            save_scorer(scorer, cfg.checkpoint_path, corpus_checksum=_corpus_checksum(corpus),
                        train_report=report)
    freeze(scorer)
    if cfg.checkpoint_path:
        save_scorer(scorer, cfg.checkpoint_path, corpus_checksum=_corpus_checksum(corpus),
                    train_report=report)
    return scorer, report


def save_scorer(scorer: FlowScorer, path, corpus_checksum: str = "", train_report: ScorerTrainReport | None = None):
    torch.save(
        {
            "kind": "flow_scorer",
            "config": asdict(scorer.config),
            "state_dict": scorer.state_dict(),
            "corpus_checksum": corpus_checksum,
            "epoch_nll": train_report.epoch_nll if train_report else [],
        },
        path,
    )


def load_scorer(path) -> FlowScorer:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("kind") != "flow_scorer":
        raise TrainingError(f"{path} is not a scorer checkpoint")
    cfg_dict = dict(payload["config"])
    cfg_dict["input_shape"] = tuple(cfg_dict["input_shape"])
    if isinstance(cfg_dict.get("blocks_per_level"), list):
        cfg_dict["blocks_per_level"] = tuple(cfg_dict["blocks_per_level"])
    scorer = FlowScorer(FlowConfig(**cfg_dict))
    scorer.load_state_dict(payload["state_dict"])
    return freeze(scorer)
