"""Compact style-based generator/discriminator pair for desk-scale images.

Mirrors the StyleGAN2 layout at toy size: a 4-layer MLP maps noise z to a
style code w, a modulated-conv synthesis stack grows a learned 4x4 constant
up to the target resolution, and a residual discriminator drives
non-saturating adversarial training with an R1 penalty on reals. One w is
broadcast to every style block, per-layer noise buffers are frozen at
initialization, and the RGB output is squashed with a sigmoid, so
synthesis is a deterministic function of (checkpoint, w) with pixels in
[0, 1].
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import datakit
from .datakit import Dataset
from .oracle import pixels_to_tensor, tensor_to_pixels
from .seeding import torch_gen

GAN_SCHEMA_VERSION = 1


class NumericalError(RuntimeError):
    """A loss or activation became non-finite."""


@dataclass
class GanConfig:
    resolution: int = 64
    d_z: int = 128
    d_w: int = 128
    mapper_layers: int = 4
    mapper_lr_mul: float = 0.01
    channel_base: int = 2048
    channel_max: int = 128
    steps: int = 20000
    batch_size: int = 16
    lr: float = 2e-3
    beta0: float = 0.0
    beta1: float = 0.99
    r1_gamma: float = 1.0
    checkpoint_every: int = 1000

    def channels(self, res: int) -> int:
        return min(self.channel_max, self.channel_base // res)


# ---------------------------------------------------------------------------
# Equalized-lr primitives


class EqualizedLinear(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, lr_mul: float = 1.0,
                 bias_init: float = 0.0):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_dim, in_dim))
        self.bias = nn.Parameter(torch.full((out_dim,), bias_init / lr_mul))
        self.scale = lr_mul / math.sqrt(in_dim)
        self.lr_mul = lr_mul

    def init_params(self, g: torch.Generator) -> None:
        self.weight.data.normal_(0.0, 1.0 / self.lr_mul, generator=g)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.weight * self.scale, self.bias * self.lr_mul)


class EqualizedConv2d(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_ch, in_ch, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.scale = 1.0 / math.sqrt(in_ch * kernel * kernel)
        self.padding = kernel // 2

    def init_params(self, g: torch.Generator) -> None:
        self.weight.data.normal_(0.0, 1.0, generator=g)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.conv2d(x, self.weight * self.scale, self.bias, padding=self.padding)


class ModulatedConv2d(nn.Module):
    """Per-sample style modulation with optional demodulation (grouped conv)."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, d_w: int,
                 demodulate: bool = True, upsample: bool = False):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_ch, in_ch, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.affine = EqualizedLinear(d_w, in_ch, bias_init=1.0)
        self.scale = 1.0 / math.sqrt(in_ch * kernel * kernel)
        self.padding = kernel // 2
        self.demodulate = demodulate
        self.upsample = upsample
        self.out_ch = out_ch

    def init_params(self, g: torch.Generator) -> None:
        self.weight.data.normal_(0.0, 1.0, generator=g)
        self.affine.init_params(g)

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        b, in_ch, h, width = x.shape
        style = self.affine(w)                                        # [B, in]
        weight = self.weight * self.scale                             # [out,in,k,k]
        weight = weight[None] * style[:, None, :, None, None]        # [B,out,in,k,k]
        if self.demodulate:
            denom = torch.rsqrt(weight.pow(2).sum(dim=(2, 3, 4)) + 1e-8)
            weight = weight * denom[:, :, None, None, None]
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            h, width = x.shape[2], x.shape[3]
        x = x.reshape(1, b * in_ch, h, width)
        weight = weight.reshape(b * self.out_ch, in_ch, *weight.shape[3:])
        out = F.conv2d(x, weight, padding=self.padding, groups=b)
        out = out.reshape(b, self.out_ch, h, width)
        return out + self.bias[None, :, None, None]


# ---------------------------------------------------------------------------
# Generator


class MappingNetwork(nn.Module):
    def __init__(self, cfg: GanConfig):
        super().__init__()
        dims = [cfg.d_z] + [cfg.d_w] * cfg.mapper_layers
        self.layers = nn.ModuleList([
            EqualizedLinear(dims[i], dims[i + 1], lr_mul=cfg.mapper_lr_mul)
            for i in range(cfg.mapper_layers)
        ])

    def init_params(self, g: torch.Generator) -> None:
        for layer in self.layers:
            layer.init_params(g)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        x = z * torch.rsqrt(z.pow(2).mean(dim=1, keepdim=True) + 1e-8)
        for layer in self.layers:
            x = F.leaky_relu(layer(x), 0.2)
        return x


class SynthesisLayer(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, res: int, d_w: int,
                 upsample: bool):
        super().__init__()
        self.conv = ModulatedConv2d(in_ch, out_ch, 3, d_w, upsample=upsample)
        self.noise_strength = nn.Parameter(torch.zeros(()))
        self.register_buffer("noise_const", torch.zeros(1, 1, res, res))

    def init_params(self, g: torch.Generator) -> None:
        self.conv.init_params(g)
        self.noise_const.normal_(0.0, 1.0, generator=g)

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        x = self.conv(x, w)
        x = x + self.noise_strength * self.noise_const
        return F.leaky_relu(x, 0.2) * math.sqrt(2.0)


class SynthesisNetwork(nn.Module):
    """4x4 learned constant grown to full resolution with skip toRGB."""

    def __init__(self, cfg: GanConfig):
        super().__init__()
        self.cfg = cfg
        self.resolutions = [4 * 2 ** i for i in
                            range(int(math.log2(cfg.resolution // 4)) + 1)]
        ch0 = cfg.channels(4)
        self.const = nn.Parameter(torch.empty(1, ch0, 4, 4))
        layers = []
        rgbs = []
        in_ch = ch0
        for i, res in enumerate(self.resolutions):
            out_ch = cfg.channels(res)
            if i == 0:
                layers.append(nn.ModuleList([
                    SynthesisLayer(in_ch, out_ch, res, cfg.d_w, upsample=False)]))
            else:
                layers.append(nn.ModuleList([
                    SynthesisLayer(in_ch, out_ch, res, cfg.d_w, upsample=True),
                    SynthesisLayer(out_ch, out_ch, res, cfg.d_w, upsample=False)]))
            rgbs.append(ModulatedConv2d(out_ch, 3, 1, cfg.d_w, demodulate=False))
            in_ch = out_ch
        self.blocks = nn.ModuleList(layers)
        self.to_rgbs = nn.ModuleList(rgbs)

    def init_params(self, g: torch.Generator) -> None:
        self.const.data.normal_(0.0, 1.0, generator=g)
        for block in self.blocks:
            for layer in block:
                layer.init_params(g)
        for rgb in self.to_rgbs:
            rgb.init_params(g)

    def forward(self, w: torch.Tensor) -> torch.Tensor:
        x = self.const.expand(w.shape[0], -1, -1, -1).to(w.dtype)
        rgb = None
        for block, to_rgb in zip(self.blocks, self.to_rgbs):
            for layer in block:
                x = layer(x, w)
            y = to_rgb(x, w)
            if rgb is None:
                rgb = y
            else:
                rgb = F.interpolate(rgb, scale_factor=2, mode="nearest") + y
        return torch.sigmoid(rgb)


# ---------------------------------------------------------------------------
# Discriminator


class DiscBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv0 = EqualizedConv2d(in_ch, in_ch, 3)
        self.conv1 = EqualizedConv2d(in_ch, out_ch, 3)
        self.skip = EqualizedConv2d(in_ch, out_ch, 1)

    def init_params(self, g: torch.Generator) -> None:
        for m in (self.conv0, self.conv1, self.skip):
            m.init_params(g)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = F.leaky_relu(self.conv0(x), 0.2)
        y = F.avg_pool2d(F.leaky_relu(self.conv1(y), 0.2), 2)
        s = self.skip(F.avg_pool2d(x, 2))
        return (y + s) / math.sqrt(2.0)


class Discriminator(nn.Module):
    def __init__(self, cfg: GanConfig):
        super().__init__()
        res = cfg.resolution
        self.from_rgb = EqualizedConv2d(3, cfg.channels(res), 1)
        blocks = []
        while res > 4:
            blocks.append(DiscBlock(cfg.channels(res), cfg.channels(res // 2)))
            res //= 2
        self.blocks = nn.ModuleList(blocks)
        ch4 = cfg.channels(4)
        self.final_conv = EqualizedConv2d(ch4 + 1, ch4, 3)
        self.fc0 = EqualizedLinear(ch4 * 16, ch4)
        self.fc1 = EqualizedLinear(ch4, 1)

    def init_params(self, g: torch.Generator) -> None:
        self.from_rgb.init_params(g)
        for b in self.blocks:
            b.init_params(g)
        self.final_conv.init_params(g)
        self.fc0.init_params(g)
        self.fc1.init_params(g)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        x = F.leaky_relu(self.from_rgb(img * 2.0 - 1.0), 0.2)
        for b in self.blocks:
            x = b(x)
        # Minibatch stddev: one channel holding the batch-wide feature stddev.
        std = x.std(dim=0, unbiased=False).mean()
        x = torch.cat([x, std.expand(x.shape[0], 1, *x.shape[2:])], dim=1)
        x = F.leaky_relu(self.final_conv(x), 0.2)
        x = F.leaky_relu(self.fc0(x.flatten(1)), 0.2)
        return self.fc1(x).squeeze(1)


# ---------------------------------------------------------------------------
# State, public ops


class GanState:
    """Generator + discriminator + optimizers + step counter."""

    def __init__(self, cfg: GanConfig, generator: torch.Generator):
        self.cfg = cfg
        self.mapper = MappingNetwork(cfg)
        self.synthesis = SynthesisNetwork(cfg)
        self.disc = Discriminator(cfg)
        self.mapper.init_params(generator)
        self.synthesis.init_params(generator)
        self.disc.init_params(generator)
        g_params = list(self.mapper.parameters()) + list(self.synthesis.parameters())
        self.opt_g = torch.optim.Adam(g_params, lr=cfg.lr, betas=(cfg.beta0, cfg.beta1))
        self.opt_d = torch.optim.Adam(self.disc.parameters(), lr=cfg.lr,
                                      betas=(cfg.beta0, cfg.beta1))
        self.step = 0
        self.loss_history: list[tuple[int, float, float, float]] = []
        self.seed: Optional[int] = None

    def eval_mode(self) -> "GanState":
        self.mapper.eval()
        self.synthesis.eval()
        self.disc.eval()
        return self

    def to_dtype(self, dtype: torch.dtype) -> "GanState":
        for m in (self.mapper, self.synthesis, self.disc):
            m.to(dtype)
        return self

    def map_batch(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.cfg.d_z:
            raise ValueError(f"z has dimension {z.shape[-1]}, expected {self.cfg.d_z}")
        return self.mapper(z)

    def synthesize_batch(self, w: torch.Tensor) -> torch.Tensor:
        if w.shape[-1] != self.cfg.d_w:
            raise ValueError(f"w has dimension {w.shape[-1]}, expected {self.cfg.d_w}")
        if not torch.isfinite(w).all():
            raise ValueError("non-finite entries in w")
        return self.synthesis(w)


def map_latent(state: GanState, z: np.ndarray) -> np.ndarray:
    """w = MLP(z) for a single noise vector."""
    zt = torch.as_tensor(np.asarray(z, dtype=np.float32)).reshape(1, -1)
    with torch.no_grad():
        return state.map_batch(zt)[0].numpy()


def synthesize(state: GanState, w: np.ndarray) -> np.ndarray:
    """Deterministic H x W x 3 image in [0, 1] for a single latent code."""
    wt = torch.as_tensor(np.asarray(w, dtype=np.float32)).reshape(1, -1)
    with torch.no_grad():
        img = state.synthesize_batch(wt)
    return tensor_to_pixels(img)


def gan_train_step(state: GanState, real: torch.Tensor,
                   generator: torch.Generator) -> dict[str, float]:
    """One alternating D/G update on a batch of real images."""
    cfg = state.cfg
    if real.shape[-1] != cfg.resolution or real.shape[-2] != cfg.resolution:
        raise ValueError(
            f"real batch resolution {tuple(real.shape[-2:])} does not match "
            f"{cfg.resolution}"
        )
    b = real.shape[0]

    # D step
    z = torch.randn(b, cfg.d_z, generator=generator)
    with torch.no_grad():
        fake = state.synthesize_batch(state.map_batch(z))
    real_req = real.detach().clone().requires_grad_(True)
    real_logits = state.disc(real_req)
    fake_logits = state.disc(fake)
    d_loss = F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()
    grad = torch.autograd.grad(real_logits.sum(), real_req, create_graph=True)[0]
    r1 = grad.pow(2).sum(dim=(1, 2, 3)).mean()
    d_total = d_loss + 0.5 * cfg.r1_gamma * r1
    state.opt_d.zero_grad(set_to_none=True)
    d_total.backward()
    state.opt_d.step()

    # G step
    z = torch.randn(b, cfg.d_z, generator=generator)
    fake = state.synthesize_batch(state.map_batch(z))
    g_loss = F.softplus(-state.disc(fake)).mean()
    state.opt_g.zero_grad(set_to_none=True)
    g_loss.backward()
    state.opt_g.step()

    vals = {"d_loss": float(d_loss.detach()), "g_loss": float(g_loss.detach()),
            "r1": float(r1.detach())}
    if not all(math.isfinite(v) for v in vals.values()):
        raise NumericalError(f"non-finite GAN losses at step {state.step}: {vals}")
    state.step += 1
    state.loss_history.append((state.step, vals["d_loss"], vals["g_loss"], vals["r1"]))
    return vals


# ---------------------------------------------------------------------------
# Training driver with periodic checkpoints


def train_gan(dataset: Dataset, cfg: GanConfig, root_seed: int,
              out_dir: Path) -> GanState:
    """Train to cfg.steps, resuming from the periodic checkpoint if present."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if dataset.manifest.resolution != cfg.resolution:
        raise ValueError(
            f"dataset resolution {dataset.manifest.resolution} does not match "
            f"gan resolution {cfg.resolution}"
        )

    train_state = out_dir / "train_state.pt"
    if train_state.exists():
        state, gen = _load_training_state(train_state, cfg)
        if state.step > cfg.steps:
            raise ValueError(
                f"existing training state at step {state.step} exceeds the "
                f"requested {cfg.steps}; clear {out_dir} to retrain")
    else:
        state = GanState(cfg, torch_gen(root_seed, "gan", "init"))
        state.seed = root_seed
        gen = torch_gen(root_seed, "gan", "train")

    image_ids = sorted({rec.image_id for rec in dataset.split_records("train")})
    reals = pixels_to_tensor(np.stack([dataset.images[i] for i in image_ids]))
    n = reals.shape[0]

    while state.step < cfg.steps:
        idx = torch.randint(0, n, (cfg.batch_size,), generator=gen)
        gan_train_step(state, reals[idx], gen)
        if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            _save_training_state(train_state, state, gen)

    # Keep the full training state so a later call with a larger step
    # budget continues instead of restarting.
    _save_training_state(train_state, state, gen)
    state.eval_mode()
    save_gan(state, out_dir)
    _write_loss_history(out_dir / "loss_history.csv", state.loss_history)
    return state


def _write_loss_history(path: Path, rows: list[tuple[int, float, float, float]]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "d_loss", "g_loss", "r1"])
        for step, d, g, r1 in rows:
            writer.writerow([step, f"{d:.6f}", f"{g:.6f}", f"{r1:.6f}"])


def _save_training_state(path: Path, state: GanState, gen: torch.Generator) -> None:
    tmp = path.with_suffix(".tmp")
    torch.save({
        "step": state.step,
        "seed": state.seed,
        "mapper": state.mapper.state_dict(),
        "synthesis": state.synthesis.state_dict(),
        "disc": state.disc.state_dict(),
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
        "loss_history": state.loss_history,
        "rng_state": gen.get_state(),
    }, tmp)
    tmp.replace(path)


def _load_training_state(path: Path, cfg: GanConfig) -> tuple[GanState, torch.Generator]:
    blob = torch.load(path, weights_only=False)
    state = GanState(cfg, torch_gen(0, "gan", "placeholder"))
    state.mapper.load_state_dict(blob["mapper"])
    state.synthesis.load_state_dict(blob["synthesis"])
    state.disc.load_state_dict(blob["disc"])
    state.opt_g.load_state_dict(blob["opt_g"])
    state.opt_d.load_state_dict(blob["opt_d"])
    state.step = blob["step"]
    state.seed = blob["seed"]
    state.loss_history = [tuple(r) for r in blob["loss_history"]]
    gen = torch.Generator()
    gen.set_state(blob["rng_state"])
    return state, gen


# ---------------------------------------------------------------------------
# Checkpoint IO


def save_gan(state: GanState, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.save({
        "mapper": state.mapper.state_dict(),
        "synthesis": state.synthesis.state_dict(),
        "disc": state.disc.state_dict(),
        "config": asdict(state.cfg),
    }, out_dir / "gan.pt")
    datakit._write_json(out_dir / "gan.json", {
        "schema_version": GAN_SCHEMA_VERSION,
        "resolution": state.cfg.resolution,
        "d_z": state.cfg.d_z,
        "d_w": state.cfg.d_w,
        "step": state.step,
        "seed": state.seed,
        "loss_history_path": "loss_history.csv",
    })
    return out_dir / "gan.pt"


def load_gan(out_dir: Path) -> GanState:
    out_dir = Path(out_dir)
    meta = json.loads((out_dir / "gan.json").read_text())
    if meta.get("schema_version") != GAN_SCHEMA_VERSION:
        raise ValueError(f"unsupported gan schema_version {meta.get('schema_version')!r}")
    blob = torch.load(out_dir / "gan.pt", weights_only=True)
    cfg = GanConfig(**blob["config"])
    state = GanState(cfg, torch_gen(0, "gan", "placeholder"))
    state.mapper.load_state_dict(blob["mapper"])
    state.synthesis.load_state_dict(blob["synthesis"])
    state.disc.load_state_dict(blob["disc"])
    state.step = meta["step"]
    state.seed = meta["seed"]
    return state.eval_mode()
