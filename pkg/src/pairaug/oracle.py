"""Attribute oracle: a small conv classifier over the synthetic attributes.

Trained on clean renders of the training split, it predicts (shape, color,
size, bg) for any image at the dataset resolution and is the programmatic
stand-in for human judgment of whether a generated image matches its
caption. Its pooled trunk features also serve as the default perceptual
extractor for latent projection. Training adds a little pixel noise so the
oracle stays reliable on GAN output, which is never pixel-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import datakit
from .datakit import BG_ORDER, COLORS_ORDER, Dataset, SHAPES, SIZES_ORDER

HEAD_SPECS = [("shape", SHAPES), ("color", COLORS_ORDER),
              ("size", SIZES_ORDER), ("bg_color", BG_ORDER)]

ORACLE_SCHEMA_VERSION = 1


class OracleNet(nn.Module):
    """Conv trunk to a pooled feature vector, one linear head per attribute."""

    def __init__(self, resolution: int, feature_dim: int = 64,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.resolution = resolution
        self.feature_dim = feature_dim
        widths = [24, 32, 48, feature_dim]
        layers: list[nn.Module] = []
        in_ch = 3
        for i, w in enumerate(widths):
            stride = 1 if i == 0 else 2
            layers.append(nn.Conv2d(in_ch, w, 3, stride=stride, padding=1))
            layers.append(nn.LeakyReLU(0.2))
            in_ch = w
        self.trunk = nn.Sequential(*layers)
        self.heads = nn.ModuleDict({
            name: nn.Linear(feature_dim, len(values)) for name, values in HEAD_SPECS
        })
        if generator is not None:
            self._init_params(generator)

    def _init_params(self, g: torch.Generator) -> None:
        for p in self.parameters():
            if p.dim() > 1:
                fan_in = p[0].numel()
                p.data.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=g)
            else:
                p.data.zero_()

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Pooled trunk features, [B, feature_dim]; differentiable in x."""
        h = self.trunk(x * 2.0 - 1.0)
        return h.mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        f = self.features(x)
        return {name: head(f) for name, head in self.heads.items()}


def pixels_to_tensor(pixels: np.ndarray) -> torch.Tensor:
    """H x W x 3 (or B x H x W x 3) float array -> B x 3 x H x W tensor."""
    arr = np.asarray(pixels, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def tensor_to_pixels(x: torch.Tensor) -> np.ndarray:
    """B x 3 x H x W tensor -> B x H x W x 3 float32 array (or single image)."""
    arr = x.detach().cpu().numpy().transpose(0, 2, 3, 1).astype(np.float32)
    return arr[0] if arr.shape[0] == 1 else arr


@dataclass
class OracleConfig:
    epochs: int = 8
    batch_size: int = 64
    lr: float = 2e-3
    noise_std: float = 0.03
    feature_dim: int = 64


def _image_labels(dataset: Dataset, split: str) -> tuple[list[str], np.ndarray]:
    """Unique image ids of a split with integer labels per attribute head."""
    ids: list[str] = []
    seen: set[str] = set()
    for rec in dataset.split_records(split):
        if rec.image_id not in seen:
            seen.add(rec.image_id)
            ids.append(rec.image_id)
    labels = np.zeros((len(ids), len(HEAD_SPECS)), dtype=np.int64)
    for i, image_id in enumerate(ids):
        attrs = dataset.manifest.images[image_id]["attrs"]
        for j, (name, values) in enumerate(HEAD_SPECS):
            labels[i, j] = values.index(attrs[name])
    return ids, labels


def train_oracle(dataset: Dataset, cfg: OracleConfig,
                 generator: torch.Generator) -> OracleNet:
    """Fit the oracle on the training split. Deterministic given the generator."""
    res = dataset.manifest.resolution
    net = OracleNet(res, feature_dim=cfg.feature_dim, generator=generator)
    ids, labels = _image_labels(dataset, "train")
    pixels = np.stack([dataset.images[i] for i in ids])
    x_all = pixels_to_tensor(pixels)
    y_all = torch.from_numpy(labels)

    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    n = len(ids)
    for _ in range(cfg.epochs):
        perm = torch.randperm(n, generator=generator)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            x = x_all[idx]
            if cfg.noise_std > 0:
                x = x + cfg.noise_std * torch.randn(x.shape, generator=generator)
            logits = net(x.clamp(0.0, 1.0))
            loss = sum(F.cross_entropy(logits[name], y_all[idx, j])
                       for j, (name, _) in enumerate(HEAD_SPECS))
            opt.zero_grad()
            loss.backward()
            opt.step()
    net.eval()
    return net


@torch.no_grad()
def predict_attrs(net: OracleNet, pixels: np.ndarray) -> list[dict[str, str]]:
    """Predict (shape, color, size, bg_color) names for one image or a batch."""
    arr = np.asarray(pixels)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.shape[1] != net.resolution or arr.shape[2] != net.resolution:
        raise ValueError(
            f"oracle expects {net.resolution}x{net.resolution} images, "
            f"got {arr.shape[1]}x{arr.shape[2]}"
        )
    net.eval()
    logits = net(pixels_to_tensor(arr))
    out = []
    for i in range(arr.shape[0]):
        out.append({name: values[int(logits[name][i].argmax())]
                    for name, values in HEAD_SPECS})
    return out


@torch.no_grad()
def clean_accuracy(net: OracleNet, dataset: Dataset, split: str = "test") -> dict[str, float]:
    """Per-attribute accuracy on the clean renders of a split."""
    ids, labels = _image_labels(dataset, split)
    preds = predict_attrs(net, np.stack([dataset.images[i] for i in ids]))
    acc = {}
    for j, (name, values) in enumerate(HEAD_SPECS):
        hits = sum(1 for i, p in enumerate(preds) if values.index(p[name]) == labels[i, j])
        acc[name] = hits / len(ids)
    return acc


def save_oracle(net: OracleNet, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.save({"state_dict": net.state_dict()}, out_dir / "oracle.pt")
    datakit._write_json(out_dir / "oracle.json", {
        "schema_version": ORACLE_SCHEMA_VERSION,
        "resolution": net.resolution,
        "feature_dim": net.feature_dim,
    })
    return out_dir / "oracle.pt"


def load_oracle(out_dir: Path) -> OracleNet:
    out_dir = Path(out_dir)
    meta = json.loads((out_dir / "oracle.json").read_text())
    if meta.get("schema_version") != ORACLE_SCHEMA_VERSION:
        raise ValueError(f"unsupported oracle schema_version {meta.get('schema_version')!r}")
    net = OracleNet(meta["resolution"], feature_dim=meta["feature_dim"])
    net.load_state_dict(torch.load(out_dir / "oracle.pt", weights_only=True)["state_dict"])
    net.eval()
    return net
