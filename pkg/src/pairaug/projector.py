"""Latent-space projection of real images into W.

Estimates W statistics from mapped noise, then inverts images by Adam
descent on w with a cosine lr ramp-down, evaluating the perceptual loss at
an annealed-noise perturbation of the current iterate. Per-image noise
streams are derived from the image id, so a batched run and a resumed run
agree as long as the batch partition is unchanged.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import datakit
from .datakit import Dataset
from .oracle import pixels_to_tensor
from .seeding import np_rng, torch_gen

STORE_SCHEMA_VERSION = 1

# Feature extractor contract: callable [B,3,H,W] -> [B,F], deterministic,
# differentiable in its input, parameters frozen.
Extractor = Callable[[torch.Tensor], torch.Tensor]


class ProjectionError(RuntimeError):
    pass


class NumericalError(RuntimeError):
    """Non-finite loss during projection; carries the trace so far."""

    def __init__(self, message: str, trace: np.ndarray):
        super().__init__(message)
        self.trace = trace


@dataclass
class WStats:
    mu_w: np.ndarray
    sigma2_w: float
    n_samples: int

    def __post_init__(self) -> None:
        self.mu_w = np.asarray(self.mu_w, dtype=np.float32)
        if self.mu_w.ndim != 1:
            raise ValueError("mu_w must be a vector")
        if self.sigma2_w < 0:
            raise ValueError(f"sigma2_w must be nonnegative, got {self.sigma2_w}")


@dataclass
class ProjectionConfig:
    steps: int = 500
    lr: float = 0.1
    noise_coeff: float = 0.05
    anneal_frac: float = 0.75
    # The source formula w + N(0, 0.05 sigma_w k^2) is ambiguous about
    # whether the second argument is a variance or a std; "variance" is the
    # implemented reading, "std" is one flag away.
    noise_mode: str = "variance"
    batch_size: int = 16
    extractor: str = "oracle"
    n_stat_samples: int = 10000

    def __post_init__(self) -> None:
        if self.noise_mode not in ("variance", "std"):
            raise ValueError(f"unknown noise_mode {self.noise_mode!r}")
        if self.extractor not in ("oracle", "random"):
            raise ValueError(f"unknown extractor {self.extractor!r}")
        if not 0 < self.anneal_frac <= 1:
            raise ValueError("anneal_frac must be in (0, 1]")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")


def anneal_k(t: int, steps: int, frac: float = 0.75) -> float:
    """Linear 1 -> 0 over the first frac of the run, then 0."""
    if steps <= 0:
        return 0.0
    return max(0.0, 1.0 - t / (frac * steps))


def _noise_std(stats: WStats, k: float, cfg: ProjectionConfig) -> float:
    sigma_w = math.sqrt(stats.sigma2_w)
    if cfg.noise_mode == "variance":
        var = cfg.noise_coeff * sigma_w * k * k
        return math.sqrt(var)
    return cfg.noise_coeff * sigma_w * k * k


def estimate_w_stats(gan, n: int = 10000, generator: torch.Generator | None = None,
                     chunk: int = 1000) -> WStats:
    """Mean of mapped noise and mean squared distance to that mean.

    Accepts anything exposing map_batch and cfg.d_z (duck-typed so a stub
    mapper can exercise the estimator).
    """
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    if generator is None:
        generator = torch.Generator()
    ws = []
    with torch.no_grad():
        for start in range(0, n, chunk):
            z = torch.randn(min(chunk, n - start), gan.cfg.d_z, generator=generator)
            ws.append(gan.map_batch(z).double())
    w_all = torch.cat(ws)
    mu = w_all.mean(dim=0)
    sigma2 = (w_all - mu).pow(2).sum(dim=1).mean()
    return WStats(mu_w=mu.numpy().astype(np.float32), sigma2_w=float(sigma2),
                  n_samples=n)


def perturb_latent(w: np.ndarray, k: float, stats: WStats,
                   rng: np.random.Generator,
                   cfg: ProjectionConfig | None = None) -> np.ndarray:
    """w + zero-mean Gaussian with per-coordinate variance 0.05 sigma_w k^2."""
    if not 0 <= k <= 1:
        raise ValueError(f"k must be in [0, 1], got {k}")
    cfg = cfg or ProjectionConfig()
    w = np.asarray(w, dtype=np.float32)
    std = _noise_std(stats, k, cfg)
    if std == 0.0:
        return w.copy()
    return w + (rng.standard_normal(w.shape) * std).astype(np.float32)


# ---------------------------------------------------------------------------
# Perceptual loss and the projection objective


def perceptual_loss_t(extractor: Extractor, x: torch.Tensor,
                      x_prime: torch.Tensor) -> torch.Tensor:
    """Per-sample ||F(x) - F(x')||^2_2, differentiable in both inputs."""
    if x.shape[-2:] != x_prime.shape[-2:]:
        raise ValueError(
            f"resolution mismatch {tuple(x.shape[-2:])} vs {tuple(x_prime.shape[-2:])}"
        )
    return (extractor(x) - extractor(x_prime)).pow(2).sum(dim=1)


def perceptual_loss(extractor: Extractor, x: np.ndarray, x_prime: np.ndarray) -> float:
    xa, xb = pixels_to_tensor(x), pixels_to_tensor(x_prime)
    with torch.no_grad():
        return float(perceptual_loss_t(extractor, xa, xb).sum())


def projection_objective(gan, extractor: Extractor, target_features: torch.Tensor,
                         w: torch.Tensor) -> torch.Tensor:
    """Per-sample Eq-style objective ||F(G(w)) - F(x)||^2_2, differentiable in w."""
    feats = extractor(gan.synthesis(w))
    return (feats - target_features).pow(2).sum(dim=1)


def build_extractor(module: torch.nn.Module) -> Extractor:
    """Freeze a network exposing .features and return it as an extractor."""
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module.features


# ---------------------------------------------------------------------------
# Projection loops


def _project_batch(gan, extractor: Extractor, stats: WStats, xs: torch.Tensor,
                   cfg: ProjectionConfig, rngs: Sequence[np.random.Generator],
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Jointly optimize one latent row per image; trajectories stay per-image
    independent because the summed loss decouples and Adam is elementwise.

    Returns (w_best, initial_losses, best_losses, traces[B, steps+1]).
    """
    b = xs.shape[0]
    d_w = stats.mu_w.shape[0]
    flags = [p.requires_grad for p in gan.synthesis.parameters()]
    for p in gan.synthesis.parameters():
        p.requires_grad_(False)
    try:
        with torch.no_grad():
            target = extractor(xs)
        w = torch.from_numpy(np.repeat(stats.mu_w[None], b, axis=0).copy())
        w.requires_grad_(True)
        opt = torch.optim.Adam([w], lr=cfg.lr)
        traces = np.zeros((b, cfg.steps + 1), dtype=np.float64)

        with torch.no_grad():
            init = projection_objective(gan, extractor, target, w)
        traces[:, 0] = init.numpy()
        best = init.clone()
        best_w = w.detach().clone()

        for t in range(cfg.steps):
            k = anneal_k(t, cfg.steps, cfg.anneal_frac)
            std = _noise_std(stats, k, cfg)
            if std > 0.0:
                g = np.stack([r.standard_normal(d_w) for r in rngs])
                w_tilde = w + torch.from_numpy((g * std).astype(np.float32))
            else:
                w_tilde = w
            per = projection_objective(gan, extractor, target, w_tilde)
            per_d = per.detach()
            if not torch.isfinite(per_d).all():
                raise NumericalError(
                    f"non-finite projection loss at step {t}", traces[:, :t + 1])
            iterate = w.detach()
            improved = per_d < best
            best_w[improved] = iterate[improved]
            best[improved] = per_d[improved]
            traces[:, t + 1] = per_d.numpy()
            opt.param_groups[0]["lr"] = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * t / cfg.steps))
            opt.zero_grad(set_to_none=True)
            per.sum().backward()
            opt.step()
    finally:
        for p, f in zip(gan.synthesis.parameters(), flags):
            p.requires_grad_(f)
    return best_w.numpy(), traces[:, 0].copy(), best.numpy().astype(np.float64), traces


def project_image(gan, extractor: Extractor, stats: WStats, x: np.ndarray,
                  cfg: ProjectionConfig, rng: np.random.Generator,
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Invert a single image; returns (w_opt, loss trace of length steps+1)."""
    xs = pixels_to_tensor(x)
    if xs.shape[-1] != gan.cfg.resolution:
        raise ValueError(
            f"image resolution {xs.shape[-1]} does not match gan "
            f"{gan.cfg.resolution}"
        )
    w, _, _, traces = _project_batch(gan, extractor, stats, xs, cfg, [rng])
    return w[0], traces[0]


# ---------------------------------------------------------------------------
# Latent store


@dataclass
class LatentStore:
    ids: list[str]
    w: np.ndarray
    final_losses: np.ndarray
    initial_losses: np.ndarray
    stats: WStats

    def __post_init__(self) -> None:
        self.w = np.asarray(self.w, dtype=np.float32)
        if self.w.shape[0] != len(self.ids):
            raise ValueError("latent row count does not match id count")

    def row(self, image_id: str) -> np.ndarray:
        return self.w[self.ids.index(image_id)]

    def lookup(self) -> dict[str, np.ndarray]:
        return {iid: self.w[i] for i, iid in enumerate(self.ids)}


def _matrix_checksum(w: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(w, dtype="<f4").tobytes()).hexdigest()


def save_latent_store(store: LatentStore, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    w = np.ascontiguousarray(store.w, dtype="<f4")
    (out_dir / "latents.f32").write_bytes(w.tobytes())
    (out_dir / "mu_w.f32").write_bytes(
        np.ascontiguousarray(store.stats.mu_w, dtype="<f4").tobytes())
    datakit._write_json(out_dir / "latents.json", {
        "schema_version": STORE_SCHEMA_VERSION,
        "d_w": int(w.shape[1]),
        "ids": store.ids,
        "final_losses": [float(v) for v in store.final_losses],
        "initial_losses": [float(v) for v in store.initial_losses],
        "stats": {
            "mu_w": "mu_w.f32",
            "sigma2_w": store.stats.sigma2_w,
            "n_samples": store.stats.n_samples,
        },
        "checksum": _matrix_checksum(w),
    })
    return out_dir / "latents.json"


def load_latent_store(out_dir: Path) -> LatentStore:
    out_dir = Path(out_dir)
    sidecar = out_dir / "latents.json"
    if not sidecar.exists():
        raise ProjectionError(f"no latent store at {out_dir}")
    meta = json.loads(sidecar.read_text())
    if meta.get("schema_version") != STORE_SCHEMA_VERSION:
        raise ProjectionError(
            f"unsupported latent store schema {meta.get('schema_version')!r}")
    raw = (out_dir / "latents.f32").read_bytes()
    w = np.frombuffer(raw, dtype="<f4").reshape(len(meta["ids"]), meta["d_w"]).copy()
    if _matrix_checksum(w) != meta["checksum"]:
        raise ProjectionError(f"latent store checksum mismatch in {out_dir}")
    mu = np.frombuffer((out_dir / meta["stats"]["mu_w"]).read_bytes(), dtype="<f4").copy()
    stats = WStats(mu_w=mu, sigma2_w=meta["stats"]["sigma2_w"],
                   n_samples=meta["stats"]["n_samples"])
    return LatentStore(
        ids=list(meta["ids"]), w=w,
        final_losses=np.asarray(meta["final_losses"], dtype=np.float64),
        initial_losses=np.asarray(meta["initial_losses"], dtype=np.float64),
        stats=stats,
    )


def _load_partial(out_dir: Path, ids: list[str], d_w: int,
                  ) -> tuple[int, list[np.ndarray], list[float], list[float]]:
    """Validate an interrupted run's partial rows; returns resume position."""
    sidecar = out_dir / "partial.json"
    if not sidecar.exists():
        return 0, [], [], []
    meta = json.loads(sidecar.read_text())
    done = meta["ids"]
    if done != ids[:len(done)]:
        raise ProjectionError(
            "partial latent store does not match the current id order; "
            "delete it to reproject")
    raw = (out_dir / "partial.f32").read_bytes()
    w = np.frombuffer(raw, dtype="<f4").reshape(len(done), d_w).copy()
    if _matrix_checksum(w) != meta["checksum"]:
        raise ProjectionError(
            f"corrupt partial latent rows in {out_dir}; delete to reproject")
    return (len(done), [w[i] for i in range(len(done))],
            list(meta["final_losses"]), list(meta["initial_losses"]))


def _save_partial(out_dir: Path, ids: list[str], rows: list[np.ndarray],
                  finals: list[float], initials: list[float]) -> None:
    w = np.stack(rows).astype("<f4") if rows else np.zeros((0, 1), dtype="<f4")
    (out_dir / "partial.f32").write_bytes(w.tobytes())
    datakit._write_json(out_dir / "partial.json", {
        "ids": ids[:len(rows)],
        "final_losses": [float(v) for v in finals],
        "initial_losses": [float(v) for v in initials],
        "checksum": _matrix_checksum(w),
    })


def project_dataset(gan, extractor: Extractor, dataset: Dataset, stats: WStats,
                    cfg: ProjectionConfig, root_seed: int, out_dir: Path,
                    split: str = "train") -> LatentStore:
    """Project every image of a split; resumable at batch granularity."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ids = sorted({rec.image_id for rec in dataset.split_records(split)})
    d_w = stats.mu_w.shape[0]

    done, rows, finals, initials = _load_partial(out_dir, ids, d_w)
    if done % cfg.batch_size != 0 and done != len(ids):
        # Keep the batch partition identical to an uninterrupted run.
        trim = done - done % cfg.batch_size
        rows, finals, initials, done = rows[:trim], finals[:trim], initials[:trim], trim

    for start in range(done, len(ids), cfg.batch_size):
        batch_ids = ids[start:start + cfg.batch_size]
        xs = pixels_to_tensor(np.stack([dataset.images[i] for i in batch_ids]))
        rngs = [np_rng(root_seed, "project", iid) for iid in batch_ids]
        w, init, best, _ = _project_batch(gan, extractor, stats, xs, cfg, rngs)
        rows.extend(w)
        finals.extend(best.tolist())
        initials.extend(init.tolist())
        _save_partial(out_dir, ids, rows, finals, initials)

    store = LatentStore(
        ids=ids, w=np.stack(rows),
        final_losses=np.asarray(finals, dtype=np.float64),
        initial_losses=np.asarray(initials, dtype=np.float64),
        stats=stats,
    )
    save_latent_store(store, out_dir)
    for name in ("partial.f32", "partial.json"):
        p = out_dir / name
        if p.exists():
            p.unlink()
    return store
