"""Cross-modal retrieval training on real plus augmented pairs.

Two from-scratch encoders (small conv net for images, bi-GRU for text) map
both modalities onto a shared unit sphere; training minimizes a batch-hard
triplet hinge where every image and text row acts as an anchor, positives
are opposite-modality rows sharing the pair id, and negatives are any rows
with a different pair id. Ablation modes control how augmented rows enter
the batch: as fresh pairs (joint), as extra positives of their source
(noise_pair, text_only), as distractors matching nothing (unpaired), or in
a pretrain-then-finetune schedule.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import datakit, evalkit
from .aligner import TextAlignEncoder, _index_batch, vocab_hash
from .augmentor import ReplacementConfig, replace_tokens
from .datakit import Dataset, Vocabulary
from .ganlite import GanState
from .oracle import pixels_to_tensor
from .seeding import np_rng, torch_gen

RETRIEVAL_SCHEMA_VERSION = 1

MODES = ("joint", "pretrain_finetune", "noise_pair", "text_only", "unpaired",
         "baseline")


class RetrievalError(RuntimeError):
    pass


@dataclass
class TripletConfig:
    margin: float = 0.3
    class_level: bool = False

    def __post_init__(self) -> None:
        if self.margin <= 0:
            raise ValueError(f"margin must be positive, got {self.margin}")


@dataclass
class RetrievalConfig:
    mode: str = "joint"
    epochs: int = 40
    pretrain_epochs: int = 20
    batch_pairs: int = 32
    lr: float = 1e-4
    lr_decay: float = 0.1
    decay_epoch: int = 30
    d_embed: int = 128
    margin: float = 0.3
    class_level: bool = False
    scale: float = 1.0

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.scale < 0:
            raise ValueError(f"scale must be nonnegative, got {self.scale}")

    def triplet(self) -> TripletConfig:
        return TripletConfig(margin=self.margin, class_level=self.class_level)


# ---------------------------------------------------------------------------
# Encoders


class ImageEncoder(nn.Module):
    def __init__(self, resolution: int, d_embed: int):
        super().__init__()
        convs = []
        in_ch, res = 3, resolution
        width = 32
        while res > 4:
            convs.append(nn.Conv2d(in_ch, width, 3, stride=2, padding=1))
            in_ch, width, res = width, min(width * 2, 128), res // 2
        self.convs = nn.ModuleList(convs)
        self.head = nn.Linear(in_ch, d_embed)

    def init_params(self, g: torch.Generator) -> None:
        for conv in self.convs:
            fan = conv.in_channels * 9
            conv.weight.data.normal_(0.0, (2.0 / fan) ** 0.5, generator=g)
            conv.bias.data.zero_()
        fan = self.head.in_features
        self.head.weight.data.uniform_(-fan ** -0.5, fan ** -0.5, generator=g)
        self.head.bias.data.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x * 2.0 - 1.0
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
        return self.head(h.mean(dim=(2, 3)))


class TextEncoder(nn.Module):
    def __init__(self, vocab_size: int, d_embed: int, d_tok: int = 64,
                 hidden: int = 128):
        super().__init__()
        self.embed = nn.Embedding(vocab_size + 1, d_tok)
        self.rnn = nn.GRU(d_tok, hidden, batch_first=True, bidirectional=True)
        self.head = nn.Linear(2 * hidden, d_embed)

    def init_params(self, g: torch.Generator) -> None:
        self.embed.weight.data.normal_(0.0, 1.0, generator=g)
        bound = 1.0 / (self.rnn.hidden_size ** 0.5)
        for p in self.rnn.parameters():
            p.data.uniform_(-bound, bound, generator=g)
        fan = self.head.in_features
        self.head.weight.data.uniform_(-fan ** -0.5, fan ** -0.5, generator=g)
        self.head.bias.data.zero_()

    def forward(self, idx: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        x = self.embed(idx)
        packed = nn.utils.rnn.pack_padded_sequence(
            x, lengths.cpu(), batch_first=True, enforce_sorted=False)
        _, h_n = self.rnn(packed)
        return self.head(torch.cat([h_n[0], h_n[1]], dim=1))


class RetrievalEncoders(nn.Module):
    """Image and text towers sharing an L2-normalized embedding space."""

    def __init__(self, resolution: int, vocab_size: int, d_embed: int = 128):
        super().__init__()
        self.resolution = resolution
        self.vocab_size = vocab_size
        self.d_embed = d_embed
        self.image = ImageEncoder(resolution, d_embed)
        self.text = TextEncoder(vocab_size, d_embed)

    def init_params(self, g: torch.Generator) -> None:
        self.image.init_params(g)
        self.text.init_params(g)

    def embed_images_t(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[0] == 0:
            raise RetrievalError("empty image batch")
        return F.normalize(self.image(x), dim=-1)

    def embed_texts_t(self, idx: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        if idx.shape[0] == 0:
            raise RetrievalError("empty text batch")
        return F.normalize(self.text(idx, lengths), dim=-1)


def embed_images(encoders: RetrievalEncoders, pixels: np.ndarray) -> np.ndarray:
    """Unit-norm embedding rows for a batch of H x W x 3 images."""
    encoders.eval()
    with torch.no_grad():
        out = encoders.embed_images_t(pixels_to_tensor(pixels))
    return out.numpy().reshape(-1, encoders.d_embed)


def embed_texts(encoders: RetrievalEncoders, vocab: Vocabulary,
                token_lists: list[list[str]]) -> np.ndarray:
    encoders.eval()
    if not token_lists:
        raise RetrievalError("empty text batch")
    idx, lengths = _index_batch(vocab, token_lists)
    with torch.no_grad():
        return encoders.embed_texts_t(idx, lengths).numpy()


# ---------------------------------------------------------------------------
# Distances and the batch-hard loss


def _pairwise_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Euclidean distance matrix; identical rows give exactly zero."""
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"dimension mismatch {a.shape[-1]} vs {b.shape[-1]}")
    d2 = (a.unsqueeze(1) - b.unsqueeze(0)).pow(2).sum(dim=-1)
    zero = d2 == 0
    # Epsilon only under the sqrt of masked-out zeros keeps both the value
    # and the gradient exact at coincident rows.
    return torch.sqrt(d2 + zero.to(d2.dtype) * 1e-12) * (~zero).to(d2.dtype)


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _pairwise_t(torch.as_tensor(np.asarray(a)),
                       torch.as_tensor(np.asarray(b))).numpy()


@dataclass
class EmbeddingBatch:
    f_img: torch.Tensor
    f_txt: torch.Tensor
    img_pair_ids: list
    txt_pair_ids: list
    img_class_ids: list = field(default_factory=list)
    txt_class_ids: list = field(default_factory=list)
    img_origin: list = field(default_factory=list)
    txt_origin: list = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.f_img.shape[0] != len(self.img_pair_ids):
            raise ValueError("image rows and pair ids disagree")
        if self.f_txt.shape[0] != len(self.txt_pair_ids):
            raise ValueError("text rows and pair ids disagree")


def batch_hard_triplet_loss(batch: EmbeddingBatch, cfg: TripletConfig,
                            skip_empty_positives: bool = False) -> torch.Tensor:
    """Mean over anchors of max(0, max d_ap - min d_an + m), batch-hard.

    Every image and text row is an anchor. Positives: opposite-modality rows
    sharing the anchor's pair id (class id in class-level mode). Negatives:
    rows of either modality with a different id.
    """
    if cfg.class_level:
        ids = list(batch.img_class_ids) + list(batch.txt_class_ids)
    else:
        ids = list(batch.img_pair_ids) + list(batch.txt_pair_ids)
    codes = {pid: i for i, pid in enumerate(dict.fromkeys(ids))}
    if len(codes) < 2:
        raise RetrievalError(
            f"batch needs at least 2 distinct pair ids, got {len(codes)}")
    id_t = torch.tensor([codes[p] for p in ids])
    n_img = batch.f_img.shape[0]
    emb = torch.cat([batch.f_img, batch.f_txt], dim=0)
    is_img = torch.zeros(emb.shape[0], dtype=torch.bool)
    is_img[:n_img] = True

    same_id = id_t[:, None] == id_t[None, :]
    opposite = is_img[:, None] != is_img[None, :]
    pos_mask = same_id & opposite
    neg_mask = ~same_id

    has_pos = pos_mask.any(dim=1)
    has_neg = neg_mask.any(dim=1)
    valid = has_pos & has_neg
    if not valid.any():
        raise RetrievalError("no anchor with both a positive and a negative")
    if not skip_empty_positives and not has_pos.all():
        missing = int((~has_pos).sum())
        raise RetrievalError(
            f"{missing} anchors have no positive; only the unpaired mode "
            f"may skip them")

    d = _pairwise_t(emb, emb)
    inf = torch.tensor(float("inf"), dtype=d.dtype)
    d_ap = d.masked_fill(~pos_mask, -inf).max(dim=1).values
    d_an = d.masked_fill(~neg_mask, inf).min(dim=1).values
    hinge = F.relu(d_ap[valid] - d_an[valid] + cfg.margin)
    return hinge.mean()


# ---------------------------------------------------------------------------
# Training


def _val_r1(encoders: RetrievalEncoders, dataset: Dataset, split: str = "val",
            ) -> float:
    records = dataset.split_records(split)
    encoders.eval()
    with torch.no_grad():
        f_img = encoders.embed_images_t(pixels_to_tensor(
            np.stack([dataset.images[r.image_id] for r in records])))
        idx, lengths = _index_batch(dataset.vocab, [r.tokens for r in records])
        f_txt = encoders.embed_texts_t(idx, lengths)
    encoders.train()
    i2t = evalkit.paired_recall(f_img.numpy(), f_txt.numpy(), ks=(1,))[1]
    t2i = evalkit.paired_recall(f_txt.numpy(), f_img.numpy(), ks=(1,))[1]
    return (i2t + t2i) / 2.0


def _check_mode_config(cfg: RetrievalConfig, aug: ReplacementConfig,
                       aligner_enc, gan) -> None:
    if cfg.mode == "baseline" and aug.r > 0:
        raise RetrievalError(
            "baseline mode is the r = 0 arm; got r > 0 (use joint mode for "
            "augmented training)")
    needs_images = cfg.mode in ("joint", "pretrain_finetune", "noise_pair",
                                "unpaired")
    if needs_images and (cfg.scale > 0 or cfg.mode == "pretrain_finetune"):
        if aligner_enc is None or gan is None:
            raise RetrievalError(
                f"mode {cfg.mode!r} generates augmented images and needs the "
                f"aligner and gan checkpoints (run train-align first)")


class _AugSource:
    """Per-epoch augmented-row factory with per-sample rng streams."""

    def __init__(self, dataset: Dataset, aug: ReplacementConfig,
                 aligner_enc: Optional[TextAlignEncoder],
                 gan: Optional[GanState], root_seed: int):
        self.dataset = dataset
        self.aug = aug
        self.aligner = aligner_enc
        self.gan = gan
        self.root_seed = root_seed

    def make(self, records, epoch: int, with_images: bool,
             ) -> tuple[list[list[str]], Optional[torch.Tensor], list, list]:
        """Returns (token lists, generated images or None, source caption
        ids, class ids) for one batch of source records."""
        token_lists = []
        sources = []
        classes = []
        occurrence: dict[str, int] = {}
        for rec in records:
            occ = occurrence.get(rec.caption_id, 0)
            occurrence[rec.caption_id] = occ + 1
            rng = np_rng(self.root_seed, "augment", rec.caption_id,
                         "epoch", epoch, "occ", occ)
            tokens, _ = replace_tokens(rec, self.aug, self.dataset.vocab,
                                       self.dataset.pos_vocab, rng)
            token_lists.append(tokens)
            sources.append(rec.caption_id)
            classes.append(rec.class_id)
        images = None
        if with_images and token_lists:
            idx, lengths = _index_batch(self.dataset.vocab, token_lists)
            self.aligner.eval()
            with torch.no_grad():
                w = self.aligner(idx, lengths)
                images = self.gan.synthesize_batch(w)
        return token_lists, images, sources, classes


def _select_sources(records, scale: float, rng: np.random.Generator):
    n = len(records)
    m = int(round(scale * n))
    if m == 0 or n == 0:
        return []
    if m == n:
        return list(records)
    order = rng.permutation(n).tolist()
    chosen = order[:min(m, n)]
    if m > n:
        chosen += rng.integers(0, n, size=m - n).tolist()
    return [records[i] for i in chosen]


def train_retrieval(dataset: Dataset, cfg: RetrievalConfig,
                    aug: ReplacementConfig, root_seed: int, out_dir: Path,
                    aligner_enc: Optional[TextAlignEncoder] = None,
                    gan: Optional[GanState] = None) -> RetrievalEncoders:
    """Train under one mode; keeps the best-validation checkpoint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _check_mode_config(cfg, aug, aligner_enc, gan)

    records = dataset.split_records("train")
    n = len(records)
    imgs_all = pixels_to_tensor(
        np.stack([dataset.images[r.image_id] for r in records]))
    idx_all, len_all = _index_batch(dataset.vocab, [r.tokens for r in records])
    classes = [r.class_id for r in records]
    pair_ids = [r.caption_id for r in records]

    encoders = RetrievalEncoders(dataset.manifest.resolution,
                                 len(dataset.vocab), cfg.d_embed)
    encoders.init_params(torch_gen(root_seed, "retrieval", "init"))
    encoders.train()
    opt = torch.optim.Adam(encoders.parameters(), lr=cfg.lr)
    aug_source = _AugSource(dataset, aug, aligner_enc, gan, root_seed)

    if cfg.mode == "pretrain_finetune":
        phases = [("pretrain", cfg.pretrain_epochs), ("finetune", cfg.epochs)]
    else:
        phases = [(cfg.mode, cfg.epochs)]

    history: list[tuple[int, float, float]] = []
    best_r1 = -1.0
    best_state = None
    best_epoch = -1
    epoch_counter = 0

    for phase, phase_epochs in phases:
        for ep in range(phase_epochs):
            lr = cfg.lr * (cfg.lr_decay if ep >= cfg.decay_epoch else 1.0)
            opt.param_groups[0]["lr"] = lr
            perm = np_rng(root_seed, "retrieval", "shuffle", phase, ep,
                          ).permutation(n).tolist()
            total, seen = 0.0, 0
            for start in range(0, n, cfg.batch_pairs):
                sel = perm[start:start + cfg.batch_pairs]
                if len(sel) < 2:
                    continue
                batch_recs = [records[i] for i in sel]
                loss = _train_batch(
                    encoders, cfg, aug_source, phase, epoch_counter, sel,
                    batch_recs, imgs_all, idx_all, len_all, classes, pair_ids,
                    root_seed, start)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                total += float(loss) * len(sel)
                seen += len(sel)
            val_r1 = _val_r1(encoders, dataset)
            history.append((epoch_counter, total / seen, val_r1))
            if val_r1 > best_r1:
                best_r1, best_epoch = val_r1, epoch_counter
                best_state = {k: v.detach().clone()
                              for k, v in encoders.state_dict().items()}
            epoch_counter += 1

    encoders.eval()
    _save_run(out_dir, encoders, best_state, best_epoch, best_r1, history,
              cfg, aug, dataset.vocab, root_seed)
    return encoders


def _train_batch(encoders, cfg, aug_source, phase, epoch, sel, batch_recs,
                 imgs_all, idx_all, len_all, classes, pair_ids, root_seed,
                 start) -> torch.Tensor:
    sel_t = torch.tensor(sel, dtype=torch.int64)
    img_rows, txt_rows = [], []
    img_ids, txt_ids, img_cls, txt_cls = [], [], [], []
    img_org, txt_org = [], []

    def add_real() -> None:
        img_rows.append(encoders.embed_images_t(imgs_all[sel_t]))
        txt_rows.append(encoders.embed_texts_t(idx_all[sel_t], len_all[sel_t]))
        for i in sel:
            img_ids.append(pair_ids[i])
            txt_ids.append(pair_ids[i])
            img_cls.append(classes[i])
            txt_cls.append(classes[i])
            img_org.append("real")
            txt_org.append("real")

    if phase == "pretrain":
        aug_records = _select_sources(
            batch_recs, max(cfg.scale, 1.0),
            np_rng(root_seed, "retrieval", "scale", phase, epoch, start))
    elif phase == "finetune" or cfg.mode == "baseline":
        add_real()
        aug_records = []
    else:
        add_real()
        aug_records = _select_sources(
            batch_recs, cfg.scale,
            np_rng(root_seed, "retrieval", "scale", phase, epoch, start))

    if aug_records:
        with_images = cfg.mode != "text_only"
        tokens, images, sources, src_cls = aug_source.make(
            aug_records, epoch, with_images)
        aidx, alen = _index_batch(aug_source.dataset.vocab, tokens)
        txt_rows.append(encoders.embed_texts_t(aidx, alen))
        occ_count: dict[str, int] = {}
        for src, c in zip(sources, src_cls):
            occ = occ_count.get(src, 0)
            occ_count[src] = occ + 1
            if cfg.mode in ("noise_pair", "text_only"):
                t_id = src
            elif cfg.mode == "unpaired":
                t_id = ("augS", src, epoch, occ)
            else:
                t_id = ("aug", src, epoch, occ)
            txt_ids.append(t_id)
            txt_cls.append(c)
            txt_org.append("augmented")
        if with_images:
            img_rows.append(encoders.embed_images_t(images))
            occ_count = {}
            for src, c in zip(sources, src_cls):
                occ = occ_count.get(src, 0)
                occ_count[src] = occ + 1
                if cfg.mode == "noise_pair":
                    i_id = src
                elif cfg.mode == "unpaired":
                    i_id = ("augI", src, epoch, occ)
                else:
                    i_id = ("aug", src, epoch, occ)
                img_ids.append(i_id)
                img_cls.append(c)
                img_org.append("augmented")

    batch = EmbeddingBatch(
        f_img=torch.cat(img_rows) if img_rows else torch.zeros(0, cfg.d_embed),
        f_txt=torch.cat(txt_rows),
        img_pair_ids=img_ids, txt_pair_ids=txt_ids,
        img_class_ids=img_cls, txt_class_ids=txt_cls,
        img_origin=img_org, txt_origin=txt_org,
    )
    return batch_hard_triplet_loss(batch, cfg.triplet(),
                                   skip_empty_positives=cfg.mode == "unpaired")


# ---------------------------------------------------------------------------
# Run directory IO


def _save_run(out_dir: Path, encoders, best_state, best_epoch, best_r1,
              history, cfg, aug, vocab, seed) -> None:
    torch.save({"state": encoders.state_dict(),
                "resolution": encoders.resolution,
                "vocab_size": encoders.vocab_size,
                "d_embed": encoders.d_embed}, out_dir / "encoders.pt")
    if best_state is None:
        best_state = encoders.state_dict()
    torch.save({"state": best_state,
                "resolution": encoders.resolution,
                "vocab_size": encoders.vocab_size,
                "d_embed": encoders.d_embed}, out_dir / "encoders_best.pt")
    with open(out_dir / "epochs.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "val_r1"])
        for epoch, loss, r1 in history:
            writer.writerow([epoch, f"{loss:.6f}", f"{r1:.4f}"])
    datakit._write_json(out_dir / "retrieval.json", {
        "schema_version": RETRIEVAL_SCHEMA_VERSION,
        "mode": cfg.mode,
        "seed": seed,
        "best_epoch": best_epoch,
        "best_val_r1": round(best_r1, 4),
        "vocab_hash": vocab_hash(vocab),
        "config": asdict(cfg),
        "augmentation": asdict(aug),
    })


def load_retrieval(out_dir: Path, which: str = "best") -> RetrievalEncoders:
    out_dir = Path(out_dir)
    meta = json.loads((out_dir / "retrieval.json").read_text())
    if meta.get("schema_version") != RETRIEVAL_SCHEMA_VERSION:
        raise RetrievalError(
            f"unsupported retrieval schema {meta.get('schema_version')!r}")
    name = "encoders_best.pt" if which == "best" else "encoders.pt"
    blob = torch.load(out_dir / name, weights_only=True)
    encoders = RetrievalEncoders(blob["resolution"], blob["vocab_size"],
                                 blob["d_embed"])
    encoders.load_state_dict(blob["state"])
    encoders.eval()
    return encoders
