"""Text-to-latent alignment.

A small bidirectional GRU encoder regresses captions onto the projected
latent codes of their paired images; the projected codes are constants.
Once trained, text drives generation through G(E_l(S)).
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import datakit, ganlite
from .datakit import Dataset, Vocabulary
from .projector import LatentStore
from .seeding import torch_gen

ALIGN_SCHEMA_VERSION = 1


class AlignmentError(RuntimeError):
    pass


@dataclass
class AlignConfig:
    d_embed: int = 64
    hidden: int = 128
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3


def vocab_hash(vocab: Vocabulary) -> str:
    payload = json.dumps(vocab.tokens).encode()
    return hashlib.sha256(payload).hexdigest()


class TextAlignEncoder(nn.Module):
    """Embedding + one-layer bi-GRU; concatenated final states -> d_w head."""

    def __init__(self, vocab_size: int, d_w: int, d_embed: int = 64,
                 hidden: int = 128):
        super().__init__()
        self.vocab_size = vocab_size
        self.d_w = d_w
        # Index vocab_size is the UNK row.
        self.embed = nn.Embedding(vocab_size + 1, d_embed)
        self.rnn = nn.GRU(d_embed, hidden, batch_first=True, bidirectional=True)
        self.head = nn.Linear(2 * hidden, d_w)

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
        final = torch.cat([h_n[0], h_n[1]], dim=1)
        return self.head(final)


def tokens_to_indices(vocab: Vocabulary, tokens: list[str]) -> list[int]:
    unk = len(vocab)
    return [vocab.index.get(t, unk) for t in tokens]


def _index_batch(vocab: Vocabulary, token_lists: list[list[str]],
                 ) -> tuple[torch.Tensor, torch.Tensor]:
    if not token_lists:
        raise AlignmentError("empty caption batch")
    lengths = torch.tensor([len(t) for t in token_lists], dtype=torch.int64)
    if (lengths == 0).any():
        raise AlignmentError("empty token list in batch")
    width = int(lengths.max())
    idx = torch.zeros(len(token_lists), width, dtype=torch.int64)
    for i, toks in enumerate(token_lists):
        idx[i, :len(toks)] = torch.tensor(tokens_to_indices(vocab, toks))
    return idx, lengths


def encode_text_to_w(encoder: TextAlignEncoder, vocab: Vocabulary,
                     tokens: list[str]) -> np.ndarray:
    """Deterministic d_w code for one caption; OOV tokens hit the UNK row."""
    if len(tokens) == 0:
        raise AlignmentError("cannot encode an empty token list")
    idx, lengths = _index_batch(vocab, [tokens])
    encoder.eval()
    with torch.no_grad():
        return encoder(idx, lengths)[0].numpy()


def align_loss_t(t: torch.Tensor, w_opt: torch.Tensor) -> torch.Tensor:
    """Squared Euclidean distance; mean over the batch dimension if present."""
    if t.shape[-1] != w_opt.shape[-1]:
        raise AlignmentError(
            f"dimension mismatch {t.shape[-1]} vs {w_opt.shape[-1]}")
    return (w_opt - t).pow(2).sum(dim=-1).mean()


def align_loss(t: np.ndarray, w_opt: np.ndarray) -> float:
    return float(align_loss_t(torch.as_tensor(np.asarray(t, dtype=np.float64)),
                              torch.as_tensor(np.asarray(w_opt, dtype=np.float64))))


def train_alignment(dataset: Dataset, store: LatentStore, cfg: AlignConfig,
                    root_seed: int, out_dir: Path) -> TextAlignEncoder:
    """Regress every training caption onto its paired image's latent row."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = dataset.split_records("train")
    lookup = store.lookup()
    targets = []
    token_lists = []
    for rec in records:
        if rec.image_id not in lookup:
            raise AlignmentError(
                f"caption {rec.caption_id} references image {rec.image_id} "
                f"absent from the latent store")
        token_lists.append(rec.tokens)
        targets.append(lookup[rec.image_id])
    idx_all, len_all = _index_batch(dataset.vocab, token_lists)
    w_all = torch.from_numpy(np.stack(targets))

    d_w = w_all.shape[1]
    encoder = TextAlignEncoder(len(dataset.vocab), d_w, cfg.d_embed, cfg.hidden)
    encoder.init_params(torch_gen(root_seed, "align", "init"))
    opt = torch.optim.Adam(encoder.parameters(), lr=cfg.lr)
    gen = torch_gen(root_seed, "align", "shuffle")

    n = len(records)
    history: list[tuple[int, float]] = []
    encoder.train()
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            sel = perm[start:start + cfg.batch_size]
            pred = encoder(idx_all[sel], len_all[sel])
            loss = align_loss_t(pred, w_all[sel])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss) * len(sel)
        history.append((epoch, total / n))

    encoder.eval()
    with open(out_dir / "loss_history.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss"])
        for epoch, loss in history:
            writer.writerow([epoch, f"{loss:.6f}"])
    save_aligner(encoder, dataset.vocab, root_seed, out_dir)
    return encoder


def text_to_image(encoder: TextAlignEncoder, vocab: Vocabulary,
                  gan: ganlite.GanState, tokens: list[str]) -> np.ndarray:
    return ganlite.synthesize(gan, encode_text_to_w(encoder, vocab, tokens))


def save_aligner(encoder: TextAlignEncoder, vocab: Vocabulary, seed: int,
                 out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.save({
        "state": encoder.state_dict(),
        "vocab_size": encoder.vocab_size,
        "d_w": encoder.d_w,
        "d_embed": encoder.embed.embedding_dim,
        "hidden": encoder.rnn.hidden_size,
    }, out_dir / "align.pt")
    datakit._write_json(out_dir / "align.json", {
        "schema_version": ALIGN_SCHEMA_VERSION,
        "d_w": encoder.d_w,
        "vocab_hash": vocab_hash(vocab),
        "seed": seed,
    })
    return out_dir / "align.pt"


def load_aligner(out_dir: Path, vocab: Vocabulary | None = None) -> TextAlignEncoder:
    out_dir = Path(out_dir)
    meta = json.loads((out_dir / "align.json").read_text())
    if meta.get("schema_version") != ALIGN_SCHEMA_VERSION:
        raise AlignmentError(
            f"unsupported aligner schema {meta.get('schema_version')!r}")
    if vocab is not None and vocab_hash(vocab) != meta["vocab_hash"]:
        raise AlignmentError("aligner was trained against a different vocabulary")
    blob = torch.load(out_dir / "align.pt", weights_only=True)
    encoder = TextAlignEncoder(blob["vocab_size"], blob["d_w"],
                               blob["d_embed"], blob["hidden"])
    encoder.load_state_dict(blob["state"])
    encoder.eval()
    return encoder
