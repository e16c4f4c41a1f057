"""Token-replacement augmentation with online paired image generation.

Selects ceil(r * N) caption positions, substitutes tokens from the corpus
vocabulary (random strategy) or from the same-POS candidate set (pos
strategy), and renders the augmented caption through the aligned generator
so the replaced text arrives with a matching image.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datakit
from .aligner import TextAlignEncoder, text_to_image
from .datakit import (CaptionRecord, Dataset, PosVocabulary, Vocabulary,
                      build_lexicon, tag_pos)
from .ganlite import GanState
from .seeding import np_rng

log = logging.getLogger(__name__)


@dataclass
class ReplacementConfig:
    r: float = 0.7
    strategy: str = "random"
    exclude_original: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.r <= 1.0:
            raise ValueError(f"replacement rate must be in [0, 1], got {self.r}")
        if self.strategy not in ("random", "pos"):
            raise ValueError(f"unknown strategy {self.strategy!r}")


@dataclass
class AugmentedPair:
    caption_id: str
    tokens_prime: list[str]
    replaced_positions: list[int]
    image_prime: np.ndarray
    provenance: dict = field(default_factory=dict)


def select_replacement_positions(n: int, r: float,
                                 rng: np.random.Generator) -> list[int]:
    """Uniform sample of exactly ceil(r * n) positions; empty for r = 0."""
    if n < 1:
        raise ValueError("caption must have at least one token")
    if r == 0.0:
        return []
    k = math.ceil(r * n)
    return sorted(rng.choice(n, size=k, replace=False).tolist())


def replace_tokens(record: CaptionRecord, cfg: ReplacementConfig,
                   vocab: Vocabulary, pos_vocab: PosVocabulary,
                   rng: np.random.Generator,
                   ) -> tuple[list[str], list[int]]:
    """Substitute the selected positions; unselected tokens pass through.

    A position whose candidate set is empty after exclusion keeps its
    original token and is dropped from the replaced set with a warning.
    """
    tokens = list(record.tokens)
    positions = select_replacement_positions(len(tokens), cfg.r, rng)
    replaced: list[int] = []
    for pos in positions:
        original = tokens[pos]
        if cfg.strategy == "random":
            pool = vocab.tokens
        else:
            pool = pos_vocab.tokens_for(record.pos_tags[pos])
        if cfg.exclude_original:
            candidates = [t for t in pool if t != original]
        else:
            candidates = list(pool)
        if not candidates:
            log.warning(
                "caption %s position %d (%r, tag %s): no replacement "
                "candidates, keeping original",
                record.caption_id, pos, original, record.pos_tags[pos])
            continue
        tokens[pos] = candidates[int(rng.integers(len(candidates)))]
        replaced.append(pos)
    return tokens, replaced


def generate_augmented_pair(record: CaptionRecord, cfg: ReplacementConfig,
                            encoder: TextAlignEncoder, vocab: Vocabulary,
                            pos_vocab: PosVocabulary, gan: GanState,
                            rng: np.random.Generator,
                            seed: int | None = None) -> AugmentedPair:
    """S' from replace_tokens, I' = G(E_l(S'))."""
    tokens_prime, replaced = replace_tokens(record, cfg, vocab, pos_vocab, rng)
    image_prime = text_to_image(encoder, vocab, gan, tokens_prime)
    return AugmentedPair(
        caption_id=record.caption_id,
        tokens_prime=tokens_prime,
        replaced_positions=replaced,
        image_prime=image_prime,
        provenance={"seed": seed, "r": cfg.r, "strategy": cfg.strategy},
    )


def augment_batch(records: list[CaptionRecord], cfg: ReplacementConfig,
                  encoder: TextAlignEncoder, vocab: Vocabulary,
                  pos_vocab: PosVocabulary, gan: GanState,
                  rng: np.random.Generator, scale: float = 1.0,
                  seed: int | None = None) -> list[AugmentedPair]:
    """round(scale * len(records)) pairs; sources drawn without replacement
    first, then with replacement once the batch is exhausted."""
    if scale < 0:
        raise ValueError(f"scale must be nonnegative, got {scale}")
    n = len(records)
    m = int(round(scale * n))
    if m == 0 or n == 0:
        return []
    order = rng.permutation(n).tolist()
    sources = order[:min(m, n)]
    if m > n:
        sources += rng.integers(0, n, size=m - n).tolist()
    return [
        generate_augmented_pair(records[i], cfg, encoder, vocab, pos_vocab,
                                gan, rng, seed=seed)
        for i in sources
    ]


def augment_offline(dataset: Dataset, cfg: ReplacementConfig,
                    encoder: TextAlignEncoder, gan: GanState, root_seed: int,
                    out_dir: Path, scale: float = 1.0,
                    split: str = "train") -> int:
    """Materialize augmented pairs on disk in the dataset directory layout.

    Writes images/, captions.jsonl, and provenance.jsonl; keyed by seed so a
    re-run reproduces the same files. Returns the number of pairs written.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records = dataset.split_records(split)
    rng = np_rng(root_seed, "augment", "offline", split)
    lexicon = build_lexicon(dataset.manifest.template)
    pairs = augment_batch(records, cfg, encoder, dataset.vocab,
                          dataset.pos_vocab, gan, rng, scale=scale,
                          seed=root_seed)
    cap_lines = []
    prov_lines = []
    for i, pair in enumerate(pairs):
        image_id = f"aug-img-{i:05d}"
        caption_id = f"aug-cap-{i:05d}"
        source = dataset.captions[pair.caption_id]
        datakit.save_image(pair.image_prime, out_dir / "images" / f"{image_id}.png")
        cap_lines.append({
            "caption_id": caption_id,
            "image_id": image_id,
            "tokens": pair.tokens_prime,
            "pos_tags": tag_pos(pair.tokens_prime, lexicon),
            "class_id": source.class_id,
        })
        prov_lines.append({
            "caption_id": caption_id,
            "source_caption_id": pair.caption_id,
            "replaced_positions": pair.replaced_positions,
            "r": cfg.r,
            "strategy": cfg.strategy,
            "seed": root_seed,
        })
    datakit._write_jsonl(out_dir / "captions.jsonl", cap_lines)
    datakit._write_jsonl(out_dir / "provenance.jsonl", prov_lines)
    return len(pairs)
