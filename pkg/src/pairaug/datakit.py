"""Synthetic captioned-shapes dataset: rendering, generation, vocabularies, IO.

One sample is a single colored shape on a plain background plus a templated
caption describing it. Rendering is exact (no anti-aliasing), captions carry
per-token POS tags from a closed lexicon, and (shape, color) defines the
class id, so every semantic check downstream can be done by direct
comparison instead of human judgment.

On-disk layout of a dataset directory:

    manifest.json           schema-versioned index (splits, pairs, image attrs)
    images/<image_id>.png   8-bit RGB
    captions.jsonl          one record per line
    vocab.json              token list, order = first occurrence
    pos_vocab.json          tag -> token list
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image

SCHEMA_VERSION = 1

SHAPES = ["circle", "square", "triangle", "cross"]

COLORS = {
    "red": (220, 40, 40),
    "green": (40, 180, 70),
    "blue": (45, 90, 220),
    "yellow": (235, 220, 50),
    "purple": (150, 60, 200),
    "orange": (240, 140, 30),
}

BG_COLORS = {
    "white": (255, 255, 255),
    "gray": (128, 128, 128),
    "black": (0, 0, 0),
}

# Shape extent (bounding-box side) as a fraction of the canvas; all three
# give even pixel counts for resolutions that are multiples of 16.
SIZES = {"small": 0.125, "medium": 0.1875, "large": 0.25}

DEFAULT_TEMPLATE = "a {size} {color} {shape} on a {bg} background"

SLOT_POS = {"size": "ADJ", "color": "ADJ", "shape": "NOUN", "bg": "ADJ"}
LITERAL_POS = {
    "a": "DET",
    "an": "DET",
    "the": "DET",
    "on": "ADP",
    "in": "ADP",
    "background": "NOUN",
}
UNK_TAG = "UNK"

N_CLASSES = len(SHAPES) * len(COLORS)
N_HELDOUT_CLASSES = 6


class DatasetError(Exception):
    """Base for dataset generation/validation failures."""


class DatasetValidationError(DatasetError):
    """A loaded dataset violates an invariant; message names the record."""


# ---------------------------------------------------------------------------
# Domain types


@dataclass
class SynthAttrSpec:
    """Attributes of one synthetic sample. position = (row, col) center offset."""

    shape: str
    color: str
    size: str
    bg_color: str
    position: tuple[int, int] = (0, 0)

    def validate(self, resolution: int) -> None:
        if self.shape not in SHAPES:
            raise DatasetError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise DatasetError(f"unknown color {self.color!r}")
        if self.size not in SIZES:
            raise DatasetError(f"unknown size {self.size!r}")
        if self.bg_color not in BG_COLORS:
            raise DatasetError(f"unknown bg color {self.bg_color!r}")
        ext = shape_extent(self.size, resolution)
        cy = resolution // 2 + self.position[0]
        cx = resolution // 2 + self.position[1]
        if cy - ext // 2 < 0 or cy + ext // 2 > resolution \
                or cx - ext // 2 < 0 or cx + ext // 2 > resolution:
            raise DatasetError(
                f"shape out of canvas: size={self.size} position={self.position} "
                f"resolution={resolution}"
            )

    @property
    def class_id(self) -> int:
        return SHAPES.index(self.shape) * len(COLORS) + COLORS_ORDER.index(self.color)


COLORS_ORDER = list(COLORS)
BG_ORDER = list(BG_COLORS)
SIZES_ORDER = list(SIZES)


@dataclass
class CaptionRecord:
    caption_id: str
    image_id: str
    tokens: list[str]
    pos_tags: list[str]
    class_id: Optional[int] = None

    def validate(self) -> None:
        if len(self.tokens) == 0:
            raise DatasetValidationError(f"caption {self.caption_id}: empty token list")
        if len(self.tokens) != len(self.pos_tags):
            raise DatasetValidationError(
                f"caption {self.caption_id}: {len(self.tokens)} tokens vs "
                f"{len(self.pos_tags)} pos tags"
            )
        for tok in self.tokens:
            if not tok or any(c.isspace() for c in tok):
                raise DatasetValidationError(
                    f"caption {self.caption_id}: bad token {tok!r}"
                )


@dataclass
class Vocabulary:
    tokens: list[str]
    index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.index:
            self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DatasetError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, tok: str) -> bool:
        return tok in self.index


@dataclass
class PosVocabulary:
    by_tag: dict[str, list[str]]

    def tokens_for(self, tag: str) -> list[str]:
        return self.by_tag.get(tag, [])


@dataclass
class DatasetManifest:
    name: str
    resolution: int
    splits: dict[str, list[str]]          # split -> caption_ids
    pairs: list[dict[str, str]]           # {caption_id, image_id}
    images: dict[str, dict]               # image_id -> {class_id, attrs}
    class_split: dict[str, list[int]]     # {"train": [...], "heldout": [...]}
    palette: dict
    vocab_path: str = "vocab.json"
    pos_vocab_path: str = "pos_vocab.json"
    template: str = DEFAULT_TEMPLATE
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "name": self.name,
            "resolution": self.resolution,
            "splits": self.splits,
            "pairs": self.pairs,
            "images": self.images,
            "class_split": self.class_split,
            "palette": self.palette,
            "vocab_path": self.vocab_path,
            "pos_vocab_path": self.pos_vocab_path,
            "template": self.template,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise DatasetValidationError(
                f"unsupported manifest schema_version {d.get('schema_version')!r}"
            )
        return cls(
            name=d["name"],
            resolution=d["resolution"],
            splits=d["splits"],
            pairs=d["pairs"],
            images=d["images"],
            class_split={k: list(v) for k, v in d["class_split"].items()},
            palette=d["palette"],
            vocab_path=d["vocab_path"],
            pos_vocab_path=d["pos_vocab_path"],
            template=d.get("template", DEFAULT_TEMPLATE),
        )


# ---------------------------------------------------------------------------
# Rendering


def shape_extent(size: str, resolution: int) -> int:
    """Bounding-box side in pixels; even so shapes center between pixels."""
    ext = int(round(SIZES[size] * resolution))
    return max(2, ext - ext % 2)


def render_synthetic(spec: SynthAttrSpec, resolution: int) -> np.ndarray:
    """Rasterize one sample exactly: H x W x 3 float32 in [0, 1].

    No anti-aliasing and no randomness; a pixel is either the shape color or
    the background color, decided by an exact membership test against the
    shape's geometry. The shape's continuous center sits between pixels so
    even extents are symmetric.
    """
    spec.validate(resolution)
    res = resolution
    bg = np.array(BG_COLORS[spec.bg_color], dtype=np.float32) / 255.0
    fg = np.array(COLORS[spec.color], dtype=np.float32) / 255.0
    img = np.empty((res, res, 3), dtype=np.float32)
    img[:] = bg

    ext = shape_extent(spec.size, res)
    cy = res // 2 + spec.position[0]
    cx = res // 2 + spec.position[1]
    # Continuous center between pixels (cy - 0.5, cx - 0.5).
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    dy = yy - (cy - 0.5)
    dx = xx - (cx - 0.5)
    half = ext / 2.0

    if spec.shape == "circle":
        mask = dy * dy + dx * dx <= half * half
    elif spec.shape == "square":
        mask = (np.abs(dy) < half) & (np.abs(dx) < half)
    elif spec.shape == "triangle":
        # Upright isoceles: apex row at top of the box, full base at bottom.
        depth = (dy + half) / ext          # 0 at top edge .. 1 at bottom edge
        inside_rows = (depth > 0) & (depth <= 1)
        mask = inside_rows & (np.abs(dx) <= depth * half)
    elif spec.shape == "cross":
        t = max(2, (ext // 3) - (ext // 3) % 2)
        th = t / 2.0
        hbar = (np.abs(dy) < th) & (np.abs(dx) < half)
        vbar = (np.abs(dx) < th) & (np.abs(dy) < half)
        mask = hbar | vbar
    else:  # pragma: no cover - guarded by validate
        raise DatasetError(f"unknown shape {spec.shape!r}")

    img[mask] = fg
    return img


# ---------------------------------------------------------------------------
# Template captions and POS tagging


def template_tokens(template: str) -> list[str]:
    """Split a caption template into literal tokens and {slot} placeholders."""
    toks = template.split()
    for t in toks:
        if t.startswith("{") and t.endswith("}"):
            slot = t[1:-1]
            if slot not in SLOT_POS:
                raise DatasetError(f"unknown template slot {t!r}")
    return toks


def slot_values(slot: str) -> list[str]:
    return {
        "size": SIZES_ORDER,
        "color": COLORS_ORDER,
        "shape": SHAPES,
        "bg": BG_ORDER,
    }[slot]


def build_lexicon(template: str = DEFAULT_TEMPLATE) -> dict[str, str]:
    """Token -> POS tag map covering every token the template can produce."""
    lex: dict[str, str] = {}
    for t in template_tokens(template):
        if t.startswith("{"):
            slot = t[1:-1]
            for v in slot_values(slot):
                lex[v] = SLOT_POS[slot]
        else:
            lex[t] = LITERAL_POS.get(t, UNK_TAG)
    return lex


def tag_pos(tokens: Iterable[str], lexicon: dict[str, str]) -> list[str]:
    """Per-token lexicon lookup; unknown tokens get the UNK tag."""
    return [lexicon.get(t, UNK_TAG) for t in tokens]


def caption_for(spec: SynthAttrSpec, template: str = DEFAULT_TEMPLATE) -> list[str]:
    values = {"size": spec.size, "color": spec.color, "shape": spec.shape,
              "bg": spec.bg_color}
    out = []
    for t in template_tokens(template):
        if t.startswith("{"):
            out.append(values[t[1:-1]])
        else:
            out.append(t)
    return out


def parse_caption_attributes(tokens: list[str],
                             template: str = DEFAULT_TEMPLATE) -> dict[str, str]:
    """Read attribute slots back out of a (possibly token-replaced) caption.

    A slot is returned only when the token at the slot's position is a valid
    value for that attribute; anything else (including captions whose length
    no longer matches the template) is ambiguous and omitted.
    """
    ttoks = template_tokens(template)
    if len(tokens) != len(ttoks):
        return {}
    out: dict[str, str] = {}
    for tok, tt in zip(tokens, ttoks):
        if tt.startswith("{"):
            slot = tt[1:-1]
            if tok in slot_values(slot):
                out[slot] = tok
    return out


# ---------------------------------------------------------------------------
# Vocabularies


def build_vocab(captions: list[CaptionRecord]) -> Vocabulary:
    """Distinct tokens over the corpus, ordered by first occurrence."""
    if not captions:
        raise DatasetError("cannot build a vocabulary from an empty corpus")
    tokens: list[str] = []
    seen: set[str] = set()
    for rec in captions:
        for tok in rec.tokens:
            if tok not in seen:
                seen.add(tok)
                tokens.append(tok)
    return Vocabulary(tokens=tokens)


def build_pos_vocab(captions: list[CaptionRecord]) -> PosVocabulary:
    """tag -> distinct tokens ever carrying that tag, by first occurrence."""
    by_tag: dict[str, list[str]] = {}
    seen: dict[str, set[str]] = {}
    for rec in captions:
        if len(rec.pos_tags) != len(rec.tokens):
            raise DatasetValidationError(
                f"caption {rec.caption_id}: missing or misaligned pos tags"
            )
        for tok, tag in zip(rec.tokens, rec.pos_tags):
            bucket = seen.setdefault(tag, set())
            if tok not in bucket:
                bucket.add(tok)
                by_tag.setdefault(tag, []).append(tok)
    return PosVocabulary(by_tag=by_tag)


# ---------------------------------------------------------------------------
# Generation


@dataclass
class SynthConfig:
    resolution: int = 64
    train: int = 600
    val: int = 100
    test: int = 100
    captions_per_image: int = 1
    jitter: Optional[int] = None          # default resolution // 8
    template: str = DEFAULT_TEMPLATE
    name: str = "synth-shapes"

    def validate(self) -> None:
        if self.resolution < 16 or self.resolution & (self.resolution - 1):
            raise DatasetError("resolution must be a power of two >= 16")
        if min(self.train, self.val, self.test) <= 0:
            raise DatasetError("all split counts must be positive")
        if self.captions_per_image < 1:
            raise DatasetError("captions_per_image must be >= 1")
        template_tokens(self.template)


def _draw_spec(cfg: SynthConfig, rng: np.random.Generator) -> SynthAttrSpec:
    jitter = cfg.jitter if cfg.jitter is not None else cfg.resolution // 8
    return SynthAttrSpec(
        shape=SHAPES[rng.integers(len(SHAPES))],
        color=COLORS_ORDER[rng.integers(len(COLORS_ORDER))],
        size=SIZES_ORDER[rng.integers(len(SIZES_ORDER))],
        bg_color=BG_ORDER[rng.integers(len(BG_ORDER))],
        position=(int(rng.integers(-jitter, jitter + 1)),
                  int(rng.integers(-jitter, jitter + 1))),
    )


def generate_synth_dataset(cfg: SynthConfig, out_dir: Path,
                           rng: np.random.Generator) -> "Dataset":
    """Draw samples uniformly, render, caption, and write the dataset dir."""
    cfg.validate()
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    lexicon = build_lexicon(cfg.template)

    splits: dict[str, list[str]] = {}
    pairs: list[dict[str, str]] = []
    images: dict[str, dict] = {}
    captions: list[CaptionRecord] = []
    pixel_map: dict[str, np.ndarray] = {}

    for split, count in (("train", cfg.train), ("val", cfg.val), ("test", cfg.test)):
        ids: list[str] = []
        for i in range(count):
            spec = _draw_spec(cfg, rng)
            image_id = f"img-{split}-{i:05d}"
            pixels = render_synthetic(spec, cfg.resolution)
            pixel_map[image_id] = pixels
            save_image(pixels, out_dir / "images" / f"{image_id}.png")
            images[image_id] = {
                "class_id": spec.class_id,
                "attrs": {
                    "shape": spec.shape, "color": spec.color, "size": spec.size,
                    "bg_color": spec.bg_color, "position": list(spec.position),
                },
            }
            tokens = caption_for(spec, cfg.template)
            for j in range(cfg.captions_per_image):
                cap_id = (f"cap-{split}-{i:05d}" if cfg.captions_per_image == 1
                          else f"cap-{split}-{i:05d}-{j}")
                rec = CaptionRecord(
                    caption_id=cap_id,
                    image_id=image_id,
                    tokens=list(tokens),
                    pos_tags=tag_pos(tokens, lexicon),
                    class_id=spec.class_id,
                )
                captions.append(rec)
                pairs.append({"caption_id": cap_id, "image_id": image_id})
                ids.append(cap_id)
        splits[split] = ids

    heldout = sorted(rng.choice(N_CLASSES, size=N_HELDOUT_CLASSES,
                                replace=False).tolist())
    class_split = {
        "train": [c for c in range(N_CLASSES) if c not in heldout],
        "heldout": heldout,
    }

    vocab = build_vocab(captions)
    pos_vocab = build_pos_vocab(captions)
    manifest = DatasetManifest(
        name=cfg.name,
        resolution=cfg.resolution,
        splits=splits,
        pairs=pairs,
        images=images,
        class_split=class_split,
        palette={"colors": {k: list(v) for k, v in COLORS.items()},
                 "bg_colors": {k: list(v) for k, v in BG_COLORS.items()}},
        template=cfg.template,
    )

    _write_json(out_dir / "manifest.json", manifest.to_dict())
    _write_json(out_dir / "vocab.json", {"tokens": vocab.tokens})
    _write_json(out_dir / "pos_vocab.json", {"by_tag": pos_vocab.by_tag})
    _write_jsonl(out_dir / "captions.jsonl", [{
        "caption_id": rec.caption_id, "image_id": rec.image_id,
        "tokens": rec.tokens, "pos_tags": rec.pos_tags,
        "class_id": rec.class_id,
    } for rec in captions])

    return Dataset(root=out_dir, manifest=manifest,
                   captions={c.caption_id: c for c in captions},
                   images=pixel_map, vocab=vocab, pos_vocab=pos_vocab,
                   lexicon=lexicon)


# ---------------------------------------------------------------------------
# IO


def save_image(pixels: np.ndarray, path: Path) -> None:
    arr = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def _write_json(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _write_jsonl(path: Path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


@dataclass
class Dataset:
    """A validated, fully in-memory dataset plus its manifest."""

    root: Path
    manifest: DatasetManifest
    captions: dict[str, CaptionRecord]
    images: dict[str, np.ndarray]
    vocab: Vocabulary
    pos_vocab: PosVocabulary
    lexicon: dict[str, str]

    def split_records(self, split: str) -> list[CaptionRecord]:
        return [self.captions[cid] for cid in self.manifest.splits[split]]

    def pair_image(self, caption_id: str) -> np.ndarray:
        return self.images[self.captions[caption_id].image_id]

    def save_manifest(self, path: Optional[Path] = None) -> Path:
        path = path or (self.root / "manifest.json")
        _write_json(path, self.manifest.to_dict())
        return path


def load_dataset(root: Path) -> Dataset:
    """Load and validate a dataset directory; errors name the offending record."""
    root = Path(root)
    man_path = root / "manifest.json"
    if not man_path.exists():
        raise DatasetValidationError(f"missing manifest.json under {root}")
    manifest = DatasetManifest.from_dict(json.loads(man_path.read_text()))

    for rel in (manifest.vocab_path, manifest.pos_vocab_path, "captions.jsonl"):
        if not (root / rel).exists():
            raise DatasetValidationError(f"missing dataset file {rel}")

    vocab = Vocabulary(tokens=json.loads((root / manifest.vocab_path).read_text())["tokens"])
    pos_vocab = PosVocabulary(by_tag=json.loads(
        (root / manifest.pos_vocab_path).read_text())["by_tag"])

    captions: dict[str, CaptionRecord] = {}
    with open(root / "captions.jsonl", encoding="utf-8") as f:
        for line in f:
            d = json.loads(line)
            rec = CaptionRecord(
                caption_id=d["caption_id"], image_id=d["image_id"],
                tokens=d["tokens"], pos_tags=d["pos_tags"],
                class_id=d.get("class_id"),
            )
            rec.validate()
            if rec.caption_id in captions:
                raise DatasetValidationError(f"duplicate caption id {rec.caption_id}")
            captions[rec.caption_id] = rec

    images: dict[str, np.ndarray] = {}
    for image_id in manifest.images:
        img_path = root / "images" / f"{image_id}.png"
        if not img_path.exists():
            raise DatasetValidationError(f"image {image_id}: file missing")
        pixels = load_image(img_path)
        if pixels.shape != (manifest.resolution, manifest.resolution, 3):
            raise DatasetValidationError(
                f"image {image_id}: shape {pixels.shape} does not match "
                f"resolution {manifest.resolution}"
            )
        images[image_id] = pixels

    for pair in manifest.pairs:
        if pair["caption_id"] not in captions:
            raise DatasetValidationError(
                f"pair references unknown caption {pair['caption_id']}")
        if pair["image_id"] not in images:
            raise DatasetValidationError(
                f"pair references unknown image {pair['image_id']}")

    seen_split_ids: set[str] = set()
    for split, ids in manifest.splits.items():
        for cid in ids:
            if cid not in captions:
                raise DatasetValidationError(
                    f"split {split} references unknown caption {cid}")
            if cid in seen_split_ids:
                raise DatasetValidationError(
                    f"caption {cid} appears in more than one split")
            seen_split_ids.add(cid)

    for tok in vocab.tokens:
        if not tok or any(c.isspace() for c in tok):
            raise DatasetValidationError(f"vocabulary contains bad token {tok!r}")

    return Dataset(root=root, manifest=manifest, captions=captions, images=images,
                   vocab=vocab, pos_vocab=pos_vocab,
                   lexicon=build_lexicon(manifest.template))
