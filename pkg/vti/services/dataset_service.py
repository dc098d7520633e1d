# vti/services/dataset_service.py
"""
Synthetic Corpus, Tokenizer, Vocabulary and On-Disk Dataset Format

Synthetic records pair a 32x32 grayscale image (six conditions, each drawn as a
fixed glyph in its own 8x8 block) with a report written in one of several
paraphrase families. The same directory layout also accepts real data:

    <dir>/images/rec_000000.pgm   binary PGM (P5, maxval 255)
    <dir>/manifest.jsonl          one ManifestEntry per line
    <dir>/vocab.txt               one token per line, line index = id
"""

import hashlib
import string
from collections import Counter
from pathlib import Path
from typing import Iterable

import numpy as np
from pydantic import ValidationError

from vti.core.errors import ContractViolation, DatasetIOError, ParseError
from vti.core.logger import log
from vti.schemas.manifest import ManifestEntry
from vti.schemas.records import (
    CONDITIONS,
    EOS_ID,
    SPECIAL_TOKENS,
    UNK_ID,
    DatasetRecord,
    ReportExample,
)

MANIFEST_NAME = "manifest.jsonl"
VOCAB_NAME = "vocab.txt"
IMAGES_DIR = "images"

CONDITION_PROBABILITY = 0.35
NOISE_AMPLITUDE = 0.05
BLOCK = 8

# (block row, block column) on the 4x4 grid of 8x8 blocks
CONDITION_BLOCKS = {
    "cardiomegaly": (2, 1),
    "effusion": (3, 0),
    "opacity": (1, 2),
    "pneumothorax": (0, 3),
    "fracture": (0, 0),
    "device": (2, 3),
}

# style -> condition -> paraphrases; "closing" is the sentence every report ends with
STYLE_FAMILIES: list[dict[str, list[str]]] = [
    {
        "cardiomegaly": ["the heart is enlarged", "heart size is increased", "enlarged cardiac silhouette"],
        "effusion": ["there is a pleural effusion", "pleural fluid is present", "blunting of the costophrenic angle"],
        "opacity": ["there is an airspace opacity", "focal consolidation is seen", "patchy density in the lung"],
        "pneumothorax": ["there is a pneumothorax", "pneumothorax is present", "visible pleural air collection"],
        "fracture": ["there is a rib fracture", "a fractured rib is seen", "broken rib is noted"],
        "device": ["a support device is present", "a catheter is in place", "monitoring leads are seen"],
        "closing": ["no other acute findings", "otherwise unremarkable study", "the lungs are otherwise clear"],
    },
    {
        "cardiomegaly": ["cardiomegaly", "cardiomegaly is noted", "mild cardiomegaly"],
        "effusion": ["small effusion", "effusion is noted", "left effusion"],
        "opacity": ["basilar opacity", "opacity is noted", "right consolidation"],
        "pneumothorax": ["apical pneumothorax", "pneumothorax is noted", "small pneumothorax"],
        "fracture": ["rib fracture", "fracture is noted", "old fracture"],
        "device": ["pacemaker in place", "tube in place", "lines in place"],
        "closing": ["otherwise normal", "nothing else acute", "otherwise negative"],
    },
    {
        "cardiomegaly": [
            "the cardiac silhouette is enlarged in size",
            "there is enlargement of the cardiac silhouette",
            "moderate enlargement of the heart is present",
        ],
        "effusion": [
            "a moderate pleural effusion is seen on the left",
            "there is fluid layering in the pleural space",
            "blunting of the angle suggests pleural fluid",
        ],
        "opacity": [
            "an ill defined opacity is seen in the lower lobe",
            "there is consolidation in the lower lobe",
            "increased density is present in the right base",
        ],
        "pneumothorax": [
            "a visible pleural edge with pneumothorax is present",
            "there is a small apical pneumothorax on the right",
            "free air is seen in the pleural space",
        ],
        "fracture": [
            "there is a healing fracture of a posterior rib",
            "a displaced rib fracture is present",
            "a break in the cortex of a rib is seen",
        ],
        "device": [
            "a pacemaker device is present with leads",
            "a central venous catheter is present",
            "an endotracheal tube is in good position",
        ],
        "closing": [
            "no other acute cardiopulmonary abnormality is seen",
            "the remainder of the examination is unremarkable",
            "no further abnormality is identified",
        ],
    },
]


# ============================================================================
# Rendering
# ============================================================================

def _glyph_mask(name: str) -> np.ndarray:
    yy, xx = np.mgrid[0:BLOCK, 0:BLOCK].astype(np.float64)
    r = np.hypot(yy - 3.5, xx - 3.5)
    if name == "cardiomegaly":      # disk
        mask = r <= 3.0
    elif name == "effusion":        # bar
        mask = (yy >= 5) & (yy <= 6) & (xx >= 1) & (xx <= 6)
    elif name == "opacity":         # wedge
        mask = (xx <= yy) & (yy >= 1) & (yy <= 6) & (xx >= 1)
    elif name == "pneumothorax":    # cross
        inner = (yy >= 1) & (yy <= 6) & (xx >= 1) & (xx <= 6)
        mask = inner & (((yy >= 3) & (yy <= 4)) | ((xx >= 3) & (xx <= 4)))
    elif name == "fracture":        # ring
        mask = (r >= 2.0) & (r <= 3.5)
    elif name == "device":          # dot pair
        mask = (np.hypot(yy - 2, xx - 2) <= 1.2) | (np.hypot(yy - 5, xx - 5) <= 1.2)
    else:
        raise ContractViolation(f"unknown condition {name!r}")
    return mask.astype(np.float64)


def render_glyph(condition: str, severity: float, image_size: int = 32) -> np.ndarray:
    """Glyph intensities for one condition block, upsampled to the block size of image_size"""
    factor = max(1, image_size // 32)
    return np.kron(_glyph_mask(condition), np.ones((factor, factor))) * severity


def condition_region(condition: str, image_size: int = 32) -> tuple[slice, slice]:
    """Row and column slices of a condition's block"""
    if image_size % 32 != 0:
        raise ContractViolation(f"synthetic images need a multiple of 32 pixels, got {image_size}")
    side = BLOCK * image_size // 32
    row, col = CONDITION_BLOCKS[condition]
    return slice(row * side, (row + 1) * side), slice(col * side, (col + 1) * side)


def quantize(image: np.ndarray) -> np.ndarray:
    """Snap to k/255 so the PGM round trip is exact"""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def synth_record(index: int, seed: int, style_count: int = 3, image_size: int = 32) -> DatasetRecord:
    """Record `index` of the corpus for `seed`; independent of every other record"""
    if not 1 <= style_count <= len(STYLE_FAMILIES):
        raise ContractViolation(f"style_count must be in [1, {len(STYLE_FAMILIES)}], got {style_count}")
    rng = np.random.default_rng([seed, index])
    style = int(rng.integers(style_count))
    present = rng.random(len(CONDITIONS)) < CONDITION_PROBABILITY
    severities = rng.uniform(0.6, 1.0, size=len(CONDITIONS))
    image = rng.uniform(0.0, NOISE_AMPLITUDE, size=(image_size, image_size))

    family = STYLE_FAMILIES[style]
    sentences, labels = [], []
    for cid, name in enumerate(CONDITIONS):
        if not present[cid]:
            continue
        rows, cols = condition_region(name, image_size)
        image[rows, cols] = np.maximum(image[rows, cols], render_glyph(name, severities[cid], image_size))
        options = family[name]
        sentences.append(options[int(rng.integers(len(options)))])
        labels.append(name)
    closing = family["closing"]
    sentences.append(closing[int(rng.integers(len(closing)))])

    return DatasetRecord(
        image=quantize(image),
        sentences=sentences,
        labels=frozenset(labels),
        style=style,
        image_path=f"{IMAGES_DIR}/rec_{index:06d}.pgm",
    )


def synth_generate(n: int, seed: int, style_count: int = 3, image_size: int = 32) -> list[DatasetRecord]:
    """
    Deterministic synthetic corpus

    Each record draws from its own generator seeded with (seed, index), so any record can
    be regenerated alone and the corpus can be built in any order.
    """
    if n < 1:
        raise ContractViolation("n must be >= 1")
    if style_count < 1:
        raise ContractViolation("style_count must be >= 1")
    records = [synth_record(i, seed, style_count, image_size) for i in range(n)]
    log.info(f"Synthesized {n} records (seed={seed}, styles={style_count})")
    return records


# ============================================================================
# Tokenizer and vocabulary
# ============================================================================

def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip edge punctuation, keep tokens with a letter"""
    tokens = []
    for raw in text.lower().split():
        token = raw.strip(string.punctuation)
        if any(ch.isalpha() for ch in token):
            tokens.append(token)
    return tokens


def detokenize(tokens: Iterable[str]) -> str:
    return " ".join(tokens)


class Vocabulary:
    """
    Token <-> id map

    Ids 0..4 are [PAD], [BOS], [EOS], [UNK], [SENT]; the remaining entries are ordered
    by descending corpus frequency, ties alphabetical.
    """

    def __init__(self, tokens: list[str], min_freq: int = 1):
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ContractViolation("vocabulary must start with the special tokens")
        if len(set(tokens)) != len(tokens):
            raise ContractViolation("vocabulary contains duplicate tokens")
        self.id_to_token = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(tokens)}
        self.min_freq = min_freq

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.token_to_id.get(t, UNK_ID) for t in tokens]

    def encode_text(self, text: str) -> list[int]:
        return self.encode(tokenize(text))

    def decode(self, ids: Iterable[int]) -> list[str]:
        """Tokens up to the first [EOS]; special tokens are skipped"""
        out = []
        for i in ids:
            i = int(i)
            if i == EOS_ID:
                break
            if i < len(SPECIAL_TOKENS):
                continue
            out.append(self.id_to_token[i])
        return out

    def decode_text(self, ids: Iterable[int]) -> str:
        return detokenize(self.decode(ids))

    def encode_record(self, record: DatasetRecord, max_tokens: int | None = None) -> ReportExample:
        """
        Token-id view of a record; sentences that tokenize to nothing are dropped

        With max_tokens set, longer sentences keep their first max_tokens ids (the
        decoder appends [EOS] on its own).
        """
        sentences = [self.encode_text(s) for s in record.sentences]
        if max_tokens is not None:
            if max_tokens < 1:
                raise ContractViolation("max_tokens must be positive")
            long = sum(len(s) > max_tokens for s in sentences)
            if long:
                log.warning(f"{record.image_path or 'record'}: truncated {long} sentence(s) to {max_tokens} tokens")
                sentences = [s[:max_tokens] for s in sentences]
        return ReportExample(
            image=record.image,
            sentences=[s for s in sentences if s],
            labels=record.labels,
        )

    def save(self, path: str | Path) -> None:
        path = Path(path)
        try:
            path.write_text("\n".join(self.id_to_token) + "\n", encoding="utf-8")
        except OSError as e:
            raise DatasetIOError(f"cannot write vocabulary ({e.strerror})", path) from e

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        path = Path(path)
        if not path.is_file():
            raise DatasetIOError("vocabulary file not found", path)
        tokens = [line.strip() for line in path.read_text(encoding="utf-8").splitlines()]
        for lineno, token in enumerate(tokens, start=1):
            if not token or any(ch.isspace() for ch in token):
                raise ParseError(f"invalid vocabulary entry {token!r}", line=lineno)
        return cls(tokens)


def build_vocab(corpus: Iterable[Iterable[str]], min_freq: int = 2) -> Vocabulary:
    """Vocabulary over token lists; tokens seen fewer than min_freq times map to [UNK]"""
    if min_freq < 1:
        raise ContractViolation("min_freq must be >= 1")
    counts = Counter(t for tokens in corpus for t in tokens)
    kept = sorted((t for t, c in counts.items() if c >= min_freq and t not in SPECIAL_TOKENS),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(list(SPECIAL_TOKENS) + kept, min_freq=min_freq)


def vocab_from_records(records: Iterable[DatasetRecord], min_freq: int = 2) -> Vocabulary:
    return build_vocab((tokenize(s) for r in records for s in r.sentences), min_freq)


# ============================================================================
# PGM images
# ============================================================================

def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Write a [0, 1] grayscale array as binary PGM (P5, maxval 255)"""
    path = Path(path)
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode("ascii")
    try:
        path.write_bytes(header + pixels.tobytes())
    except OSError as e:
        raise DatasetIOError(f"cannot write image ({e.strerror})", path) from e


def _pgm_header(data: bytes, path: Path) -> tuple[list[int], int]:
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and chr(data[pos]).isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and chr(data[pos]).isdigit():
            pos += 1
        if start == pos:
            raise ParseError(f"malformed PGM header in {path}", offset=pos)
        fields.append(int(data[start:pos]))
    return fields, pos + 1  # one whitespace byte ends the header


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary PGM into a float64 array in [0, 1]"""
    path = Path(path)
    if not path.is_file():
        raise DatasetIOError("image file not found", path)
    data = path.read_bytes()
    if data[:2] != b"P5":
        raise ParseError(f"{path} is not a binary PGM", offset=0)
    (width, height, maxval), start = _pgm_header(data, path)
    if maxval != 255:
        raise ParseError(f"{path}: unsupported maxval {maxval}", offset=start)
    body = data[start:start + width * height]
    if len(body) != width * height:
        raise ParseError(f"{path}: truncated pixel data", offset=len(data))
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width).astype(np.float64) / 255.0


# ============================================================================
# Dataset directories
# ============================================================================

def assign_splits(n: int, seed: int, ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)) -> list[str]:
    """
    Split name per record index

    Indices are ranked by a seeded hash, then cut at the exact ratio boundaries, so the
    split sizes are round(0.7 n) / round(0.1 n) / rest.
    """
    def key(i: int) -> bytes:
        return hashlib.blake2b(f"{seed}:{i}".encode(), digest_size=8).digest()

    order = sorted(range(n), key=key)
    n_train = round(ratios[0] * n)
    n_val = round(ratios[1] * n)
    splits = ["test"] * n
    for rank, i in enumerate(order):
        if rank < n_train:
            splits[i] = "train"
        elif rank < n_train + n_val:
            splits[i] = "val"
    return splits


def record_to_entry(record: DatasetRecord) -> ManifestEntry:
    return ManifestEntry(
        image=record.image_path,
        sentences=list(record.sentences),
        labels=[c for c in CONDITIONS if c in record.labels],
        style=record.style,
        split=record.split,
    )


def write_manifest(entries: Iterable[ManifestEntry], path: str | Path) -> None:
    path = Path(path)
    lines = [entry.model_dump_json(exclude_none=True) for entry in entries]
    try:
        path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    except OSError as e:
        raise DatasetIOError(f"cannot write manifest ({e.strerror})", path) from e


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    """Parse and validate a JSON Lines manifest; blank lines are skipped"""
    path = Path(path)
    if not path.is_file():
        log.error(f"Manifest not found: {path}")
        raise DatasetIOError("manifest not found", path)
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            entries.append(ManifestEntry.model_validate_json(line))
        except ValidationError as e:
            raise ParseError(f"{path}: invalid manifest entry: {e.errors()[0]['msg']}", line=lineno) from e
    return entries


def write_dataset(records: list[DatasetRecord], out_dir: str | Path, seed: int = 0,
                  split: bool = True, vocab: Vocabulary | None = None) -> list[DatasetRecord]:
    """
    Write images, manifest and (optionally) vocabulary

    Args:
        split: assign train/val/test by seeded index hash; otherwise keep record.split
        vocab: written to vocab.txt when given

    Returns:
        The records as written (split and image_path filled in)
    """
    out_dir = Path(out_dir)
    try:
        (out_dir / IMAGES_DIR).mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetIOError(f"cannot create dataset directory ({e.strerror})", out_dir) from e
    splits = assign_splits(len(records), seed) if split else [r.split for r in records]
    written = []
    for i, (record, name) in enumerate(zip(records, splits)):
        rel = record.image_path or f"{IMAGES_DIR}/rec_{i:06d}.pgm"
        write_pgm(out_dir / rel, record.image)
        written.append(DatasetRecord(
            image=quantize(record.image),
            sentences=list(record.sentences),
            labels=frozenset(record.labels),
            style=record.style,
            split=name,
            image_path=rel,
        ))
    write_manifest((record_to_entry(r) for r in written), out_dir / MANIFEST_NAME)
    if vocab is not None:
        vocab.save(out_dir / VOCAB_NAME)
    log.info(f"Wrote {len(written)} records to {out_dir}")
    return written


def load_dataset(manifest_path: str | Path, image_size: int | None = None) -> list[DatasetRecord]:
    """
    Load every record listed in a manifest

    Raises:
        DatasetIOError: manifest or a referenced image is missing
        ParseError: malformed manifest line (with line number) or PGM
        ContractViolation: image of the wrong size
    """
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    root = manifest_path.parent
    records = []
    for entry in read_manifest(manifest_path):
        image_path = root / entry.image
        if not image_path.is_file():
            log.error(f"Image not found: {image_path}")
            raise DatasetIOError("image file not found", image_path)
        image = read_pgm(image_path)
        if image_size is not None and image.shape != (image_size, image_size):
            raise ContractViolation(f"{image_path}: expected {image_size}x{image_size}, got {image.shape}")
        records.append(DatasetRecord(
            image=image,
            sentences=list(entry.sentences),
            labels=frozenset(entry.labels),
            style=entry.style,
            split=entry.split,
            image_path=entry.image,
        ))
    log.info(f"Loaded {len(records)} records from {manifest_path}")
    return records


def split_records(records: Iterable[DatasetRecord], name: str) -> list[DatasetRecord]:
    return [r for r in records if r.split == name]
