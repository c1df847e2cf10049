"""Dataset loading and batch assembly for training loops.

Desk-scale datasets fit in memory, so a training set is just parallel
lists of records and float images.  Batches pad images on the right and
bottom with background and pad token targets with PAD; losses and
attention mask both.  Every random choice flows through explicit
generators seeded from the run seed, and per-record seeds are derived by
hashing (seed, record id) so results do not depend on iteration order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .corpus import FormulaRecord, RENDERED, Vocabulary, filter_corpus
from .images import AugmentRanges, augment, load_png, resize_for_training, resize_to_height, sample_augment_params
from .manifest import read_manifest

__all__ = [
    "EmptyDataset",
    "record_seed",
    "TrainingSet",
    "load_training_set",
    "Batch",
    "assemble_batch",
    "EqualMixSampler",
]


class EmptyDataset(ValueError):
    pass


def record_seed(global_seed: int, record_id: str) -> int:
    """Stable per-record seed, independent of processing order."""
    digest = hashlib.blake2b(f"{global_seed}:{record_id}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big")


@dataclass
class TrainingSet:
    """Records plus their images, already height-normalized and filtered."""

    records: list[FormulaRecord]
    images: list[np.ndarray]
    vocab: Vocabulary
    domain: str

    def __len__(self) -> int:
        return len(self.records)


def load_training_set(
    dataset_dir,
    height_for: int | Callable[[FormulaRecord], int],
    max_width: int,
    max_tokens: int,
    vocab: Vocabulary | None = None,
    domain: str | None = None,
) -> TrainingSet:
    """Load a manifest directory, enforcing the training-entry filters:
    height == height_for(record), width <= max_width, tokens <= max_tokens.

    ``height_for`` is a fixed pixel height or a per-record rule (the
    symbol-height normalization mode).
    """
    records, file_vocab = read_manifest(dataset_dir, strict=True)
    vocab = vocab or file_vocab
    records = [r for r in records if r.image_path is not None]
    if domain is not None:
        records = [r for r in records if r.domain == domain]
    records = filter_corpus(records, max_tokens=max_tokens)
    kept_records: list[FormulaRecord] = []
    images: list[np.ndarray] = []
    for rec in records:
        img = load_png(f"{dataset_dir}/{rec.image_path}")
        target_h = height_for if isinstance(height_for, int) else height_for(rec)
        resized = resize_for_training(img, target_h, max_width)
        if resized is None:
            continue
        kept_records.append(rec)
        images.append(resized)
    if not kept_records:
        raise EmptyDataset(f"no usable records in {dataset_dir}")
    domains = {r.domain for r in kept_records}
    return TrainingSet(kept_records, images, vocab, domain or (domains.pop() if len(domains) == 1 else "mixed"))


@dataclass
class Batch:
    images: torch.Tensor  # (B, 1, H, W) float32, zero-padded right/bottom
    domains: torch.Tensor  # (B,) long, index into corpus.DOMAINS
    targets: torch.Tensor  # (B, T) long: token ids + EOS, PAD-padded
    extents: list[tuple[int, int]]  # true (height, width) of each image

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def widths(self) -> list[int]:
        return [w for _, w in self.extents]


def _augmented(img: np.ndarray, rng: np.random.Generator, max_width: int, ranges: AugmentRanges):
    """Augment then restore the original height; fall back to the original
    when the augmented image would violate the width filter."""
    params = sample_augment_params(rng, ranges)
    out = resize_for_training(augment(img, params), img.shape[0], max_width)
    return out if out is not None else img


def assemble_batch(
    sets: list[TrainingSet],
    picks: list[tuple[int, int]],
    vocab: Vocabulary,
    rng: np.random.Generator | None = None,
    augment_domains: frozenset[str] = frozenset(),
    max_width: int | None = None,
    augment_ranges: AugmentRanges | None = None,
    size_multiple: int = 1,
) -> Batch:
    """Build a padded batch from (set index, record index) picks."""
    imgs, domains, token_rows, extents = [], [], [], []
    ranges = augment_ranges or AugmentRanges()
    for set_idx, rec_idx in picks:
        src = sets[set_idx]
        rec = src.records[rec_idx]
        img = src.images[rec_idx]
        if rng is not None and rec.domain in augment_domains:
            img = _augmented(img, rng, max_width or 10**9, ranges)
        imgs.append(img)
        extents.append(img.shape)
        domains.append(0 if rec.domain == RENDERED else 1)
        token_rows.append(vocab.encode(rec.tokens) + [vocab.eos_id])

    def _padded(extent: int) -> int:
        if size_multiple > 1 and extent % size_multiple:
            return extent + size_multiple - extent % size_multiple
        return extent

    max_h = _padded(max(h for h, _ in extents))
    max_w = _padded(max(w for _, w in extents))
    batch_imgs = np.zeros((len(imgs), 1, max_h, max_w), dtype=np.float32)
    for i, img in enumerate(imgs):
        batch_imgs[i, 0, : img.shape[0], : img.shape[1]] = img

    max_t = max(len(row) for row in token_rows)
    targets = np.full((len(token_rows), max_t), vocab.pad_id, dtype=np.int64)
    for i, row in enumerate(token_rows):
        targets[i, : len(row)] = row

    return Batch(
        images=torch.from_numpy(batch_imgs),
        domains=torch.tensor(domains, dtype=torch.long),
        targets=torch.from_numpy(targets),
        extents=[(int(h), int(w)) for h, w in extents],
    )


class EqualMixSampler:
    """Draw (set index, record index) picks with equal probability per set."""

    def __init__(self, sets: list[TrainingSet], rng: np.random.Generator):
        if not sets or any(len(s) == 0 for s in sets):
            raise EmptyDataset("every dataset in the mix must be non-empty")
        self.sets = sets
        self.rng = rng

    def pick(self) -> tuple[int, int]:
        s = int(self.rng.integers(len(self.sets)))
        return s, int(self.rng.integers(len(self.sets[s])))

    def picks(self, n: int) -> list[tuple[int, int]]:
        return [self.pick() for _ in range(n)]
