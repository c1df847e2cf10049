"""Dataset directory layout: images/ + manifest.jsonl + vocab.txt.

One JSON object per manifest line; token ids resolve against the
vocabulary stored next to it, so a dataset directory is self-contained.
"""

from __future__ import annotations

import json
from pathlib import Path

from .corpus import FormulaRecord, Vocabulary

__all__ = ["ManifestError", "MissingImage", "CorruptManifest", "write_manifest", "read_manifest"]

MANIFEST_NAME = "manifest.jsonl"
VOCAB_NAME = "vocab.txt"
IMAGE_DIR = "images"


class ManifestError(Exception):
    pass


class MissingImage(ManifestError):
    pass


class CorruptManifest(ManifestError):
    pass


def write_manifest(records: list[FormulaRecord], dataset_dir: str | Path, vocab: Vocabulary) -> Path:
    """Write the manifest and vocabulary for a dataset directory.

    Records that reference an image must point at an existing file
    (relative to the dataset directory).
    """
    root = Path(dataset_dir)
    root.mkdir(parents=True, exist_ok=True)
    path = root / MANIFEST_NAME
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            if rec.image_path is not None and not (root / rec.image_path).is_file():
                raise MissingImage(f"record {rec.id}: image {rec.image_path} not found under {root}")
            row = {
                "id": rec.id,
                "latex": rec.source_latex,
                "token_ids": vocab.encode(rec.tokens),
                "domain": rec.domain,
                "image": rec.image_path,
                "height": rec.height,
                "width": rec.width,
            }
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    vocab.save(root / VOCAB_NAME)
    return path


def read_manifest(dataset_dir: str | Path, strict: bool = False) -> tuple[list[FormulaRecord], Vocabulary]:
    """Load records and vocabulary back; ``strict`` verifies image files exist."""
    root = Path(dataset_dir)
    path = root / MANIFEST_NAME
    if not path.is_file():
        raise CorruptManifest(f"no {MANIFEST_NAME} in {root}")
    vocab = Vocabulary.load(root / VOCAB_NAME)
    records: list[FormulaRecord] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            rec = FormulaRecord(
                id=row["id"],
                source_latex=row["latex"],
                tokens=vocab.decode(row["token_ids"], strip_markers=False),
                domain=row["domain"],
                image_path=row["image"],
                height=row["height"],
                width=row["width"],
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise CorruptManifest(f"{path}:{lineno}: {exc}") from exc
        if strict and rec.image_path is not None and not (root / rec.image_path).is_file():
            raise MissingImage(f"{path}:{lineno}: image {rec.image_path} missing")
        records.append(rec)
    return records, vocab


def image_path(dataset_dir: str | Path, rec: FormulaRecord) -> Path:
    if rec.image_path is None:
        raise MissingImage(f"record {rec.id} has no image")
    return Path(dataset_dir) / rec.image_path
