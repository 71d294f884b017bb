"""On-disk datasets: a directory with ``labels.tsv`` and image files."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .alphabet import Alphabet

log = logging.getLogger(__name__)


class DatasetError(RuntimeError):
    pass


@dataclass
class TextDataset:
    root: Path
    paths: list = field(default_factory=list)
    texts: list = field(default_factory=list)
    images: list = field(default_factory=list)
    skipped_unreadable: list = field(default_factory=list)
    skipped_alphabet: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.texts)

    @classmethod
    def load(cls, root, alphabet: Optional[Alphabet] = None) -> "TextDataset":
        """Read ``labels.tsv`` and decode every image into memory.

        Unreadable images and labels with characters outside ``alphabet``
        are skipped and listed in ``skipped_unreadable`` / ``skipped_alphabet``.
        """
        root = Path(root)
        index = root / "labels.tsv"
        if not index.is_file():
            raise DatasetError(f"{index} not found")
        ds = cls(root)
        with open(index, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n").rstrip("\r")
                if not line:
                    continue
                if "\t" not in line:
                    raise DatasetError(f"{index}:{lineno}: expected 'path<TAB>transcript'")
                rel, text = line.split("\t", 1)
                if alphabet is not None and (alphabet.unknown_chars(text) or not text):
                    ds.skipped_alphabet.append((rel, text))
                    continue
                try:
                    with Image.open(root / rel) as im:
                        img = np.asarray(im.convert("RGB"))
                except (OSError, ValueError) as exc:
                    ds.skipped_unreadable.append((rel, str(exc)))
                    continue
                ds.paths.append(rel)
                ds.texts.append(text)
                ds.images.append(img)
        if ds.skipped_alphabet:
            log.warning("skipped %d labels with out-of-alphabet characters: %s",
                        len(ds.skipped_alphabet), ds.skipped_alphabet[:10])
        if ds.skipped_unreadable:
            log.warning("skipped %d unreadable images", len(ds.skipped_unreadable))
        return ds

    @classmethod
    def from_arrays(cls, images, texts, root: str = "<memory>") -> "TextDataset":
        return cls(Path(root), [f"{i}" for i in range(len(texts))], list(texts), list(images))


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))
