"""Sample schema and the closed caption vocabulary."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

COLORS = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.80, 0.20),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.90, 0.10),
    "magenta": (0.90, 0.20, 0.90),
    "cyan": (0.10, 0.85, 0.90),
    "orange": (0.98, 0.55, 0.05),
    "white": (0.98, 0.98, 0.98),
}
SHAPES = ("circle", "square", "triangle", "diamond", "cross", "ring")

DEFAULT_CATALOG = (
    ("red", "circle"),
    ("green", "square"),
    ("blue", "triangle"),
    ("yellow", "diamond"),
    ("magenta", "cross"),
)

VOCAB = (
    "<pad>", "a", "an", "the", "of", "with", "and", "on", "photo", "picture", "image",
    "top", "bottom", "left", "right",
    *COLORS, *SHAPES,
)
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}


class VocabularyError(ValueError):
    pass


def tokenize(text: str) -> np.ndarray:
    """Whitespace tokenization over the fixed vocabulary; unknown words are rejected."""
    words = text.split()
    if not words:
        raise VocabularyError("empty text")
    try:
        return np.array([TOKEN_ID[w] for w in words], dtype=np.int64)
    except KeyError as e:
        raise VocabularyError(f"out-of-vocabulary word {e.args[0]!r}") from None


def detokenize(ids) -> str:
    return " ".join(VOCAB[int(i)] for i in ids)


def class_name(entry: tuple[str, str]) -> str:
    return f"{entry[0]} {entry[1]}"


@dataclass
class Region:
    box: np.ndarray  # (x0, y0, x1, y1) in [0, 1]
    tokens: np.ndarray
    label: int = -1

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float32)
        x0, y0, x1, y1 = self.box
        if not (0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1):
            raise ValueError(f"invalid region box {self.box.tolist()}")


@dataclass
class Sample:
    """Fully-labeled record: image, caption, up to four regions, relative depth."""

    image: np.ndarray  # H x W x 3, float32 in [0, 1], quantized to 1/255
    caption: np.ndarray
    regions: list[Region] = field(default_factory=list)
    depth: np.ndarray | None = None  # H x W, smaller = nearer

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"image must be H x W x 3, got {self.image.shape}")
        if self.depth is None or self.depth.shape != self.image.shape[:2]:
            raise ValueError("depth map missing or mis-shaped")
        if float(self.depth.max() - self.depth.min()) == 0.0:
            raise ValueError("constant depth map")
        if len(self.caption) == 0:
            raise ValueError("empty caption")

    @property
    def labels(self) -> list[int]:
        return [r.label for r in self.regions]
