"""Deterministic "shapes world": images with exact captions, boxes and depth.

Stands in for pseudo-labeling with external expert models. Every label is
derived analytically from the scene description, so it is exact.
"""

from __future__ import annotations

import numpy as np

from .schema import COLORS, DEFAULT_CATALOG, Region, Sample, class_name, tokenize

GENERATOR_VERSION = "shapes-1"

CAPTION_PREFIXES = ("", "a photo of", "a picture of", "an image with")
PROMPT_TEMPLATES = ("a {}", "a photo of a {}", "a picture of a {}", "an image with a {}")

MIN_SHAPE, MAX_SHAPE = 8, 14
NEAR_DEPTH, FAR_DEPTH = 0.15, 0.60
BACKGROUND_NEAR, BACKGROUND_FAR = 0.70, 1.00


def sample_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream, index]))


def rasterize(kind: str, x0: int, y0: int, size: int, h: int, w: int) -> np.ndarray:
    """Boolean H x W mask of one shape inside the square [x0, x0+size) x [y0, y0+size)."""
    ys, xs = np.mgrid[0:h, 0:w]
    px, py = xs + 0.5, ys + 0.5
    cx, cy, r = x0 + size / 2, y0 + size / 2, size / 2
    inside = (px >= x0) & (px < x0 + size) & (py >= y0) & (py < y0 + size)
    if kind == "circle":
        m = (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    elif kind == "square":
        m = np.ones_like(inside)
    elif kind == "triangle":
        m = np.abs(px - cx) <= (py - y0) / size * r
    elif kind == "diamond":
        m = np.abs(px - cx) + np.abs(py - cy) <= r
    elif kind == "cross":
        m = (np.abs(px - cx) <= size / 6) | (np.abs(py - cy) <= size / 6)
    elif kind == "ring":
        d2 = (px - cx) ** 2 + (py - cy) ** 2
        m = (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    else:
        raise ValueError(f"unknown shape {kind!r}")
    return m & inside


def mask_box(mask: np.ndarray) -> np.ndarray:
    """Tight normalized (x0, y0, x1, y1) box of a boolean mask."""
    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    return np.array([xs.min() / w, ys.min() / h, (xs.max() + 1) / w, (ys.max() + 1) / h],
                    dtype=np.float32)


def position_words(box: np.ndarray) -> str:
    cx, cy = (box[0] + box[2]) / 2, (box[1] + box[3]) / 2
    return f"{'top' if cy < 0.5 else 'bottom'} {'left' if cx < 0.5 else 'right'}"


def _place(rng, sizes, h, w):
    """Put each shape inside its own image quadrant, at a random offset.

    Keeping shapes off the center lines makes the position words exact and,
    with quadrants aligned to patch boundaries, local to a set of patches.
    """
    qh, qw = h // 2, w // 2
    if len(sizes) > 4 or max(sizes) > min(qh, qw):
        return None
    quads = rng.choice(4, size=len(sizes), replace=False)
    boxes = []
    for s, q in zip(sizes, quads):
        oy, ox = (q // 2) * qh, (q % 2) * qw
        x0 = ox + int(rng.integers(0, qw - s + 1))
        y0 = oy + int(rng.integers(0, qh - s + 1))
        boxes.append((x0, y0, s))
    return boxes


def render_scene(rng: np.random.Generator, catalog=DEFAULT_CATALOG, size: int = 32,
                 n_shapes: int | None = None, classes=None):
    """Draw one scene. Returns (image, depth, shapes) before labeling.

    Shapes sit in distinct quadrants, so every rendered mask is fully visible. Nearer
    shapes are drawn larger; their depth is a constant layer below the
    background.
    """
    h = w = size
    k = int(rng.integers(1, 4)) if n_shapes is None else n_shapes
    cls = (rng.choice(len(catalog), size=k, replace=False) if classes is None
           else np.asarray(classes))
    depths = rng.uniform(NEAR_DEPTH, FAR_DEPTH, size=k)
    sizes = [int(round(MAX_SHAPE - (d - NEAR_DEPTH) / (FAR_DEPTH - NEAR_DEPTH)
                       * (MAX_SHAPE - MIN_SHAPE))) for d in depths]
    placed = _place(rng, sizes, h, w)
    if placed is None:
        raise ValueError(f"{k} shapes of up to {MAX_SHAPE}px do not fit the quadrants of {size}px")

    top, bottom = rng.uniform(0.25, 0.6, size=3), rng.uniform(0.25, 0.6, size=3)
    ramp = np.linspace(0.0, 1.0, h, dtype=np.float64)[:, None, None]
    image = np.broadcast_to(top + (bottom - top) * ramp, (h, w, 3)).copy()
    depth = np.broadcast_to(
        BACKGROUND_FAR + (BACKGROUND_NEAR - BACKGROUND_FAR) * np.linspace(0, 1, h)[:, None], (h, w)
    ).copy()

    shapes = []
    for c, d, (x0, y0, s) in sorted(zip(cls, depths, placed), key=lambda t: -t[1]):
        color, kind = catalog[int(c)]
        m = rasterize(kind, x0, y0, s, h, w)
        image[m] = COLORS[color]
        depth[m] = d
        shapes.append((int(c), float(d), m))
    image = np.round(image * 255.0).astype(np.uint8).astype(np.float32) / np.float32(255.0)
    return image, depth.astype(np.float32), shapes


def label_scene(image, depth, shapes, catalog=DEFAULT_CATALOG, prefix: str = "") -> Sample:
    parts, regions = [], []
    for c, _, m in sorted(shapes, key=lambda t: t[0]):
        box = mask_box(m)
        name = class_name(catalog[c])
        regions.append(Region(box, tokenize(name), c))
        parts.append(f"a {name} on the {position_words(box)}")
    caption = " and ".join(parts)
    if prefix:
        caption = f"{prefix} {caption}"
    return Sample(image=image, caption=tokenize(caption), regions=regions, depth=depth)


def generate_sample(seed: int, index: int, catalog=DEFAULT_CATALOG, size: int = 32,
                    n_shapes: int | None = None, classes=None, stream: int = 0) -> Sample:
    rng = sample_rng(seed, index, stream)
    image, depth, shapes = render_scene(rng, catalog, size, n_shapes, classes)
    prefix = CAPTION_PREFIXES[int(rng.integers(len(CAPTION_PREFIXES)))]
    return label_scene(image, depth, shapes, catalog, prefix)


def generate_synthetic_dataset(seed: int, n: int, catalog=DEFAULT_CATALOG, size: int = 32
                               ) -> list[Sample]:
    """n samples; sample i depends only on (seed, i)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(catalog) < 5:
        raise ValueError("catalog needs at least 5 classes")
    return [generate_sample(seed, i, catalog, size) for i in range(n)]


def class_prompts(catalog=DEFAULT_CATALOG) -> list[list[str]]:
    return [[t.format(class_name(c)) for t in PROMPT_TEMPLATES] for c in catalog]
