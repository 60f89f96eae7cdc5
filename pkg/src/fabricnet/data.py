"""Dataset IO: manifests, image decoding and a synthetic corpus.

A manifest is a CSV file with header ``path,labels``. Each row names an
image file (relative to the manifest) and its active class names joined
by ';'. The label vocabulary is the sorted set of names seen anywhere
in the file, so it is stable across loads of the same manifest. Every
sample must carry at least one label and every path must be unique.

Images decode to float32 RGB in [0, 1], channels last.

The synthetic generator composes class-specific textures so that labels
are recoverable by a linear model: every class owns a fixed sinusoidal
grating plus a class-keyed noise pattern and a color direction, and an
image is the average of its active classes' textures plus per-sample
Gaussian noise.
"""

from __future__ import annotations

import csv
import io
import os

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    ImageDecodeError,
    ManifestEncodingError,
    ManifestFormatError,
    ManifestNotFoundError,
    ValidationError,
)

MANIFEST_HEADER = ("path", "labels")
MANIFEST_NAME = "manifest.csv"
DEFAULT_IMAGE_SIZE = (120, 120)


def class_names(n_classes):
    """Default synthetic class names; zero padded so sort order is index order."""
    if n_classes < 1:
        raise ValidationError(f"n_classes must be >= 1, got {n_classes}")
    return [f"tex{i:03d}" for i in range(n_classes)]


def _parse_label_names(field, line):
    names = []
    for part in field.split(";"):
        part = part.strip()
        if not part:
            raise ManifestFormatError("empty label name", line)
        if part in names:
            raise ManifestFormatError(f"duplicate label {part!r}", line)
        names.append(part)
    return names


def load_manifest(path):
    """Read a manifest CSV; returns (vocabulary, paths, labels).

    The vocabulary is the sorted list of distinct label names, labels a
    uint8 multi-hot matrix of shape (n_samples, len(vocabulary)). Paths
    come back exactly as written (relative to the manifest file).
    Raises ManifestNotFoundError, ManifestEncodingError or
    ManifestFormatError with the offending 1-based line number; rows
    with no labels and repeated image paths are format errors.
    """
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError:
        raise ManifestNotFoundError(f"manifest not found: {path}") from None
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ManifestEncodingError(f"manifest is not valid UTF-8: {exc}") from None

    reader = csv.reader(io.StringIO(text))
    paths, rows, seen = [], [], set()
    saw_header = False
    for line, fields in enumerate(reader, start=1):
        if not fields:
            continue
        if not saw_header:
            if tuple(f.strip() for f in fields) != MANIFEST_HEADER:
                raise ManifestFormatError(f"expected header {','.join(MANIFEST_HEADER)!r}", line)
            saw_header = True
            continue
        if len(fields) != 2:
            raise ManifestFormatError(f"expected 2 fields, got {len(fields)}", line)
        img_path = fields[0].strip()
        if not img_path:
            raise ManifestFormatError("empty image path", line)
        if img_path in seen:
            raise ManifestFormatError(f"duplicate image path {img_path!r}", line)
        seen.add(img_path)
        label_field = fields[1].strip()
        if not label_field:
            raise ManifestFormatError("sample has no labels", line)
        paths.append(img_path)
        rows.append(_parse_label_names(label_field, line))
    if not saw_header:
        raise ManifestFormatError("empty manifest", 1)
    if not rows:
        raise ManifestFormatError("manifest contains no samples", 1)

    vocabulary = sorted({name for row in rows for name in row})
    index = {name: i for i, name in enumerate(vocabulary)}
    labels = np.zeros((len(rows), len(vocabulary)), dtype=np.uint8)
    for i, row in enumerate(rows):
        for name in row:
            labels[i, index[name]] = 1
    return vocabulary, paths, labels


def write_manifest(path, image_paths, labels, names):
    """Write a manifest CSV mapping multi-hot ``labels`` rows to ``names``."""
    labels = np.asarray(labels)
    if len(image_paths) != labels.shape[0]:
        raise ValidationError("one label row per image path required")
    if labels.ndim != 2 or labels.shape[1] != len(names):
        raise ValidationError(f"labels must be (n, {len(names)}), got {labels.shape}")
    for name in names:
        if not name or ";" in name:
            raise ValidationError(f"bad class name {name!r}")
    if (labels.sum(axis=1) == 0).any():
        raise ValidationError("every sample needs at least one label")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for img_path, row in zip(image_paths, labels):
            active = ";".join(names[i] for i in np.flatnonzero(row))
            writer.writerow([img_path, active])
    return path


def decode_image(path, size=DEFAULT_IMAGE_SIZE):
    """Decode an image file to float32 RGB in [0, 1], channels last.

    ``size`` is the (height, width) target, bilinear resampled; pass
    None to keep the stored resolution. Any decode failure raises
    ImageDecodeError naming the path.
    """
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if size is not None:
                h, w = size
                if h < 1 or w < 1:
                    raise ValidationError(f"target size must be positive, got {size}")
                if (img.height, img.width) != (h, w):
                    img = img.resize((w, h), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except FileNotFoundError:
        raise ImageDecodeError(f"image not found: {path}") from None
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from None
    return arr


def load_dataset(manifest_path, size=DEFAULT_IMAGE_SIZE):
    """Decode every manifest entry; returns (images, labels, vocabulary, paths)."""
    vocabulary, paths, labels = load_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    images = [decode_image(os.path.join(base, p), size) for p in paths]
    if images:
        ref = images[0].shape
        for p, img in zip(paths, images):
            if img.shape != ref:
                raise ValidationError(
                    f"image sizes differ: {p} is {img.shape}, expected {ref}; pass an explicit size"
                )
        stack = np.stack(images)
    else:
        hw = size if size is not None else (0, 0)
        stack = np.zeros((0, hw[0], hw[1], 3), dtype=np.float32)
    return stack, labels, vocabulary, paths


def bilinear_resize(image, size):
    """Resize a float (H, W, C) array by bilinear sampling.

    Pixel centers map as ``src = (dst + 0.5) * in/out - 0.5``, matching
    common image libraries for upscaling.
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValidationError(f"bilinear_resize expects (H, W, C), got shape {image.shape}")
    h_out, w_out = size
    if h_out < 1 or w_out < 1:
        raise ValidationError(f"target size must be positive, got {size}")
    h, w = image.shape[:2]

    def axis_coords(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1.0)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (pos - lo).astype(image.dtype)

    y0, y1, wy = axis_coords(h, h_out)
    x0, x1, wx = axis_coords(w, w_out)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = image[y0][:, x0] * (1 - wx) + image[y0][:, x1] * wx
    bot = image[y1][:, x0] * (1 - wx) + image[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


# ---------------------------------------------------------------------------
# synthetic corpus


def class_texture(class_index, size):
    """The fixed unit texture owned by one class, shape (size, size, 3).

    A sinusoidal grating blended with a class-keyed noise pattern, both
    pure functions of (class_index, size), so the texture never depends
    on sampling order.
    """
    golden = 2.399963229728653
    theta = class_index * golden
    radius = 2.0 + 1.5 * (class_index % 5)
    fx = radius * np.cos(theta)
    fy = radius * np.sin(theta)
    phase = (0.7 * class_index) % (2.0 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    wave = np.sin(2.0 * np.pi * (fx * xx + fy * yy) + phase)

    keyed = np.random.default_rng([7341, class_index, size]).standard_normal((size, size))
    keyed /= max(float(np.abs(keyed).max()), 1e-9)
    pattern = 0.8 * wave + 0.2 * keyed

    color = np.array(
        [
            0.6 + 0.4 * np.cos(1.7 * class_index),
            0.6 + 0.4 * np.cos(1.7 * class_index + 2.1),
            0.6 + 0.4 * np.cos(1.7 * class_index + 4.2),
        ]
    )
    color /= np.linalg.norm(color)
    return (pattern[:, :, None] * color).astype(np.float32)


def gen_synthetic(n_classes, n_samples, max_labels_per_sample=3, seed=0, size=64, noise=0.05):
    """Draw a labeled synthetic dataset.

    Per sample the generator draws, in order: the number of active
    classes k, uniform over 1..max_labels_per_sample; the active subset,
    without replacement; then the additive noise field. Images are the
    active textures averaged, scaled into [0, 1] around 0.5 and clipped
    after noise. Every sample has at least one label.

    Returns (images, labels): float32 (n, size, size, 3) and uint8
    multi-hot (n, n_classes).
    """
    if n_classes < 2:
        raise ValidationError(f"n_classes must be >= 2, got {n_classes}")
    if n_samples < 1:
        raise ValidationError(f"n_samples must be >= 1, got {n_samples}")
    if not 1 <= max_labels_per_sample <= n_classes:
        raise ValidationError(
            f"max_labels_per_sample must lie in [1, {n_classes}], got {max_labels_per_sample}"
        )
    if size < 1:
        raise ValidationError(f"size must be >= 1, got {size}")
    if not 0.0 <= noise < 1.0:
        raise ValidationError(f"noise must lie in [0, 1), got {noise}")
    rng = np.random.default_rng(seed)
    textures = np.stack([class_texture(i, size) for i in range(n_classes)])
    images = np.empty((n_samples, size, size, 3), dtype=np.float32)
    labels = np.zeros((n_samples, n_classes), dtype=np.uint8)
    for s in range(n_samples):
        k = int(rng.integers(1, max_labels_per_sample + 1))
        active = rng.choice(n_classes, size=k, replace=False)
        field = textures[active].sum(axis=0) / k
        img = 0.5 + 0.45 * field
        img += rng.normal(0.0, noise, size=img.shape)
        np.clip(img, 0.0, 1.0, out=img)
        images[s] = img
        labels[s, active] = 1
    return images, labels


def export_dataset(out_dir, images, labels, names=None, prefix="img"):
    """Write images as 8-bit PNGs plus a manifest; returns the manifest path."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.ndim != 4 or images.shape[0] != labels.shape[0]:
        raise ValidationError("export_dataset expects (N, H, W, C) images and matching labels")
    if names is None:
        names = class_names(labels.shape[1])
    os.makedirs(out_dir, exist_ok=True)
    width = max(5, len(str(max(images.shape[0] - 1, 0))))
    files = []
    for i, img in enumerate(images):
        data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
        name = f"{prefix}{i:0{width}d}.png"
        Image.fromarray(data).save(os.path.join(out_dir, name))
        files.append(name)
    return write_manifest(os.path.join(out_dir, MANIFEST_NAME), files, labels, names)
