"""Image codec, preprocessing, dataset manifests, splits and the synthetic
damage dataset."""
from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import bilinear_resize

log = logging.getLogger(__name__)

CHANNEL_MEAN = np.array([0.485, 0.456, 0.406])
SEVERITY_LABELS = ("severe", "mild", "none")
BINARY_LABELS = ("damage", "no_damage")
MERGE = {"severe": "damage", "mild": "damage", "none": "no_damage"}


class ImageFormatError(ValueError):
    pass


class ManifestError(ValueError):
    pass


# -- codec -------------------------------------------------------------------

_PNM_HEADER = re.compile(rb"\A(P[56])(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)\s")


def _read_pnm(raw: bytes, path) -> np.ndarray:
    m = _PNM_HEADER.match(raw)
    if not m:
        raise ImageFormatError(f"{path}: malformed PNM header")
    kind, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise ImageFormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    channels = 3 if kind == b"P6" else 1
    body = raw[m.end():]
    need = w * h * channels
    if len(body) < need:
        raise ImageFormatError(f"{path}: truncated pixel data ({len(body)} of {need} bytes)")
    pixels = np.frombuffer(body[:need], dtype=np.uint8).reshape(h, w, channels)
    return pixels if channels == 3 else pixels[..., 0]


def read_image(path) -> np.ndarray:
    """Read a P6 PPM or 8-bit RGB PNG as an H x W x 3 uint8 array."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"P6":
        return _read_pnm(raw, path)
    if raw[:8] == b"\x89PNG\r\n\x1a\n":
        from PIL import Image

        with Image.open(path) as im:
            if im.mode != "RGB":
                raise ImageFormatError(f"{path}: PNG mode {im.mode} unsupported (need 8-bit RGB)")
            return np.asarray(im, dtype=np.uint8).copy()
    raise ImageFormatError(f"{path}: unsupported image format")


def write_image(path, pixels: np.ndarray) -> None:
    """Write H x W x 3 uint8 pixels; ``.png`` suffix selects PNG, anything else P6."""
    path = Path(path)
    if pixels.dtype != np.uint8 or pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ImageFormatError(f"expected H x W x 3 uint8 pixels, got {pixels.dtype} {pixels.shape}")
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(pixels, "RGB").save(path, format="PNG")
        return
    h, w, _ = pixels.shape
    path.write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(pixels).tobytes())


def read_mask(path) -> np.ndarray:
    """Read a mask image (P5 PGM, P6 PPM or PNG) as an H x W {0, 255} array;
    any pixel at or above 128 counts as marked."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] in (b"P5", b"P6"):
        pixels = _read_pnm(raw, path)
    elif raw[:8] == b"\x89PNG\r\n\x1a\n":
        from PIL import Image

        with Image.open(path) as im:
            pixels = np.asarray(im.convert("L"))
    else:
        raise ImageFormatError(f"{path}: unsupported mask format")
    if pixels.ndim == 3:
        pixels = pixels.max(axis=2)
    return np.where(pixels >= 128, 255, 0).astype(np.uint8)


def write_mask(path, mask: np.ndarray) -> None:
    """Write a {0, 255} mask as P5 PGM (or PNG for a ``.png`` suffix)."""
    path = Path(path)
    mask = np.asarray(mask, dtype=np.uint8)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(mask, "L").save(path, format="PNG")
        return
    h, w = mask.shape
    path.write_bytes(b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(mask).tobytes())


def to_tensor(pixels: np.ndarray, dtype=np.float32) -> np.ndarray:
    """H x W x 3 uint8 -> 3 x H x W in [0, 1]."""
    return (pixels.transpose(2, 0, 1).astype(np.float64) / 255.0).astype(dtype)


def to_pixels(tensor: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_tensor` (rounds to nearest)."""
    return np.clip(np.rint(tensor.astype(np.float64) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def load_image(path, dtype=np.float32) -> np.ndarray:
    return to_tensor(read_image(path), dtype)


def preprocess(image: np.ndarray, size: int | tuple[int, int] = 224, dtype=np.float32) -> np.ndarray:
    """Resize a [0, 1] 3 x H x W tensor to ``size`` and subtract the channel means."""
    th, tw = (size, size) if isinstance(size, int) else size
    resized = bilinear_resize(image.astype(np.float64), th, tw)
    return (resized - CHANNEL_MEAN[:, None, None]).astype(dtype)


# -- manifests ---------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    label: str
    mask: Path | None = None
    original_label: str | None = None


def load_manifest(path, merge_labels: bool = False, check_files: bool = True) -> list[ManifestEntry]:
    """Parse a ``path,label[,mask]`` CSV. Relative paths resolve against the
    manifest's directory. With ``merge_labels`` severe/mild become ``damage``
    and none becomes ``no_damage``."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"{path}: manifest not found")
    root = path.parent
    entries = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["path", "label"]:
            raise ManifestError(f"{path}:1: header must start with 'path,label'")
        has_mask = len(header) > 2 and header[2].strip() == "mask"
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            if len(row) < 2:
                raise ManifestError(f"{path}:{lineno}: expected at least path,label")
            img, label = row[0].strip(), row[1].strip()
            if label not in SEVERITY_LABELS + BINARY_LABELS:
                raise ManifestError(f"{path}:{lineno}: unknown label {label!r}")
            mask = row[2].strip() if has_mask and len(row) > 2 and row[2].strip() else None
            img_path = root / img
            mask_path = root / mask if mask else None
            if check_files:
                if not img_path.exists():
                    raise ManifestError(f"{path}:{lineno}: image not found: {img}")
                if mask_path is not None and not mask_path.exists():
                    raise ManifestError(f"{path}:{lineno}: mask not found: {mask}")
            final = label
            if merge_labels and label in MERGE:
                final = MERGE[label]
            entries.append(ManifestEntry(img_path, final, mask_path, label))
    kinds = {e.label in BINARY_LABELS for e in entries}
    if len(kinds) > 1:
        raise ManifestError(f"{path}: mixes binary and severity labels")
    return entries


def write_manifest(path, entries: Sequence[ManifestEntry], labels: str = "current") -> None:
    """Write entries with paths relative to the manifest's directory.
    ``labels="original"`` writes the pre-merge labels."""
    path = Path(path)
    root = path.parent.resolve()
    has_mask = any(e.mask is not None for e in entries)

    def rel(p):
        p = Path(p).resolve()
        try:
            return p.relative_to(root).as_posix()
        except ValueError:
            return p.as_posix()

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label", "mask"] if has_mask else ["path", "label"])
        for e in entries:
            label = e.original_label or e.label if labels == "original" else e.label
            row = [rel(e.path), label]
            if has_mask:
                row.append(rel(e.mask) if e.mask is not None else "")
            w.writerow(row)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must be in (0, 1)")


def split(entries: Sequence, spec: SplitSpec = SplitSpec(), key=lambda e: e.label):
    """Seeded train/test partition, stratified by ``key`` unless disabled.

    Both halves keep the input order. In stratified mode a class with fewer
    than two members goes entirely to train, with a warning.
    """
    if len(entries) < 2:
        raise ValueError("need at least two entries to split")
    rng = np.random.default_rng(spec.seed)
    train_idx: list[int] = []
    if spec.stratified:
        groups: dict = {}
        for i, e in enumerate(entries):
            groups.setdefault(key(e), []).append(i)
        for cls in sorted(groups, key=str):
            idx = groups[cls]
            if len(idx) < 2:
                log.warning("class %r has %d member(s); keeping it whole in train", cls, len(idx))
                train_idx += idx
                continue
            perm = rng.permutation(len(idx))
            n_train = _round_half_up(spec.train_fraction * len(idx))
            train_idx += [idx[p] for p in perm[:n_train]]
    else:
        perm = rng.permutation(len(entries))
        train_idx = perm[:_round_half_up(spec.train_fraction * len(entries))].tolist()
    chosen = set(train_idx)
    train = [e for i, e in enumerate(entries) if i in chosen]
    test = [e for i, e in enumerate(entries) if i not in chosen]
    return train, test


# -- synthetic dataset ---------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    count: int = 400
    size: int = 64
    seed: int = 0
    damage_fraction: float = 0.5
    min_coverage: float = 0.05
    max_coverage: float = 0.30
    mild_limit: float = 0.15
    noise: float = 0.02

    def __post_init__(self):
        if self.count < 2:
            raise ValueError("need at least two images")
        if not 0 < self.damage_fraction < 1:
            raise ValueError("damage_fraction must be in (0, 1)")
        if not 0 < self.min_coverage <= self.mild_limit < self.max_coverage < 1:
            raise ValueError("coverage bounds must satisfy 0 < min <= mild_limit < max < 1")


def severity_for_coverage(coverage: float, mild_limit: float = 0.15) -> str:
    if coverage == 0:
        return "none"
    return "mild" if coverage <= mild_limit else "severe"


def _background(rng: np.random.Generator, size: int, noise: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    base = rng.uniform(0.25, 0.75, size=3)
    slope = rng.uniform(-0.2, 0.2, size=(3, 2))
    phase = rng.uniform(0, 2 * np.pi, size=3)
    freq = rng.uniform(0.5, 1.5)
    img = (base[:, None, None]
           + slope[:, 0, None, None] * (yy - 0.5)
           + slope[:, 1, None, None] * (xx - 0.5)
           + 0.08 * np.sin(2 * np.pi * freq * (xx + yy) / 2 + phase[:, None, None]))
    img += rng.normal(0, noise, size=img.shape)
    return img


def _rubble(rng, size: int, spec: SyntheticSpec):
    """1-3 non-overlapping rectangles whose union covers a fraction of the
    image drawn uniformly from [min_coverage, max_coverage]."""
    total = size * size
    while True:
        target = rng.uniform(spec.min_coverage, spec.max_coverage)
        k = int(rng.integers(1, 4))
        shares = rng.dirichlet(np.ones(k)) * target * total
        mask = np.zeros((size, size), dtype=bool)
        ok = True
        for area in shares:
            aspect = rng.uniform(0.5, 2.0)
            h = int(np.clip(round(np.sqrt(area * aspect)), 2, size))
            w = int(np.clip(round(area / h), 2, size))
            for _ in range(50):
                y, x = int(rng.integers(0, size - h + 1)), int(rng.integers(0, size - w + 1))
                if not mask[y:y + h, x:x + w].any():
                    mask[y:y + h, x:x + w] = True
                    break
            else:
                ok = False
                break
        cov = mask.mean()
        if ok and spec.min_coverage <= cov <= spec.max_coverage:
            return mask


def synth_image(rng: np.random.Generator, spec: SyntheticSpec, damaged: bool):
    """One synthetic image: returns ``(pixels uint8 HxWx3, mask uint8 HxW)``."""
    img = _background(rng, spec.size, spec.noise)
    mask = np.zeros((spec.size, spec.size), dtype=bool)
    if damaged:
        mask = _rubble(rng, spec.size, spec)
        speckle = rng.random((spec.size, spec.size)) < 0.5
        tint = rng.uniform(0.0, 0.15, size=3)
        dark = tint[:, None, None] + np.zeros_like(img)
        light = 1.0 - tint[:, None, None] + np.zeros_like(img)
        rubble = np.where(speckle, light, dark)
        img = np.where(mask, rubble, img)
    pixels = np.clip(np.rint(np.clip(img, 0, 1) * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    return pixels, np.where(mask, 255, 0).astype(np.uint8)


def generate_synthetic(out_dir, spec: SyntheticSpec = SyntheticSpec()) -> Path:
    """Write images, masks and ``manifest.csv`` (severity labels) to ``out_dir``.

    Returns the manifest path.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    n_damage = min(max(_round_half_up(spec.count * spec.damage_fraction), 1), spec.count - 1)
    damaged = np.zeros(spec.count, dtype=bool)
    damaged[:n_damage] = True
    rng.shuffle(damaged)
    entries = []
    for i, d in enumerate(damaged):
        pixels, mask = synth_image(rng, spec, bool(d))
        img_path = out / "images" / f"img_{i:04d}.ppm"
        mask_path = out / "masks" / f"img_{i:04d}.pgm"
        write_image(img_path, pixels)
        write_mask(mask_path, mask)
        label = severity_for_coverage(float(np.mean(mask == 255)), spec.mild_limit)
        entries.append(ManifestEntry(img_path, label, mask_path))
    manifest = out / "manifest.csv"
    write_manifest(manifest, entries)
    return manifest


def class_index(label: str, num_classes: int) -> int:
    """Label to output index: damage=0, no_damage=1; severe=0, mild=1, none=2."""
    order = BINARY_LABELS if num_classes == 2 else SEVERITY_LABELS
    if label not in order:
        raise ValueError(f"label {label!r} not valid for a {num_classes}-class network")
    return order.index(label)


def class_label(index: int, num_classes: int) -> str:
    return (BINARY_LABELS if num_classes == 2 else SEVERITY_LABELS)[index]


def load_batch(entries: Sequence[ManifestEntry], size, dtype=np.float32) -> np.ndarray:
    """Load and preprocess every entry's image into an N x 3 x H x W batch."""
    return np.stack([preprocess(load_image(e.path), size, dtype) for e in entries])
