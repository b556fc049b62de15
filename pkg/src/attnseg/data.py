"""Dataset ingestion, synthetic ultrasound-like data, resizing, overlays.

Real data follows the breast-ultrasound directory convention: grayscale PNGs
named like ``benign (7).png`` with masks ``benign (7)_mask.png`` (plus
``_mask_1`` etc. for multi-annotation images, merged by union). The ``normal``
class carries no masks and is excluded. Images are resized bilinearly, masks
by nearest neighbor and re-binarized.

The synthetic generator stands in for real data at desk scale: multiplicative
speckle over a dark background with one or two elliptical lesions (smoothly
faded borders); the mask is the exact ellipse union.
"""

from __future__ import annotations

import json
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from attnseg.metrics import confusion_counts
from attnseg.tensor import _linear_coeffs

THREADS_ENV = "ATTNSEG_THREADS"


class ManifestError(ValueError):
    """The dataset directory violates the expected layout."""


@dataclass
class SegmentationSample:
    """One image/mask pair; image in [0,1], mask strictly binary."""

    id: str
    image: np.ndarray  # (1, H, W) or (3, H, W)
    mask: np.ndarray  # (1, H, W) of {0.0, 1.0}
    label: str = "benign"


@dataclass
class ManifestEntry:
    image_path: str
    mask_paths: list[str]
    label: str


@dataclass
class DatasetManifest:
    root: str
    entries: list[ManifestEntry] = field(default_factory=list)

    def to_json(self, path) -> None:
        payload = {
            "root": self.root,
            "entries": [
                {"image": e.image_path, "masks": e.mask_paths, "label": e.label}
                for e in self.entries
            ],
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


_MASK_RE = re.compile(r"_mask(_\d+)?\.png$", re.IGNORECASE)
LABELS = ("benign", "malignant", "normal")


def _label_of(filename: str) -> str | None:
    stem = os.path.basename(filename).lower()
    for label in LABELS:
        if stem.startswith(label):
            return label
    return None


def build_manifest(root) -> DatasetManifest:
    """Scan a dataset root; excludes the normal class, demands >=1 mask each."""
    root = str(root)
    if not os.path.isdir(root):
        raise ManifestError(f"dataset root '{root}' is not a directory")
    images = []
    masks: dict[str, list[str]] = {}
    for dirpath, _, filenames in os.walk(root):
        for fn in sorted(filenames):
            if not fn.lower().endswith(".png"):
                continue
            path = os.path.join(dirpath, fn)
            if _MASK_RE.search(fn):
                stem = _MASK_RE.sub("", fn)
                masks.setdefault(os.path.join(dirpath, stem), []).append(path)
            else:
                images.append(path)
    entries = []
    for path in sorted(images):
        label = _label_of(path)
        if label == "normal":
            continue
        stem = path[: -len(".png")]
        mask_paths = sorted(masks.get(stem, []))
        if not mask_paths:
            raise ManifestError(f"image without mask: {path}")
        entries.append(ManifestEntry(path, mask_paths, label or "benign"))
    return DatasetManifest(root=root, entries=entries)


def _read_gray(path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    except OSError:
        raise
    except Exception as exc:  # Pillow raises various decode errors
        raise OSError(f"unreadable PNG '{path}': {exc}") from exc


def resize(img: np.ndarray, h: int, w: int, mode: str = "bilinear") -> np.ndarray:
    """Resize (C, H, W) or (H, W) with half-pixel source centers."""
    if h < 1 or w < 1:
        raise ValueError(f"target extents must be positive, got {h}x{w}")
    squeeze = img.ndim == 2
    data = img[None] if squeeze else img
    c, sh, sw = data.shape
    if mode == "nearest":
        ys = np.minimum((np.arange(h) + 0.5) * (sh / h), sh - 1).astype(np.int64)
        xs = np.minimum((np.arange(w) + 0.5) * (sw / w), sw - 1).astype(np.int64)
        out = data[:, ys][:, :, xs]
    elif mode == "bilinear":
        y0, y1, fy = _linear_coeffs(sh, h)
        x0, x1, fx = _linear_coeffs(sw, w)
        fy = fy.reshape(-1, 1)
        top = (1 - fx) * data[:, y0][:, :, x0] + fx * data[:, y0][:, :, x1]
        bot = (1 - fx) * data[:, y1][:, :, x0] + fx * data[:, y1][:, :, x1]
        out = (1 - fy) * top + fy * bot
    else:
        raise ValueError(f"unknown resize mode '{mode}'")
    return out[0] if squeeze else out


def _load_entry(entry: ManifestEntry, target_size: int) -> SegmentationSample:
    image = _read_gray(entry.image_path)
    union = np.zeros_like(image)
    for mp in entry.mask_paths:
        m = _read_gray(mp)
        if m.shape != image.shape:
            m = resize(m, *image.shape, mode="nearest")
        union = np.maximum(union, (m > 0.5).astype(np.float64))
    image = resize(image, target_size, target_size, mode="bilinear")
    mask = (resize(union, target_size, target_size, mode="nearest") > 0.5).astype(np.float64)
    stem = os.path.splitext(os.path.basename(entry.image_path))[0]
    return SegmentationSample(
        id=stem, image=image[None], mask=mask[None], label=entry.label
    )


def _worker_cap(workers: int | None) -> int:
    cap = os.environ.get(THREADS_ENV)
    limit = int(cap) if cap else 4
    return max(1, min(workers if workers is not None else limit, limit))


def load_dataset(root, target_size: int = 256, workers: int | None = None):
    """Load every (image, mask-union) pair under `root`, ordered by filename."""
    manifest = build_manifest(root)
    n = _worker_cap(workers)
    if n > 1:
        with ThreadPoolExecutor(max_workers=n) as pool:
            return list(pool.map(lambda e: _load_entry(e, target_size), manifest.entries))
    return [_load_entry(e, target_size) for e in manifest.entries]


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def _ellipse_field(size: int, cy, cx, ry, rx, angle) -> np.ndarray:
    """Normalized squared radius of each pixel w.r.t. a rotated ellipse."""
    yy, xx = np.mgrid[0:size, 0:size]
    y = yy - cy
    x = xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u = (ca * x + sa * y) / rx
    v = (-sa * x + ca * y) / ry
    return u * u + v * v


def synth_dataset(n: int, size: int = 64, seed: int = 0):
    """Generate speckled images with 1-2 elliptical lesions and exact masks.

    Lesions are brighter or darker than the background with smoothly faded
    borders; thin same-polarity decoy streaks, a vertical gain gradient, and
    strong multiplicative speckle make the task hard enough that decoder
    capacity matters. Guarantees per sample: mask fraction in [0.02, 0.4]
    and a mean-intensity contrast of at least 0.15 between lesion and
    background pixels (enforced by rejection, deterministic per seed).
    """
    if n < 1:
        raise ValueError("need n >= 1")
    if size % 32:
        raise ValueError(f"size must be divisible by 32, got {size}")
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        n_lesions = 1 if rng.uniform() < 0.7 else 2
        while True:
            background = rng.uniform(0.34, 0.48)
            sign = 1.0 if rng.uniform() < 0.5 else -1.0
            offset = sign * rng.uniform(0.20, 0.28)
            if background + offset < 0.06:
                offset = 0.06 - background
            mask = np.zeros((size, size))
            bump = np.zeros((size, size))
            for _ in range(n_lesions):
                ry = rng.uniform(0.07, 0.17) * size
                rx = rng.uniform(0.07, 0.17) * size
                cy = rng.uniform(0.22, 0.78) * size
                cx = rng.uniform(0.22, 0.78) * size
                angle = rng.uniform(0.0, np.pi)
                r2 = _ellipse_field(size, cy, cx, ry, rx, angle)
                mask = np.maximum(mask, (r2 <= 1.0).astype(np.float64))
                # smooth border: full strength inside, fading over ~28% extra radius
                fade = np.clip((1.28 - np.sqrt(r2)) / 0.28, 0.0, 1.0)
                bump = np.maximum(bump, fade)
            if not (0.02 <= mask.mean() <= 0.4):
                continue
            decoy = np.zeros((size, size))
            for _ in range(rng.integers(3, 6)):
                ry = rng.uniform(0.012, 0.035) * size
                rx = rng.uniform(0.10, 0.30) * size
                cy = rng.uniform(0.05, 0.95) * size
                cx = rng.uniform(0.05, 0.95) * size
                angle = rng.uniform(0.0, np.pi)
                r2 = _ellipse_field(size, cy, cx, ry, rx, angle)
                fade = np.clip((1.3 - np.sqrt(r2)) / 0.5, 0.0, 1.0)
                decoy = np.maximum(decoy, fade * (~(mask > 0)).astype(np.float64))
            gain = np.linspace(rng.uniform(0.78, 1.0), rng.uniform(1.0, 1.22), size)[:, None]
            base = (background + offset * (bump + decoy * rng.uniform(0.45, 0.8))) * gain
            speckle = 1.0 + 0.45 * rng.standard_normal((size, size))
            image = np.clip(base * np.clip(speckle, 0.05, 2.8), 0.0, 1.0)
            inside = mask > 0
            if abs(image[inside].mean() - image[~inside].mean()) >= 0.15:
                break
        label = "benign" if n_lesions == 1 else "malignant"
        samples.append(
            SegmentationSample(
                id=f"{label} ({i + 1})",
                image=image[None],
                mask=mask[None],
                label=label,
            )
        )
    return samples


def save_dataset(samples, out_dir) -> None:
    """Write samples as 8-bit PNGs in the image/_mask naming convention.

    The manifest stores file names relative to the directory, so identical
    samples written anywhere produce byte-identical payloads.
    """
    os.makedirs(out_dir, exist_ok=True)
    manifest = DatasetManifest(root=".")
    for s in samples:
        img_name = f"{s.id}.png"
        mask_name = f"{s.id}_mask.png"
        Image.fromarray((s.image[0] * 255.0).round().astype(np.uint8)).save(
            os.path.join(out_dir, img_name)
        )
        Image.fromarray((s.mask[0] * 255.0).astype(np.uint8)).save(
            os.path.join(out_dir, mask_name)
        )
        manifest.entries.append(ManifestEntry(img_name, [mask_name], s.label))
    manifest.to_json(os.path.join(out_dir, "manifest.json"))


# ---------------------------------------------------------------------------
# splits and overlays
# ---------------------------------------------------------------------------


def fixed_test_split(samples, counts: tuple[int, int], seed: int = 0):
    """Deterministic (train, test) split with the requested sizes."""
    n_train, n_test = counts
    if n_train + n_test > len(samples):
        raise ValueError(
            f"split {n_train}+{n_test} exceeds the {len(samples)} available samples"
        )
    order = np.random.default_rng(seed).permutation(len(samples))
    test = [samples[i] for i in order[:n_test]]
    train = [samples[i] for i in order[n_test : n_test + n_train]]
    return train, test


def overlay(pred_mask: np.ndarray, gt_mask: np.ndarray, image: np.ndarray) -> np.ndarray:
    """Color-code prediction quality on the grayscale image.

    True positives tint green, false positives red, false negatives blue;
    true negatives stay untinted gray. Returns (H, W, 3) uint8.
    """
    pred = np.asarray(pred_mask).reshape(np.asarray(pred_mask).shape[-2:])
    gt = np.asarray(gt_mask).reshape(np.asarray(gt_mask).shape[-2:])
    gray = np.asarray(image).reshape(np.asarray(image).shape[-2:])
    if pred.shape != gt.shape or pred.shape != gray.shape:
        raise ValueError(
            f"shape mismatch: pred {pred.shape}, gt {gt.shape}, image {gray.shape}"
        )
    confusion_counts(pred, gt)  # validates binary masks
    p = pred.astype(bool)
    g = gt.astype(bool)
    base = np.clip(gray, 0.0, 1.0) * 255.0
    out = np.repeat(base[:, :, None], 3, axis=2)
    for sel, channel in (((p & g), 1), ((p & ~g), 0), ((~p & g), 2)):
        for ch in range(3):
            out[sel, ch] = base[sel] * 0.5 + (127.5 if ch == channel else 0.0)
    return out.astype(np.uint8)


def save_overlay(path, pred_mask, gt_mask, image) -> None:
    Image.fromarray(overlay(pred_mask, gt_mask, image)).save(path)
