"""Dataset ingestion: manifests, harmonization maps, 64x64 image loading, synthetic blobs."""

from __future__ import annotations

import colorsys
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError, UnmappedLabelError

log = logging.getLogger(__name__)

NUM_CLASSES = 13
DOMAIN_SIZE = 64
EXCLUDED = "EXCLUDED"
SPLITS = ("train", "val", "test")
ACCEPTED_FORMATS = {"PNG", "TIFF", "JPEG"}
IMAGE_SUFFIXES = {".png", ".tif", ".tiff", ".jpg", ".jpeg"}


# --- resampling & decoding -------------------------------------------------

def _axis_weights(n_in, n_out):
    # half-pixel centres, edge-clamped
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def resize_bilinear(image, height, width):
    """Bilinear resampling of an ``(H, W, C)`` array (no antialiasing)."""
    image = np.asarray(image, dtype=np.float64)
    r0, r1, fr = _axis_weights(image.shape[0], height)
    c0, c1, fc = _axis_weights(image.shape[1], width)
    fr = fr[:, None, None]
    fc = fc[None, :, None]
    top = image[r0][:, c0] * (1 - fc) + image[r0][:, c1] * fc
    bottom = image[r1][:, c0] * (1 - fc) + image[r1][:, c1] * fc
    return top * (1 - fr) + bottom * fr


def load_image_64(path, size=DOMAIN_SIZE):
    """Decode a PNG/TIFF/JPEG as RGB, resample to ``size x size``, scale to [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            if img.format not in ACCEPTED_FORMATS:
                raise DataError(f"unsupported image format {img.format!r}", path)
            raw = np.asarray(img.convert("RGB"), dtype=np.float64)
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"cannot decode image ({exc.__class__.__name__})", path) from exc
    out = resize_bilinear(raw, size, size) / 255.0
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# --- harmonization ---------------------------------------------------------

class HarmonizationMap:
    """Per-domain ``raw_label -> class_id | EXCLUDED`` lookup."""

    def __init__(self, table=None):
        self.table = {}
        self.dropped = Counter()
        for (domain, label), target in (table or {}).items():
            self.add(domain, label, target)

    def add(self, domain, raw_label, target):
        if target != EXCLUDED:
            target = int(target)
            if not 0 <= target < NUM_CLASSES:
                raise DataError(f"class id {target} for {domain}/{raw_label} outside [0, {NUM_CLASSES})")
        self.table[(domain, raw_label)] = target

    @classmethod
    def identity(cls, domain, labels):
        return cls({(domain, str(label)): int(label) for label in labels})

    def lookup(self, raw_label, domain):
        try:
            return self.table[(domain, raw_label)]
        except KeyError:
            raise UnmappedLabelError(domain, raw_label) from None

    def domains(self):
        return sorted({d for d, _ in self.table})

    def write(self, path):
        lines = [f"{d}\t{label}\t{target}\n" for (d, label), target in sorted(self.table.items())]
        Path(path).write_text("".join(lines), encoding="utf-8")

    @classmethod
    def read(cls, path):
        path = Path(path)
        if not path.is_file():
            raise DataError("harmonization map not found", path)
        hmap = cls()
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"line {lineno}: expected domain<TAB>raw_label<TAB>class_id|EXCLUDED", path)
            domain, label, target = parts
            hmap.add(domain, label, target if target == EXCLUDED else _parse_int(target, path, lineno))
        return hmap


def _parse_int(text, path, lineno):
    try:
        return int(text)
    except ValueError:
        raise DataError(f"line {lineno}: {text!r} is not an integer", path) from None


def harmonize(raw_label, domain, hmap):
    """Class id for ``raw_label``, or ``EXCLUDED``. Unknown labels raise."""
    return hmap.lookup(raw_label, domain)


# --- manifests -------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    path: str
    raw_label: str
    class_id: int
    domain: str
    split: str = "train"


class DatasetManifest:
    def __init__(self, entries=()):
        self.entries = list(entries)
        for e in self.entries:
            if not 0 <= e.class_id < NUM_CLASSES:
                raise DataError(f"class id {e.class_id} outside [0, {NUM_CLASSES})", e.path)
            if not e.domain:
                raise DataError("empty domain name", e.path)
            if e.split not in SPLITS:
                raise DataError(f"unknown split {e.split!r}", e.path)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def split(self, name):
        return DatasetManifest(e for e in self.entries if e.split == name)

    def domains(self):
        return sorted({e.domain for e in self.entries})

    def class_counts(self):
        return Counter(e.class_id for e in self.entries)

    def to_text(self):
        return "".join(
            f"{e.path}\t{e.raw_label}\t{e.class_id}\t{e.domain}\t{e.split}\n" for e in self.entries
        )

    def write(self, path):
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def read(cls, path):
        path = Path(path)
        if not path.is_file():
            raise DataError("manifest not found", path)
        entries = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise DataError(f"line {lineno}: expected 5 tab-separated fields, got {len(parts)}", path)
            p, raw, cid, domain, split = parts
            entries.append(ManifestEntry(p, raw, _parse_int(cid, path, lineno), domain, split))
        return cls(entries)

    def load(self, check_exists=True):
        """Decode every entry into an :class:`ImageSet`."""
        if check_exists:
            for e in self.entries:
                if not Path(e.path).is_file():
                    raise DataError("manifest entry does not exist", e.path)
        images = np.stack([load_image_64(e.path) for e in self.entries]) if self.entries else \
            np.zeros((0, DOMAIN_SIZE, DOMAIN_SIZE, 3), np.float32)
        labels = np.array([e.class_id for e in self.entries], dtype=np.int64)
        domains = self.domains()
        return ImageSet(images, labels, domains[0] if len(domains) == 1 else "+".join(domains))


def scan_folder(root, hmap, domain, split="train"):
    """Manifest for a folder-per-class tree; raw label = subfolder name.

    Entries mapped to ``EXCLUDED`` are dropped and counted in ``hmap.dropped``.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError("dataset root is not a directory", root)
    entries = []
    for folder in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            continue
        target = harmonize(folder.name, domain, hmap)
        if target == EXCLUDED:
            hmap.dropped[(domain, folder.name)] += len(files)
            log.info("dropped %d images of excluded label %s/%s", len(files), domain, folder.name)
            continue
        entries.extend(ManifestEntry(str(f), folder.name, target, domain, split) for f in files)
    if not entries and not hmap.dropped:
        raise DataError("no images found under dataset root", root)
    return DatasetManifest(entries)


def assign_splits(manifest, fractions, seed):
    """Stratified random split; ``fractions`` maps split name to share (sums to 1)."""
    rng = np.random.default_rng(seed)
    names = list(fractions)
    shares = np.array([fractions[n] for n in names], dtype=float)
    by_class = {}
    for i, e in enumerate(manifest.entries):
        by_class.setdefault(e.class_id, []).append(i)
    split_of = {}
    for cls in sorted(by_class):
        idx = rng.permutation(by_class[cls])
        cuts = np.round(np.cumsum(shares)[:-1] * len(idx)).astype(int)
        for name, part in zip(names, np.split(idx, cuts)):
            for i in part:
                split_of[int(i)] = name
    return DatasetManifest(
        ManifestEntry(e.path, e.raw_label, e.class_id, e.domain, split_of[i])
        for i, e in enumerate(manifest.entries)
    )


# --- in-memory datasets ----------------------------------------------------

@dataclass
class ImageSet:
    images: np.ndarray  # (N, H, W, 3) float32 in [0, 1]
    labels: np.ndarray  # (N,) int
    domain: str = ""

    def __len__(self):
        return len(self.labels)

    def subset(self, index):
        index = np.asarray(index)
        return ImageSet(self.images[index], self.labels[index], self.domain)


def stratified_split(dataset, fraction, seed):
    """Split off ``fraction`` of every class; returns ``(rest, held_out)``."""
    rng = np.random.default_rng(seed)
    held = []
    for cls in np.unique(dataset.labels):
        idx = rng.permutation(np.flatnonzero(dataset.labels == cls))
        held.extend(idx[: int(round(fraction * len(idx)))].tolist())
    held = np.sort(np.array(held, dtype=int))
    rest = np.setdiff1d(np.arange(len(dataset)), held)
    return dataset.subset(rest), dataset.subset(held)


def class_hues(num_classes, hue_shift=0.0):
    return (np.arange(num_classes) / num_classes + hue_shift) % 1.0


def synth_blobs(seed, per_class, num_classes=3, hue_shift=0.0, size=DOMAIN_SIZE, domain="synth"):
    """Noisy grey background with one coloured disk per image.

    The class fixes the disk hue (evenly spaced around the colour wheel,
    rotated by ``hue_shift``) and its radius band; position, exact radius,
    saturation and brightness are jittered.
    """
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if not 1 <= num_classes <= NUM_CLASSES:
        raise ValueError(f"num_classes must lie in [1, {NUM_CLASSES}]")
    rng = np.random.default_rng(seed)
    hues = class_hues(num_classes, hue_shift)
    yy, xx = np.mgrid[0:size, 0:size]
    images = np.empty((per_class * num_classes, size, size, 3), np.float32)
    labels = np.repeat(np.arange(num_classes), per_class)
    for i, cls in enumerate(labels):
        grey = rng.uniform(0.25, 0.45)
        img = grey + rng.normal(0.0, 0.04, (size, size, 3))
        radius = size * (0.14 + 0.02 * (cls % 4)) + rng.uniform(-1.0, 1.0)
        cy, cx = size / 2 + rng.uniform(-size / 8, size / 8, 2)
        hue = (hues[cls] + rng.uniform(-0.02, 0.02)) % 1.0
        rgb = colorsys.hsv_to_rgb(hue, rng.uniform(0.65, 0.9), rng.uniform(0.7, 0.9))
        disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
        img[disk] = np.asarray(rgb) + rng.normal(0.0, 0.04, (int(disk.sum()), 3))
        images[i] = np.clip(img, 0.0, 1.0)
    return ImageSet(images, labels, domain)


def write_image_set(dataset, root, split_fractions=None, seed=0, prefix="img"):
    """Write ``dataset`` as ``root/<class>/<prefix>_NNNNN.png`` plus a manifest.

    Returns the manifest (with splits assigned when ``split_fractions`` is given).
    """
    root = Path(root)
    entries = []
    for i, (img, cls) in enumerate(zip(dataset.images, dataset.labels)):
        folder = root / str(int(cls))
        folder.mkdir(parents=True, exist_ok=True)
        path = folder / f"{prefix}_{i:05d}.png"
        Image.fromarray(np.round(img * 255).astype(np.uint8), "RGB").save(path)
        entries.append(ManifestEntry(str(path), str(int(cls)), int(cls), dataset.domain or "synth"))
    manifest = DatasetManifest(entries)
    if split_fractions:
        manifest = assign_splits(manifest, split_fractions, seed)
    return manifest
