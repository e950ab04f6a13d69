"""Dataset ingestion: directory-per-class corpora, seeded split manifests,
binary PPM/PGM codecs, and the batch stream that feeds training.

The native image format is 8-bit binary PPM (P6); anything else is
expected to be pre-converted. Manifests are plain text and round-trip
byte-identically.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .augment import AugmentPolicy, apply_policy, bilinear_resize, policy_rng
from .errors import DataError, DataFormatError, ShapeError
from .evaluation import one_hot_matrix
from .seeding import derive_seed
from .tensor import Tensor4, atomic_write_bytes

__all__ = [
    "DatasetManifest",
    "ImageRecord",
    "ManifestRecord",
    "batch_iterator",
    "build_manifest",
    "center_crop_square",
    "load_image",
    "load_manifest",
    "manifest_from_text",
    "manifest_to_text",
    "pack_image",
    "read_pgm",
    "rescale_max_side",
    "save_image",
    "save_manifest",
    "write_pgm",
]

SPLITS = ("train", "val", "test")
IMAGE_SUFFIX = ".ppm"


# ---------------------------------------------------------------------------
# PPM / PGM codecs


def _parse_netpbm_header(blob: bytes, magic: bytes, path) -> tuple:
    """Return (fields..., payload offset) for a P5/P6 header; '#' comments ok."""
    if not blob.startswith(magic):
        raise DataFormatError(f"{path}: not a {magic.decode()} file")
    pos = len(magic)
    fields = []
    while len(fields) < 3:
        if pos >= len(blob):
            raise DataFormatError(f"{path}: truncated header")
        ch = blob[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            pos = blob.find(b"\n", pos)
            if pos < 0:
                raise DataFormatError(f"{path}: truncated header comment")
        elif ch.isdigit():
            end = pos
            while end < len(blob) and blob[end:end + 1].isdigit():
                end += 1
            fields.append(int(blob[pos:end]))
            pos = end
        else:
            raise DataFormatError(f"{path}: bad header byte {ch!r}")
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise DataFormatError(f"{path}: missing whitespace after header")
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise DataFormatError(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise DataFormatError(f"{path}: unsupported maxval {maxval} (need 255)")
    return width, height, pos + 1


def _read_file(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


@dataclass(frozen=True)
class ImageRecord:
    """A decoded image: (h, w, 3) values in [0, 1] plus where it came from."""

    pixels: np.ndarray
    source: str

    def __post_init__(self):
        arr = np.asarray(self.pixels)
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeError(f"{self.source}: expected (h, w, 3) pixels, got {arr.shape}")


def load_image(path) -> ImageRecord:
    """Decode a binary PPM (P6, maxval 255) into floats in [0, 1]."""
    blob = _read_file(path)
    width, height, offset = _parse_netpbm_header(blob, b"P6", path)
    need = width * height * 3
    payload = blob[offset:]
    if len(payload) != need:
        raise DataFormatError(f"{path}: expected {need} pixel bytes, got {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return ImageRecord(pixels.astype(np.float64) / 255.0, str(path))


def save_image(path, pixels) -> None:
    """Quantize floats in [0, 1] to a binary PPM."""
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"expected (h, w, 3) pixels, got {arr.shape}")
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    header = f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Decode a binary PGM (P5, maxval 255) into (h, w) floats in [0, 1]."""
    blob = _read_file(path)
    width, height, offset = _parse_netpbm_header(blob, b"P5", path)
    payload = blob[offset:]
    if len(payload) != width * height:
        raise DataFormatError(f"{path}: expected {width * height} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width) / 255.0


def write_pgm(path, values) -> None:
    """Quantize a (h, w) float array in [0, 1] to a binary PGM."""
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ShapeError(f"expected a (h, w) array, got {arr.shape}")
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + data.tobytes())


# ---------------------------------------------------------------------------
# Geometry for tensor packing


def rescale_max_side(image, max_side: int) -> np.ndarray:
    """Shrink so the longer side equals max_side; never upscales."""
    arr = np.asarray(image)
    if max_side < 1:
        raise ValueError(f"max side must be >= 1, got {max_side}")
    h, w = arr.shape[:2]
    longest = max(h, w)
    if longest <= max_side:
        return arr.copy()
    scale = max_side / longest
    new_h = max(1, round(h * scale))
    new_w = max(1, round(w * scale))
    return bilinear_resize(arr, new_h, new_w)


def center_crop_square(image) -> np.ndarray:
    """Crop the longer axis symmetrically down to the shorter one."""
    arr = np.asarray(image)
    h, w = arr.shape[:2]
    side = min(h, w)
    top = (h - side) // 2
    left = (w - side) // 2
    return arr[top:top + side, left:left + side].copy()


def pack_image(image, target_side: int) -> np.ndarray:
    """Normalize any image to (target_side, target_side, c).

    Shrinks so the longer side fits, center-crops to square, then zero-pads
    symmetrically when the square is still small. Images already at the
    target pass through bit-exact.
    """
    arr = center_crop_square(rescale_max_side(image, target_side))
    side = arr.shape[0]
    if side == target_side:
        return arr
    out = np.zeros((target_side, target_side) + arr.shape[2:], dtype=arr.dtype)
    offset = (target_side - side) // 2
    out[offset:offset + side, offset:offset + side] = arr
    return out


# ---------------------------------------------------------------------------
# Manifests


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    class_index: int
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataFormatError(f"unknown split {self.split!r}")
        if "\t" in self.path or "\n" in self.path or not self.path:
            raise DataFormatError(f"bad record path {self.path!r}")


@dataclass(frozen=True)
class DatasetManifest:
    root: str
    seed: int
    classes: tuple
    records: tuple

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "records", tuple(self.records))
        if len(set(self.classes)) != len(self.classes):
            raise DataError("duplicate class names")
        for name in self.classes:
            if not name or any(ch in name for ch in " \t\n"):
                raise DataError(f"bad class name {name!r}")
        seen = set()
        for rec in self.records:
            if not 0 <= rec.class_index < len(self.classes):
                raise DataError(f"record class index {rec.class_index} out of range")
            if rec.path in seen:
                raise DataError(f"duplicate record path {rec.path!r}")
            seen.add(rec.path)

    def split_records(self, split: str) -> tuple:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return tuple(r for r in self.records if r.split == split)

    def split_sizes(self) -> dict:
        sizes = {split: 0 for split in SPLITS}
        for rec in self.records:
            sizes[rec.split] += 1
        return sizes


def _class_dirs(root) -> list:
    try:
        entries = sorted(e.name for e in os.scandir(root) if e.is_dir())
    except OSError as exc:
        raise DataError(f"cannot scan dataset root {root}: {exc}") from exc
    if not entries:
        raise DataError(f"no class directories under {root}")
    return entries


def _class_files(root, name) -> list:
    class_dir = os.path.join(root, name)
    try:
        files = sorted(e.name for e in os.scandir(class_dir)
                       if e.is_file() and e.name.endswith(IMAGE_SUFFIX))
    except OSError as exc:
        raise DataError(f"cannot scan class directory {class_dir}: {exc}") from exc
    if not files:
        raise DataError(f"class directory {class_dir} has no {IMAGE_SUFFIX} files")
    return files


def _split_counts(n: int, ratios, counts, class_name) -> tuple:
    if ratios is not None:
        n_train = int(round(n * ratios[0]))
        n_val = min(int(round(n * ratios[1])), n - n_train)
        return n_train, n_val, n - n_train - n_val
    n_train, n_val, n_test = counts
    if n_train + n_val + n_test > n:
        raise DataError(f"class {class_name!r} has {n} images, "
                        f"need {n_train + n_val + n_test}")
    return n_train, n_val, n_test


def build_manifest(root, ratios=None, counts=None, seed: int = 0) -> DatasetManifest:
    """Scan a directory-per-class tree and assign splits per class.

    Exactly one of ratios (train, val, test fractions summing to 1) or
    counts (absolute per-class sizes; surplus files are left out, the
    750/250 protocol style) must be given. Assignment shuffles each class
    with its own seed derived from (seed, class name), so adding a class
    never reshuffles the others.
    """
    if (ratios is None) == (counts is None):
        raise ValueError("give exactly one of ratios or counts")
    if ratios is not None:
        ratios = tuple(float(r) for r in ratios)
        if len(ratios) != 3 or any(r < 0 for r in ratios):
            raise ValueError(f"ratios must be three non-negative values, got {ratios}")
        if abs(sum(ratios) - 1.0) > 1e-9:
            raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    else:
        counts = tuple(int(c) for c in counts)
        if len(counts) != 3 or any(c < 0 for c in counts) or sum(counts) < 1:
            raise ValueError(f"counts must be three non-negative sizes, got {counts}")

    classes = _class_dirs(root)
    records = []
    for class_index, name in enumerate(classes):
        files = _class_files(root, name)
        rng = np.random.default_rng(derive_seed(seed, "split", name))
        order = rng.permutation(len(files))
        n_train, n_val, n_test = _split_counts(len(files), ratios, counts, name)
        for position, file_index in enumerate(order):
            if position < n_train:
                split = "train"
            elif position < n_train + n_val:
                split = "val"
            elif position < n_train + n_val + n_test:
                split = "test"
            else:
                continue  # counts mode: surplus beyond the requested sizes
            records.append(ManifestRecord(f"{name}/{files[file_index]}", class_index, split))
    return DatasetManifest(str(root), int(seed), tuple(classes), tuple(records))


def manifest_to_text(manifest: DatasetManifest) -> str:
    lines = [f"root {manifest.root}", f"seed {manifest.seed}"]
    for idx, name in enumerate(manifest.classes):
        lines.append(f"class {idx} {name}")
    for rec in manifest.records:
        lines.append(f"{rec.split}\t{rec.class_index}\t{rec.path}")
    return "\n".join(lines) + "\n"


def manifest_from_text(text: str) -> DatasetManifest:
    root = None
    seed = None
    classes = []
    records = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            if line.startswith("root "):
                root = line[5:]
            elif line.startswith("seed "):
                seed = int(line[5:])
            elif line.startswith("class "):
                _, idx, name = line.split(" ", 2)
                if int(idx) != len(classes):
                    raise DataFormatError(f"line {lineno}: class index {idx} out of order")
                classes.append(name)
            else:
                split, idx, path = raw.split("\t")
                records.append(ManifestRecord(path, int(idx), split))
        except (ValueError, DataFormatError) as exc:
            if isinstance(exc, DataFormatError):
                raise
            raise DataFormatError(f"line {lineno}: cannot parse {raw!r}") from exc
    if root is None or seed is None:
        raise DataFormatError("manifest missing root/seed header lines")
    try:
        return DatasetManifest(root, seed, tuple(classes), tuple(records))
    except DataError as exc:
        raise DataFormatError(str(exc)) from exc


def save_manifest(path, manifest: DatasetManifest) -> None:
    atomic_write_bytes(path, manifest_to_text(manifest).encode("utf-8"))


def load_manifest(path, root=None) -> DatasetManifest:
    manifest = manifest_from_text(_read_file(path).decode("utf-8"))
    if root is not None:
        manifest = DatasetManifest(str(root), manifest.seed,
                                   manifest.classes, manifest.records)
    return manifest


# ---------------------------------------------------------------------------
# Batch stream


def batch_iterator(manifest: DatasetManifest, split: str, batch_size: int,
                   target_side: int, seed=None, policy: AugmentPolicy = None,
                   dtype=np.float32):
    """Yield (Tensor4, one-hot labels) over one pass of a split.

    Order is the manifest order, or a seeded shuffle when seed is given.
    The augmentation policy applies to the train split only; each image
    draws from its own stream-position generator, so batch size does not
    change what any image looks like.
    """
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    records = manifest.split_records(split)
    if not records:
        raise DataError(f"split {split!r} has no records")
    order = np.arange(len(records))
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(records))
    augmenting = policy is not None and split == "train" and not policy.is_identity
    n_classes = len(manifest.classes)
    for start in range(0, len(records), batch_size):
        images = []
        labels = []
        for offset, record_index in enumerate(order[start:start + batch_size]):
            record = records[record_index]
            image = load_image(os.path.join(manifest.root, record.path)).pixels
            image = pack_image(image, target_side)
            if augmenting:
                image = apply_policy(image, policy, policy_rng(policy, start + offset))
            images.append(image)
            labels.append(record.class_index)
        x = np.stack(images).astype(dtype)
        yield Tensor4(x), one_hot_matrix(labels, n_classes)
