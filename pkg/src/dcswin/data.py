"""Dataset manifests, stratified splits, image codecs, and synthesis.

A dataset on disk is a directory of class-named subdirectories holding
binary PPM (P6) / PGM (P5) images or raw tensor files. The manifest is a
JSON file listing classes and records; record ids are class-prefixed
(`<class>/<stem>`) and ordered lexicographically, and every path is
relative to the manifest's directory.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .rng import stream
from .serialization import load_tensor, save_tensor

IMAGE_EXTENSIONS = (".ppm", ".pgm", ".dcst")


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    path: str
    label: str
    tag: Optional[str] = None


@dataclass
class DatasetManifest:
    classes: tuple[str, ...]
    records: tuple[ManifestRecord, ...]
    root: Path

    def __post_init__(self):
        self.classes = tuple(self.classes)
        self.records = tuple(self.records)
        self.root = Path(self.root)
        if len(set(self.classes)) != len(self.classes):
            raise FormatError(f"duplicate class names: {self.classes}")
        seen: set[str] = set()
        for rec in self.records:
            if rec.id in seen:
                raise FormatError(f"duplicate record id {rec.id!r}")
            seen.add(rec.id)
            if rec.label not in self.classes:
                raise FormatError(f"record {rec.id!r} has unknown label "
                                  f"{rec.label!r}")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def label_index(self, label: str) -> int:
        return self.classes.index(label)

    def record_by_id(self) -> dict[str, ManifestRecord]:
        return {rec.id: rec for rec in self.records}

    def ids_by_class(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {name: [] for name in self.classes}
        for rec in self.records:
            out[rec.label].append(rec.id)
        return out

    def save(self, path: Union[str, Path]) -> None:
        payload = {
            "classes": list(self.classes),
            "records": [
                {"id": r.id, "path": r.path, "label": r.label,
                 **({"tag": r.tag} if r.tag is not None else {})}
                for r in self.records
            ],
        }
        Path(path).write_text(json.dumps(payload, indent=2) + "\n",
                              encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DatasetManifest":
        path = Path(path)
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise FormatError(f"manifest {path} is not valid JSON: {e}") from e
        try:
            records = tuple(ManifestRecord(id=r["id"], path=r["path"],
                                           label=r["label"], tag=r.get("tag"))
                            for r in payload["records"])
            return cls(classes=tuple(payload["classes"]), records=records,
                       root=path.parent)
        except (KeyError, TypeError) as e:
            raise FormatError(f"manifest {path} missing field: {e}") from e


def scan_image_tree(root: Union[str, Path]) -> DatasetManifest:
    """Build a manifest from class subdirectories; ids are `<class>/<stem>`
    and everything is ordered lexicographically."""
    root = Path(root)
    if not root.is_dir():
        raise FormatError(f"dataset root {root} is not a directory")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise FormatError(f"dataset root {root} has no class subdirectories")
    records: list[ManifestRecord] = []
    for name in classes:
        files = sorted(p for p in (root / name).iterdir()
                       if p.suffix.lower() in IMAGE_EXTENSIONS)
        if not files:
            raise FormatError(f"class directory {root / name} has no images")
        for p in files:
            records.append(ManifestRecord(id=f"{name}/{p.stem}",
                                          path=f"{name}/{p.name}", label=name))
    return DatasetManifest(classes=tuple(classes), records=tuple(records),
                           root=root)


# ---- stratified splitting ---------------------------------------------------

@dataclass
class DatasetSplit:
    labeled: tuple[str, ...]
    unlabeled: tuple[str, ...]
    test: tuple[str, ...]
    seed: int
    train_frac: float
    labeled_frac: float
    audit: dict = field(default_factory=dict)
    manifest: Optional[str] = None

    def save(self, path: Union[str, Path]) -> None:
        payload = {
            "seed": self.seed,
            "train_frac": self.train_frac,
            "labeled_frac": self.labeled_frac,
            "labeled": list(self.labeled),
            "unlabeled": list(self.unlabeled),
            "test": list(self.test),
            "audit": self.audit,
        }
        if self.manifest is not None:
            payload["manifest"] = self.manifest
        Path(path).write_text(json.dumps(payload, indent=2) + "\n",
                              encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DatasetSplit":
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
            return cls(labeled=tuple(payload["labeled"]),
                       unlabeled=tuple(payload["unlabeled"]),
                       test=tuple(payload["test"]),
                       seed=int(payload["seed"]),
                       train_frac=float(payload["train_frac"]),
                       labeled_frac=float(payload["labeled_frac"]),
                       audit=payload.get("audit", {}),
                       manifest=payload.get("manifest"))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise FormatError(f"split file {path} is malformed: {e}") from e


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def stratified_split(manifest: DatasetManifest, train_frac: float = 0.8,
                     labeled_frac: float = 0.05, seed: int = 0) -> DatasetSplit:
    """Per-class train/test split, then labeled/unlabeled inside train.

    Every class keeps at least one labeled training sample (tiny labeled
    fractions round up rather than emptying a class). The audit records
    per-class counts for all three pools.
    """
    if not (0.0 < train_frac < 1.0):
        raise ConfigError(f"train_frac must be in (0,1), got {train_frac}")
    if not (0.0 < labeled_frac <= 1.0):
        raise ConfigError(f"labeled_frac must be in (0,1], got {labeled_frac}")
    rng = stream(seed, "split")
    labeled: list[str] = []
    unlabeled: list[str] = []
    test: list[str] = []
    audit: dict = {"per_class": {}, "seed": seed}
    for name, ids in manifest.ids_by_class().items():
        ids = sorted(ids)
        if len(ids) < 2:
            raise ConfigError(f"class {name!r} needs >= 2 samples to split, "
                              f"has {len(ids)}")
        perm = rng.permutation(len(ids))
        shuffled = [ids[i] for i in perm]
        n_train = _round_half_up(train_frac * len(ids))
        n_train = min(max(n_train, 1), len(ids) - 1)
        train_ids = shuffled[:n_train]
        test_ids = shuffled[n_train:]
        n_labeled = _round_half_up(labeled_frac * n_train)
        n_labeled = min(max(n_labeled, 1), n_train)
        labeled.extend(sorted(train_ids[:n_labeled]))
        unlabeled.extend(sorted(train_ids[n_labeled:]))
        test.extend(sorted(test_ids))
        audit["per_class"][name] = {
            "total": len(ids), "train": n_train, "test": len(test_ids),
            "labeled": n_labeled, "unlabeled": n_train - n_labeled,
        }
    audit["totals"] = {
        "labeled": len(labeled), "unlabeled": len(unlabeled), "test": len(test),
    }
    return DatasetSplit(labeled=tuple(labeled), unlabeled=tuple(unlabeled),
                        test=tuple(test), seed=seed, train_frac=train_frac,
                        labeled_frac=labeled_frac, audit=audit)


# ---- image codecs -----------------------------------------------------------

def _read_header_token(buf: bytes, pos: int, what: str) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    if pos >= n:
        raise FormatError(f"truncated header: expected {what} at byte {pos}")
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace():
        pos += 1
    return buf[start:pos], pos


def decode_ppm_bytes(buf: bytes, origin: str = "<bytes>") -> np.ndarray:
    """Binary PPM (P6) or PGM (P5) -> float64 [3,H,W] in [0,1]; grayscale is
    replicated across channels. Errors cite byte offsets."""
    magic = buf[:2]
    if magic not in (b"P6", b"P5"):
        raise FormatError(f"{origin}: unsupported magic {magic!r} at byte 0 "
                          "(want binary P6 or P5)")
    channels = 3 if magic == b"P6" else 1
    pos = 2
    fields = []
    for what in ("width", "height", "maxval"):
        token, pos = _read_header_token(buf, pos, what)
        try:
            fields.append(int(token))
        except ValueError:
            raise FormatError(f"{origin}: bad {what} {token!r} at byte "
                              f"{pos - len(token)}") from None
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"{origin}: non-positive dimensions {width}x{height}")
    if not (0 < maxval < 65536):
        raise FormatError(f"{origin}: maxval {maxval} outside [1, 65535]")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError(f"{origin}: missing whitespace after maxval at byte {pos}")
    pos += 1
    itemsize = 1 if maxval < 256 else 2
    expected = width * height * channels * itemsize
    raster = buf[pos:pos + expected]
    if len(raster) != expected:
        raise FormatError(f"{origin}: raster truncated at byte "
                          f"{pos + len(raster)}: wanted {expected} bytes from "
                          f"byte {pos}, got {len(raster)}")
    if len(buf) > pos + expected:
        raise FormatError(f"{origin}: {len(buf) - pos - expected} trailing "
                          f"bytes after raster at byte {pos + expected}")
    dtype = np.uint8 if itemsize == 1 else np.dtype(">u2")
    data = np.frombuffer(raster, dtype=dtype).astype(np.float64) / maxval
    if channels == 3:
        img = data.reshape(height, width, 3).transpose(2, 0, 1)
    else:
        img = np.broadcast_to(data.reshape(1, height, width),
                              (3, height, width)).copy()
    return np.ascontiguousarray(img)


def encode_ppm(path: Union[str, Path], img: np.ndarray) -> None:
    """float [3,H,W] in [0,1] -> binary P6 with maxval 255."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"encode_ppm expects [3,H,W], got {img.shape}")
    quant = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[1], img.shape[2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(quant.transpose(1, 2, 0).tobytes())


def decode_image(path: Union[str, Path]) -> np.ndarray:
    """Decode one dataset file to float64 [3,H,W] in [0,1]."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".ppm", ".pgm"):
        return decode_ppm_bytes(path.read_bytes(), origin=str(path))
    if suffix == ".dcst":
        arr = np.asarray(load_tensor(path), dtype=np.float64)
        if arr.ndim == 2:
            arr = np.broadcast_to(arr[None], (3,) + arr.shape).copy()
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise FormatError(f"{path}: tensor image must be [3,H,W] or [H,W], "
                              f"got {arr.shape}")
        return np.ascontiguousarray(arr)
    raise FormatError(f"{path}: unknown image extension {suffix!r} "
                      f"(supported: {', '.join(IMAGE_EXTENSIONS)})")


def save_tensor_image(path: Union[str, Path], img: np.ndarray) -> None:
    save_tensor(path, np.asarray(img, dtype=np.float64))


# ---- bilinear resize ---------------------------------------------------------

def _axis_coords(dst: int, src: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    scale = src / dst
    x = (np.arange(dst, dtype=np.float64) + 0.5) * scale - 0.5
    x = np.clip(x, 0.0, src - 1.0)
    lo = np.floor(x).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, x - lo


def resize_bilinear(img: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Separable bilinear resize of [C,H,W] (align-corners-false sampling,
    edges clamped). A same-size call returns the input bit-identically."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise ShapeError(f"resize_bilinear expects [C,H,W], got {img.shape}")
    th, tw = int(out_hw[0]), int(out_hw[1])
    if th < 1 or tw < 1:
        raise ShapeError(f"target size ({th},{tw}) must be positive")
    _, h, w = img.shape
    if (th, tw) == (h, w):
        return img.copy()
    lo_y, hi_y, fy = _axis_coords(th, h)
    rows = img[:, lo_y, :] * (1.0 - fy)[None, :, None] + \
        img[:, hi_y, :] * fy[None, :, None]
    lo_x, hi_x, fx = _axis_coords(tw, w)
    out = rows[:, :, lo_x] * (1.0 - fx)[None, None, :] + \
        rows[:, :, hi_x] * fx[None, None, :]
    return np.ascontiguousarray(out)


# ---- in-memory dataset --------------------------------------------------------

class ArrayDataset:
    """Decoded dataset held in memory with per-channel normalization.

    Normalization statistics are fit on an explicit id pool (the labeled
    training pool) and then applied to every sample served.
    """

    def __init__(self, ids: Sequence[str], images: np.ndarray,
                 labels: np.ndarray, class_names: Sequence[str]):
        self.ids = list(ids)
        self.images = np.asarray(images, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.class_names = tuple(class_names)
        if self.images.ndim != 4 or self.images.shape[0] != len(self.ids) \
                or self.labels.shape != (len(self.ids),):
            raise ShapeError(f"inconsistent dataset arrays: {len(self.ids)} ids, "
                             f"images {self.images.shape}, labels "
                             f"{self.labels.shape}")
        self.index = {sample_id: i for i, sample_id in enumerate(self.ids)}
        self.norm_mean: Optional[np.ndarray] = None
        self.norm_std: Optional[np.ndarray] = None

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest,
                      image_size: Optional[int] = None) -> "ArrayDataset":
        images = []
        labels = []
        ids = []
        for rec in manifest.records:
            img = decode_image(manifest.root / rec.path)
            if image_size is not None and img.shape[1:] != (image_size, image_size):
                img = resize_bilinear(img, (image_size, image_size))
            images.append(img)
            labels.append(manifest.label_index(rec.label))
            ids.append(rec.id)
        shapes = {img.shape for img in images}
        if len(shapes) > 1:
            raise FormatError(f"images disagree on shape: {sorted(shapes)}; "
                              "pass image_size to resize")
        return cls(ids, np.stack(images), np.asarray(labels),
                   manifest.classes)

    def rows(self, ids: Sequence[str]) -> np.ndarray:
        try:
            return np.fromiter((self.index[i] for i in ids), dtype=np.int64,
                               count=len(ids))
        except KeyError as e:
            raise KeyError(f"id {e.args[0]!r} not in dataset") from None

    def fit_normalization(self, labeled_ids: Sequence[str]
                          ) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel mean/std over the given pool only (floor std at 1e-6)."""
        rows = self.rows(sorted(labeled_ids))
        pool = self.images[rows]
        mean = pool.mean(axis=(0, 2, 3))
        std = np.maximum(pool.std(axis=(0, 2, 3)), 1e-6)
        self.set_normalization(mean, std)
        return mean, std

    def set_normalization(self, mean, std) -> None:
        self.norm_mean = np.asarray(mean, dtype=np.float64).reshape(3)
        self.norm_std = np.asarray(std, dtype=np.float64).reshape(3)

    def stats_hash(self) -> str:
        if self.norm_mean is None:
            raise ConfigError("normalization has not been fit")
        digest = hashlib.sha256()
        digest.update(self.norm_mean.tobytes())
        digest.update(self.norm_std.tobytes())
        return digest.hexdigest()

    def batch(self, ids: Sequence[str]) -> np.ndarray:
        """Normalized [n,3,H,W] batch in id order."""
        if self.norm_mean is None:
            raise ConfigError("normalization has not been fit")
        raw = self.images[self.rows(ids)]
        return (raw - self.norm_mean[None, :, None, None]) \
            / self.norm_std[None, :, None, None]

    def labels_for(self, ids: Sequence[str]) -> np.ndarray:
        return self.labels[self.rows(ids)]


# ---- synthetic band-limited textures -------------------------------------------

def class_frequencies(num_classes: int, image_size: int) -> np.ndarray:
    """Log-spaced dominant frequencies (cycles per image), well inside Nyquist."""
    fmin = max(2.0, 0.06 * image_size)
    fmax = 0.32 * image_size
    if num_classes == 1:
        return np.array([fmin])
    return fmin * (fmax / fmin) ** (np.arange(num_classes) / (num_classes - 1))


def ring_field(rng: np.random.Generator, image_size: int, freq: float,
               sigma: float) -> np.ndarray:
    """Unit-variance zero-mean random field whose spectrum is a Gaussian
    ring at `freq` cycles per image, shape [H,W]."""
    noise = rng.standard_normal((image_size, image_size))
    fy = np.fft.fftfreq(image_size) * image_size
    fx = np.fft.fftfreq(image_size) * image_size
    radius = np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)
    ring = np.exp(-0.5 * ((radius - freq) / sigma) ** 2)
    field = np.fft.ifft2(np.fft.fft2(noise) * ring).real
    return field / max(field.std(), 1e-12)


def synth_texture(rng: np.random.Generator, image_size: int, freq: float,
                  contrast: float, sigma: float) -> np.ndarray:
    """One grayscale band-limited Gaussian texture in [0,1], shape [H,W]."""
    return np.clip(0.5 + contrast * ring_field(rng, image_size, freq, sigma),
                   0.0, 1.0)


def synth_generate(out_root: Union[str, Path], num_classes: int = 4,
                   per_class: int = 100, image_size: int = 64, seed: int = 0,
                   overlap: float = 0.0) -> DatasetManifest:
    """Write a PPM dataset of per-class band-limited textures plus its
    manifest. Each class draws one master field on a Gaussian frequency
    ring; images are cyclic shifts of that master on an 8x8 placement
    grid plus faint speckle, so classes share a dominant frequency and
    contrast while individual files stay distinct. `overlap` (0..1)
    widens the frequency bands toward their neighbors, making classes
    progressively confusable; identical seeds produce byte-identical
    trees."""
    if num_classes not in (2, 3, 4):
        raise ConfigError(f"num_classes must be 2, 3, or 4, got {num_classes}")
    if per_class < 1:
        raise ConfigError(f"per_class must be >= 1, got {per_class}")
    if not (0.0 <= overlap <= 1.0):
        raise ConfigError(f"overlap must be in [0,1], got {overlap}")
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    rng = stream(seed, "synth")
    freqs = class_frequencies(num_classes, image_size)
    gaps = np.diff(freqs)
    step = max(1, image_size // 8)
    speckle = 0.01
    digits = len(str(per_class - 1))
    records: list[ManifestRecord] = []
    classes = tuple(f"class{k}" for k in range(num_classes))
    for k, name in enumerate(classes):
        (out_root / name).mkdir(exist_ok=True)
        gap = gaps.min() if gaps.size else freqs[0]
        sigma = 0.35 + overlap * 0.75 * gap
        contrast = 0.20 + 0.02 * k
        master = ring_field(rng, image_size, freqs[k], sigma)
        for j in range(per_class):
            dy, dx = rng.integers(0, 8, 2) * step
            tex = np.roll(master, (dy, dx), (0, 1))
            gray = np.clip(0.5 + contrast * tex
                           + speckle * rng.standard_normal(tex.shape), 0.0, 1.0)
            img = np.broadcast_to(gray[None], (3,) + gray.shape)
            stem = f"img_{j:0{digits}d}"
            encode_ppm(out_root / name / f"{stem}.ppm", img)
            records.append(ManifestRecord(id=f"{name}/{stem}",
                                          path=f"{name}/{stem}.ppm",
                                          label=name))
    manifest = DatasetManifest(classes=classes, records=tuple(records),
                               root=out_root)
    manifest.save(out_root / "manifest.json")
    return manifest
