"""Images as multi-channel streams, their signature features, and a feature cache.

An image of shape (H, W, 3) with values in [0, 1] is read as H horizontal
streams (one per pixel row, W points each) or W vertical streams. Each
stream is replaced by its truncated signature (or log signature), giving a
feature matrix with one row per stream.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .rng import substream
from .sigcore import PathStream, batch_log_signature, batch_signature, tensor_dim, witt_dims

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")
CACHE_MAGIC = b"IMSGFT01"
CACHE_VERSION = 1
_HEADER = struct.Struct("<6I")

FLAG_LOG_SIG = 1
FLAG_TWO_DIRECTION = 2
FLAG_FLATTEN = 4
FLAG_ORIGINS = 8


class ImageDecodeError(ValueError):
    pass


class CacheFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3 or min(img.shape) < 1:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return img


def load_image(path, resolution: tuple[int, int] = (64, 64)) -> np.ndarray:
    """Decode a PNG/JPEG, force RGB, resize bilinearly to (H, W), scale to [0, 1]."""
    path = Path(path)
    if path.suffix.lower() not in IMAGE_EXTENSIONS:
        raise ImageDecodeError(f"{path}: unsupported image format {path.suffix!r}")
    try:
        with Image.open(path) as im:
            im.load()
            if im.width == 0 or im.height == 0:
                raise ImageDecodeError(f"{path}: zero-sized image")
            rgb = im.convert("RGB")
    except (OSError, UnidentifiedImageError, SyntaxError) as exc:
        raise ImageDecodeError(f"{path}: cannot decode image ({exc})") from exc
    height, width = resolution
    if rgb.size != (width, height):
        rgb = rgb.resize((width, height), Image.Resampling.BILINEAR)
    return np.asarray(rgb, dtype=np.float64) / 255.0


def image_to_streams(img: np.ndarray, direction: str = "horizontal") -> list[PathStream]:
    return [PathStream(p) for p in image_paths(img, direction)]


def image_paths(img: np.ndarray, direction: str = "horizontal") -> np.ndarray:
    """Streams as one array: (H, W, 3) for horizontal, (W, H, 3) for vertical."""
    img = np.asarray(img, dtype=np.float64)
    if direction == "horizontal":
        return img
    if direction == "vertical":
        return img.transpose(1, 0, 2)
    raise ValueError(f"direction must be 'horizontal' or 'vertical', got {direction!r}")


# ---------------------------------------------------------------------------
# featurization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeaturizeConfig:
    resolution: tuple[int, int] = (64, 64)
    depth: int = 4
    log_sig: bool = False
    two_direction: bool = False
    flatten: bool = False

    def __post_init__(self):
        object.__setattr__(self, "resolution", tuple(int(r) for r in self.resolution))
        if len(self.resolution) != 2 or min(self.resolution) < 1:
            raise ValueError(f"resolution must be two positive integers, got {self.resolution}")
        if self.depth < 1:
            raise ValueError("signature depth must be >= 1")
        if self.two_direction and self.resolution[0] != self.resolution[1]:
            raise ValueError("two-direction features need a square resolution")

    @property
    def width(self) -> int:
        """Feature width per stream."""
        if self.log_sig:
            return sum(witt_dims(3, self.depth))
        return tensor_dim(3, self.depth)

    @property
    def rows(self) -> int:
        return 2 * self.resolution[0] if self.two_direction else self.resolution[0]

    @property
    def flags(self) -> int:
        return (
            (FLAG_LOG_SIG if self.log_sig else 0)
            | (FLAG_TWO_DIRECTION if self.two_direction else 0)
            | (FLAG_FLATTEN if self.flatten else 0)
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolution"] = list(self.resolution)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeaturizeConfig":
        return cls(**{**d, "resolution": tuple(d["resolution"])})


def _sign(paths: np.ndarray, cfg: FeaturizeConfig) -> np.ndarray:
    if cfg.log_sig:
        return batch_log_signature(paths, cfg.depth)
    return np.concatenate(batch_signature(paths, cfg.depth)[1:], axis=-1)


def featurize_batch(imgs: np.ndarray, cfg: FeaturizeConfig) -> np.ndarray:
    """Features for a stack of images (B, H, W, 3) -> (B, rows, width) float32."""
    imgs = np.asarray(imgs, dtype=np.float64)
    if imgs.ndim != 4 or imgs.shape[1:3] != cfg.resolution or imgs.shape[3] != 3:
        raise ValueError(f"images of shape {imgs.shape[1:]} do not match resolution {cfg.resolution}")
    feats = _sign(imgs, cfg)
    if cfg.two_direction:
        feats = np.concatenate([feats, _sign(imgs.transpose(0, 2, 1, 3), cfg)], axis=1)
    return feats.astype(np.float32)


def featurize(img: np.ndarray, cfg: FeaturizeConfig) -> np.ndarray:
    """Signature feature matrix of one image; a flat vector if ``cfg.flatten``."""
    img = check_image(img)
    feats = featurize_batch(img[None], cfg)[0]
    return feats.reshape(-1) if cfg.flatten else feats


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentSpec:
    """Image-space augmentations applied before signing.

    Each enabled transform fires independently with ``probability``.
    ``copies`` augmented variants are produced per source image, in addition
    to the unmodified original.
    """

    noise: bool = False
    noise_sigma: float = 0.02
    brightness: bool = False
    brightness_range: tuple[float, float] = (0.7, 1.3)
    flip_horizontal: bool = False
    flip_vertical: bool = False
    rotate: bool = False
    rotation_range: float = 15.0
    invert: bool = False
    probability: float = 0.5
    copies: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "brightness_range", tuple(float(b) for b in self.brightness_range))
        lo, hi = self.brightness_range
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        if lo <= 0 or hi < lo:
            raise ValueError(f"brightness range must be positive and ordered, got {self.brightness_range}")
        if not 0 <= self.rotation_range <= 45:
            raise ValueError("rotation range must lie within [0, 45] degrees")
        if not 0 <= self.probability <= 1:
            raise ValueError("probability must lie in [0, 1]")
        if self.copies < 0:
            raise ValueError("copies must be >= 0")

    @classmethod
    def flip_brightness(cls, seed: int = 0) -> "AugmentSpec":
        """Horizontal flips and brightness jitter, each with the default probability."""
        return cls(flip_horizontal=True, brightness=True, seed=seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["brightness_range"] = list(self.brightness_range)
        return d


def rotate_image(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the centre; nearest-neighbour sampling, borders replicate edges."""
    h, w = img.shape[:2]
    theta = np.deg2rad(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    cos, sin = np.cos(theta), np.sin(theta)
    src_y = cy + cos * yy - sin * xx
    src_x = cx + sin * yy + cos * xx
    iy = np.clip(np.rint(src_y), 0, h - 1).astype(np.intp)
    ix = np.clip(np.rint(src_x), 0, w - 1).astype(np.intp)
    return img[iy, ix]


def augment(img: np.ndarray, spec: AugmentSpec, draw: np.random.Generator) -> np.ndarray:
    out = np.array(img, dtype=np.float64)

    def fires() -> bool:
        return bool(draw.random() < spec.probability)

    if spec.flip_horizontal and fires():
        out = out[:, ::-1]
    if spec.flip_vertical and fires():
        out = out[::-1]
    if spec.rotate and fires():
        out = rotate_image(out, draw.uniform(-spec.rotation_range, spec.rotation_range))
    if spec.brightness and fires():
        out = out * draw.uniform(*spec.brightness_range)
    if spec.noise and fires():
        out = out + draw.normal(0.0, spec.noise_sigma, size=out.shape)
    if spec.invert and fires():
        out = 1.0 - out
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# datasets and the feature cache
# ---------------------------------------------------------------------------


@dataclass
class FeatureSet:
    features: np.ndarray  # (n, rows, width) float32
    labels: np.ndarray  # (n,) int
    class_names: list[str]
    depth: int
    flags: int = 0
    origins: np.ndarray | None = None  # source image of each row when augmented copies exist
    skipped: int = 0
    cache_path: Path | None = None
    from_cache: bool = False

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def groups(self) -> np.ndarray:
        return self.origins if self.origins is not None else np.arange(len(self))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=len(self.class_names))


def list_dataset(root) -> tuple[list[Path], np.ndarray, list[str]]:
    """Files of ``root/<class>/*.{png,jpg,jpeg}``; classes indexed in sorted name order."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ValueError(f"{root}: no class subdirectories")
    files, labels = [], []
    for idx, cdir in enumerate(class_dirs):
        members = sorted(p for p in cdir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)
        if not members:
            raise ValueError(f"{cdir}: class directory contains no images")
        files.extend(members)
        labels.extend([idx] * len(members))
    return files, np.array(labels, dtype=np.int64), [p.name for p in class_dirs]


def cache_key(files: Sequence[Path], root: Path, cfg: FeaturizeConfig, spec: AugmentSpec | None) -> str:
    listing = []
    for f in files:
        st = f.stat()
        listing.append([f.relative_to(root).as_posix(), st.st_size, st.st_mtime_ns])
    payload = {"cfg": cfg.to_dict(), "augment": spec.to_dict() if spec else None, "files": listing}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def write_feature_cache(path, fs: FeatureSet) -> None:
    count, rows, width = fs.features.shape
    flags = fs.flags | (FLAG_ORIGINS if fs.origins is not None else 0)
    buf = io.BytesIO()
    buf.write(CACHE_MAGIC)
    buf.write(_HEADER.pack(CACHE_VERSION, rows, width, count, fs.depth, flags))
    buf.write(np.ascontiguousarray(fs.features, dtype="<f4").tobytes())
    buf.write(np.asarray(fs.labels, dtype="<i4").tobytes())
    buf.write(struct.pack("<I", len(fs.class_names)))
    for name in fs.class_names:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
    if fs.origins is not None:
        buf.write(np.asarray(fs.origins, dtype="<i4").tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def read_feature_cache(path) -> FeatureSet:
    data = Path(path).read_bytes()
    if data[:8] != CACHE_MAGIC:
        raise CacheFormatError(f"{path}: not a feature cache (bad magic)")
    version, rows, width, count, depth, flags = _HEADER.unpack_from(data, 8)
    if version != CACHE_VERSION:
        raise CacheFormatError(f"{path}: unsupported cache version {version}")
    off = 8 + _HEADER.size
    n_floats = count * rows * width
    features = np.frombuffer(data, dtype="<f4", count=n_floats, offset=off).reshape(count, rows, width)
    off += 4 * n_floats
    labels = np.frombuffer(data, dtype="<i4", count=count, offset=off).astype(np.int64)
    off += 4 * count
    (n_names,) = struct.unpack_from("<I", data, off)
    off += 4
    names = []
    for _ in range(n_names):
        (length,) = struct.unpack_from("<I", data, off)
        off += 4
        names.append(data[off:off + length].decode("utf-8"))
        off += length
    origins = None
    if flags & FLAG_ORIGINS:
        origins = np.frombuffer(data, dtype="<i4", count=count, offset=off).astype(np.int64)
        off += 4 * count
    if off != len(data):
        raise CacheFormatError(f"{path}: {len(data) - off} trailing bytes")
    return FeatureSet(
        features=features.astype(np.float32),
        labels=labels,
        class_names=names,
        depth=depth,
        flags=flags & ~FLAG_ORIGINS,
        origins=origins,
        cache_path=Path(path),
    )


def _featurize_chunk(items, cfg: FeaturizeConfig, spec: AugmentSpec | None):
    imgs, keep, bad = [], [], 0
    for index, path in items:
        try:
            img = load_image(path, cfg.resolution)
        except ImageDecodeError as exc:
            log.warning("skipping unreadable image: %s", exc)
            bad += 1
            continue
        variants = [img]
        if spec is not None:
            for copy in range(spec.copies):
                variants.append(augment(img, spec, substream(spec.seed, "augment", index, copy)))
        imgs.extend(variants)
        keep.extend([index] * len(variants))
    if not imgs:
        return np.zeros((0, cfg.rows, cfg.width), np.float32), keep, bad
    return featurize_batch(np.stack(imgs), cfg), keep, bad


def featurize_files(
    files: Sequence[Path],
    cfg: FeaturizeConfig,
    spec: AugmentSpec | None = None,
    threads: int = 1,
    chunk: int = 32,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Featurize files in order; returns (features, source index per row, skipped count)."""
    items = list(enumerate(files))
    chunks = [items[i:i + chunk] for i in range(0, len(items), chunk)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda c: _featurize_chunk(c, cfg, spec), chunks))
    else:
        results = [_featurize_chunk(c, cfg, spec) for c in chunks]
    if not results:
        return np.zeros((0, cfg.rows, cfg.width), np.float32), np.zeros(0, np.int64), 0
    feats = np.concatenate([r[0] for r in results])
    origins = np.array([i for r in results for i in r[1]], dtype=np.int64)
    skipped = sum(r[2] for r in results)
    return feats, origins, skipped


def featurize_dataset(
    root,
    cfg: FeaturizeConfig,
    spec: AugmentSpec | None = None,
    cache_dir=None,
    threads: int = 1,
) -> FeatureSet:
    """Featurize a class-per-directory dataset, reusing a cached result when valid."""
    root = Path(root)
    files, labels, names = list_dataset(root)
    cache_path = None
    if cache_dir is not None:
        key = cache_key(files, root, cfg, spec)
        cache_path = Path(cache_dir) / f"features-{key[:20]}.imsgft"
        if cache_path.exists():
            fs = read_feature_cache(cache_path)
            fs.from_cache = True
            return fs
    feats, origins, skipped = featurize_files(files, cfg, spec, threads=threads)
    if len(origins) == 0:
        raise ValueError(f"{root}: no readable images")
    fs = FeatureSet(
        features=feats,
        labels=labels[origins],
        class_names=names,
        depth=cfg.depth,
        flags=cfg.flags,
        origins=origins if spec is not None else None,
        skipped=skipped,
    )
    if cache_path is not None:
        write_feature_cache(cache_path, fs)
        fs.cache_path = cache_path
    return fs

