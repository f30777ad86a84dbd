"""Dataset ingestion and preprocessing for the rotated-digit experiments."""

import gzip
import logging
import struct
from pathlib import Path
from typing import IO

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.ndimage import gaussian_filter, rotate

from app.core.models import SyntheticMode, TrainConfig
from app.core.tensor import Tensor, rotate90

logger = logging.getLogger(__name__)

IMAGE_SIZE = 28
NUM_CLASSES = 10
AMAT_WIDTH = IMAGE_SIZE * IMAGE_SIZE + 1
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DatasetBundle(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    images: np.ndarray  # [N, 1, 28, 28]
    labels: np.ndarray  # [N]
    split: str = "train"

    @model_validator(mode="after")
    def check_contents(self) -> "DatasetBundle":
        if self.images.ndim != 4 or self.images.shape[1:] != (1, IMAGE_SIZE, IMAGE_SIZE):
            raise ValueError(f"Images must be [N, 1, {IMAGE_SIZE}, {IMAGE_SIZE}], got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError(f"{self.images.shape[0]} images but labels have shape {self.labels.shape}")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise ValueError(f"Labels must be integers, got {self.labels.dtype}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES):
            raise ValueError(f"Labels must lie in [0, {NUM_CLASSES})")
        return self

    def __len__(self) -> int:
        return self.images.shape[0]

    def take(self, indices: np.ndarray, split: str | None = None) -> "DatasetBundle":
        return DatasetBundle(
            images=self.images[indices], labels=self.labels[indices], split=split or self.split
        )


def _bundle(images: Tensor, labels: np.ndarray, split: str) -> DatasetBundle:
    return DatasetBundle(
        images=np.ascontiguousarray(images, dtype=np.float64),
        labels=np.asarray(labels, dtype=np.int64),
        split=split,
    )


# Loaders
def load_amat(path: Path, split: str = "train") -> DatasetBundle:
    """Text format: one sample per line, 784 row-major pixels in [0, 1] then the label."""
    rows = []
    with Path(path).open() as handle:
        for number, line in enumerate(handle, start=1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) != AMAT_WIDTH:
                raise ValueError(f"{path}, line {number}: expected {AMAT_WIDTH} values, got {len(tokens)}")
            try:
                values = np.array([float(token) for token in tokens])
            except ValueError as e:
                raise ValueError(f"{path}, line {number}: non-numeric token ({e})") from e
            if not np.all(np.isfinite(values)):
                raise ValueError(f"{path}, line {number}: non-finite value")
            pixels = values[:-1]
            if pixels.min() < 0.0 or pixels.max() > 1.0:
                raise ValueError(f"{path}, line {number}: pixel values must lie in [0, 1]")
            rows.append(values)
    if not rows:
        raise ValueError(f"{path} contains no samples")
    table = np.stack(rows)
    images = table[:, :-1].reshape(-1, 1, IMAGE_SIZE, IMAGE_SIZE)
    labels = np.rint(table[:, -1]).astype(np.int64)
    logger.info(f"Loaded {len(rows)} samples from {path}")
    return _bundle(images, labels, split)


def _open(path: Path) -> IO[bytes]:
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else path.open("rb")


def _read_header(handle: IO[bytes], fields: int, path: Path) -> tuple[int, ...]:
    raw = handle.read(4 * fields)
    if len(raw) != 4 * fields:
        raise ValueError(f"{path}: truncated IDX header")
    return struct.unpack(f">{fields}I", raw)


def load_idx(images_path: Path, labels_path: Path, split: str = "train") -> DatasetBundle:
    """Big-endian IDX pair (optionally gzip-compressed); pixel bytes are scaled to [0, 1]."""
    with _open(images_path) as handle:
        magic, count, rows, cols = _read_header(handle, 4, images_path)
        if magic != IDX_IMAGES_MAGIC:
            raise ValueError(f"{images_path}: bad magic number {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")
        pixels = np.frombuffer(handle.read(), dtype=np.uint8)
    with _open(labels_path) as handle:
        magic, label_count = _read_header(handle, 2, labels_path)
        if magic != IDX_LABELS_MAGIC:
            raise ValueError(f"{labels_path}: bad magic number {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")
        labels = np.frombuffer(handle.read(), dtype=np.uint8)

    if count != label_count:
        raise ValueError(f"Image file holds {count} items but label file holds {label_count}")
    if pixels.size != count * rows * cols:
        raise ValueError(f"{images_path}: expected {count * rows * cols} pixel bytes, got {pixels.size}")
    if labels.size != count:
        raise ValueError(f"{labels_path}: expected {count} label bytes, got {labels.size}")
    images = pixels.reshape(count, 1, rows, cols).astype(np.float64) / 255.0
    logger.info(f"Loaded {count} samples from {images_path}")
    return _bundle(images, labels, split)


def load_source(path: Path) -> DatasetBundle:
    """An ``.amat`` file, or a directory holding an IDX ``*-images-idx3-ubyte[.gz]`` / labels pair."""
    path = Path(path)
    if not path.exists():
        raise ValueError(f"Dataset not found: {path}")
    if path.is_file():
        return load_amat(path)
    images = sorted(path.glob("*images-idx3-ubyte*"))
    labels = sorted(path.glob("*labels-idx1-ubyte*"))
    if not images or not labels:
        raise ValueError(f"{path} holds no IDX image/label pair")
    return load_idx(images[0], labels[0])


# Procedural glyphs
_LEFT, _RIGHT, _TOP, _MID, _BOTTOM = 9.0, 18.0, 5.0, 13.5, 22.0
_SEGMENTS = {
    "a": ((_TOP, _LEFT), (_TOP, _RIGHT)),
    "b": ((_TOP, _RIGHT), (_MID, _RIGHT)),
    "c": ((_MID, _RIGHT), (_BOTTOM, _RIGHT)),
    "d": ((_BOTTOM, _LEFT), (_BOTTOM, _RIGHT)),
    "e": ((_MID, _LEFT), (_BOTTOM, _LEFT)),
    "f": ((_TOP, _LEFT), (_MID, _LEFT)),
    "g": ((_MID, _LEFT), (_MID, _RIGHT)),
    "s": ((_MID, _RIGHT), (_BOTTOM, _LEFT)),
}
# No glyph is a rotated or mirrored copy of another: the nine and the two carry a diagonal tail.
_GLYPHS = ("abcdef", "bc", "absd", "abgcd", "fgbc", "afgcd", "afgedc", "abc", "abcdefg", "abfgs")


def render_glyph(label: int, rng: np.random.Generator | None = None) -> Tensor:
    """One 28x28 glyph in [0, 1]; without ``rng`` the clean, centred template."""
    canvas = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    steps = np.linspace(0.0, 1.0, 32)[:, None]
    for name in _GLYPHS[label]:
        start, end = (np.array(point) for point in _SEGMENTS[name])
        if rng is not None:
            start, end = start + rng.normal(0.0, 0.6, size=2), end + rng.normal(0.0, 0.6, size=2)
        points = np.rint(start + steps * (end - start)).astype(int)
        points = np.clip(points, 0, IMAGE_SIZE - 1)
        np.add.at(canvas, (points[:, 0], points[:, 1]), 1.0)
    canvas = gaussian_filter(canvas, sigma=1.0 if rng is None else rng.uniform(0.8, 1.2))
    canvas /= canvas.max()
    if rng is None:
        return canvas
    shift = rng.integers(-3, 4, size=2)
    canvas = np.roll(canvas, tuple(shift), axis=(0, 1))
    canvas += rng.normal(0.0, 0.05, size=canvas.shape)
    return np.clip(canvas, 0.0, 1.0)


def make_glyph_bundle(n: int, seed: int, split: str = "train") -> DatasetBundle:
    """Ten-class stroke glyphs with jittered strokes, random translation and pixel noise."""
    if n < 1:
        raise ValueError(f"Need at least one sample, got n={n}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % NUM_CLASSES)
    images = np.stack([render_glyph(int(label), rng) for label in labels])[:, None]
    return _bundle(images, labels, split)


# Preprocessing
def rotate_image(image: Tensor, angle: float) -> Tensor:
    """Bilinear rotation of [C, H, W] planes by ``angle`` radians about the centre."""
    return rotate(image, np.degrees(angle), axes=(image.ndim - 1, image.ndim - 2), reshape=False, order=1, mode="constant", cval=0.0)


def synth_rotations(bundle: DatasetBundle, mode: SyntheticMode, seed: int) -> DatasetBundle:
    rng = np.random.default_rng(seed)
    n = len(bundle)
    if mode == "quarter":
        turns = rng.integers(0, 4, size=n)
        images = [rotate90(image, int(k)) for image, k in zip(bundle.images, turns)]
    elif mode == "uniform":
        angles = rng.uniform(0.0, 2.0 * np.pi, size=n)
        images = [rotate_image(image, angle) for image, angle in zip(bundle.images, angles)]
    else:
        raise ValueError(f"Unknown rotation mode: {mode!r}")
    stacked = np.stack(images) if images else bundle.images.copy()
    return bundle.model_copy(update={"images": stacked})


def percentile_threshold(bundle: DatasetBundle, p: float) -> float:
    if not 0.0 < p <= 100.0:
        raise ValueError(f"Percentile must lie in (0, 100], got {p}")
    if bundle.images.size == 0:
        raise ValueError("Cannot compute a clip threshold on empty data")
    return float(np.percentile(np.abs(bundle.images), p))


def clip_percentile(bundle: DatasetBundle, p: float, threshold: float | None = None) -> DatasetBundle:
    """Clamp values into [-t, t], t the p-th percentile of |x| (or a threshold from the training split)."""
    if bundle.images.size == 0:
        raise ValueError("Cannot clip empty data")
    if threshold is None:
        threshold = percentile_threshold(bundle, p)
    return bundle.model_copy(update={"images": np.clip(bundle.images, -threshold, threshold)})


def standardize(bundle: DatasetBundle, mean: float | None = None, std: float | None = None) -> DatasetBundle:
    if bundle.images.size == 0:
        raise ValueError("Cannot standardize empty data")
    mean = float(bundle.images.mean()) if mean is None else mean
    std = float(bundle.images.std()) if std is None else std
    if std <= 0.0:
        raise ValueError("Cannot standardize constant data")
    return bundle.model_copy(update={"images": (bundle.images - mean) / std})


def desk_splits(source: DatasetBundle, n_train: int, n_valid: int, n_test: int, seed: int) -> dict[str, DatasetBundle]:
    """Disjoint train / valid / test subsets drawn with a fixed seed."""
    needed = n_train + n_valid + n_test
    if len(source) < needed:
        raise ValueError(f"Source holds {len(source)} samples, the splits need {needed}")
    order = np.random.default_rng(seed).permutation(len(source))
    bounds = np.cumsum([0, n_train, n_valid, n_test])
    return {
        split: source.take(order[start:stop], split)
        for split, start, stop in zip(("train", "valid", "test"), bounds[:-1], bounds[1:])
    }


def prepare_splits(
    cfg: TrainConfig, data: Path | None = None, synthetic: SyntheticMode | None = None
) -> dict[str, DatasetBundle]:
    """Load (or generate) the source, split it, rotate it and apply the training-split preprocessing."""
    if data is None and synthetic is None:
        raise ValueError("No dataset: pass a data path or a synthetic rotation mode")
    needed = cfg.n_train + cfg.n_valid + cfg.n_test
    source = load_source(data) if data is not None else make_glyph_bundle(needed, cfg.seed)
    splits = desk_splits(source, cfg.n_train, cfg.n_valid, cfg.n_test, cfg.seed)

    if synthetic is not None:
        streams = np.random.SeedSequence(cfg.seed).spawn(len(splits))
        splits = {
            name: synth_rotations(bundle, synthetic, int(stream.generate_state(1)[0]))
            for (name, bundle), stream in zip(splits.items(), streams)
        }

    if cfg.standardize:
        mean, std = float(splits["train"].images.mean()), float(splits["train"].images.std())
        splits = {name: standardize(bundle, mean, std) for name, bundle in splits.items()}
    if cfg.clip_percentile < 100.0:
        threshold = percentile_threshold(splits["train"], cfg.clip_percentile)
        logger.info(f"Clipping inputs to |x| <= {threshold:.4f}")
        splits = {name: clip_percentile(bundle, cfg.clip_percentile, threshold) for name, bundle in splits.items()}
    return splits
