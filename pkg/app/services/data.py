"""
Benchmark corpora: Spatial MNIST (IDX bitmaps fed row by row) and
Temporal MNIST (pen-stroke tuples), plus seeded splits and
length-bucketed batching.
"""
import gzip
import logging
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterator, Optional, Sequence

import numpy as np

from app.core.config import Settings, get_settings
from app.schemas.models import DatasetKind

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
IMAGE_SIDE = 28
NUM_CLASSES = 10
STROKE_CHANNELS = 4


class DatasetError(ValueError):
    """Invalid corpus, split or batching request."""
    pass


class DataFormatError(DatasetError):
    """A data file does not follow its format."""

    def __init__(self, path, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True, eq=False)
class SequenceSample:
    """A labeled sequence of stimulus vectors, steps of shape [T, S]."""
    steps: np.ndarray
    label: int

    def __post_init__(self):
        if self.steps.ndim != 2 or self.steps.shape[0] < 1:
            raise DatasetError(f"a sample needs at least one step of shape [S], got {self.steps.shape}")
        if not 0 <= self.label < NUM_CLASSES:
            raise DatasetError(f"label {self.label} outside [0, {NUM_CLASSES - 1}]")

    @property
    def length(self) -> int:
        return self.steps.shape[0]


@dataclass(frozen=True)
class StrokeStep:
    """One pen movement: (dx, dy) plus end-of-stroke / end-of-digit flags."""
    dx: float
    dy: float
    end_of_stroke: int
    end_of_digit: int

    def as_vector(self) -> list[float]:
        return [self.dx, self.dy, float(self.end_of_stroke), float(self.end_of_digit)]


@dataclass
class DatasetSplit:
    train: list[SequenceSample]
    test: list[SequenceSample]
    seed: int


@dataclass
class Batch:
    """Equal-length samples stacked into [B, T, S]."""
    inputs: np.ndarray
    labels: np.ndarray
    indices: np.ndarray


# --- IDX ---------------------------------------------------------------------

def _open_binary(path: Path, mode: str = "rb") -> IO[bytes]:
    return gzip.open(path, mode) if path.suffix == ".gz" else open(path, mode)


def _read_header(path: Path, raw: bytes, fields: int, magic: int) -> tuple[int, ...]:
    size = 4 * fields
    if len(raw) < size:
        raise DataFormatError(path, f"truncated header ({len(raw)} bytes)")
    header = struct.unpack(f">{fields}I", raw[:size])
    if header[0] != magic:
        kind = {IMAGE_MAGIC: "an image file", LABEL_MAGIC: "a label file"}.get(header[0], "an unknown file")
        raise DataFormatError(path, f"magic 0x{header[0]:08x} denotes {kind}, expected 0x{magic:08x}")
    return header


def load_idx_images(path: Path) -> np.ndarray:
    """
    Read an IDX image file (magic 0x00000803).

    Returns:
        uint8 array [N, 28, 28]
    """
    path = Path(path)
    with _open_binary(path) as f:
        raw = f.read()
    _, count, rows, cols = _read_header(path, raw, 4, IMAGE_MAGIC)
    if (rows, cols) != (IMAGE_SIDE, IMAGE_SIDE):
        raise DataFormatError(path, f"images are {rows}x{cols}, expected {IMAGE_SIDE}x{IMAGE_SIDE}")
    expected = count * rows * cols
    payload = raw[16:]
    if len(payload) != expected:
        raise DataFormatError(path, f"payload holds {len(payload)} bytes, header announces {expected}")
    logger.info(f"Loaded {count} images from {path}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols).copy()


def load_idx_labels(path: Path) -> np.ndarray:
    """Read an IDX label file (magic 0x00000801); every label must be <= 9."""
    path = Path(path)
    with _open_binary(path) as f:
        raw = f.read()
    _, count = _read_header(path, raw, 2, LABEL_MAGIC)
    payload = raw[8:]
    if len(payload) != count:
        raise DataFormatError(path, f"payload holds {len(payload)} labels, header announces {count}")
    labels = np.frombuffer(payload, dtype=np.uint8).astype(np.int64)
    if labels.size and labels.max() >= NUM_CLASSES:
        raise DataFormatError(path, f"label {labels.max()} outside [0, {NUM_CLASSES - 1}]")
    return labels


def write_idx_images(path: Path, images: np.ndarray) -> Path:
    images = np.asarray(images, dtype=np.uint8)
    count, rows, cols = images.shape
    with _open_binary(Path(path), "wb") as f:
        f.write(struct.pack(">4I", IMAGE_MAGIC, count, rows, cols))
        f.write(images.tobytes())
    return Path(path)


def write_idx_labels(path: Path, labels: Sequence[int]) -> Path:
    labels = np.asarray(labels, dtype=np.uint8)
    with _open_binary(Path(path), "wb") as f:
        f.write(struct.pack(">2I", LABEL_MAGIC, labels.size))
        f.write(labels.tobytes())
    return Path(path)


def to_row_sequence(image: np.ndarray) -> np.ndarray:
    """28 steps, step t = row t scaled to [0, 1]."""
    image = np.asarray(image)
    if image.shape != (IMAGE_SIDE, IMAGE_SIDE):
        raise DatasetError(f"expected a {IMAGE_SIDE}x{IMAGE_SIDE} image, got {image.shape}")
    return image.astype(np.float64) / 255.0


def pair_images_labels(images: np.ndarray, labels: np.ndarray) -> list[SequenceSample]:
    if len(images) != len(labels):
        raise DatasetError(f"{len(images)} images but {len(labels)} labels")
    return [SequenceSample(to_row_sequence(image), int(label)) for image, label in zip(images, labels)]


def load_mnist_corpus(settings: Optional[Settings] = None) -> list[SequenceSample]:
    """The full 70,000-sample corpus: training files followed by test files."""
    settings = settings or get_settings()
    files = settings.mnist_files
    missing = [name for name, path in files.items() if path is None]
    if missing:
        raise FileNotFoundError(f"MNIST IDX files missing under {settings.mnist_dir}: {', '.join(missing)}")
    corpus = pair_images_labels(load_idx_images(files["train_images"]), load_idx_labels(files["train_labels"]))
    corpus += pair_images_labels(load_idx_images(files["test_images"]), load_idx_labels(files["test_labels"]))
    logger.info(f"Spatial corpus ready: {len(corpus)} samples")
    return corpus


# --- Strokes -----------------------------------------------------------------

def _parse_flag(path: Path, line_no: int, token: str) -> int:
    value = float(token)
    if value not in (0.0, 1.0):
        raise DataFormatError(path, f"line {line_no}: flag {token!r} is not 0 or 1")
    return int(value)


def parse_stroke_file(path: Path) -> list[StrokeStep]:
    """
    Parse one sample: a "dx dy eos eod" line per step.

    Exactly the last step carries end_of_digit = 1.
    """
    path = Path(path)
    steps: list[StrokeStep] = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != STROKE_CHANNELS:
            raise DataFormatError(path, f"line {line_no}: expected {STROKE_CHANNELS} values, got {len(tokens)}")
        try:
            step = StrokeStep(
                dx=float(tokens[0]),
                dy=float(tokens[1]),
                end_of_stroke=_parse_flag(path, line_no, tokens[2]),
                end_of_digit=_parse_flag(path, line_no, tokens[3]),
            )
        except ValueError as e:
            if isinstance(e, DataFormatError):
                raise
            raise DataFormatError(path, f"line {line_no}: non-numeric token in {line.strip()!r}") from e
        if not (np.isfinite(step.dx) and np.isfinite(step.dy)):
            raise DataFormatError(path, f"line {line_no}: non-finite movement")
        if steps and steps[-1].end_of_digit:
            raise DataFormatError(path, f"line {line_no}: step after end of digit")
        steps.append(step)

    if not steps:
        raise DataFormatError(path, "empty stroke file")
    if not steps[-1].end_of_digit:
        raise DataFormatError(path, "missing end_of_digit terminator")
    return steps


def strokes_to_steps(strokes: Sequence[StrokeStep]) -> np.ndarray:
    """Stimulus array [T, 4]; dx and dy stay unscaled."""
    return np.array([s.as_vector() for s in strokes], dtype=np.float64)


def _sample_key(path: Path) -> tuple:
    return tuple(int(part) if part.isdigit() else part for part in re.split(r"(\d+)", path.stem))


def read_stroke_labels(path: Path) -> list[int]:
    path = Path(path)
    labels = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            label = int(line.strip())
        except ValueError as e:
            raise DataFormatError(path, f"line {line_no}: label {line.strip()!r} is not an integer") from e
        if not 0 <= label < NUM_CLASSES:
            raise DataFormatError(path, f"line {line_no}: label {label} outside [0, {NUM_CLASSES - 1}]")
        labels.append(label)
    return labels


def load_strokes(path: Path, labels_path: Path) -> list[SequenceSample]:
    """
    Load a stroke corpus: one *.txt file per sample (natural order of the
    file names) and one label per line in labels_path.
    """
    path = Path(path)
    files = sorted(path.glob("*.txt"), key=_sample_key)
    labels = read_stroke_labels(labels_path)
    if not files and not labels:
        raise DataFormatError(path, "no stroke samples found")
    if len(files) != len(labels):
        raise DataFormatError(labels_path, f"{len(labels)} labels for {len(files)} sample files")
    corpus = [SequenceSample(strokes_to_steps(parse_stroke_file(f)), label) for f, label in zip(files, labels)]
    logger.info(f"Temporal corpus ready: {len(corpus)} samples from {path}")
    return corpus


def _format_number(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(float(value))


def write_strokes(directory: Path, digits: Sequence[Sequence[StrokeStep]], labels: Sequence[int],
                  labels_path: Optional[Path] = None) -> Path:
    """Write digits in the canonical format; returns the label file path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = max(5, len(str(len(digits))))
    for index, strokes in enumerate(digits):
        lines = [
            " ".join(_format_number(v) for v in step.as_vector())
            for step in strokes
        ]
        (directory / f"{index:0{width}d}.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return write_stroke_labels(labels_path or directory.parent / "labels.txt", labels)


def write_stroke_labels(path: Path, labels: Sequence[int]) -> Path:
    """One integer label per line, in sample order."""
    path.write_text("".join(f"{int(label)}\n" for label in labels), encoding="utf-8")
    return path


def adapt_stroke_corpus(source_dir: Path, out_dir: Path) -> int:
    """
    Convert the published stroke-sequence layout to the canonical one.

    The published corpus stores each digit as ``<set>-<k>-inputdata.txt``
    (lines of "dx dy eos eod", the same order as ours) next to
    ``<set>-<k>-targetdata.txt`` whose first ten columns one-hot encode
    the class. Samples land in ``out_dir/samples`` and labels in
    ``out_dir/labels.txt``.
    """
    source_dir, out_dir = Path(source_dir), Path(out_dir)
    inputs = sorted(source_dir.glob("*-inputdata.txt"), key=_sample_key)
    if not inputs:
        raise DataFormatError(source_dir, "no *-inputdata.txt files found")

    digits, labels = [], []
    for input_path in inputs:
        target_path = input_path.with_name(input_path.name.replace("-inputdata", "-targetdata"))
        if not target_path.exists():
            raise DataFormatError(target_path, "target file missing")
        first_line = target_path.read_text(encoding="utf-8").split("\n", 1)[0].split()
        if len(first_line) < NUM_CLASSES:
            raise DataFormatError(target_path, "fewer than ten one-hot columns")
        labels.append(int(np.argmax([float(v) for v in first_line[:NUM_CLASSES]])))
        digits.append(parse_stroke_file(input_path))

    write_strokes(out_dir / "samples", digits, labels, labels_path=out_dir / "labels.txt")
    logger.info(f"Adapted {len(digits)} stroke sequences from {source_dir} to {out_dir}")
    return len(digits)


def load_stroke_corpus(settings: Optional[Settings] = None) -> list[SequenceSample]:
    settings = settings or get_settings()
    if not settings.stroke_samples_dir.exists():
        raise FileNotFoundError(f"stroke samples missing under {settings.strokes_dir}")
    return load_strokes(settings.stroke_samples_dir, settings.stroke_labels_path)


# --- Synthetic corpora -------------------------------------------------------

def _balanced_labels(n: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.arange(n) % NUM_CLASSES
    rng.shuffle(labels)
    return labels


def generate_synthetic_images(n: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """
    Class-dependent 28x28 bitmaps: each class owns a fixed set of bars,
    drawn with a random shift and pixel noise.
    """
    templates_rng = np.random.default_rng(7919)
    templates = np.zeros((NUM_CLASSES, IMAGE_SIDE, IMAGE_SIDE))
    for k in range(NUM_CLASSES):
        for _ in range(3):
            r0, c0 = templates_rng.integers(4, 20, size=2)
            if templates_rng.random() < 0.5:
                templates[k, r0:r0 + 2, c0:c0 + 8] = 1.0
            else:
                templates[k, r0:r0 + 8, c0:c0 + 2] = 1.0

    rng = np.random.default_rng(seed)
    labels = _balanced_labels(n, rng)
    images = np.empty((n, IMAGE_SIDE, IMAGE_SIDE), dtype=np.uint8)
    for i, label in enumerate(labels):
        shifted = np.roll(templates[label], shift=tuple(rng.integers(-2, 3, size=2)), axis=(0, 1))
        noisy = np.clip(shifted * rng.uniform(0.7, 1.0) + rng.uniform(0.0, 0.15, size=shifted.shape), 0.0, 1.0)
        images[i] = np.round(noisy * 255).astype(np.uint8)
    return images, labels


def generate_synthetic_strokes(n: int, seed: int = 0) -> tuple[list[list[StrokeStep]], np.ndarray]:
    """
    Class-dependent pen trajectories: each class follows its own sequence
    of headings, with jittered integer moves and a class-typical length.
    """
    templates_rng = np.random.default_rng(104729)
    headings = [templates_rng.uniform(0, 2 * np.pi, size=4) for _ in range(NUM_CLASSES)]
    base_lengths = templates_rng.integers(6, 13, size=NUM_CLASSES)

    rng = np.random.default_rng(seed)
    labels = _balanced_labels(n, rng)
    digits = []
    for label in labels:
        length = max(3, int(base_lengths[label] + rng.integers(-1, 2)))
        pen_lift = int(rng.integers(1, length - 1))
        strokes = []
        for t in range(length):
            heading = headings[label][min(3, 4 * t // length)] + rng.normal(0.0, 0.2)
            strokes.append(StrokeStep(
                dx=float(np.round(3 * np.cos(heading))),
                dy=float(np.round(3 * np.sin(heading))),
                end_of_stroke=int(t == pen_lift or t == length - 1),
                end_of_digit=int(t == length - 1),
            ))
        digits.append(strokes)
    return digits, labels


def generate_synthetic_corpus(dataset: DatasetKind, n: int, seed: int = 0) -> list[SequenceSample]:
    if DatasetKind(dataset) == DatasetKind.SPATIAL:
        images, labels = generate_synthetic_images(n, seed)
        return pair_images_labels(images, labels)
    digits, labels = generate_synthetic_strokes(n, seed)
    return [SequenceSample(strokes_to_steps(d), int(label)) for d, label in zip(digits, labels)]


def load_corpus(dataset: DatasetKind, settings: Optional[Settings] = None) -> list[SequenceSample]:
    if DatasetKind(dataset) == DatasetKind.SPATIAL:
        return load_mnist_corpus(settings)
    return load_stroke_corpus(settings)


# --- Splits and batches ------------------------------------------------------

def split_corpus(corpus: Sequence[SequenceSample], seed: int, train_size: int,
                 test_size: Optional[int] = None) -> DatasetSplit:
    """
    Seeded random extraction of a training set; the rest (or its first
    test_size samples, for desk-scale runs) is the test set.
    """
    n = len(corpus)
    if not 1 <= train_size < n:
        raise DatasetError(f"train_size must lie in [1, {n - 1}], got {train_size}")
    order = np.random.default_rng(seed).permutation(n)
    rest = order[train_size:]
    if test_size is not None:
        if not 1 <= test_size <= len(rest):
            raise DatasetError(f"test_size must lie in [1, {len(rest)}], got {test_size}")
        rest = rest[:test_size]
    return DatasetSplit(
        train=[corpus[i] for i in order[:train_size]],
        test=[corpus[i] for i in rest],
        seed=seed,
    )


def iter_batches(samples: Sequence[SequenceSample], batch_size: Optional[int],
                 seed: Optional[int] = None) -> Iterator[Batch]:
    """
    Group samples into rectangular batches of equal length.

    Every sample appears exactly once. With a seed, samples are shuffled
    inside each length bucket and the batch order is shuffled too;
    without one, batches follow dataset order. batch_size None puts each
    length bucket in a single batch.
    """
    if batch_size is not None and batch_size < 1:
        raise DatasetError(f"batch_size must be >= 1, got {batch_size}")
    buckets: dict[int, list[int]] = {}
    for index, sample in enumerate(samples):
        buckets.setdefault(sample.length, []).append(index)

    rng = np.random.default_rng(seed) if seed is not None else None
    groups: list[np.ndarray] = []
    for length in sorted(buckets):
        indices = np.array(buckets[length])
        if rng is not None:
            rng.shuffle(indices)
        size = batch_size or len(indices)
        groups.extend(indices[start:start + size] for start in range(0, len(indices), size))
    if rng is not None:
        groups = [groups[i] for i in rng.permutation(len(groups))]

    for group in groups:
        yield Batch(
            inputs=np.stack([samples[i].steps for i in group]),
            labels=np.array([samples[i].label for i in group], dtype=np.int64),
            indices=group,
        )


def split_and_batch(corpus: Sequence[SequenceSample], seed: int, train_size: int, batch_size: Optional[int],
                    test_size: Optional[int] = None) -> tuple[DatasetSplit, Iterator[Batch]]:
    split = split_corpus(corpus, seed, train_size, test_size)
    return split, iter_batches(split.train, batch_size, seed)
