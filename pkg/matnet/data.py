"""Datasets, preprocessing, conditioning masks and image grids

Images are always float arrays of shape (n, c, h, w) with values in [0, 1].
Stochastic preprocessing (dynamic binarization, dequantization) is not
applied to the stored images but to per-epoch views, whose random stream is
derived from the dataset's Rng and the epoch number only.
"""

import gzip
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from matnet import archive, tensor
from matnet.archive import DataError
from matnet.rng import Rng

log = logging.getLogger(__name__)

IDX_IMAGES = 2051
IDX_LABELS = 2049

BINARIZATIONS = ("none", "dynamic", "fixed_threshold")
SPLIT_STREAM = 101  # Rng stream of the train/validation split


class Dataset:
    """Images with optional labels and a record of their preprocessing

    :param images: array (n, c, h, w) with values in [0, 1]
    :param labels: optional integer labels per image
    :param binarization: 'none', 'dynamic' or 'fixed_threshold'
    :param dequantized: if views add uniform dequantization noise
    :param rng: stream of the stochastic views
    :param source: description of where the images came from
    :raises DataError: for wrong shapes or values outside [0, 1]
    """

    def __init__(
        self,
        images: np.ndarray,
        labels: Optional[np.ndarray] = None,
        binarization: str = "none",
        dequantized: bool = False,
        rng: Optional[Rng] = None,
        source: str = "",
    ) -> None:
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 4:
            raise DataError(f"Images need shape (n, channels, height, width), got {images.shape}")
        if images.size and (np.min(images) < 0 or np.max(images) > 1 or not np.all(np.isfinite(images))):
            raise DataError("Image values must be within [0, 1]")
        if labels is not None and len(labels) != len(images):
            raise DataError(f"Got {len(labels)} labels for {len(images)} images")
        if binarization not in BINARIZATIONS:
            raise DataError(f"Unknown binarization '{binarization}'")
        self.images = images
        self.labels = None if labels is None else np.asarray(labels)
        self.binarization = binarization
        self.dequantized = dequantized
        self.rng = rng or Rng(0)
        self.source = source

    def __len__(self) -> int:
        return self.images.shape[0]

    def __repr__(self) -> str:
        return f"Dataset({len(self)} images of shape {self.shape}, {self.record()})"

    @property
    def shape(self) -> Tuple[int, int, int]:
        """(channels, height, width) of one image"""
        return tuple(self.images.shape[1:])  # type: ignore

    def record(self) -> Dict[str, object]:
        """Preprocessing record, enough to reproduce every view from the raw images"""
        return {
            "source": self.source,
            "binarize": self.binarization,
            "dequantize": self.dequantized,
            "seed": self.rng.seed,
            "stream": self.rng.stream,
        }

    def _derive(self, images: np.ndarray, labels: Optional[np.ndarray], **changes) -> "Dataset":
        kwargs = {
            "binarization": self.binarization,
            "dequantized": self.dequantized,
            "rng": self.rng,
            "source": self.source,
        }
        kwargs.update(changes)
        return Dataset(images, labels, **kwargs)  # type: ignore

    def subset(self, index) -> "Dataset":
        """Dataset of the selected images with the same preprocessing"""
        labels = None if self.labels is None else self.labels[index]
        return self._derive(self.images[index], labels)

    def split(self, val_fraction: float, seed: int = 0) -> Tuple["Dataset", "Dataset"]:
        """Random train/validation split

        :param val_fraction: share of validation images, at least one image goes to each part
        :raises DataError: if the dataset is too small to split
        """
        n = len(self)
        n_val = max(1, int(round(n * val_fraction)))
        if n < 2 or n_val >= n:
            raise DataError(f"Cannot split {n} images with validation fraction {val_fraction}")
        order = Rng(seed, stream=SPLIT_STREAM).permutation(n)
        return self.subset(np.sort(order[n_val:])), self.subset(np.sort(order[:n_val]))

    def epoch_view(self, epoch: int) -> np.ndarray:
        """Images as seen in the given epoch (binarized and dequantized if configured)"""
        if self.binarization != "dynamic" and not self.dequantized:
            return self.images
        rng = self.rng.split(epoch)
        x = self.images
        if self.binarization == "dynamic":
            x = rng.bernoulli(x)
        if self.dequantized:
            x = dequantize_values(x, rng)
        return x.astype(np.float32)


def binarize(d: Dataset, mode: str, rng: Optional[Rng] = None) -> Dataset:
    """Binarize the images

    dynamic: every epoch view draws x ~ Bernoulli(x) anew
    fixed_threshold: x > 0.5, applied once (a stand-in for the canonical fixed binarization)

    :raises DataError: for unknown modes or values outside [0, 1]
    """
    if np.min(d.images) < 0 or np.max(d.images) > 1:
        raise DataError("Binarization needs values within [0, 1]")
    if mode == "dynamic":
        return d._derive(d.images, d.labels, binarization="dynamic", rng=rng or d.rng)
    if mode == "fixed_threshold":
        return d._derive((d.images > 0.5).astype(np.float32), d.labels, binarization="fixed_threshold")
    if mode == "none":
        return d
    raise DataError(f"Unknown binarization mode '{mode}'")


def dequantize_values(x: np.ndarray, rng: Rng) -> np.ndarray:
    """(255 x + u) / 256 with u ~ U[0, 1) per sub-pixel"""
    u = rng.generator.random(np.shape(x))
    return ((255.0 * np.asarray(x, dtype=np.float64) + u) / 256.0).astype(np.float32)


def dequantize(d: Dataset, rng: Optional[Rng] = None) -> Dataset:
    """Add uniform dequantization noise in every epoch view"""
    return d._derive(d.images, d.labels, dequantized=True, rng=rng or d.rng)


# loading


def _open(path: str):
    if path.endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path: str, magic: int, n_dims: int) -> np.ndarray:
    """Read an IDX file with u8 payload"""
    with _open(path) as f:
        content = f.read()
    if len(content) < 4:
        raise DataError(f"'{path}': file too short for an IDX header")
    found = int(np.frombuffer(content[:4], dtype=">u4")[0])
    if found != magic:
        raise DataError(f"'{path}': bad magic number {found}, expected {magic}")
    header = 4 * (1 + n_dims)
    if len(content) < header:
        raise DataError(f"'{path}': truncated IDX header")
    dims = [int(d) for d in np.frombuffer(content[4:header], dtype=">u4")]
    if any(d == 0 for d in dims):
        raise DataError(f"'{path}': IDX dimensions {dims} contain zero")
    count = 1
    for d in dims:
        count *= d
    if count > len(content) - header:
        raise DataError(f"'{path}': truncated payload, dimensions {dims} need {count} bytes")
    if count != len(content) - header:
        raise DataError(f"'{path}': {len(content) - header - count} bytes after the payload")
    return np.frombuffer(content, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path: str, labels_path: Optional[str] = None) -> Dataset:
    """Read images (and labels) in IDX format, plain or gzipped

    :raises DataError: on bad magic numbers, truncated payloads or inconsistent counts
    """
    raw = _read_idx(images_path, IDX_IMAGES, 3)
    images = raw.astype(np.float32)[:, None, :, :] / 255.0
    labels = None
    if labels_path:
        labels = _read_idx(labels_path, IDX_LABELS, 1).astype(np.int64)
        if len(labels) != len(images):
            raise DataError(f"'{labels_path}' has {len(labels)} labels for {len(images)} images")
    log.info("Read %d images of size %dx%d from '%s'", *raw.shape, images_path)
    return Dataset(images, labels, source=images_path)


def load_binarized_text(path: str) -> Dataset:
    """Read whitespace separated 0/1 rows, one square single channel image per row

    :raises DataError: if values are not binary or rows are not square images
    """
    try:
        values = np.loadtxt(path, ndmin=2)
    except ValueError as e:
        raise DataError(f"'{path}': {e}") from e
    side = int(round(np.sqrt(values.shape[1])))
    if side * side != values.shape[1]:
        raise DataError(f"'{path}': rows of {values.shape[1]} values are no square images")
    if not np.all((values == 0) | (values == 1)):
        raise DataError(f"'{path}': values must be 0 or 1")
    images = values.reshape(-1, 1, side, side).astype(np.float32)
    return Dataset(images, binarization="fixed_threshold", source=path)


def load_archive_images(path: str) -> Dataset:
    """Read images (and labels) stored as 'images' / 'labels' in a tensor archive"""
    tensors, _ = archive.load_archive(path)
    if "images" not in tensors:
        raise DataError(f"'{path}' has no 'images' entry")
    labels = tensors.get("labels")
    return Dataset(tensors["images"], None if labels is None else labels.astype(np.int64), source=path)


def save_archive_images(path: str, d: Dataset) -> None:
    entries = {"images": d.images}
    if d.labels is not None:
        entries["labels"] = d.labels.astype(np.float32)
    archive.save_archive(path, entries)


def synthetic_patterns(n: int = 512, size: int = 8, flip: float = 0.05, rng: Optional[Rng] = None) -> Dataset:
    """Binary images of two noisy base patterns

    Label 0 is a diagonal cross, label 1 a square outline. Every pixel is
    flipped with probability flip.
    """
    rng = rng or Rng(0)
    cross = np.zeros((size, size), dtype=np.float32)
    idx = np.arange(size)
    cross[idx, idx] = 1
    cross[idx, size - 1 - idx] = 1
    square = np.zeros((size, size), dtype=np.float32)
    square[[0, -1], :] = 1
    square[:, [0, -1]] = 1
    labels = rng.integers(0, 2, n)
    images = np.where(labels[:, None, None] == 0, cross, square)
    flips = rng.bernoulli(np.full(images.shape, flip))
    images = np.abs(images - flips)
    return Dataset(images[:, None].astype(np.float32), labels, binarization="fixed_threshold", source="synthetic")


# masks


class MaskSpec:
    """Description of conditioning masks (1 = known sub-pixel)

    :param kind: 'quadrants', 'occluders' or 'file'
    :param quadrants: number of known quadrants (1 to 3), 0 draws it uniformly per image
    :param occluders: number of unknown square blocks
    :param size: side length of the blocks
    :param path: mask image for kind 'file'
    """

    KINDS = ("quadrants", "occluders", "file")

    def __init__(
        self,
        kind: str,
        quadrants: int = 2,
        occluders: int = 3,
        size: int = 20,
        path: Optional[str] = None,
    ) -> None:
        if kind not in self.KINDS:
            raise ValueError(f"Mask kind must be one of {list(self.KINDS)}, got '{kind}'")
        if kind == "quadrants" and not 0 <= quadrants <= 3:
            raise ValueError(f"Number of known quadrants must be within 1 and 3 (0 for random), got {quadrants}")
        if kind == "occluders" and (occluders < 1 or size < 1):
            raise ValueError("Occluder count and size must be positive")
        if kind == "file" and not path:
            raise ValueError("Mask kind 'file' needs a path")
        self.kind = kind
        self.quadrants = quadrants
        self.occluders = occluders
        self.size = size
        self.path = path

    def __repr__(self) -> str:
        if self.kind == "quadrants":
            return f"MaskSpec(quadrants={self.quadrants})"
        if self.kind == "occluders":
            return f"MaskSpec(occluders={self.occluders}x{self.size}x{self.size})"
        return f"MaskSpec(file='{self.path}')"

    @classmethod
    def from_options(cls, options: Dict) -> Optional["MaskSpec"]:
        """Build from parsed options, None if no mask is configured"""
        kind = options.get("mask") or "none"
        if kind == "none":
            return None
        kwargs = {"quadrants": options.get("quadrants"), "occluders": options.get("occluders")}
        kwargs["size"] = options.get("occluder_size")
        kwargs["path"] = options.get("mask_file")
        return cls(kind, **{k: v for k, v in kwargs.items() if v is not None})


def occluder_positions(n: int, count: int, height: int, width: int, size: int, rng: Rng) -> np.ndarray:
    """Top-left corners (n, count, 2), uniform over all placements inside the image

    :raises DataError: if the occluder is larger than the image
    """
    if size > height or size > width:
        raise DataError(f"occluder larger than image ({size}x{size} on {height}x{width})")
    rows = rng.integers(0, height - size + 1, (n, count))
    cols = rng.integers(0, width - size + 1, (n, count))
    return np.stack([rows, cols], axis=-1)


def make_mask(spec: MaskSpec, shape: Sequence[int], rng: Rng) -> np.ndarray:
    """Binary masks of the given (n, c, h, w) shape, equal for all channels

    :raises DataError: if the masks do not fit the image shape
    """
    n, c, h, w = shape
    mask = np.ones((n, h, w), dtype=tensor.default_dtype())
    if spec.kind == "quadrants":
        if h % 2 or w % 2:
            raise DataError(f"Quadrant masks need even image dimensions, got {h}x{w}")
        mask[:] = 0
        hh, hw = h // 2, w // 2
        for i in range(n):
            q = spec.quadrants or int(rng.integers(1, 4))
            for quad in rng.choice(4, q):
                r, col = divmod(int(quad), 2)
                mask[i, r * hh : (r + 1) * hh, col * hw : (col + 1) * hw] = 1
    elif spec.kind == "occluders":
        corners = occluder_positions(n, spec.occluders, h, w, spec.size, rng)
        s = spec.size
        for i in range(n):
            for r, col in corners[i]:
                mask[i, r : r + s, col : col + s] = 0
    else:
        image = read_pnm(spec.path)  # type: ignore
        if image.shape[1:] != (h, w):
            raise DataError(f"Mask file '{spec.path}' has size {image.shape[1:]}, images have {(h, w)}")
        mask[:] = (image[0] > 0.5).astype(mask.dtype)
    return np.repeat(mask[:, None], c, axis=1)


# image files


def tile_grid(images: np.ndarray, layout: Tuple[int, int], fill: float = 1.0) -> np.ndarray:
    """Arrange images on a (c, rows * (h + 1), cols * (w + 1)) canvas

    Every tile is preceded by a one pixel separator line at its top and left.
    """
    rows, cols = layout
    n, c, h, w = images.shape
    if n > rows * cols:
        raise DataError(f"Layout {rows}x{cols} is smaller than the {n} images")
    canvas = np.full((c, rows * (h + 1), cols * (w + 1)), fill, dtype=np.float64)
    for k in range(n):
        r, col = divmod(k, cols)
        top, left = r * (h + 1) + 1, col * (w + 1) + 1
        canvas[:, top : top + h, left : left + w] = images[k]
    return canvas


def untile_grid(canvas: np.ndarray, layout: Tuple[int, int], n: int) -> np.ndarray:
    """Inverse of tile_grid for n images"""
    rows, cols = layout
    c, height, width = canvas.shape
    h, w = height // rows - 1, width // cols - 1
    out = np.empty((n, c, h, w), dtype=canvas.dtype)
    for k in range(n):
        r, col = divmod(k, cols)
        top, left = r * (h + 1) + 1, col * (w + 1) + 1
        out[k] = canvas[:, top : top + h, left : left + w]
    return out


def grid_layout(n: int, cols: Optional[int] = None) -> Tuple[int, int]:
    """Nearly square (rows, cols) for n images"""
    cols = cols or int(np.ceil(np.sqrt(n)))
    return int(np.ceil(n / cols)), cols


def emit_grid(images: np.ndarray, layout: Tuple[int, int], path: str) -> None:
    """Write images as binary PGM (1 channel) or PPM (3 channels) grid

    :raises DataError: for other channel counts, values outside [0, 1] or a too small layout
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1] not in (1, 3):
        raise DataError(f"Grids need images (n, 1 or 3, h, w), got shape {images.shape}")
    if np.min(images) < 0 or np.max(images) > 1:
        raise DataError("Image values must be within [0, 1]")
    canvas = tile_grid(images, layout)
    pixels = np.rint(canvas * 255).astype(np.uint8)
    c, height, width = pixels.shape
    magic = "P5" if c == 1 else "P6"
    with open(path, "wb") as f:
        f.write(f"{magic}\n{width} {height}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(pixels.transpose(1, 2, 0)).tobytes())
    log.info("Wrote %d image(s) to '%s'", len(images), path)


def _header_tokens(content: bytes, count: int) -> Tuple[List[bytes], int]:
    """Read count whitespace separated header tokens, skipping comments"""
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(content) and content[pos : pos + 1].isspace():
            pos += 1
        if content[pos : pos + 1] == b"#":
            while pos < len(content) and content[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(content) and not content[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("Unexpected end of PNM header")
        tokens.append(content[start:pos])
    return tokens, pos + 1  # a single whitespace ends the header


def read_pnm(path: str) -> np.ndarray:
    """Read a binary 8 bit PGM/PPM file into a (c, h, w) array in [0, 1]

    :raises DataError: for other formats or truncated files
    """
    with open(path, "rb") as f:
        content = f.read()
    tokens, offset = _header_tokens(content, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"'{path}': unsupported image format {magic!r}, expected P5 or P6")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise DataError(f"'{path}': malformed header") from e
    if maxval != 255:
        raise DataError(f"'{path}': only 8 bit images are supported, maxval {maxval}")
    c = 1 if magic == b"P5" else 3
    size = width * height * c
    if len(content) - offset < size:
        raise DataError(f"'{path}': truncated pixel data")
    pixels = np.frombuffer(content, dtype=np.uint8, count=size, offset=offset)
    return pixels.reshape(height, width, c).transpose(2, 0, 1).astype(np.float64) / 255.0
