"""Sensing side: the Gaussian measurement operator, block measurements,
multi-scale training-set generation and measurement noise."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

from .container import read_container, write_container
from .errors import DatasetError, DimensionError, InvalidParameterError

log = logging.getLogger(__name__)

BLOCK = 33
N_PIXELS = BLOCK * BLOCK
DEFAULT_SCALES = (0.75, 1.0, 1.5)
DEFAULT_STRIDE = 14

# m for the four standard measurement rates (m/n rounded as in the reference setup)
STANDARD_M = {0.25: 272, 0.10: 109, 0.04: 43, 0.01: 10}

IMAGE_SUFFIXES = {".png", ".pgm", ".ppm", ".pnm", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg"}


def rng_for(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; identical streams on every platform."""
    return np.random.Generator(np.random.Philox(int(seed) & (2**64 - 1)))


def m_for_rate(rate: float, n: int = N_PIXELS) -> int:
    for std_rate, m in STANDARD_M.items():
        if n == N_PIXELS and abs(rate - std_rate) < 1e-9:
            return m
    if not 0 < rate < 1:
        raise InvalidParameterError(f"measurement rate must be in (0, 1), got {rate}")
    return max(1, int(round(rate * n)))


@dataclass
class MeasurementOperator:
    phi: np.ndarray  # (m, n) float32
    seed: int

    @property
    def m(self) -> int:
        return self.phi.shape[0]

    @property
    def n(self) -> int:
        return self.phi.shape[1]

    @property
    def measurement_rate(self) -> float:
        return self.m / self.n


def make_operator(m: int, n: int = N_PIXELS, seed: int = 0) -> MeasurementOperator:
    """Random Gaussian operator with i.i.d. N(0, 1/m) entries."""
    if not 1 <= m < n:
        raise InvalidParameterError(f"need 1 <= m < n, got m={m}, n={n}")
    phi = rng_for(seed).standard_normal((m, n)) / np.sqrt(m)
    return MeasurementOperator(phi.astype(np.float32), int(seed))


def measure(patch, op: MeasurementOperator) -> np.ndarray:
    """y = phi @ x for one flattened patch (n,) or a batch (N, n).

    Accumulates in float64 and returns float32, so single-patch and batched
    calls give identical values.
    """
    x = np.asarray(patch)
    if x.shape[-1] != op.n or x.ndim not in (1, 2):
        raise DimensionError(f"patch shape {x.shape} does not match operator n={op.n}")
    y = x.astype(np.float64) @ op.phi.T.astype(np.float64)
    return y.astype(np.float32)


def add_noise(y, sigma: float, seed: int) -> np.ndarray:
    if sigma < 0:
        raise InvalidParameterError(f"noise sigma must be >= 0, got {sigma}")
    y = np.asarray(y)
    if sigma == 0:
        return y.copy()
    noise = rng_for(seed).standard_normal(y.shape) * sigma
    return (y + noise).astype(y.dtype)


# ---------------------------------------------------------------- image I/O

def luminance(image) -> np.ndarray:
    """BT.601 luma Y = 0.299 R + 0.587 G + 0.114 B, scaled to [0, 1].

    Integer input is divided by its dtype maximum; float input is taken to be
    in [0, 1] already. A 2-D array is treated as grayscale.
    """
    img = np.asarray(image)
    if img.size == 0:
        raise InvalidParameterError("empty image")
    if np.issubdtype(img.dtype, np.integer):
        img = img.astype(np.float64) / np.iinfo(img.dtype).max
    else:
        img = img.astype(np.float64)
    if img.ndim == 3:
        if img.shape[2] == 1:
            img = img[:, :, 0]
        elif img.shape[2] in (3, 4):
            img = 0.299 * img[:, :, 0] + 0.587 * img[:, :, 1] + 0.114 * img[:, :, 2]
        else:
            raise InvalidParameterError(f"unsupported channel count {img.shape[2]}")
    elif img.ndim != 2:
        raise InvalidParameterError(f"expected a 2-D or 3-D image, got shape {img.shape}")
    return img


def load_image(path) -> np.ndarray:
    """Read a lossless image file and return its luminance in [0, 1] as float64."""
    with Image.open(path) as im:
        if im.mode in ("P", "1", "CMYK", "YCbCr", "LAB", "HSV"):
            im = im.convert("RGB")
        elif im.mode == "LA":
            im = im.convert("L")
        if im.mode == "F":
            arr = np.asarray(im, dtype=np.float64)
        elif im.mode in ("I", "I;16", "I;16B", "I;16L"):
            arr = np.asarray(im).astype(np.uint16)
        else:
            arr = np.asarray(im)
    return luminance(arr)


def save_image(path, image) -> None:
    """Write a [0, 1] grayscale image. ``.png`` files are 16-bit; others 8-bit."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0, 1)
    if str(path).lower().endswith(".png"):
        Image.fromarray(np.round(img * 65535).astype(np.uint16)).save(path)
    else:
        Image.fromarray(np.round(img * 255).astype(np.uint8)).save(path)


def scaled_size(height: int, width: int, scale: float) -> tuple[int, int]:
    """Output dims for a resize, rounding half away from zero."""
    return int(np.floor(height * scale + 0.5)), int(np.floor(width * scale + 0.5))


def resize(image: np.ndarray, scale: float) -> np.ndarray:
    """Bilinear resize of a float image (Pillow's BILINEAR filter on mode F)."""
    if scale == 1:
        return np.asarray(image, dtype=np.float64)
    h, w = scaled_size(*image.shape, scale)
    if h < 1 or w < 1:
        return np.zeros((0, 0))
    im = Image.fromarray(np.asarray(image, dtype=np.float32), mode="F")
    return np.asarray(im.resize((w, h), Image.BILINEAR), dtype=np.float64)


def patch_count(height: int, width: int, patch: int = BLOCK, stride: int = DEFAULT_STRIDE) -> int:
    if height < patch or width < patch:
        return 0
    return ((height - patch) // stride + 1) * ((width - patch) // stride + 1)


def extract_patches(image, patch: int = BLOCK, stride: int = DEFAULT_STRIDE) -> np.ndarray:
    """Sliding-window patches, row-major over window positions, each
    flattened row-major. Returns an array of shape (count, patch*patch)."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise DimensionError(f"expected a 2-D image, got {img.shape}")
    if img.shape[0] < patch or img.shape[1] < patch:
        log.warning("image %s smaller than %dx%d; skipped", img.shape, patch, patch)
        return np.zeros((0, patch * patch), dtype=img.dtype)
    win = sliding_window_view(img, (patch, patch))[::stride, ::stride]
    return win.reshape(-1, patch * patch).copy()


# ------------------------------------------------------------------ dataset

@dataclass
class SamplePair:
    measurement: np.ndarray
    patch: np.ndarray


@dataclass
class DatasetManifest:
    sources: list[str]
    scales: list[float]
    stride: int
    patch_count: int
    operator_seed: int
    m: int
    n: int = N_PIXELS
    per_source: list[dict] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)
    resize: str = "pillow-bilinear, dims rounded half away from zero"

    @property
    def measurement_rate(self) -> float:
        return self.m / self.n

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["measurement_rate"] = self.measurement_rate
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        keys = cls.__dataclass_fields__
        return cls(**{k: v for k, v in d.items() if k in keys})

    def summary(self) -> str:
        lines = [
            f"sources: {len(self.sources)} images ({len(self.skipped)} skipped)",
            f"scales: {self.scales}  stride: {self.stride}",
            f"m: {self.m}  MR: {self.measurement_rate:.4f}  operator seed: {self.operator_seed}",
            f"patches: {self.patch_count}",
        ]
        return "\n".join(lines)


class Dataset:
    """Measurement/patch pairs held as two float32 arrays (N, m) and (N, n)."""

    def __init__(self, measurements, patches, manifest: DatasetManifest):
        if len(measurements) != len(patches):
            raise DimensionError("measurement and patch counts differ")
        self.measurements = np.asarray(measurements, dtype=np.float32)
        self.patches = np.asarray(patches, dtype=np.float32)
        self.manifest = manifest

    def __len__(self):
        return len(self.patches)

    def __getitem__(self, i) -> SamplePair:
        return SamplePair(self.measurements[i], self.patches[i])

    @property
    def m(self) -> int:
        return self.manifest.m

    def subset(self, idx) -> "Dataset":
        return Dataset(self.measurements[idx], self.patches[idx], self.manifest)


def list_images(corpus) -> list[Path]:
    """Corpus files in sorted order. ``corpus`` is a directory or a list of paths."""
    if isinstance(corpus, (str, os.PathLike)):
        root = Path(corpus)
        if not root.is_dir():
            raise DatasetError(f"corpus directory {root} does not exist")
        return sorted(p for p in root.iterdir()
                      if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    return [Path(p) for p in corpus]


def build_dataset(corpus, op: MeasurementOperator, scales=DEFAULT_SCALES,
                  stride: int = DEFAULT_STRIDE) -> Dataset:
    """Resize each corpus image to every scale, take its luminance, cut
    33x33 patches and measure them.

    Output order is corpus order, then ascending scale, then row-major
    patches. Unreadable files and images too small for one patch are listed
    in ``manifest.skipped``.
    """
    scales = sorted(float(s) for s in scales)
    files = list_images(corpus)
    if not files:
        raise DatasetError(f"corpus {corpus} contains no images")
    chunks = []
    manifest = DatasetManifest(sources=[], scales=scales, stride=stride, patch_count=0,
                               operator_seed=op.seed, m=op.m, n=op.n)
    for path in files:
        try:
            img = load_image(path)
        except Exception as exc:  # noqa: BLE001 - any decode failure is recorded
            log.warning("cannot read %s: %s", path, exc)
            manifest.skipped.append({"source": path.name, "reason": f"unreadable: {exc}"})
            continue
        manifest.sources.append(path.name)
        for s in scales:
            scaled = resize(img, s)
            patches = extract_patches(scaled, BLOCK, stride)
            if len(patches) == 0:
                manifest.skipped.append({"source": path.name, "scale": s,
                                         "reason": f"too small ({scaled.shape})"})
            manifest.per_source.append({"source": path.name, "scale": s,
                                        "size": list(scaled.shape), "patches": len(patches)})
            chunks.append(patches.astype(np.float32))
    patches = np.concatenate(chunks) if chunks else np.zeros((0, op.n), np.float32)
    if len(patches) == 0:
        raise DatasetError("corpus produced zero patches")
    manifest.patch_count = len(patches)
    return Dataset(measure(patches, op), patches, manifest)


def save_dataset(dataset: Dataset, path) -> None:
    write_container(path, b"DR2DS", {"manifest": dataset.manifest.to_dict()},
                    {"measurements": dataset.measurements, "patches": dataset.patches})


def load_dataset(path) -> Dataset:
    meta, arrays = read_container(path, b"DR2DS", DatasetError)
    try:
        manifest = DatasetManifest.from_dict(meta["manifest"])
        return Dataset(arrays["measurements"], arrays["patches"], manifest)
    except KeyError as exc:
        raise DatasetError(f"{path}: missing field {exc}") from exc


def operator_for(dataset: Dataset) -> MeasurementOperator:
    """Regenerate the operator a dataset was measured with."""
    return make_operator(dataset.manifest.m, dataset.manifest.n, dataset.manifest.operator_seed)
