"""Whole-image reconstruction: non-overlapping 33x33 tiling, per-block
measurement and reconstruction, stitching, and an optional external
denoiser run on the stitched image."""
from __future__ import annotations

import logging
import os
import shlex
import subprocess
import tempfile
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .container import read_container, write_container
from .errors import ConfigError, DatasetError, LayoutError
from .model import Dr2Model, dr2_forward
from .sensing import BLOCK, MeasurementOperator, load_image, measure, save_image

log = logging.getLogger(__name__)


class RateMismatchError(ConfigError):
    """Measurements were taken with a different operator than the model's."""


@dataclass(frozen=True)
class BlockLayout:
    height: int
    width: int
    padded_height: int
    padded_width: int
    rows: int
    cols: int
    padding_mode: str = "edge"

    @property
    def count(self) -> int:
        return self.rows * self.cols


def split_image(image, block: int = BLOCK):
    """Edge-replicate the image up to multiples of ``block`` and tile it
    row-major. Returns ``(patches, layout)`` with patches of shape
    (rows*cols, block*block)."""
    img = np.asarray(image)
    if img.ndim != 2 or img.size == 0:
        raise LayoutError(f"expected a non-empty 2-D image, got shape {img.shape}")
    h, w = img.shape
    rows, cols = -(-h // block), -(-w // block)
    ph, pw = rows * block, cols * block
    padded = np.pad(img, ((0, ph - h), (0, pw - w)), mode="edge")
    tiles = padded.reshape(rows, block, cols, block).transpose(0, 2, 1, 3)
    return tiles.reshape(rows * cols, block * block).copy(), BlockLayout(h, w, ph, pw, rows, cols)


def stitch_image(patches, layout: BlockLayout, block: int = BLOCK) -> np.ndarray:
    patches = np.asarray(patches)
    if len(patches) != layout.count:
        raise LayoutError(f"got {len(patches)} patches for a {layout.rows}x{layout.cols} grid")
    tiles = patches.reshape(layout.rows, layout.cols, block, block).transpose(0, 2, 1, 3)
    full = tiles.reshape(layout.padded_height, layout.padded_width)
    return full[:layout.height, :layout.width].copy()


@dataclass
class Measurements:
    """Block measurements of one image plus what is needed to rebuild it."""

    y: np.ndarray  # (blocks, m)
    layout: BlockLayout
    operator_seed: int

    @property
    def m(self) -> int:
        return self.y.shape[1]


def acquire(image, operator: MeasurementOperator) -> Measurements:
    patches, layout = split_image(image)
    return Measurements(measure(patches, operator), layout, operator.seed)


def save_measurements(meas: Measurements, path) -> None:
    write_container(path, b"DR2MS", {"layout": asdict(meas.layout),
                                     "operator_seed": meas.operator_seed, "m": meas.m},
                    {"y": meas.y})


def load_measurements(path) -> Measurements:
    meta, arrays = read_container(path, b"DR2MS", DatasetError)
    return Measurements(arrays["y"], BlockLayout(**meta["layout"]), int(meta["operator_seed"]))


def check_compatible(model: Dr2Model, m: int, operator_seed: int) -> None:
    if m != model.m:
        raise RateMismatchError(
            f"measurements have m={m} (MR {m / model.operator.n:.4f}) but the model "
            f"expects m={model.m} (MR {model.measurement_rate:.4f})")
    if operator_seed != model.operator.seed:
        raise RateMismatchError(
            f"measurements used operator seed {operator_seed}, model was trained "
            f"with seed {model.operator.seed}")


def reconstruct_patches(model: Dr2Model, y, batch_size: int = 256) -> np.ndarray:
    y = np.asarray(y)
    out = np.empty((len(y), BLOCK * BLOCK), dtype=model.dtype)
    for start in range(0, len(y), batch_size):
        sl = slice(start, start + batch_size)
        out[sl] = dr2_forward(y[sl], model).reshape(-1, BLOCK * BLOCK)
    return out


class ExternalDenoiser:
    """Runs a user command on the stitched image.

    ``command`` is a template with ``{input}`` and ``{output}`` placeholders,
    e.g. ``"bm3d-cli --sigma 5 {input} {output}"``. The input is written as a
    16-bit grayscale PNG with [0, 1] mapped to [0, 65535]; the command must
    write a grayscale image of the same size to ``{output}``.
    """

    def __init__(self, command: str, timeout: float | None = None):
        if "{input}" not in command or "{output}" not in command:
            raise ConfigError("denoiser command needs {input} and {output} placeholders")
        self.command = command
        self.timeout = timeout

    def __call__(self, image: np.ndarray) -> np.ndarray:
        with tempfile.TemporaryDirectory(prefix="dr2-denoise-") as tmp:
            src = os.path.join(tmp, "input.png")
            dst = os.path.join(tmp, "output.png")
            save_image(src, image)
            argv = shlex.split(self.command.format(input=shlex.quote(src), output=shlex.quote(dst)))
            proc = subprocess.run(argv, capture_output=True, timeout=self.timeout)
            if proc.returncode != 0:
                raise RuntimeError(f"denoiser exited with status {proc.returncode}: "
                                   f"{proc.stderr.decode(errors='replace').strip()}")
            out = load_image(dst)
        if out.shape != image.shape:
            raise RuntimeError(f"denoiser returned shape {out.shape}, expected {image.shape}")
        return out


def reconstruct_image(source, model: Dr2Model, denoiser=None) -> np.ndarray:
    """Reconstruct a full image from an image array (measured here with the
    model's operator) or from precomputed ``Measurements``.

    The stitched result is clamped to [0, 1]. If ``denoiser`` fails, a
    warning is issued and the un-denoised image is returned.
    """
    if isinstance(source, Measurements):
        check_compatible(model, source.m, source.operator_seed)
        meas = source
    else:
        meas = acquire(source, model.operator)
    patches = reconstruct_patches(model, meas.y)
    image = np.clip(stitch_image(patches, meas.layout).astype(np.float64), 0.0, 1.0)
    if denoiser is not None:
        try:
            image = np.clip(denoiser(image), 0.0, 1.0)
        except Exception as exc:  # noqa: BLE001 - any hook failure falls back
            warnings.warn(f"denoiser failed, returning un-denoised image: {exc}", RuntimeWarning)
    return image
