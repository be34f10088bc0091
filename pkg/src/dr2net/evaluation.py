"""Metrics and experiment harnesses: PSNR reports over a test set, timing,
measurement-noise sweeps and the distribution of estimated residuals."""
from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, InvalidParameterError
from .model import Dr2Model, linear_forward, residual_forward
from .pipeline import Measurements, acquire, reconstruct_image
from .sensing import add_noise, list_images, load_image, rng_for

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
DEFAULT_SIGMAS = (0.01, 0.05, 0.1, 0.25, 0.5)


def psnr(reference, test) -> float:
    """PSNR in dB for [0, 1] images (peak 1); zero error gives 100 dB."""
    a = np.asarray(reference, dtype=np.float64)
    b = np.asarray(test, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


@dataclass
class ReconstructionReport:
    names: list[str]
    psnr: list[float]
    seconds: list[float]
    measurement_rate: float
    model_id: str = ""
    denoised: bool = False
    skipped: list[str] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image", "psnr_db", "seconds", "mr", "model", "denoised"])
            for n, p, s in zip(self.names, self.psnr, self.seconds):
                w.writerow([n, f"{p:.4f}", f"{s:.6f}", f"{self.measurement_rate:.4f}",
                            self.model_id, int(self.denoised)])
            w.writerow(["MEAN", f"{self.mean_psnr:.4f}", f"{np.mean(self.seconds):.6f}",
                        f"{self.measurement_rate:.4f}", self.model_id, int(self.denoised)])

    def table(self) -> str:
        width = max([len(n) for n in self.names] + [10])
        tag = "w/ denoiser" if self.denoised else "w/o denoiser"
        lines = [f"MR={self.measurement_rate:.2f} {tag}  model={self.model_id}",
                 f"{'image':<{width}}  {'PSNR (dB)':>9}  {'time (s)':>9}"]
        for n, p, s in zip(self.names, self.psnr, self.seconds):
            lines.append(f"{n:<{width}}  {p:9.2f}  {s:9.4f}")
        lines.append(f"{'Mean PSNR':<{width}}  {self.mean_psnr:9.2f}")
        for s in self.skipped:
            lines.append(f"skipped: {s}")
        return "\n".join(lines)


def _load_images(images):
    """Normalise an image set to [(name, array)]; unreadable entries are
    returned separately. Accepts a directory, a list of paths, or a list of
    (name, array) pairs."""
    if isinstance(images, (str, Path)):
        images = list_images(images)
    loaded, skipped = [], []
    for item in images:
        if isinstance(item, tuple):
            loaded.append((item[0], np.asarray(item[1], dtype=np.float64)))
            continue
        try:
            loaded.append((Path(item).stem, load_image(item)))
        except Exception as exc:  # noqa: BLE001
            warnings.warn(f"skipping unreadable image {item}: {exc}", RuntimeWarning)
            skipped.append(f"{Path(item).name}: {exc}")
    return loaded, skipped


def evaluate_testset(model: Dr2Model, images, denoiser=None, model_id="") -> ReconstructionReport:
    loaded, skipped = _load_images(images)
    report = ReconstructionReport([], [], [], model.measurement_rate, model_id,
                                  denoiser is not None, skipped)
    for name, img in loaded:
        t0 = time.perf_counter()
        rec = reconstruct_image(img, model, denoiser)
        elapsed = time.perf_counter() - t0
        report.names.append(name)
        report.psnr.append(psnr(img, rec))
        report.seconds.append(elapsed)
    return report


def benchmark_speed(model: Dr2Model, image_size=(256, 256), repetitions: int = 10,
                    warmup: int = 2, seed: int = 0) -> float:
    """Median wall-clock seconds to reconstruct one image (measure, infer,
    stitch; no denoiser, no disk I/O)."""
    if repetitions < 5:
        raise InvalidParameterError("benchmark needs at least 5 repetitions")
    image = rng_for(seed).random(image_size)
    for _ in range(warmup):
        reconstruct_image(image, model)
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        reconstruct_image(image, model)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def noise_sweep(model: Dr2Model, images, sigmas=DEFAULT_SIGMAS, seed: int = 0,
                include_zero: bool = True) -> dict[float, float]:
    """Mean PSNR per noise level, adding N(0, sigma^2) to every measurement
    of every image. No denoiser is applied."""
    loaded, _ = _load_images(images)
    if not loaded:
        raise InvalidParameterError("noise sweep needs at least one image")
    levels = ([0.0] if include_zero else []) + [float(s) for s in sigmas if s != 0]
    clean = [acquire(img, model.operator) for _, img in loaded]
    out = {}
    for sigma in levels:
        scores = []
        for i, ((_, img), meas) in enumerate(zip(loaded, clean)):
            noisy = Measurements(add_noise(meas.y, sigma, seed + i), meas.layout, meas.operator_seed)
            scores.append(psnr(img, reconstruct_image(noisy, model)))
        out[sigma] = float(np.mean(scores))
    return out


def write_sweep(sweep: dict, path) -> None:
    """Two-column whitespace file (sigma, mean PSNR) readable by gnuplot."""
    with open(path, "w") as fh:
        fh.write("# sigma mean_psnr_db\n")
        for s, p in sweep.items():
            fh.write(f"{s:g} {p:.6f}\n")


def residual_values(model: Dr2Model, y, batch_size: int = 256) -> np.ndarray:
    if model.block_count < 1:
        raise InvalidParameterError("residual histogram needs at least one residual block")
    y = np.asarray(y)
    vals = []
    for start in range(0, len(y), batch_size):
        xhat = linear_forward(y[start:start + batch_size], model)
        vals.append(residual_forward(xhat[:, None], model).ravel())
    return np.concatenate(vals) if vals else np.zeros(0)


class ResidualDistribution:
    """Histogram of residual-network outputs over a sample of measurements."""

    def __init__(self, values: np.ndarray, edges):
        self.values = np.asarray(values, dtype=np.float64)
        self.edges = np.asarray(edges, dtype=np.float64)
        self.counts, _ = np.histogram(np.clip(self.values, self.edges[0], self.edges[-1]),
                                      self.edges)

    @property
    def total(self) -> int:
        return len(self.values)

    def fraction_within(self, lo: float = -0.05, hi: float = 0.05) -> float:
        if self.total == 0:
            return float("nan")
        return float(np.mean((self.values >= lo) & (self.values <= hi)))

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("# bin_lo bin_hi count fraction\n")
            for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
                fh.write(f"{lo:g} {hi:g} {int(c)} {c / max(self.total, 1):.6f}\n")


def default_edges(width: float = 0.01, limit: float = 0.2) -> np.ndarray:
    """Bins of ``width`` over [-limit, limit], one bin centred on zero;
    values outside are folded into the end bins."""
    half = int(round(limit / width))
    return (np.arange(-half, half + 2) - 0.5) * width


def residual_histogram(model: Dr2Model, y, bin_edges=None) -> ResidualDistribution:
    edges = default_edges() if bin_edges is None else bin_edges
    return ResidualDistribution(residual_values(model, y), edges)
