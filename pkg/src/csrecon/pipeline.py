"""Image-level reconstruction: masking, blocking, solver dispatch, scoring."""
from __future__ import annotations

import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .bp import BpSettings, basis_pursuit, bpdn
from .errors import DimensionError, InvalidSizeError
from .gradient import GradientSettings, reconstruct_gradient
from .omp import omp
from .transforms import MeasurementSelector, SensingOperator, build_basis, draw_selector
from .tv import TvSettings, fourier_measurements, tv_reconstruct

PEAK = 255.0
LUMA = (0.299, 0.587, 0.114)


class Algorithm(str, Enum):
    BP = "BP"
    OMP = "OMP"
    TV = "TV"
    GRADIENT = "GRADIENT"

    @classmethod
    def parse(cls, name) -> "Algorithm":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).strip().upper())
        except ValueError:
            raise ValueError(f"unknown algorithm {name!r}; choose from {', '.join(a.value for a in cls)}") from None


@dataclass
class Image:
    """Grayscale image, float pixels nominally in [0, 255]."""

    pixels: np.ndarray
    format: str | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=float)
        if self.pixels.ndim != 2 or self.pixels.size == 0:
            raise DimensionError(f"expected a non-empty 2-D pixel array, got shape {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple:
        return self.pixels.shape


def load_grayscale(path) -> Image:
    """Read a raster image as grayscale.

    8-bit grayscale (including gray palettes) is passed through; color
    images are converted with luma weights 0.299 R + 0.587 G + 0.114 B.

    Raises
    ------
    OSError
        If the file cannot be read or its pixel format is unsupported.
    """
    from PIL import Image as PILImage, UnidentifiedImageError

    path = Path(path)
    try:
        with PILImage.open(path) as im:
            fmt = im.format
            mode = im.mode
            if mode == "P":
                im = im.convert("RGBA" if "transparency" in im.info else "RGB")
                mode = im.mode
            if mode in ("L", "1"):
                arr = np.asarray(im.convert("L"), dtype=float)
            elif mode in ("RGB", "RGBA"):
                rgb = np.asarray(im.convert("RGB"), dtype=float)
                gray = (rgb[..., 0] == rgb[..., 1]) & (rgb[..., 1] == rgb[..., 2])
                # gray pixels (e.g. from a gray palette) pass through unrounded
                arr = np.where(gray, rgb[..., 0], rgb @ np.array(LUMA))
            elif mode in ("I;16", "I", "F"):
                raise OSError(f"{path}: unsupported {fmt} pixel format {mode!r}; need 8-bit gray or 24-bit color")
            else:
                raise OSError(f"{path}: unsupported {fmt} pixel format {mode!r}")
    except UnidentifiedImageError as exc:
        raise OSError(f"{path}: not a recognized image format (BMP or PNG expected)") from exc
    return Image(arr, fmt)


def save_image(image: Image | np.ndarray, path, format: str | None = None) -> None:
    """Write pixels rounded and clamped to 8-bit grayscale."""
    from PIL import Image as PILImage

    pixels = image.pixels if isinstance(image, Image) else np.asarray(image, dtype=float)
    data = np.clip(np.rint(pixels), 0, 255).astype(np.uint8)
    PILImage.fromarray(data, mode="L").save(path, format=format)


@dataclass(frozen=True, eq=False)
class PixelMask:
    available: np.ndarray
    seed: int | None = None

    @property
    def height(self) -> int:
        return self.available.shape[0]

    @property
    def width(self) -> int:
        return self.available.shape[1]

    @property
    def theta(self) -> float:
        return float(self.available.mean())


def make_mask(height: int, width: int, theta: float, seed: int) -> PixelMask:
    """Mark ``round(theta * H * W)`` pixels available, uniformly at random."""
    if not 0 < theta <= 1:
        raise InvalidSizeError("theta must be in (0,1]")
    n = height * width
    m = int(math.floor(theta * n + 0.5))
    if m < 1:
        raise InvalidSizeError(f"theta={theta} leaves no available pixels in a {height}x{width} image")
    sel = draw_selector(n, m, seed)
    available = sel.mask().reshape(height, width)
    available.flags.writeable = False
    return PixelMask(available, seed)


@dataclass(frozen=True)
class Block:
    """One tile; ``data`` is ``size x size`` with edge-replicated padding."""

    index: int
    row: int
    col: int
    height: int
    width: int
    data: np.ndarray


def partition_blocks(array, size: int) -> list[Block]:
    """Split a 2-D array into row-major ``size x size`` tiles."""
    if size < 1:
        raise InvalidSizeError("block size must be >= 1")
    array = np.asarray(array)
    h, w = array.shape
    blocks = []
    for r in range(0, h, size):
        for c in range(0, w, size):
            tile = array[r:r + size, c:c + size]
            bh, bw = tile.shape
            if (bh, bw) != (size, size):
                tile = np.pad(tile, ((0, size - bh), (0, size - bw)), mode="edge")
            blocks.append(Block(len(blocks), r, c, bh, bw, tile.copy()))
    return blocks


def reassemble(blocks, shape, dtype=float) -> np.ndarray:
    """Inverse of :func:`partition_blocks`; padding is cropped."""
    out = np.empty(shape, dtype=dtype)
    for b in blocks:
        out[b.row:b.row + b.height, b.col:b.col + b.width] = b.data[:b.height, :b.width]
    return out


@dataclass(frozen=True)
class ReconConfig:
    """Per-run settings shared by all blocks."""

    block_size: int = 64
    tv_model: str = "pixel"
    tv_measurements: int = 1500
    tv_epsilon: float = 0.0
    tv_tolerance: float = 1e-4
    tv_max_outer_iterations: int = 10
    omp_sparsity_ratio: float = 0.25
    bp_gap_tol: float = 1e-3
    bp_max_iterations: int = 100
    bp_noise_level: float = 0.0
    gradient_max_iterations: int = 2000
    gradient_target_db: float = -60.0
    gradient_angle_threshold_deg: float = 170.0
    gradient_step_reduction: float = 1 / math.sqrt(10)

    def __post_init__(self):
        if self.block_size < 1:
            raise InvalidSizeError("block_size must be >= 1")
        if self.tv_model not in ("pixel", "dft"):
            raise InvalidSizeError("tv_model must be 'pixel' or 'dft'")
        if not 0 < self.omp_sparsity_ratio <= 1:
            raise InvalidSizeError("omp_sparsity_ratio must be in (0,1]")
        if self.bp_noise_level < 0 or self.tv_epsilon < 0:
            raise InvalidSizeError("noise levels must be non-negative")
        if self.tv_measurements < 1:
            raise InvalidSizeError("tv_measurements must be >= 1")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class BlockStats:
    index: int
    realized_theta: float
    iterations: int = 0
    converged: bool = True
    failed: bool = False
    error: str = ""


@dataclass
class ReconReport:
    algorithm: Algorithm
    theta: float
    psnr_db: float
    seed: int | None
    wall_time_s: float
    blocks: list = field(default_factory=list)
    config_fingerprint: str = ""
    peak: float = PEAK

    @property
    def blocks_failed(self) -> int:
        return sum(b.failed for b in self.blocks)


def psnr(reference, test, peak: float = PEAK) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    a = reference.pixels if isinstance(reference, Image) else np.asarray(reference, dtype=float)
    b = test.pixels if isinstance(test, Image) else np.asarray(test, dtype=float)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10 * math.log10(peak**2 / mse)


def block_seed(seed, index: int) -> int:
    """Seed for per-block randomness, independent of scheduling."""
    ss = np.random.SeedSequence([0 if seed is None else int(seed), index])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _solve_block(algorithm: Algorithm, block, avail, config: ReconConfig, seed):
    """Reconstruct one padded block; returns (pixels, iterations, converged)."""
    shape = block.shape
    flat = block.ravel()
    mask = avail.ravel()
    y = flat[mask]
    sel = MeasurementSelector.from_mask(mask)
    if algorithm is Algorithm.TV:
        settings = TvSettings(config.tv_epsilon, config.tv_max_outer_iterations, tolerance=config.tv_tolerance)
        if config.tv_model == "dft":
            op = fourier_measurements(shape, min(config.tv_measurements, flat.size), seed, include_dc=True)
            res = tv_reconstruct(op.apply(flat), op, settings)
        else:
            op = SensingOperator(build_basis("identity", shape), sel)
            res = tv_reconstruct(y, op, settings)
        return res.image, res.newton_iterations, res.converged
    basis = build_basis("dct", shape)
    if algorithm is Algorithm.BP:
        op = SensingOperator(basis, sel)
        settings = BpSettings(config.bp_max_iterations, config.bp_gap_tol)
        if config.bp_noise_level > 0:
            res = bpdn(y, op, config.bp_noise_level, settings)
        else:
            res = basis_pursuit(y, op, settings)
        return basis.inverse(res.x).reshape(shape), res.iterations, res.converged
    if algorithm is Algorithm.OMP:
        op = SensingOperator(basis, sel, columns_normalized=True)
        k = min(math.ceil(config.omp_sparsity_ratio * y.size), y.size)
        res = omp(y, op, max_atoms=k)
        coef = np.where(np.isfinite(op.scales), res.coefficients / op.scales, 0.0)
        return basis.inverse(coef).reshape(shape), res.iterations, True
    settings = GradientSettings(config.gradient_step_reduction, math.radians(config.gradient_angle_threshold_deg),
                                config.gradient_target_db, config.gradient_max_iterations)
    res = reconstruct_gradient(y, mask, basis, settings)
    return res.signal.reshape(shape), len(res.trace), res.converged


def _run_block(args):
    algorithm, block, avail, config, seed, fallback = args
    stats = BlockStats(block.index, float(avail[:block.height, :block.width].mean()))
    try:
        if not avail.any():
            raise InvalidSizeError("block has no available pixels")
        pixels, stats.iterations, stats.converged = _solve_block(algorithm, block.data, avail, config, seed)
        if not np.all(np.isfinite(pixels)):
            raise FloatingPointError("solver returned non-finite pixels")
    except Exception as exc:  # a failed block must not stop the image
        stats.failed = True
        stats.error = f"{type(exc).__name__}: {exc}"
        known = block.data[:block.height, :block.width][avail[:block.height, :block.width]]
        pixels = np.full(block.data.shape, known.mean() if known.size else fallback)
    return np.clip(pixels, 0.0, PEAK), stats


def worker_count() -> int:
    env = os.environ.get("CS_RECON_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InvalidSizeError(f"CS_RECON_THREADS must be an integer, got {env!r}") from None
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def reconstruct_image(image: Image, mask: PixelMask, algorithm, config: ReconConfig | None = None,
                      workers: int | None = None, fingerprint: str = "") -> tuple[Image, ReconReport]:
    """Reconstruct ``image`` from the pixels marked available in ``mask``.

    Blocks are solved independently (in worker processes when ``workers``
    exceeds one) and clamped to [0, 255]. A block whose solver raises is
    filled with the mean of its available pixels and flagged in the report.
    """
    config = config or ReconConfig()
    algorithm = Algorithm.parse(algorithm)
    if mask.available.shape != image.shape:
        raise DimensionError(f"mask {mask.available.shape} does not match image {image.shape}")
    start = time.perf_counter()
    fallback = float(image.pixels[mask.available].mean())
    img_blocks = partition_blocks(image.pixels, config.block_size)
    mask_blocks = partition_blocks(mask.available, config.block_size)
    jobs = [(algorithm, b, m.data, config, block_seed(mask.seed, b.index), fallback)
            for b, m in zip(img_blocks, mask_blocks)]
    workers = worker_count() if workers is None else max(1, workers)
    workers = min(workers, len(jobs))
    if workers == 1:
        results = [_run_block(j) for j in jobs]
    else:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_block, jobs))
    out_blocks = [Block(b.index, b.row, b.col, b.height, b.width, pix) for b, (pix, _) in zip(img_blocks, results)]
    pixels = reassemble(out_blocks, image.shape)
    recon = Image(pixels, image.format)
    report = ReconReport(algorithm, mask.theta, psnr(image, recon), mask.seed,
                         time.perf_counter() - start, [s for _, s in results], fingerprint)
    return recon, report
