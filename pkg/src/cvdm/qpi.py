"""Synthetic quantitative-phase-imaging data: paraxial free-space propagation
of a pure-phase object to two defocus planes, shot-noise-like corruption, and
packaging into condition/target pairs. A Gaussian-blur toy task with the same
container rides along for smoke tests.

Propagation uses the transfer-function form of the paraxial convolution
kernel, evaluated spectrally: the transfer function has unit modulus, so
propagation conserves energy exactly up to floating-point error.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage


@dataclass
class OpticalConfig:
    """Geometry of the two-shot defocus measurement.

    All lengths in meters. Construction fails when the grid undersamples the
    propagation kernel (transfer-function sampling criterion
    N * pitch^2 >= wavelength * |defocus|).
    """

    wavelength: float = 500e-9
    defocus: float = 2e-6
    pixel_pitch: float = 0.5e-6
    shape: tuple = (32, 32)

    def __post_init__(self):
        if self.wavelength <= 0 or self.defocus <= 0 or self.pixel_pitch <= 0:
            raise ValueError("wavelength, defocus and pixel_pitch must be positive")
        n_min = min(self.shape)
        if n_min * self.pixel_pitch**2 < self.wavelength * abs(self.defocus):
            raise ValueError(
                "sampling criterion violated: need N * pitch^2 >= wavelength * |z| "
                f"(got {n_min * self.pixel_pitch**2:.3e} < "
                f"{self.wavelength * abs(self.defocus):.3e})"
            )

    @property
    def k(self) -> float:
        return 2.0 * math.pi / self.wavelength


def propagate_field(field_in: np.ndarray, distance: float, optics: OpticalConfig) -> np.ndarray:
    """Propagate a complex field by ``distance`` (either sign); 0 is identity."""
    field_in = np.asarray(field_in, dtype=np.complex128)
    if field_in.shape != tuple(optics.shape):
        raise ValueError(f"field shape {field_in.shape} != grid {tuple(optics.shape)}")
    if distance == 0.0:
        return field_in.copy()
    h, w = field_in.shape
    fy = np.fft.fftfreq(h, d=optics.pixel_pitch)
    fx = np.fft.fftfreq(w, d=optics.pixel_pitch)
    f2 = fy[:, None] ** 2 + fx[None, :] ** 2
    transfer = np.exp(1j * optics.k * distance) * np.exp(
        -1j * math.pi * optics.wavelength * distance * f2
    )
    return np.fft.ifft2(np.fft.fft2(field_in) * transfer)


def fresnel_propagate(
    amplitude: np.ndarray, phase: np.ndarray, distance: float, optics: OpticalConfig
) -> np.ndarray:
    """Intensity after propagating amplitude * exp(i * phase) by ``distance``."""
    field_out = propagate_field(np.asarray(amplitude) * np.exp(1j * np.asarray(phase)),
                                distance, optics)
    return np.abs(field_out) ** 2


def intensity_derivative(i_minus_d: np.ndarray, i_d: np.ndarray, d: float) -> np.ndarray:
    """Two-shot axial derivative estimate (I_{-d} - I_d) / (2 d)."""
    if d <= 0:
        raise ValueError("defocus distance must be positive")
    return (np.asarray(i_minus_d) - np.asarray(i_d)) / (2.0 * d)


@dataclass
class PairedSample:
    """One condition/target pair with generation metadata."""

    x: np.ndarray  # (C, H, W)
    y: np.ndarray  # (1, H, W), values in [0, 1]
    meta: dict = field(default_factory=dict)


def make_pair(
    source_image: np.ndarray,
    optics: OpticalConfig,
    rng: np.random.Generator,
    *,
    phase_range: float = math.pi,
    xi_max: float = 0.2,
    xi: Optional[float] = None,
    condition: str = "two_shot",
    source_id: str = "",
) -> PairedSample:
    """Build one phase-retrieval pair from a grayscale source in [0, 1].

    The source scales into a phase map over [0, phase_range] on a uniform
    unit-amplitude field; intensities at both defocus planes pick up noise
    with mean and variance both equal to a single xi drawn uniformly from
    [0, xi_max] per pair. The stored target is the phase scaled back to
    [0, 1]. Condition layout 'two_shot' stacks (I_d, I_-d); 'derivative'
    stores the two-shot axial derivative map (units 1/m).
    """
    source = np.asarray(source_image, dtype=np.float64)
    if source.min() < 0.0 or source.max() > 1.0:
        raise ValueError("source image must be normalized to [0, 1]")
    phase = source * phase_range
    amplitude = np.ones_like(phase)
    i_plus = fresnel_propagate(amplitude, phase, +optics.defocus, optics)
    i_minus = fresnel_propagate(amplitude, phase, -optics.defocus, optics)
    if xi is None:
        xi = float(rng.uniform(0.0, xi_max))
    if xi > 0.0:
        i_plus = i_plus + rng.normal(xi, math.sqrt(xi), size=i_plus.shape)
        i_minus = i_minus + rng.normal(xi, math.sqrt(xi), size=i_minus.shape)
    if condition == "two_shot":
        x = np.stack([i_plus, i_minus], axis=0)
    elif condition == "derivative":
        x = intensity_derivative(i_minus, i_plus, optics.defocus)[None]
    else:
        raise ValueError(f"unknown condition layout {condition!r}")
    meta = {
        "xi": xi,
        "source_id": source_id,
        "phase_range": phase_range,
        "condition": condition,
        # derivative sign follows (I_{-d} - I_d) / (2d), the transport-equation
        # left-hand-side convention, not the forward difference
        "derivative_sign": "minus_first",
    }
    return PairedSample(x=x, y=(phase / phase_range)[None], meta=meta)


def make_toy_blur_pair(
    source_image: np.ndarray,
    kernel_sigma: float,
    noise_sigma: float,
    rng: np.random.Generator,
    *,
    source_id: str = "",
) -> PairedSample:
    """Deblurring smoke task: condition is a blurred, noisy copy of the target."""
    if kernel_sigma <= 0:
        raise ValueError("kernel_sigma must be positive")
    y = np.asarray(source_image, dtype=np.float64)
    x = ndimage.gaussian_filter(y, kernel_sigma, mode="wrap")
    if noise_sigma > 0:
        x = x + rng.normal(0.0, noise_sigma, size=x.shape)
    meta = {"kernel_sigma": kernel_sigma, "noise_sigma": noise_sigma,
            "source_id": source_id}
    return PairedSample(x=x[None], y=y[None], meta=meta)


def synthetic_sources(n: int, shape: tuple, seed: int, smooth_sigma: float = 3.0) -> np.ndarray:
    """Smooth random grayscale images in [0, 1] (low-passed noise, rescaled)."""
    rng = np.random.default_rng(seed)
    out = np.empty((n, *shape), dtype=np.float64)
    for i in range(n):
        img = ndimage.gaussian_filter(rng.standard_normal(shape), smooth_sigma, mode="wrap")
        lo, hi = img.min(), img.max()
        out[i] = (img - lo) / (hi - lo) if hi > lo else np.zeros(shape)
    return out


def load_source_directory(path, shape: tuple) -> np.ndarray:
    """Grayscale images from a directory, center-cropped/resized to ``shape``."""
    from PIL import Image

    files = sorted(
        p for p in Path(path).iterdir()
        if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")
    )
    if not files:
        raise FileNotFoundError(f"no image files under {path}")
    out = np.empty((len(files), *shape), dtype=np.float64)
    for i, p in enumerate(files):
        img = Image.open(p).convert("L").resize((shape[1], shape[0]), Image.BILINEAR)
        out[i] = np.asarray(img, dtype=np.float64) / 255.0
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_dataset(
    root,
    splits: dict[str, list[PairedSample]],
    manifest_extra: Optional[dict] = None,
) -> Path:
    """One directory per split with x_/y_ array files plus a JSON manifest.

    Array files are plain .npy (self-describing shape/dtype header, no
    timestamps), so identical generation settings produce byte-identical
    trees.
    """
    root = Path(root)
    manifest = {"format": "cvdm-dataset-v1", "splits": {}, "samples": {}}
    if manifest_extra:
        manifest.update(manifest_extra)
    for split, samples in splits.items():
        split_dir = root / split
        split_dir.mkdir(parents=True, exist_ok=True)
        entries = []
        for i, sample in enumerate(samples):
            x_path = split_dir / f"x_{i:05d}.npy"
            y_path = split_dir / f"y_{i:05d}.npy"
            np.save(x_path, sample.x)
            np.save(y_path, sample.y)
            entries.append({
                "x": f"{split}/{x_path.name}", "y": f"{split}/{y_path.name}",
                "x_sha256": _sha256(x_path), "y_sha256": _sha256(y_path),
                "meta": sample.meta,
            })
        manifest["splits"][split] = len(samples)
        manifest["samples"][split] = entries
    manifest_path = root / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest_path


def load_dataset(root, split: str):
    """(x, y) arrays of shape (N, C, H, W) plus the manifest dict."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    entries = manifest["samples"][split]
    xs = np.stack([np.load(root / e["x"]) for e in entries])
    ys = np.stack([np.load(root / e["y"]) for e in entries])
    return xs, ys, manifest


def generate_qpi_dataset(
    root,
    *,
    n_train: int,
    n_val: int,
    optics: OpticalConfig,
    seed: int,
    phase_range: float = math.pi,
    xi_max: float = 0.2,
    condition: str = "two_shot",
    source_dir=None,
    smooth_sigma: float = 3.0,
) -> Path:
    """Generate and persist a two-split QPI dataset; returns the manifest path.

    Per-sample noise generators derive from (seed, index) so regeneration is
    order-independent and byte-identical.
    """
    n = n_train + n_val
    if source_dir is not None:
        sources = load_source_directory(source_dir, optics.shape)
        if len(sources) < n:
            raise ValueError(f"need {n} source images, found {len(sources)}")
    else:
        sources = synthetic_sources(n, optics.shape, seed=seed, smooth_sigma=smooth_sigma)
    samples = [
        make_pair(
            sources[i], optics,
            np.random.default_rng([seed, i]),
            phase_range=phase_range, xi_max=xi_max, condition=condition,
            source_id=f"source_{i:05d}",
        )
        for i in range(n)
    ]
    extra = {
        "task": "qpi",
        "seed": seed,
        "optics": {
            "wavelength": optics.wavelength, "defocus": optics.defocus,
            "pixel_pitch": optics.pixel_pitch, "shape": list(optics.shape),
        },
        "noise": {"family": "normal(xi, xi)", "xi_min": 0.0, "xi_max": xi_max},
        "phase_range": phase_range,
        "condition": condition,
    }
    return write_dataset(root, {"train": samples[:n_train], "val": samples[n_train:]}, extra)


def generate_toy_blur_dataset(
    root,
    *,
    n_train: int,
    n_val: int,
    shape: tuple,
    seed: int,
    kernel_sigma: float = 1.5,
    noise_sigma: float = 0.02,
    smooth_sigma: float = 3.0,
) -> Path:
    """Generate and persist the Gaussian-blur smoke-test dataset."""
    n = n_train + n_val
    sources = synthetic_sources(n, shape, seed=seed, smooth_sigma=smooth_sigma)
    samples = [
        make_toy_blur_pair(
            sources[i], kernel_sigma, noise_sigma,
            np.random.default_rng([seed, i]),
            source_id=f"source_{i:05d}",
        )
        for i in range(n)
    ]
    extra = {
        "task": "toy_blur",
        "seed": seed,
        "blur": {"kernel_sigma": kernel_sigma, "noise_sigma": noise_sigma},
        "shape": list(shape),
    }
    return write_dataset(root, {"train": samples[:n_train], "val": samples[n_train:]}, extra)
