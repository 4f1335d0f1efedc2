"""Block-wise spatially varying blur of scene images, and MTF from PSFs.

The scene is split into a grid of blocks; each block is convolved with the
PSF computed for its center and treated as spatially invariant inside the
block.  PSFs come at 0.6 µm pitch and are resampled to the 1.2 µm sensor
pitch before convolution.
"""

from __future__ import annotations

from dataclasses import dataclass
import math
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import signal

SENSOR_PITCH = 1.2e-3  # mm
NOISE_SIGMA = 0.03
BLOCKS = (15, 20)


class ImageError(ValueError):
    pass


@dataclass
class SceneImage:
    """Three-channel intensity image in [0, 1]."""

    data: np.ndarray  # (rows, cols, 3)
    pitch: float = SENSOR_PITCH  # mm

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ImageError(f"expected a (rows, cols, 3) array, got {data.shape}")
        self.data = np.clip(data, 0.0, 1.0)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]


@dataclass
class MTFCurve:
    frequency: np.ndarray  # cycles/mm, 0 .. Nyquist
    modulation: np.ndarray
    direction: str  # "sagittal" | "tangential"
    wavelength: float | None = None


# ---------------------------------------------------------------------------
# PSF resampling and convolution
# ---------------------------------------------------------------------------


_BIN = np.array([0.5, 1.0, 0.5])


def bin_psf(psf: np.ndarray) -> np.ndarray:
    """Resample a PSF to twice its pitch, keeping the center on a pixel.

    Each output pixel integrates a two-pixel-wide window centered on an odd
    input index (weights 0.5, 1, 0.5 along each axis), so a 63-pixel PSF
    becomes 31 pixels with the center still at the middle.  The result is
    renormalized to unit sum.
    """
    psf = np.asarray(psf, dtype=float)
    if psf.ndim != 2 or psf.shape[0] != psf.shape[1] or psf.shape[0] % 2 == 0:
        raise ImageError("bin_psf expects an odd square PSF")
    k = np.outer(_BIN, _BIN)
    full = signal.convolve2d(psf, k, mode="same")
    out = full[1::2, 1::2]
    total = out.sum()
    if total <= 0:
        raise ImageError("PSF has no energy")
    return out / total


def _convolve_block(block: np.ndarray, kernel: np.ndarray, method: str) -> np.ndarray:
    p = kernel.shape[0] // 2
    padded = np.pad(block, p, mode="reflect" if min(block.shape) > p else "symmetric")
    return signal.convolve(padded, kernel, mode="valid", method=method)


def degrade(
    scene: SceneImage,
    psf_provider: Callable[[float, float], np.ndarray],
    blocks: tuple[int, int] = BLOCKS,
    noise: float = NOISE_SIGMA,
    seed: int = 0,
    bin_to_sensor: bool = True,
    method: str = "auto",
) -> SceneImage:
    """Spatially varying convolution, additive Gaussian noise, then clipping.

    ``psf_provider(x, y)`` gets the block center in mm relative to the image
    center (x to the right, y up) and returns a ``(3, n, n)`` unit-sum PSF
    at PSF-grid pitch; with ``bin_to_sensor`` it is resampled to the sensor
    pitch first.  Noise for block ``b`` comes from its own seeded stream.
    """
    rows, cols = scene.shape
    br, bc = blocks
    if rows % br or cols % bc:
        raise ImageError(f"image {rows}x{cols} is not divisible into {br}x{bc} blocks")
    h, w = rows // br, cols // bc
    out = np.empty_like(scene.data)
    for i in range(br):
        for j in range(bc):
            y = (rows / 2.0 - (i + 0.5) * h) * scene.pitch
            x = ((j + 0.5) * w - cols / 2.0) * scene.pitch
            psf = np.asarray(psf_provider(x, y), dtype=float)
            if psf.ndim == 2:
                psf = np.broadcast_to(psf, (3,) + psf.shape)
            sl = (slice(i * h, (i + 1) * h), slice(j * w, (j + 1) * w))
            rng = np.random.default_rng([seed, i * bc + j])
            for ch in range(3):
                kernel = bin_psf(psf[ch]) if bin_to_sensor else psf[ch]
                blurred = _convolve_block(scene.data[sl + (ch,)], kernel, method)
                if noise:
                    blurred = blurred + rng.normal(0.0, noise, blurred.shape)
                out[sl + (ch,)] = blurred
    return SceneImage(np.clip(out, 0.0, 1.0), scene.pitch)


def system_psf_provider(system, n_pupil: int = 65, size: int = 63):
    """PSF provider tracing ``system`` at the field seen by each block center.

    The field angle follows the paraxial mapping r = f tan(v).
    """
    from .psf import psf_three_channel
    from .trace import FieldSpec, paraxial_effl

    f = float(paraxial_effl(system))

    def provider(x, y):
        r = math.hypot(x, y)
        angle = math.degrees(math.atan(r / f))
        # image points land opposite the field direction
        azimuth = math.degrees(math.atan2(-x, -y)) if r > 0 else 0.0
        return psf_three_channel(system, FieldSpec(angle, azimuth), n_pupil, size).intensity

    return provider


# ---------------------------------------------------------------------------
# MTF
# ---------------------------------------------------------------------------


def mtf_from_psf(psf: np.ndarray, pitch: float = 0.6e-3, wavelength: float | None = None):
    """Sagittal (x) and tangential (y) MTF cuts through DC of a PSF.

    Returns ``(sagittal, tangential)`` curves from zero to Nyquist.
    """
    psf = np.asarray(psf, dtype=float)
    if psf.ndim != 2:
        raise ImageError("PSF must be 2-D")
    if np.any(psf < 0):
        raise ImageError("PSF must be non-negative")
    if not psf.sum() > 0:
        raise ImageError("PSF has no energy")
    spec = np.abs(np.fft.fft2(psf))
    spec = spec / spec[0, 0]
    ny, nx = psf.shape
    fx = np.fft.rfftfreq(nx, d=pitch)
    fy = np.fft.rfftfreq(ny, d=pitch)
    sag = MTFCurve(fx, spec[0, : len(fx)].copy(), "sagittal", wavelength)
    tan = MTFCurve(fy, spec[: len(fy), 0].copy(), "tangential", wavelength)
    return sag, tan


def diffraction_mtf(nu) -> np.ndarray:
    """Incoherent MTF of an aberration-free circular pupil; ``nu`` is frequency / cutoff."""
    nu = np.clip(np.asarray(nu, dtype=float), 0.0, 1.0)
    return 2.0 / np.pi * (np.arccos(nu) - nu * np.sqrt(1.0 - nu * nu))


# ---------------------------------------------------------------------------
# image I/O
# ---------------------------------------------------------------------------


def write_pnm(path, image: np.ndarray, bits: int = 8) -> None:
    """Write a grayscale (2-D) or RGB (3-channel) image in [0, 1] as PGM/PPM."""
    img = np.clip(np.asarray(image, dtype=float), 0.0, 1.0)
    if bits not in (8, 16):
        raise ImageError("bits must be 8 or 16")
    maxval = (1 << bits) - 1
    if img.ndim == 2:
        magic, rows, cols = b"P5", img.shape[0], img.shape[1]
    elif img.ndim == 3 and img.shape[2] == 3:
        magic, rows, cols = b"P6", img.shape[0], img.shape[1]
    else:
        raise ImageError(f"cannot write image of shape {img.shape}")
    q = np.rint(img * maxval)
    data = q.astype(">u2" if bits == 16 else "u1").tobytes()
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n%d\n" % (cols, rows, maxval) + data)


def _tokens(buf: bytes, count: int, pos: int):
    out = []
    while len(out) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        out.append(buf[start:pos])
    return out, pos + 1


def read_pnm(path) -> np.ndarray:
    """Read a binary PGM (P5) or PPM (P6) file into floats in [0, 1]."""
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _tokens(buf, 4, 0)
    if magic not in (b"P5", b"P6"):
        raise ImageError(f"unsupported PNM type {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    ch = 3 if magic == b"P6" else 1
    dtype = ">u2" if maxval > 255 else "u1"
    n = w * h * ch
    arr = np.frombuffer(buf, dtype=dtype, count=n, offset=pos).astype(float) / maxval
    return arr.reshape(h, w, 3) if ch == 3 else arr.reshape(h, w)


def write_raw(path, array: np.ndarray) -> None:
    """Write little-endian float32 data plus a ``.hdr`` side-car with its shape."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    Path(path).write_bytes(arr.tobytes())
    Path(str(path) + ".hdr").write_text(
        "dtype = float32\nshape = " + ", ".join(str(s) for s in arr.shape) + "\n", encoding="utf-8"
    )


def read_raw(path) -> np.ndarray:
    meta = {}
    for line in Path(str(path) + ".hdr").read_text(encoding="utf-8").splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    if meta.get("dtype") != "float32":
        raise ImageError(f"unsupported raw dtype {meta.get('dtype')!r}")
    shape = tuple(int(s) for s in meta["shape"].split(","))
    return np.frombuffer(Path(path).read_bytes(), dtype="<f4").reshape(shape).astype(float)


def load_scene(path, pitch: float = SENSOR_PITCH) -> SceneImage:
    """Load a PPM/PGM or raw image as a three-channel scene (values clipped)."""
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pgm", ".pnm"):
        img = read_pnm(path)
    else:
        img = read_raw(path)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    return SceneImage(img, pitch)
