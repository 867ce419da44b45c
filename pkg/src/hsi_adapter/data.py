"""Synthetic hyperspectral scenes, the HSC1 cube format, and cropping.

Scenes are built from layered shapes (rectangles, ellipses, stripes) drawn on
a grid of 4x4-pixel cells. Each shape gets a class and its own illumination
gain; a pixel's spectrum is its class signature times that gain plus
Gaussian noise. Bands listed in ``dark_bands`` are never energized: they are
exactly zero in every pixel.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn.functional import IGNORE_LABEL

MAGIC = b"HSC1"
_FLAG_WAVELENGTHS = 1


class CubeFormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


@dataclass
class HyperCube:
    data: np.ndarray  # [N, H, W] float32
    wavelengths_nm: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[0] < 1:
            raise ValueError(f"cube must be [N, H, W], got {self.data.shape}")
        if self.wavelengths_nm is not None:
            wl = np.asarray(self.wavelengths_nm, dtype=np.float32)
            if wl.shape != (self.bands,) or np.any(np.diff(wl) <= 0):
                raise ValueError("wavelengths must be strictly increasing, one per band")
            self.wavelengths_nm = wl

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass
class SynthConfig:
    bands: int = 25
    classes: int = 6
    height: int = 64
    width: int = 128
    noise_std: float = 0.02
    gain_range: float = 0.3
    ablation_band: int | None = 12
    bump: float = 0.6
    dark_bands: tuple = (0, 1, 23, 24)
    shapes: tuple = ("rect", "blob", "stripe")
    shapes_per_scene: tuple = (5, 9)
    cell: int = 4
    seed: int = 0
    signatures: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if self.height % self.cell or self.width % self.cell:
            raise ValueError("extents must be multiples of the cell size")
        self.signatures = make_signatures(self)


def make_signatures(cfg: SynthConfig) -> np.ndarray:
    """``[C, N]`` class signatures.

    Classes get smooth random curves over the energized bands. When
    ``ablation_band`` is set, the last class copies the second-to-last and
    adds a bump at that band only.
    """
    rng = np.random.default_rng([cfg.seed, 0x5167])
    N, C = cfg.bands, cfg.classes
    lit = np.ones(N, dtype=bool)
    lit[list(cfg.dark_bands)] = False
    t = np.linspace(0.0, 1.0, N)
    base = C - 1 if cfg.ablation_band is not None else C
    sigs = np.zeros((C, N))
    for c in range(base):
        curve = np.zeros(N)
        for _ in range(3):
            mu, width, amp = rng.uniform(0.0, 1.0), rng.uniform(0.08, 0.3), rng.uniform(0.3, 1.0)
            curve += amp * np.exp(-0.5 * ((t - mu) / width) ** 2)
        sigs[c] = 0.15 + 0.7 * curve / curve.max()
    if cfg.ablation_band is not None:
        k = cfg.ablation_band
        if not lit[k]:
            raise ValueError("the ablation band cannot be a dark band")
        sigs[C - 1] = sigs[C - 2]
        sigs[C - 1, k] += cfg.bump
    sigs[:, ~lit] = 0.0
    return sigs.astype(np.float32)


def _shape_mask(rng, kind: str, gh: int, gw: int) -> np.ndarray:
    yy, xx = np.mgrid[0:gh, 0:gw]
    if kind == "rect":
        h, w = rng.integers(2, gh // 2 + 1), rng.integers(2, gw // 2 + 1)
        y, x = rng.integers(0, gh - h + 1), rng.integers(0, gw - w + 1)
        return (yy >= y) & (yy < y + h) & (xx >= x) & (xx < x + w)
    if kind == "blob":
        cy, cx = rng.uniform(0, gh), rng.uniform(0, gw)
        ry, rx = rng.uniform(1.5, gh / 3), rng.uniform(1.5, gw / 3)
        return ((yy + 0.5 - cy) / ry) ** 2 + ((xx + 0.5 - cx) / rx) ** 2 <= 1.0
    if kind == "stripe":
        period, width = rng.integers(4, 9), rng.integers(1, 3)
        phase = rng.integers(0, period)
        along = xx if rng.random() < 0.5 else yy
        return (along + phase) % period < width
    raise ValueError(f"unknown shape kind {kind!r}")


def synth_scene(cfg: SynthConfig, index: int) -> tuple[HyperCube, np.ndarray]:
    """Deterministic scene ``index``: ``(cube [N, H, W], labels [H, W] uint8)``."""
    rng = np.random.default_rng([cfg.seed, int(index)])
    gh, gw = cfg.height // cfg.cell, cfg.width // cfg.cell
    C = cfg.classes
    labels = np.full((gh, gw), rng.integers(0, C), dtype=np.uint8)
    lo, hi = 1.0 - cfg.gain_range, 1.0 + cfg.gain_range
    gains = np.full((gh, gw), rng.uniform(lo, hi))
    n_shapes = rng.integers(cfg.shapes_per_scene[0], cfg.shapes_per_scene[1] + 1)
    order = rng.permutation(C)
    for s in range(n_shapes):
        mask = _shape_mask(rng, cfg.shapes[rng.integers(len(cfg.shapes))], gh, gw)
        labels[mask] = order[s % C]
        gains[mask] = rng.uniform(lo, hi)
    labels = np.repeat(np.repeat(labels, cfg.cell, 0), cfg.cell, 1)
    gains = np.repeat(np.repeat(gains, cfg.cell, 0), cfg.cell, 1)
    clean = cfg.signatures.T[:, labels] * gains[None].astype(np.float32)  # [N, H, W]
    noise = rng.standard_normal(clean.shape).astype(np.float32) * np.float32(cfg.noise_std)
    noise[list(cfg.dark_bands)] = 0.0
    wl = np.linspace(600.0, 975.0, cfg.bands) if cfg.bands > 1 else None
    return HyperCube(clean + noise, wl), labels


def synth_dataset(cfg: SynthConfig, indices) -> list[tuple[HyperCube, np.ndarray]]:
    return [synth_scene(cfg, i) for i in indices]


# -- HSC1 files -------------------------------------------------------------

def encode_cube(cube: HyperCube, labels: np.ndarray) -> bytes:
    N, H, W = cube.data.shape
    labels = np.asarray(labels)
    if labels.shape != (H, W):
        raise ValueError(f"labels {labels.shape} do not match cube extents {(H, W)}")
    flags = _FLAG_WAVELENGTHS if cube.wavelengths_nm is not None else 0
    parts = [MAGIC, struct.pack("<IIIB", N, H, W, flags)]
    if flags & _FLAG_WAVELENGTHS:
        parts.append(np.asarray(cube.wavelengths_nm, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(cube.data, dtype="<f4").tobytes())
    parts.append(labels.astype(np.uint8).tobytes())
    return b"".join(parts)


def decode_cube(buf: bytes) -> tuple[HyperCube, np.ndarray]:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise CubeFormatError("bad magic", 0)
    if len(buf) < 17:
        raise CubeFormatError("truncated header", len(buf))
    N, H, W, flags = struct.unpack_from("<IIIB", buf, 4)
    pos = 17
    if N == 0 or H == 0 or W == 0:
        raise CubeFormatError("zero extent in header", 4)
    if flags & ~_FLAG_WAVELENGTHS:
        raise CubeFormatError(f"unknown flag bits {flags:#x}", 16)
    wl = None
    need = (4 * N if flags & _FLAG_WAVELENGTHS else 0) + 4 * N * H * W + H * W
    if len(buf) - pos < need:
        raise CubeFormatError(f"truncated body: need {need} bytes, have {len(buf) - pos}", len(buf))
    if len(buf) - pos > need:
        raise CubeFormatError("trailing bytes", pos + need)
    if flags & _FLAG_WAVELENGTHS:
        wl = np.frombuffer(buf, "<f4", N, pos).astype(np.float32)
        pos += 4 * N
    data = np.frombuffer(buf, "<f4", N * H * W, pos).astype(np.float32).reshape(N, H, W)
    pos += 4 * N * H * W
    labels = np.frombuffer(buf, np.uint8, H * W, pos).reshape(H, W).copy()
    return HyperCube(data, wl), labels


def save_cube(path: str | Path, cube: HyperCube, labels: np.ndarray) -> None:
    Path(path).write_bytes(encode_cube(cube, labels))


def load_cube(path: str | Path) -> tuple[HyperCube, np.ndarray]:
    return decode_cube(Path(path).read_bytes())


# -- augmentation -------------------------------------------------------------

def random_crop(cube: np.ndarray, labels: np.ndarray, crop_hw, rng: np.random.Generator | int,
                align: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Crop the same window from ``cube [N, H, W]`` and ``labels [H, W]``.

    Images smaller than the crop are reflect-padded first. Window corners are
    drawn from multiples of ``align``.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    ch, cw = crop_hw
    _, H, W = cube.shape
    ph, pw = max(0, ch - H), max(0, cw - W)
    if ph or pw:
        cube = np.pad(cube, ((0, 0), (0, ph), (0, pw)), mode="reflect")
        labels = np.pad(labels, ((0, ph), (0, pw)), mode="reflect")
        H, W = H + ph, W + pw
    y = int(rng.integers(0, (H - ch) // align + 1)) * align
    x = int(rng.integers(0, (W - cw) // align + 1)) * align
    return cube[:, y : y + ch, x : x + cw], labels[y : y + ch, x : x + cw]


__all__ = [
    "IGNORE_LABEL",
    "CubeFormatError",
    "HyperCube",
    "SynthConfig",
    "decode_cube",
    "encode_cube",
    "load_cube",
    "make_signatures",
    "random_crop",
    "save_cube",
    "synth_dataset",
    "synth_scene",
]
