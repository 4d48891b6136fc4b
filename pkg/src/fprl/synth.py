"""Deterministic generator of lesion-bearing synthetic clips.

Each clip is a smooth drifting background with one static circular lesion
and light Gaussian noise, all derived from a single seed. Clips round-trip
bit-exactly through the on-disk format (pixels and overlap fractions are
quantized to float32 at generation time so that memory and disk agree).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .tensor import Tensor

CLIP_MAGIC = b"FPRLCLIP\x00"
CLIP_VERSION = 1


def splitmix64(state: int) -> tuple[int, int]:
    """One step of the splitmix64 stream: returns (next_state, output)."""
    mask = (1 << 64) - 1
    state = (state + 0x9E3779B97F4A7C15) & mask
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
    return state, (z ^ (z >> 31)) & mask


def derive_seeds(master_seed: int, count: int) -> list[int]:
    """Independent child seeds from a master seed via splitmix64."""
    state = master_seed & ((1 << 64) - 1)
    out = []
    for _ in range(count):
        state, value = splitmix64(state)
        out.append(value)
    return out


@dataclass
class ClipSpec:
    frames: int = 50
    side: int = 32
    channels: int = 3
    patch_size: int = 8
    lesion_radius: tuple[float, float] = (4.0, 7.0)
    drift_amplitude: float = 1.0     # pixels per frame
    noise_sigma: float = 0.005
    seed: int = 0

    def validate(self) -> None:
        if self.channels != 3:
            raise ConfigError("clips are RGB (3 channels)")
        if self.side % self.patch_size:
            raise ConfigError(
                f"side {self.side} not divisible by patch size {self.patch_size}")
        if 2 * (self.lesion_radius[1] + 2) >= self.side:
            raise ConfigError(f"lesion radius {self.lesion_radius[1]} too large "
                              f"for side {self.side}")
        if self.frames < 1 or self.lesion_radius[0] > self.lesion_radius[1]:
            raise ConfigError("invalid clip geometry")


@dataclass
class VideoClip:
    pixels: np.ndarray            # [T, side, side, 3] float64 in [0, 1]
    lesion_masks: np.ndarray      # [T, side, side] bool
    patch_overlap: np.ndarray     # [(side/patch)^2] float64, static lesion
    patch_size: int
    seed: int

    @property
    def frames(self) -> int:
        return self.pixels.shape[0]

    @property
    def side(self) -> int:
        return self.pixels.shape[1]


def generate_clip(spec: ClipSpec) -> VideoClip:
    """Low-frequency drifting background + one static textured lesion + noise."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    side, t_total = spec.side, spec.frames

    # background: mixture of low-frequency plane waves, sampled on a shifted grid
    n_waves = 4
    freqs = rng.uniform(0.5, 1.6, size=(n_waves, 2)) * (2 * np.pi / side)
    phases = rng.uniform(0, 2 * np.pi, size=(n_waves, 3))
    amps = rng.uniform(0.08, 0.16, size=(n_waves, 3))
    base = rng.uniform(0.35, 0.6, size=3)

    # jitter walk for the background only; the lesion stays put
    steps = rng.normal(0.0, spec.drift_amplitude, size=(t_total, 2))
    offsets = np.cumsum(steps, axis=0)

    radius = rng.uniform(*spec.lesion_radius)
    margin = radius + 2
    cx = rng.uniform(margin, side - margin)
    cy = rng.uniform(margin, side - margin)
    lesion_color = rng.uniform(0.55, 0.95, size=3)
    tex_freq = rng.uniform(1.2, 2.4) * 2 * np.pi / radius
    tex_phase = rng.uniform(0, 2 * np.pi)

    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    dist = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
    lesion_mask = dist <= radius
    ring = np.clip(1.0 - dist / radius, 0.0, 1.0)
    texture = 0.5 + 0.5 * np.sin(tex_freq * dist + tex_phase)

    pixels = np.empty((t_total, side, side, 3))
    for t in range(t_total):
        gx = xx + offsets[t, 0]
        gy = yy + offsets[t, 1]
        frame = np.empty((side, side, 3))
        for ch in range(3):
            acc = np.full((side, side), base[ch])
            for w in range(n_waves):
                acc = acc + amps[w, ch] * np.sin(freqs[w, 0] * gx + freqs[w, 1] * gy
                                                 + phases[w, ch])
            frame[:, :, ch] = acc
        for ch in range(3):
            lesion_layer = lesion_color[ch] * (0.65 + 0.35 * texture)
            frame[:, :, ch] = np.where(lesion_mask,
                                       lesion_layer * ring + frame[:, :, ch] * (1 - ring),
                                       frame[:, :, ch])
        if spec.noise_sigma > 0:
            frame = frame + rng.normal(0.0, spec.noise_sigma, size=frame.shape)
        pixels[t] = np.clip(frame, 0.0, 1.0)

    # quantize to float32 so disk and memory agree bit-for-bit
    pixels = pixels.astype(np.float32).astype(np.float64)
    masks = np.broadcast_to(lesion_mask, (t_total, side, side)).copy()

    g = side // spec.patch_size
    overlap = lesion_mask.reshape(g, spec.patch_size, g, spec.patch_size) \
        .transpose(0, 2, 1, 3).reshape(g * g, -1).mean(axis=1)
    overlap = overlap.astype(np.float32).astype(np.float64)

    return VideoClip(pixels=pixels, lesion_masks=masks, patch_overlap=overlap,
                     patch_size=spec.patch_size, seed=spec.seed)


def synthetic_teacher_features(clip: VideoClip, frame_indices: list[int],
                               d: int, patch_size: int | None = None) -> Tensor:
    """Test-double teacher: unit rows scaled by (1 + patch lesion overlap),
    so token norms rank lesion patches strictly above background."""
    patch_size = clip.patch_size if patch_size is None else patch_size
    if patch_size != clip.patch_size:
        raise ConfigError(f"clip stores overlap for patch size {clip.patch_size}")
    per_frame = clip.patch_overlap
    overlaps = np.concatenate([per_frame for _ in frame_indices])
    n = overlaps.size
    rng = np.random.default_rng(int(np.uint64(clip.seed)) ^ 0xC0FFEE)
    rows = rng.normal(size=(n, d))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    return Tensor(rows * (1.0 + overlaps)[:, None])


def token_overlaps(clip: VideoClip, frame_indices: list[int]) -> np.ndarray:
    """Per-token lesion-overlap fractions for a view (frame-major order)."""
    return np.concatenate([clip.patch_overlap for _ in frame_indices])


# ---------------------------------------------------------------------------
# on-disk format

def save_clip(path: str | Path, clip: VideoClip) -> None:
    t, side = clip.frames, clip.side
    with open(path, "wb") as fh:
        fh.write(CLIP_MAGIC)
        fh.write(struct.pack("<H", CLIP_VERSION))
        fh.write(struct.pack("<4I", t, side, 3, clip.patch_size))
        fh.write(clip.pixels.astype("<f4").tobytes())
        fh.write(np.packbits(clip.lesion_masks.reshape(-1)).tobytes())
        fh.write(clip.patch_overlap.astype("<f4").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataError(f"clip file truncated while reading {what}")
    return buf


def load_clip(path: str | Path) -> VideoClip:
    with open(path, "rb") as fh:
        magic = fh.read(len(CLIP_MAGIC))
        if magic != CLIP_MAGIC:
            raise DataError(f"bad clip magic {magic!r}")
        (version,) = struct.unpack("<H", _read_exact(fh, 2, "version"))
        if version != CLIP_VERSION:
            raise DataError(f"unsupported clip version {version}")
        t, side, channels, patch_size = struct.unpack("<4I", _read_exact(fh, 16, "header"))
        if channels != 3 or side == 0 or t == 0 or patch_size == 0 or side % patch_size:
            raise DataError(f"inconsistent clip header: T={t} side={side} "
                            f"channels={channels} patch={patch_size}")
        n_pix = t * side * side * 3
        pixels = np.frombuffer(_read_exact(fh, 4 * n_pix, "pixels"), dtype="<f4")
        n_bits = t * side * side
        n_bytes = (n_bits + 7) // 8
        bits = np.frombuffer(_read_exact(fh, n_bytes, "lesion masks"), dtype=np.uint8)
        g = side // patch_size
        overlap = np.frombuffer(_read_exact(fh, 4 * g * g, "overlap fractions"),
                                dtype="<f4")
        if fh.read(1):
            raise DataError("trailing bytes after clip payload")
    masks = np.unpackbits(bits, count=n_bits).astype(bool).reshape(t, side, side)
    return VideoClip(pixels=pixels.astype(np.float64).reshape(t, side, side, 3),
                     lesion_masks=masks,
                     patch_overlap=overlap.astype(np.float64),
                     patch_size=patch_size, seed=-1)


def generate_dataset(out_dir: str | Path, spec: ClipSpec, count: int,
                     master_seed: int) -> list[Path]:
    """Write `count` clips with splitmix-derived seeds; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, seed in enumerate(derive_seeds(master_seed, count)):
        child = ClipSpec(frames=spec.frames, side=spec.side, channels=spec.channels,
                         patch_size=spec.patch_size, lesion_radius=spec.lesion_radius,
                         drift_amplitude=spec.drift_amplitude,
                         noise_sigma=spec.noise_sigma, seed=seed)
        clip = generate_clip(child)
        path = out / f"clip_{i:05d}.fprlclip"
        save_clip(path, clip)
        paths.append(path)
    return paths


def load_dataset(data_dir: str | Path) -> list[VideoClip]:
    paths = sorted(Path(data_dir).glob("*.fprlclip"))
    if not paths:
        raise DataError(f"no .fprlclip files under {data_dir}")
    return [load_clip(p) for p in paths]
