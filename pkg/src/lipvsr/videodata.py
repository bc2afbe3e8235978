"""HR -> LR degradation, colour handling, clip sampling and synthetic scenes.

Frames are float arrays ``(C, H, W)`` in ``[0, 1]``; sequences stack them as
``(N, C, H, W)``.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DomainError, FormatError

log = logging.getLogger(__name__)


@dataclass
class VideoSequence:
    frames: np.ndarray
    colorspace: str = "RGB"
    tier: str = "HR"

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim == 3:
            f = f[:, None]
        if f.ndim != 4:
            raise FormatError(f"frames must be (N, C, H, W), got {f.shape}")
        if self.colorspace not in ("RGB", "Y"):
            raise ConfigError(f"colorspace must be RGB or Y, got {self.colorspace!r}")
        expected = 3 if self.colorspace == "RGB" else 1
        if f.shape[1] != expected:
            raise FormatError(f"{self.colorspace} frames need {expected} channels, got {f.shape[1]}")
        if not np.issubdtype(f.dtype, np.floating):
            f = f.astype(np.float32)
        self.frames = np.clip(f, 0.0, 1.0)

    def __len__(self) -> int:
        return self.frames.shape[0]

    def __getitem__(self, i):
        return self.frames[i]

    @property
    def shape(self):
        return self.frames.shape


@dataclass(frozen=True)
class DegradationConfig:
    sigma: float = 1.5
    s: int = 4
    kernel_radius: int | None = None

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError("sigma must be > 0")
        if int(self.s) != self.s or self.s < 1:
            raise ConfigError("s must be a positive integer")

    @property
    def radius(self) -> int:
        return self.kernel_radius if self.kernel_radius is not None else int(math.ceil(4 * self.sigma))


def gaussian_kernel1d(sigma: float, radius: int) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def blur(frames: np.ndarray, cfg: DegradationConfig) -> np.ndarray:
    """Separable Gaussian blur over the last two axes, symmetric-reflect border."""
    k = gaussian_kernel1d(cfg.sigma, cfg.radius)
    out = ndimage.correlate1d(np.asarray(frames, dtype=np.float64), k, axis=-2, mode="reflect")
    return ndimage.correlate1d(out, k, axis=-1, mode="reflect")


def degrade(hr: VideoSequence | np.ndarray, cfg: DegradationConfig = DegradationConfig()) -> VideoSequence:
    """Blur then keep every ``s``-th pixel starting at index 0."""
    seq = hr if isinstance(hr, VideoSequence) else VideoSequence(hr)
    frames = seq.frames
    H, W = frames.shape[-2:]
    s = cfg.s
    if H % s or W % s:
        log.warning("HR size %dx%d not divisible by %d; cropping to a multiple", H, W, s)
        frames = frames[..., : H - H % s, : W - W % s]
    lr = blur(frames, cfg)[..., ::s, ::s]
    return VideoSequence(np.clip(lr, 0, 1).astype(np.float32), seq.colorspace, "LR")


# --------------------------------------------------------------------------
# colour
# --------------------------------------------------------------------------

_RGB2YCC = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
_YCC2RGB = np.array(
    [
        [1.0, 0.0, 1.402],
        [1.0, -0.344136, -0.714136],
        [1.0, 1.772, 0.0],
    ]
)


def rgb_to_y(frame: np.ndarray) -> np.ndarray:
    """``(..., 3, H, W)`` -> ``(..., 1, H, W)`` full-range BT.601 luma."""
    f = np.asarray(frame)
    y = 0.299 * f[..., 0, :, :] + 0.587 * f[..., 1, :, :] + 0.114 * f[..., 2, :, :]
    return y[..., None, :, :].astype(f.dtype, copy=False)


def rgb_to_ycbcr(frame: np.ndarray) -> np.ndarray:
    f = np.asarray(frame, dtype=np.float64)
    out = np.einsum("ij,...jhw->...ihw", _RGB2YCC, f)
    out[..., 1:, :, :] += 0.5
    return out


def ycbcr_to_rgb(frame: np.ndarray) -> np.ndarray:
    f = np.array(frame, dtype=np.float64)
    f[..., 1:, :, :] -= 0.5
    return np.einsum("ij,...jhw->...ihw", _YCC2RGB, f)


def _cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    return np.where(
        x <= 1,
        (a + 2) * x**3 - (a + 3) * x**2 + 1,
        np.where(x < 2, a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a, 0.0),
    )


def _bicubic_matrix(n: int, s: int, grid: str = "phase0") -> np.ndarray:
    """``(n*s, n)`` interpolation matrix with edge clamp.

    ``grid="phase0"`` puts LR sample ``i`` on HR pixel ``s*i``, matching
    :func:`degrade`; ``grid="centre"`` uses the half-pixel convention of most
    image libraries.
    """
    if grid == "phase0":
        out_pos = np.arange(n * s) / s
    elif grid == "centre":
        out_pos = (np.arange(n * s) + 0.5) / s - 0.5
    else:
        raise ConfigError(f"grid must be 'phase0' or 'centre', got {grid!r}")
    base = np.floor(out_pos).astype(int)
    m = np.zeros((n * s, n))
    for off in range(-1, 3):
        idx = base + off
        w = _cubic(out_pos - idx)
        np.add.at(m, (np.arange(n * s), np.clip(idx, 0, n - 1)), w)
    return m


def bicubic_upsample(frame: np.ndarray, s: int, grid: str = "phase0") -> np.ndarray:
    """Upsample the last two axes by ``s`` with the a = -0.5 cubic kernel."""
    f = np.asarray(frame, dtype=np.float64)
    H, W = f.shape[-2:]
    mh, mw = _bicubic_matrix(H, s, grid), _bicubic_matrix(W, s, grid)
    return np.einsum("ih,...hw,jw->...ij", mh, f, mw)


# --------------------------------------------------------------------------
# clips and augmentation
# --------------------------------------------------------------------------


def dihedral(frames: np.ndarray, code: int) -> np.ndarray:
    """Apply one of the 8 flip/transpose symmetries to the last two axes.

    ``code`` bits: 1 = horizontal flip, 2 = vertical flip, 4 = transpose
    (applied last).
    """
    out = frames
    if code & 1:
        out = out[..., :, ::-1]
    if code & 2:
        out = out[..., ::-1, :]
    if code & 4:
        out = np.swapaxes(out, -1, -2)
    return np.ascontiguousarray(out)


@dataclass
class Clip:
    lr: np.ndarray  # (L, 3, h, w) LR RGB, first/last frames are context only
    gt_y: np.ndarray  # (L - 2, 1, H, W) HR Y targets
    context_pre: np.ndarray  # HR RGB frame used only to produce x_{-1}
    context_post: np.ndarray  # HR RGB frame used only to produce x_{L-2}

    @property
    def n_supervised(self) -> int:
        return self.gt_y.shape[0]


def sample_clip(
    seq: VideoSequence,
    rng: np.random.Generator,
    length: int = 12,
    crop: int | None = None,
    cfg: DegradationConfig = DegradationConfig(),
    augment: bool = True,
) -> Clip:
    """Random temporal window + spatial crop of an HR RGB sequence.

    ``crop`` is the HR crop side (multiple of ``cfg.s``); ``None`` keeps the full
    frame. Augmentation picks one dihedral symmetry for the whole clip.
    """
    if len(seq) < length:
        raise DomainError(f"sequence has {len(seq)} frames, clip needs {length}")
    if length < 3:
        raise DomainError("clip length must be >= 3 (two context frames)")
    start = int(rng.integers(0, len(seq) - length + 1))
    frames = seq.frames[start : start + length]
    H, W = frames.shape[-2:]
    if crop is not None:
        if crop > min(H, W) or crop % cfg.s:
            raise DomainError(f"crop {crop} must be a multiple of {cfg.s} and fit in {H}x{W}")
        y0 = int(rng.integers(0, H - crop + 1))
        x0 = int(rng.integers(0, W - crop + 1))
        frames = frames[..., y0 : y0 + crop, x0 : x0 + crop]
    if augment:
        frames = dihedral(frames, int(rng.integers(0, 8)))
    lr = degrade(VideoSequence(frames), cfg).frames
    gt = rgb_to_y(frames[1:-1]).astype(np.float32)
    return Clip(lr=lr, gt_y=gt, context_pre=frames[0], context_post=frames[-1])


# --------------------------------------------------------------------------
# synthetic quasi-static scenes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSceneConfig:
    length: int = 1000
    height: int = 128
    width: int = 128
    background_seed: int = 0
    object_shape: str = "disc"
    object_size: float = 12.0
    object_contrast: float = 0.6
    velocity: float = 0.5
    direction: float = 0.0
    jitter_amp: float = 0.0
    jitter_period: float = 50.0
    spectrum_exponent: float = 2.0
    levels: int = 5
    texture: float = 0.3

    def __post_init__(self):
        if self.length < 1:
            raise ConfigError("length must be >= 1")
        if self.velocity < 0 or self.jitter_amp < 0:
            raise ConfigError("velocity and jitter_amp must be >= 0")
        if self.object_shape not in ("disc", "rect"):
            raise ConfigError("object_shape must be 'disc' or 'rect'")
        if self.levels < 0:
            raise ConfigError("levels must be >= 0 (0 disables quantization)")


def _pink_noise(rng: np.random.Generator, h: int, w: int, exponent: float) -> np.ndarray:
    """Periodic (3, h, w) noise with amplitude spectrum ~ 1/|f|^exponent,
    mean 0.5 and standard deviation 0.15."""
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    radius = np.sqrt(fy**2 + fx**2)
    radius[0, 0] = 1.0
    amp = radius ** (-exponent)
    amp[0, 0] = 0.0
    mix = np.array([[1.0, 0.6, 0.3], [0.6, 1.0, 0.6], [0.3, 0.6, 1.0]])
    chans = []
    white = rng.standard_normal((3, h, w))
    for c in range(3):
        spec = np.fft.rfft2(white[c]) * amp
        chans.append(np.fft.irfft2(spec, s=(h, w)))
    img = np.einsum("ij,jhw->ihw", mix, np.stack(chans))
    img = (img - img.mean()) / (img.std() + 1e-12)
    return 0.5 + 0.15 * img


def _soft_levels(field: np.ndarray, levels: int, edge: float = 0.01) -> np.ndarray:
    """Quantize a ~N(0.5, 0.15) field into ``levels`` plateaus in [0.15, 0.85]
    with antialiased steps of width ``edge`` (in field units)."""
    if levels <= 1:
        return field
    thresholds = 0.5 + 0.3 * (np.arange(1, levels) / levels - 0.5) * 2
    out = np.zeros_like(field)
    for t in thresholds:
        out += np.clip((field - t) / edge + 0.5, 0.0, 1.0)
    return 0.15 + 0.7 * out / (levels - 1)


def _fourier_shift(img: np.ndarray, dy: float, dx: float) -> np.ndarray:
    h, w = img.shape[-2:]
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    phase = np.exp(-2j * np.pi * (fy * dy + fx * dx))
    return np.fft.irfft2(np.fft.rfft2(img) * phase, s=(h, w))


def _object_mask(cfg: SyntheticSceneConfig) -> np.ndarray:
    """Antialiased mask centred at the origin, on the periodic grid."""
    h, w = cfg.height, cfg.width
    yy = (np.arange(h) + h // 2) % h - h // 2
    xx = (np.arange(w) + w // 2) % w - w // 2
    Y, X = np.meshgrid(yy, xx, indexing="ij")
    r = cfg.object_size / 2
    if cfg.object_shape == "disc":
        return np.clip(r + 0.5 - np.sqrt(Y**2 + X**2), 0, 1)
    return np.clip(r + 0.5 - np.abs(Y), 0, 1) * np.clip(r + 0.5 - np.abs(X), 0, 1)


def _bilinear_place(mask: np.ndarray, y: float, x: float) -> np.ndarray:
    """Shift ``mask`` by a real offset with bilinear weights and wrap-around."""
    iy, ix = math.floor(y), math.floor(x)
    fy, fx = y - iy, x - ix
    out = np.zeros_like(mask)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            if wy * wx:
                out += wy * wx * np.roll(mask, (iy + dy, ix + dx), axis=(0, 1))
    return out


def synth_quasi_static(cfg: SyntheticSceneConfig) -> VideoSequence:
    """Static textured background with one moving object; deterministic per seed.

    The background is a 1/f^a noise field quantized into ``levels`` plateaus
    (antialiased edges) plus a low-amplitude 1/f^2 texture. The smooth fields
    are translated by a sinusoidal subpixel jitter of amplitude ``jitter_amp``
    before quantization, so edges move without ringing. The object translates at ``velocity``
    px/frame along ``direction`` (radians) and wraps at the borders.
    """
    rng = np.random.default_rng(cfg.background_seed)
    field_ = _pink_noise(rng, cfg.height, cfg.width, cfg.spectrum_exponent)
    texture = cfg.texture * (_pink_noise(rng, cfg.height, cfg.width, 2.0) - 0.5)
    colour = np.clip(0.5 + cfg.object_contrast * (rng.random(3) - 0.5) * 2, 0, 1)
    start = rng.random(2) * [cfg.height, cfg.width]
    mask = _object_mask(cfg)
    vy, vx = cfg.velocity * math.sin(cfg.direction), cfg.velocity * math.cos(cfg.direction)
    frames = np.empty((cfg.length, 3, cfg.height, cfg.width), dtype=np.float32)
    for t in range(cfg.length):
        if cfg.jitter_amp > 0 or t == 0:
            if cfg.jitter_amp > 0:
                phase = 2 * math.pi * t / cfg.jitter_period
                dy, dx = cfg.jitter_amp * math.sin(phase), cfg.jitter_amp * math.cos(1.3 * phase)
                f_t, tex_t = _fourier_shift(field_, dy, dx), _fourier_shift(texture, dy, dx)
            else:
                f_t, tex_t = field_, texture
            bg = _soft_levels(f_t, cfg.levels) + tex_t
        frame = bg
        if cfg.object_size > 0 and cfg.object_contrast > 0:
            m = _bilinear_place(mask, start[0] + vy * t, start[1] + vx * t)
            frame = frame * (1 - m) + colour[:, None, None] * m
        frames[t] = np.clip(frame, 0, 1)
    return VideoSequence(frames, "RGB", "HR")


def training_corpus(
    n_sequences: int, length: int, size: int, seed: int, velocity_range=(0.5, 3.0), jitter_range=(0.0, 1.0)
) -> list[VideoSequence]:
    """Short sequences with assorted motion, used as a stand-in training set."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_sequences):
        cfg = SyntheticSceneConfig(
            length=length,
            height=size,
            width=size,
            background_seed=int(rng.integers(2**31)),
            object_size=float(rng.uniform(size / 16, size / 3)),
            object_shape="disc" if rng.random() < 0.5 else "rect",
            object_contrast=float(rng.uniform(0.3, 0.9)),
            velocity=float(rng.uniform(*velocity_range)),
            direction=float(rng.uniform(0, 2 * math.pi)),
            jitter_amp=float(rng.uniform(*jitter_range)),
            jitter_period=float(rng.uniform(20, 80)),
        )
        out.append(synth_quasi_static(cfg))
    return out


# --------------------------------------------------------------------------
# PNG frame directories
# --------------------------------------------------------------------------

_FRAME_RE = re.compile(r"^frame_(\d{6})\.png$")


def write_frames(directory, seq: VideoSequence | np.ndarray, start: int = 0) -> list[Path]:
    from PIL import Image

    seq = seq if isinstance(seq, VideoSequence) else VideoSequence(seq, "Y" if np.shape(seq)[1] == 1 else "RGB")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(seq.frames):
        q = np.round(np.clip(frame, 0, 1) * 255).astype(np.uint8)
        img = Image.fromarray(q[0]) if q.shape[0] == 1 else Image.fromarray(np.transpose(q, (1, 2, 0)), "RGB")
        p = d / f"frame_{start + i:06d}.png"
        img.save(p)
        paths.append(p)
    return paths


def read_frames(directory) -> VideoSequence:
    from PIL import Image

    d = Path(directory)
    if not d.is_dir():
        raise FormatError(f"{d} is not a directory")
    names = sorted(p.name for p in d.iterdir() if _FRAME_RE.match(p.name))
    if not names:
        raise FormatError(f"{d} holds no frame_%06d.png files")
    idx = [int(_FRAME_RE.match(n).group(1)) for n in names]
    if idx != list(range(idx[0], idx[0] + len(idx))):
        raise FormatError(f"gap in frame numbering under {d}")
    frames, mode = [], None
    for n in names:
        with Image.open(d / n) as img:
            if img.mode not in ("L", "RGB"):
                img = img.convert("RGB")
            arr = np.asarray(img, dtype=np.float32) / 255.0
        arr = arr[None] if arr.ndim == 2 else np.transpose(arr, (2, 0, 1))
        if frames and arr.shape != frames[0].shape:
            raise FormatError(f"{n} has shape {arr.shape}, expected {frames[0].shape}")
        frames.append(arr)
    stack = np.stack(frames)
    return VideoSequence(stack, "Y" if stack.shape[1] == 1 else "RGB")
