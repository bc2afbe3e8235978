"""Frame metrics, windowed aggregates, divergence detection, temporal
profiles and the spatio-temporal receptive field (STRF) probe."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .diffops import Tensor, abs_, backward, pick
from .errors import DomainError, UsageError
from .models import Network, run_sequence

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
EXCLUDE_HEAD = 3
EXCLUDE_TAIL = 3
WINDOW = 50


def _as_plane(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    while a.ndim > 2 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise UsageError(f"expected a single Y plane, got shape {a.shape}")
    return a


def psnr_y(pred, gt) -> float:
    """``10 log10(1 / MSE)`` on [0, 1] data, capped at 99 dB."""
    p, g = _as_plane(pred), _as_plane(gt)
    if p.shape != g.shape:
        raise UsageError(f"psnr_y: shapes {p.shape} and {g.shape} differ")
    mse = float(np.mean((p - g) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = g.size
    rows = sliding_window_view(img, n, axis=0) @ g
    return sliding_window_view(rows, n, axis=1) @ g


def ssim_y(pred, gt, size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all fully-contained Gaussian windows, dynamic range 1."""
    p, g = _as_plane(pred), _as_plane(gt)
    if p.shape != g.shape:
        raise UsageError(f"ssim_y: shapes {p.shape} and {g.shape} differ")
    if min(p.shape) < size:
        raise UsageError(f"ssim_y needs frames of at least {size}x{size}")
    w = _gaussian_window(size, sigma)
    c1, c2 = k1**2, k2**2
    mu_p, mu_g = _filter_valid(p, w), _filter_valid(g, w)
    s_pp = _filter_valid(p * p, w) - mu_p**2
    s_gg = _filter_valid(g * g, w) - mu_g**2
    s_pg = _filter_valid(p * g, w) - mu_p * mu_g
    num = (2 * mu_p * mu_g + c1) * (2 * s_pg + c2)
    den = (mu_p**2 + mu_g**2 + c1) * (s_pp + s_gg + c2)
    return float(np.mean(num / den))


# --------------------------------------------------------------------------
# per-sequence records
# --------------------------------------------------------------------------


@dataclass
class MetricsRecord:
    frame_index: list[int] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.frame_index)

    def aggregates(self) -> dict:
        return windowed_metrics(self)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame_index", "psnr_y", "ssim_y"])
            for i, p, s in zip(self.frame_index, self.psnr, self.ssim):
                w.writerow([i, f"{p:.6f}", f"{s:.8f}"])

    @classmethod
    def read_csv(cls, path) -> "MetricsRecord":
        rec = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rec.frame_index.append(int(row["frame_index"]))
                rec.psnr.append(float(row["psnr_y"]))
                rec.ssim.append(float(row["ssim_y"]))
        return rec


def evaluate_sequence(pred, gt, with_ssim: bool = True) -> MetricsRecord:
    """Per-frame metrics on ``(N, 1, H, W)`` Y sequences, skipping the first and
    last three frames."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise UsageError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    n = pred.shape[0]
    rec = MetricsRecord()
    for i in range(EXCLUDE_HEAD, n - EXCLUDE_TAIL):
        rec.frame_index.append(i)
        rec.psnr.append(psnr_y(pred[i], gt[i]))
        rec.ssim.append(ssim_y(pred[i], gt[i]) if with_ssim else float("nan"))
    return rec


def windowed_metrics(rec: MetricsRecord, window: int = WINDOW) -> dict:
    """Means over the first ``window`` / all / last ``window`` evaluated frames."""
    if len(rec) == 0:
        raise DomainError("no evaluated frames")
    p, s = np.asarray(rec.psnr), np.asarray(rec.ssim)
    out = {"all": {"psnr_y": float(p.mean()), "ssim_y": float(s.mean()), "frames": len(p)}}
    if len(p) < window:
        log.warning("only %d evaluated frames; reporting the 'all' window only", len(p))
        return out
    out["first_50" if window == WINDOW else f"first_{window}"] = {
        "psnr_y": float(p[:window].mean()), "ssim_y": float(s[:window].mean()), "frames": window}
    out["last_50" if window == WINDOW else f"last_{window}"] = {
        "psnr_y": float(p[-window:].mean()), "ssim_y": float(s[-window:].mean()), "frames": window}
    return out


@dataclass
class DivergenceResult:
    diverged: bool
    onset_frame: int | None
    last50_delta_db: float
    smoothed: np.ndarray

    def to_dict(self) -> dict:
        return {"diverged": self.diverged, "onset_frame": self.onset_frame, "last50_delta_db": self.last50_delta_db}


def divergence_score(
    model: MetricsRecord, baseline: MetricsRecord, window: int = WINDOW, threshold_db: float = -0.5
) -> DivergenceResult:
    """Flag a model whose smoothed PSNR deficit to ``baseline`` drops below
    ``threshold_db`` and stays there until the end of the sequence.

    The moving average is centred: the value at frame ``i`` averages the
    ``window`` frames around it. ``onset_frame`` is the first frame of the
    final run below threshold.
    """
    if model.frame_index != baseline.frame_index:
        raise UsageError("records are not aligned on the same frame indices")
    diff = np.asarray(model.psnr) - np.asarray(baseline.psnr)
    n = len(diff)
    w = min(window, n)
    smooth = np.convolve(diff, np.ones(w) / w, mode="valid")
    centres = np.asarray(model.frame_index)[w // 2 : w // 2 + len(smooth)]
    below = smooth < threshold_db
    diverged = bool(below[-1])
    onset = None
    if diverged:
        above = np.flatnonzero(~below)
        first = 0 if above.size == 0 else above[-1] + 1
        onset = int(centres[first])
    tail = min(WINDOW, n)
    delta = float(diff[-tail:].mean())
    return DivergenceResult(diverged, onset, delta, smooth)


# --------------------------------------------------------------------------
# temporal profiles
# --------------------------------------------------------------------------


def temporal_profile(seq, row: int) -> np.ndarray:
    """Stack row ``row`` of every frame: ``(N, W)`` (time down, x across)."""
    a = np.asarray(seq)
    if a.ndim == 4:
        if a.shape[1] != 1:
            raise UsageError("temporal_profile expects a Y sequence")
        a = a[:, 0]
    if not 0 <= row < a.shape[1]:
        raise UsageError(f"row {row} outside 0..{a.shape[1] - 1}")
    return a[:, row, :].copy()


def save_gray_png(path, img: np.ndarray, normalize: bool = False) -> None:
    from PIL import Image

    a = np.asarray(img, dtype=np.float64)
    if normalize:
        lo, hi = a.min(), a.max()
        a = (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)
    Image.fromarray(np.round(np.clip(a, 0, 1) * 255).astype(np.uint8)).save(path)


# --------------------------------------------------------------------------
# STRF probe
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class StrfConfig:
    tau: int = 40
    frame_size: int = 64
    iters: int = 1500
    lr0: float = 1.0
    drop_iters: tuple[int, ...] = (750, 1250)
    deviation_threshold: float = 1e-3

    @property
    def length(self) -> int:
        return 2 * self.tau + 1

    def lr_at(self, it: int) -> float:
        """Rate for 0-based iteration ``it``."""
        return self.lr0 * 0.1 ** sum(1 for d in self.drop_iters if it >= d)


@dataclass
class StrfResult:
    sequence: np.ndarray
    deviation: np.ndarray
    temporal_extent: int
    objective: list[float]
    stopped_at: int | None = None

    def frames_touched(self, threshold: float = 1e-3) -> np.ndarray:
        return np.flatnonzero(self.deviation > threshold) - (len(self.deviation) // 2)


def strf(net: Network, cfg: StrfConfig = StrfConfig(), seed: int = 0, progress=None) -> StrfResult:
    """Optimize an input sequence ``x_{-tau} .. x_{tau}`` to maximize ``|p|``,
    the centre pixel of the output at ``t = 0``.

    Adam ascent, inputs projected onto ``[0, 1]`` after every step. Frame
    ``k`` belongs to the receptive field when its largest absolute change from
    the random initialization exceeds ``deviation_threshold``.
    """
    rng = np.random.default_rng(seed)
    n, S, T = cfg.length, cfg.frame_size, net.spec.T
    if cfg.tau < T:
        raise UsageError(f"tau={cfg.tau} shorter than the network's half-window {T}")
    x = rng.random((n, 3, S, S)).astype(net.dtype)
    x0 = x.copy()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    b1, b2, eps = 0.9, 0.999, 1e-8
    centre = (0, 0, S * net.spec.s // 2, S * net.spec.s // 2)
    history = []
    last = cfg.tau + T  # frames after this one can never reach y_0
    for it in range(cfg.iters):
        leaves = [Tensor(x[i][None], requires_grad=True) for i in range(last + 1)]
        state = net.init_state(1, S, S)
        # a feed-forward net only needs the window around t = 0
        first = cfg.tau if net.spec.recurrence == "none" else T
        for t in range(first, cfg.tau + 1):
            y, state = net.step(state, leaves[t - T : t + T + 1])
        obj = abs_(pick(y, centre))
        val = obj.item()
        if not np.isfinite(val):
            return StrfResult(x, np.abs(x - x0).max(axis=(1, 2, 3)), -1, history, stopped_at=it)
        history.append(val)
        backward(obj)
        g = np.zeros_like(x)
        for i, leaf in enumerate(leaves):
            if leaf.grad is not None:
                g[i] = -leaf.grad[0]  # ascent on |p|
        step = it + 1
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        upd = (m / (1 - b1**step)) / (np.sqrt(v / (1 - b2**step)) + eps)
        x = np.clip(x - cfg.lr_at(it) * upd, 0.0, 1.0).astype(net.dtype)
        if not np.all(np.isfinite(x)):
            return StrfResult(x, np.abs(x - x0).max(axis=(1, 2, 3)), -1, history, stopped_at=it)
        if progress is not None:
            progress(it, val)
    dev = np.abs(x.astype(np.float64) - x0).max(axis=(1, 2, 3))
    extent = int(np.sum(dev > cfg.deviation_threshold))
    return StrfResult(x, dev, extent, history)


def hidden_norm_trace(net: Network, frames) -> list[float]:
    """``||h_t||_2`` at every step (empty for feed-forward networks)."""
    return run_sequence(net, frames, record_norms=True).hidden_norms


def write_aggregates(path, agg: dict, extra: dict | None = None) -> None:
    payload = dict(agg)
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def evaluate_dirs(pred_frames: Sequence[np.ndarray], gt_frames: Sequence[np.ndarray]) -> MetricsRecord:
    return evaluate_sequence(np.asarray(pred_frames), np.asarray(gt_frames))
