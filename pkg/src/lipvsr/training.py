"""Backprop-through-time training with Adam and SRNL projection.

Each optimizer step unrolls the network over the supervised frames of a
clip (the two outer LR frames only feed the temporal window), averages the
per-frame Y-channel MSE, backpropagates through the whole unroll, applies
Adam, then re-normalizes the constrained layers with one warm-started power
iteration.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import models
from .diffops import Tensor, add_scalars, backward, mse_loss, no_grad, scale
from .errors import ConfigError, FormatError, TrainingDiverged
from .lipschitz import PowerIterState, srnl_normalize
from .models import Network, NetworkSpec, build, window_indices
from .videodata import Clip, DegradationConfig, VideoSequence, sample_clip

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    drop_epochs: tuple[int, ...] = (200, 400)
    drop_factor: float = 0.1
    batch: int = 4
    clip_len: int = 12
    epochs: int = 600
    seed: int = 0
    crop: int = 256  # HR crop side
    n_clips: int = 40000
    f: int | None = None  # overrides spec.f when set
    spectral_size: int = 32
    sigma: float = 1.5
    s: int = 4
    augment: bool = True

    def __post_init__(self):
        if self.batch < 1 or self.epochs < 0 or self.clip_len < 3:
            raise ConfigError("batch >= 1, epochs >= 0 and clip_len >= 3 are required")
        if list(self.drop_epochs) != sorted(self.drop_epochs):
            raise ConfigError("drop_epochs must be increasing")
        if not 0 < self.drop_factor <= 1:
            raise ConfigError("drop_factor must lie in (0, 1] so the schedule never increases")
        object.__setattr__(self, "drop_epochs", tuple(int(e) for e in self.drop_epochs))

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Reduced regime that fits a CPU: f=32, 64x64 LR crops, 60 epochs, 512 clips."""
        base = dict(lr0=1e-3, drop_epochs=(40, 50), epochs=60, crop=256, n_clips=512, f=32, spectral_size=64)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "drop_epochs" in d:
            d["drop_epochs"] = tuple(d["drop_epochs"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["drop_epochs"] = list(self.drop_epochs)
        return d

    @property
    def degradation(self) -> DegradationConfig:
        return DegradationConfig(sigma=self.sigma, s=self.s)


def learning_rate(epoch: int, cfg: TrainConfig) -> float:
    """Piecewise-constant rate for 1-based ``epoch``: one drop after each listed epoch."""
    drops = sum(1 for e in cfg.drop_epochs if epoch > e)
    return cfg.lr0 * cfg.drop_factor**drops


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    raw: dict[str, np.ndarray] = field(default_factory=dict)  # pre-SRN weights of beta < 1 layers


def adam_step(param: np.ndarray, grad: np.ndarray, opt: OptimizerState, lr: float, key: str = "param") -> np.ndarray:
    """Bias-corrected Adam update; ``opt.step`` must already count this step."""
    if opt.step < 1:
        raise ConfigError("increment opt.step before calling adam_step")
    m = opt.m.get(key)
    if m is None:
        m = opt.m[key] = np.zeros_like(param)
        opt.v[key] = np.zeros_like(param)
    v = opt.v[key]
    m *= BETA1
    m += (1 - BETA1) * grad
    v *= BETA2
    v += (1 - BETA2) * grad * grad
    m_hat = m / (1 - BETA1**opt.step)
    v_hat = v / (1 - BETA2**opt.step)
    return (param - lr * m_hat / (np.sqrt(v_hat) + EPS)).astype(param.dtype, copy=False)


def optimizer_update(net: Network, opt: OptimizerState, lr: float) -> None:
    """One Adam step over every parameter, then SRNL on the constrained layers."""
    opt.step += 1
    cfg = net.spec.srnl
    srn_layers = set()
    if cfg is not None and not cfg.is_spectral:
        srn_layers = set(net.constrained_layers())
    for name, p in net.parameters():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        layer, _, kind = name.rpartition(".")
        if layer in srn_layers and kind == "weight":
            # straight-through: gradient w.r.t. the effective weight drives the raw weight
            raw = opt.raw.setdefault(layer, p.data.copy())
            opt.raw[layer] = adam_step(raw, g, opt, lr, key=name)
        else:
            p.data = adam_step(p.data, g, opt, lr, key=name)
    if cfg is None:
        return
    if cfg.is_spectral:
        net.normalize_constrained(iters=cfg.power_iters_train)
    else:
        for layer in srn_layers:
            kern = net.layers[layer]
            raw_kern = models.Kernel(Tensor(opt.raw[layer]), None, kern.padding)
            new, _ = srnl_normalize(raw_kern, cfg, net.spectral_shape(layer))
            kern.weight.data = new.weight.data.astype(kern.weight.dtype)


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------


class FixedClips:
    """The same clips every epoch, in the same order."""

    def __init__(self, clips: Sequence[Clip]):
        self._clips = list(clips)

    def clips(self, epoch: int) -> list[Clip]:
        return self._clips


class RandomClips:
    """Fresh random clips from a pool of HR sequences each epoch (seeded per epoch)."""

    def __init__(self, sequences: Sequence[VideoSequence], cfg: TrainConfig):
        self.sequences = list(sequences)
        self.cfg = cfg

    def clips(self, epoch: int) -> list[Clip]:
        rng = np.random.default_rng([self.cfg.seed, epoch])
        out = []
        for i in range(self.cfg.n_clips):
            seq = self.sequences[int(rng.integers(len(self.sequences)))]
            out.append(
                sample_clip(seq, rng, self.cfg.clip_len, self.cfg.crop, self.cfg.degradation, self.cfg.augment)
            )
        return out


def batches(clips: Sequence[Clip], size: int):
    for i in range(0, len(clips), size):
        group = clips[i : i + size]
        yield np.stack([c.lr for c in group]), np.stack([c.gt_y for c in group])


# --------------------------------------------------------------------------
# unrolled loss
# --------------------------------------------------------------------------


def clip_loss(net: Network, lr: np.ndarray, gt: np.ndarray) -> tuple[Tensor, list[float]]:
    """Mean over supervised steps of the per-pixel Y MSE.

    ``lr`` is ``(B, L, 3, h, w)``; ``gt`` is ``(B, L-2, 1, H, W)`` aligned with
    LR frames ``1 .. L-2``. Frames 0 and L-1 only serve as window context.
    """
    B, L = lr.shape[:2]
    n_sup = L - 2
    if gt.shape[1] != n_sup:
        raise ConfigError(f"gt has {gt.shape[1]} frames, expected {n_sup}")
    lr = lr.astype(net.dtype, copy=False)
    gt = gt.astype(net.dtype, copy=False)
    state = net.init_state(B, lr.shape[-2], lr.shape[-1])
    losses, norms = [], []
    for t in range(n_sup):
        window = [Tensor(lr[:, i]) for i in window_indices(t + 1, L, net.spec.T)]
        y, state = net.step(state, window)
        losses.append(mse_loss(y, gt[:, t]))
        if state.h_curr is not None:
            norms.append(float(np.linalg.norm(state.h_curr.data)))
    return scale(add_scalars(losses), 1.0 / n_sup), norms


def train_step(net: Network, opt: OptimizerState, lr_batch, gt_batch, lr: float) -> float:
    net.zero_grad()
    loss, norms = clip_loss(net, lr_batch, gt_batch)
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite loss at optimizer step {opt.step + 1}; |h_t| trace {norms}", norms)
    backward(loss)
    optimizer_update(net, opt, lr)
    return value


def train_epoch(net: Network, dataset, cfg: TrainConfig, opt: OptimizerState, epoch: int) -> float:
    """One pass over ``dataset.clips(epoch)``; returns the mean batch loss."""
    lr = learning_rate(epoch, cfg)
    losses = [train_step(net, opt, x, y, lr) for x, y in batches(dataset.clips(epoch), cfg.batch)]
    return float(np.mean(losses)) if losses else float("nan")


def evaluate_loss(net: Network, dataset, cfg: TrainConfig, epoch: int = 1) -> float:
    with no_grad():
        vals = [clip_loss(net, x, y)[0].item() for x, y in batches(dataset.clips(epoch), cfg.batch)]
    return float(np.mean(vals))


# --------------------------------------------------------------------------
# resumable state
# --------------------------------------------------------------------------


def save_training_state(path, net: Network, opt: OptimizerState, epoch: int, cfg: TrainConfig) -> None:
    tensors = {f"param/{n}": p.data for n, p in net.parameters()}
    for k, a in opt.m.items():
        tensors[f"adam_m/{k}"] = a
        tensors[f"adam_v/{k}"] = opt.v[k]
    for k, a in opt.raw.items():
        tensors[f"raw/{k}"] = a
    for k, st in net.power_states.items():
        tensors[f"power_u/{k}"] = st.u
        if st.basis is not None:
            tensors[f"power_basis/{k}"] = st.basis
    meta = {
        "format": 1,
        "kind": "training_state",
        "spec": net.spec.to_dict(),
        "spectral_size": net.spectral_size,
        "epoch": epoch,
        "step": opt.step,
        "train": cfg.to_dict(),
        "power_sigma": {k: st.sigma_estimate for k, st in net.power_states.items()},
    }
    Path(path).write_bytes(models.write_container(meta, tensors))


def load_training_state(path) -> tuple[Network, OptimizerState, int]:
    meta, tensors = models.read_container(Path(path).read_bytes())
    if meta.get("kind") != "training_state":
        raise FormatError("not a training-state file")
    spec = NetworkSpec.from_dict(meta["spec"])
    first = next(k for k in tensors if k.startswith("param/"))
    net = build(spec, seed=0, dtype=tensors[first].dtype, spectral_size=meta["spectral_size"])
    net.power_states = {}
    for name, p in net.parameters():
        key = f"param/{name}"
        if key not in tensors or tensors[key].shape != p.shape:
            raise FormatError(f"training state lacks a matching tensor for {name}")
        p.data = tensors[key].copy()
    opt = OptimizerState(step=meta["step"])
    for k, a in tensors.items():
        group, _, name = k.partition("/")
        if group == "adam_m":
            opt.m[name] = a.copy()
        elif group == "adam_v":
            opt.v[name] = a.copy()
        elif group == "raw":
            opt.raw[name] = a.copy()
        elif group == "power_u":
            basis = tensors.get(f"power_basis/{name}")
            net.power_states[name] = PowerIterState(
                a.copy(), meta["power_sigma"][name], None if basis is None else basis.copy()
            )
    return net, opt, meta["epoch"]


# --------------------------------------------------------------------------
# driver
# --------------------------------------------------------------------------


@dataclass
class RunResult:
    spec: NetworkSpec
    checkpoint: Path | None
    losses: list[float]
    network: Network


def train_network(
    spec: NetworkSpec,
    dataset,
    cfg: TrainConfig,
    out_dir=None,
    resume: bool = False,
    on_epoch=None,
) -> RunResult:
    """Train one network for ``cfg.epochs`` epochs.

    With ``out_dir`` a CSV loss curve (epoch, mean_loss, lr), a resumable
    training state and a finalized export checkpoint are written there.
    """
    if cfg.f is not None and spec.f != cfg.f:
        spec = replace(spec, f=cfg.f)
    if spec.s != cfg.s:
        raise ConfigError(f"network scale {spec.s} differs from the degradation scale {cfg.s}")
    out = Path(out_dir) if out_dir is not None else None
    state_path = out / f"{spec.name}.state" if out else None
    start = 1
    if resume and state_path is not None and state_path.exists():
        net, opt, done = load_training_state(state_path)
        start = done + 1
    else:
        net = build(spec, seed=cfg.seed, spectral_size=cfg.spectral_size)
        opt = OptimizerState()
    losses = []
    curve = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / f"{spec.name}_loss.csv"
        if start == 1 or not csv_path.exists():
            with csv_path.open("w", newline="") as fh:
                csv.writer(fh).writerow(["epoch", "mean_loss", "lr"])
        curve = csv_path
    for epoch in range(start, cfg.epochs + 1):
        t0 = time.perf_counter()
        loss = train_epoch(net, dataset, cfg, opt, epoch)
        losses.append(loss)
        log.info("%s epoch %d loss %.6g (%.1fs)", spec.name, epoch, loss, time.perf_counter() - t0)
        if curve is not None:
            with curve.open("a", newline="") as fh:
                csv.writer(fh).writerow([epoch, repr(loss), repr(learning_rate(epoch, cfg))])
            save_training_state(state_path, net, opt, epoch, cfg)
        if on_epoch is not None:
            on_epoch(epoch, loss, net)
    ckpt = None
    if out:
        ckpt = out / f"{spec.name}.ckpt"
        models.export_checkpoint(net, ckpt)
        (out / f"{spec.name}_train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return RunResult(spec, ckpt, losses, net)


def train_run(specs: Sequence[NetworkSpec], dataset, cfg: TrainConfig, out_dir=None, resume=False) -> list[RunResult]:
    """Train each spec on the same dataset and seed, for paired comparisons."""
    return [train_network(spec, dataset, cfg, out_dir, resume=resume) for spec in specs]
