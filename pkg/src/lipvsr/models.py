"""Recurrent and feed-forward VSR networks built from :mod:`lipvsr.diffops`.

Three dataflows share one configurable spec:

``middle`` (MRVSR)
    ``z_t = xi(frames)``, ``h_t = phi(h_{t-1}, z_t)``, ``y_t = psi(h_t[, h_{t-1}])``.
    Only the ``phi`` convolutions are recurrent, and they carry the SRNL
    constraint, so the map ``h_{t-1} -> h_t`` can be certified contractive.
``full`` (RLSP-like)
    Every conv sits in the feedback loop: the previous hidden state is
    concatenated to the frames at the input, a trunk processes everything, and
    two heads emit the output residual and the next hidden state.
``none`` (RFS-N)
    A plain conv/ReLU chain over ``2T+1`` frames.

Concatenation orders are fixed as ``(h_{t-1}, z_t)`` at the input of ``phi``
and ``(h_t, h_{t-1})`` at the input of ``psi``.
"""

from __future__ import annotations

import copy
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator

import numpy as np

from .diffops import (
    Kernel,
    Tensor,
    add,
    concat_channels,
    conv2d,
    no_grad,
    pixel_shuffle,
    relu,
    rgb_to_y,
    unsqueeze0,
)
from .errors import ConfigError, DomainError, FormatError, UsageError
from .lipschitz import PowerIterState, SrnlConfig, srnl_normalize

RECURRENCE_MODES = ("none", "middle", "full")
CONSTRAINTS = ("none", "HL", "SL")

KERNEL_SIZE = 3


@dataclass(frozen=True)
class NetworkSpec:
    n_xi: int = 3
    n_phi: int = 1
    n_psi: int = 3
    f: int = 128
    s: int = 4
    T: int = 1
    recurrence: str = "middle"
    constraint: str = "HL"
    alpha: float = 1.0
    beta: float = 1.0
    feature_shifting: bool = True
    residual: bool = True
    name: str = "mrvsr"

    def __post_init__(self):
        for n in ("n_xi", "n_phi", "n_psi", "T"):
            if getattr(self, n) < 0:
                raise ConfigError(f"{n} must be >= 0")
        if self.f < 1 or self.s < 1:
            raise ConfigError("f and s must be >= 1")
        if self.recurrence not in RECURRENCE_MODES:
            raise ConfigError(f"recurrence must be one of {RECURRENCE_MODES}")
        if self.constraint not in CONSTRAINTS:
            raise ConfigError(f"constraint must be one of {CONSTRAINTS}")
        if self.n_psi < 1:
            raise ConfigError("n_psi must be >= 1 (the last conv emits s^2 maps)")
        if self.recurrence == "middle":
            if self.constraint == "none":
                raise ConfigError("middle recurrence requires an HL or SL constraint")
            if self.n_xi < 1:
                raise ConfigError("middle recurrence requires n_xi >= 1")
        if self.recurrence == "none":
            if self.feature_shifting:
                raise ConfigError("feature shifting needs a recurrent state")
            if self.constraint != "none":
                raise ConfigError("a feed-forward network has no recurrent layers to constrain")
        if self.recurrence == "full" and self.feature_shifting:
            raise ConfigError("feature shifting is only defined for middle recurrence")
        if self.recurrence == "full" and self.n_xi + self.n_phi + self.n_psi < 1:
            raise ConfigError("full recurrence needs at least one trunk conv")
        if self.constraint == "HL" and (self.alpha != 1.0 or self.beta != 1.0):
            raise ConfigError("HL requires alpha == 1 and beta == 1")
        if self.constraint != "none":
            SrnlConfig(self.alpha, self.beta)

    @property
    def n_frames(self) -> int:
        return 2 * self.T + 1

    @property
    def srnl(self) -> SrnlConfig | None:
        return None if self.constraint == "none" else SrnlConfig(self.alpha, self.beta)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown NetworkSpec keys: {sorted(unknown)}")
        return cls(**d)


def mrvsr(f: int = 128, s: int = 4, constraint: str = "HL", **kw) -> NetworkSpec:
    if constraint == "HL":
        kw.setdefault("alpha", 1.0)
        kw.setdefault("beta", 1.0)
    return NetworkSpec(3, 1, 3, f=f, s=s, T=1, recurrence="middle", constraint=constraint, name="mrvsr", **kw)


def rfs(n_frames: int = 3, f: int = 128, s: int = 4) -> NetworkSpec:
    if n_frames % 2 == 0:
        raise ConfigError("RFS needs an odd number of input frames")
    return NetworkSpec(
        3, 1, 3, f=f, s=s, T=n_frames // 2, recurrence="none", constraint="none",
        feature_shifting=False, name=f"rfs{n_frames}",
    )


def rlsp_like(f: int = 128, s: int = 4, constraint: str = "none", alpha=None, beta=None) -> NetworkSpec:
    if constraint == "HL":
        alpha, beta = 1.0, 1.0
    elif constraint == "SL":
        alpha = 2.0 if alpha is None else alpha
        beta = 0.1 if beta is None else beta
    else:
        alpha, beta = 1.0, 1.0
    suffix = "" if constraint == "none" else f"-{constraint.lower()}"
    return NetworkSpec(
        3, 1, 3, f=f, s=s, T=1, recurrence="full", constraint=constraint, alpha=alpha, beta=beta,
        feature_shifting=False, name=f"rlsp{suffix}",
    )


PRESETS = {
    "mrvsr": mrvsr,
    "rfs3": lambda f=128, s=4: rfs(3, f, s),
    "rfs7": lambda f=128, s=4: rfs(7, f, s),
    "rlsp": lambda f=128, s=4: rlsp_like(f, s, "none"),
    "rlsp-hl": lambda f=128, s=4: rlsp_like(f, s, "HL"),
    "rlsp-sl": lambda f=128, s=4: rlsp_like(f, s, "SL"),
}


def preset(name: str, f: int = 128, s: int = 4) -> NetworkSpec:
    try:
        return PRESETS[name.lower()](f=f, s=s)
    except KeyError:
        raise ConfigError(f"unknown network preset {name!r}; choose from {sorted(PRESETS)}") from None


def layer_layout(spec: NetworkSpec) -> list[tuple[str, int, int]]:
    """Ordered ``(name, C_in, C_out)`` for every conv of ``spec``."""
    f, s2 = spec.f, spec.s * spec.s
    c_frames = 3 * spec.n_frames
    out: list[tuple[str, int, int]] = []
    if spec.recurrence == "full":
        n_trunk = spec.n_xi + spec.n_phi + spec.n_psi
        c = c_frames + f
        for i in range(n_trunk):
            out.append((f"trunk.{i}", c, f))
            c = f
        out.append(("head.out", c, s2))
        out.append(("head.hidden", c, f))
        return out

    c = c_frames
    for i in range(spec.n_xi):
        out.append((f"xi.{i}", c, f))
        c = f
    if spec.recurrence == "middle":
        out.append(("phi.0", 2 * f, f))
        for i in range(1, spec.n_phi + 1):
            out.append((f"phi.{i}", f, f))
        c = 2 * f if spec.feature_shifting else f
    else:
        for i in range(spec.n_phi):
            out.append((f"phi.{i}", c, f))
            c = f
    for i in range(spec.n_psi):
        last = i == spec.n_psi - 1
        out.append((f"psi.{i}", c, s2 if last else f))
        c = f
    return out


def _xavier(name: str, c_in: int, c_out: int, seed: int, dtype) -> np.ndarray:
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    k = KERNEL_SIZE
    limit = np.sqrt(6.0 / ((c_in + c_out) * k * k))
    return rng.uniform(-limit, limit, size=(c_out, c_in, k, k)).astype(dtype)


@dataclass
class NetworkState:
    h_prev: Tensor | None = None
    h_curr: Tensor | None = None


@dataclass
class SequenceResult:
    outputs: np.ndarray
    hidden_norms: list[float] = field(default_factory=list)
    hidden_states: list[np.ndarray] = field(default_factory=list)
    final_state: NetworkState | None = None


class Network:
    """A built network: spec plus named kernels and SRNL bookkeeping."""

    def __init__(self, spec: NetworkSpec, layers: dict[str, Kernel], spectral_size: int = 32):
        self.spec = spec
        self.layers = layers
        self.spectral_size = int(spectral_size)
        self.power_states: dict[str, PowerIterState] = {}

    def __repr__(self):
        return f"Network({self.spec.name}, f={self.spec.f}, convs={len(self.layers)})"

    @property
    def dtype(self):
        return next(iter(self.layers.values())).weight.dtype

    def parameters(self) -> Iterator[tuple[str, Tensor]]:
        for name, k in self.layers.items():
            yield f"{name}.weight", k.weight
            if k.bias is not None:
                yield f"{name}.bias", k.bias

    def zero_grad(self):
        for _, p in self.parameters():
            p.zero_grad()

    def constrained_layers(self) -> list[str]:
        if self.spec.constraint == "none":
            return []
        if self.spec.recurrence == "full":
            return list(self.layers)
        return [n for n in self.layers if n.startswith("phi.")]

    def recurrent_layers(self) -> list[str]:
        """Convs inside the map h_{t-1} -> h_t, in application order."""
        if self.spec.recurrence == "middle":
            return [n for n in self.layers if n.startswith("phi.")]
        if self.spec.recurrence == "full":
            return [n for n in self.layers if n.startswith("trunk.")] + ["head.hidden"]
        return []

    def recurrent_operators(self, height: int | None = None, width: int | None = None):
        """``(Kernel, input_shape)`` for every recurrent conv, ready for certification.

        The shapes default to the normalization size. Under zero padding the
        operator norm grows with the spatial size, so certify at the size used
        for inference.
        """
        height = self.spectral_size if height is None else height
        width = height if width is None else width
        return [(self.layers[n], (self.layers[n].c_in, height, width)) for n in self.recurrent_layers()]

    def spectral_shape(self, name: str, size: int | None = None) -> tuple[int, int, int]:
        size = self.spectral_size if size is None else size
        return (self.layers[name].c_in, size, size)

    def astype(self, dtype) -> "Network":
        out = copy.deepcopy(self)
        for k in out.layers.values():
            for t in k.parameters():
                t.data = t.data.astype(dtype)
                t.grad = None
        return out

    def normalize_constrained(self, iters: int | None = None, names=None) -> None:
        """Apply SRNL in place to the constrained layers (warm-started)."""
        cfg = self.spec.srnl
        if cfg is None:
            return
        for i, name in enumerate(names if names is not None else self.constrained_layers()):
            kern = self.layers[name]
            state = self.power_states.get(name)
            n_it = iters if iters is not None else (cfg.power_iters_final if state is None else cfg.power_iters_train)
            new, state = srnl_normalize(kern, cfg, self.spectral_shape(name), state=state, iters=n_it, seed=i)
            kern.weight.data = new.weight.data
            if state is not None:
                self.power_states[name] = state

    # ------------------------------------------------------------------
    # forward
    # ------------------------------------------------------------------

    def init_state(self, batch: int, height: int, width: int, h0: np.ndarray | None = None) -> NetworkState:
        if self.spec.recurrence == "none":
            return NetworkState()
        shape = (batch, self.spec.f, height, width)
        h = np.zeros(shape, dtype=self.dtype) if h0 is None else np.asarray(h0, dtype=self.dtype).reshape(shape)
        zero = Tensor(np.zeros(shape, dtype=self.dtype))
        return NetworkState(h_prev=zero, h_curr=Tensor(h))

    def _chain(self, x: Tensor, names: list[str], last_relu: bool = True) -> Tensor:
        for i, n in enumerate(names):
            x = conv2d(x, self.layers[n])
            if last_relu or i < len(names) - 1:
                x = relu(x)
        return x

    def _residual(self, center: Tensor) -> Tensor:
        y = rgb_to_y(center)
        return concat_channels([y] * (self.spec.s * self.spec.s))

    def phi(self, h_prev: Tensor, z: Tensor) -> Tensor:
        names = [n for n in self.layers if n.startswith("phi.")]
        return self._chain(concat_channels([h_prev, z]), names)

    def step(self, state: NetworkState, window) -> tuple[Tensor, NetworkState]:
        spec = self.spec
        if len(window) != spec.n_frames:
            raise UsageError(f"{spec.name} needs a window of {spec.n_frames} frames, got {len(window)}")
        window = [w if isinstance(w, Tensor) else Tensor(np.asarray(w, dtype=self.dtype)) for w in window]
        if window[0].ndim == 3:
            window = [unsqueeze0(w) for w in window]
        center = window[spec.T]
        frames = concat_channels(window)
        names = list(self.layers)

        if spec.recurrence == "none":
            body = self._chain(frames, names, last_relu=False)
            new_state = state
        elif spec.recurrence == "middle":
            h_prev = state.h_curr
            z = self._chain(frames, [n for n in names if n.startswith("xi.")])
            h = self.phi(h_prev, z)
            psi_in = concat_channels([h, h_prev]) if spec.feature_shifting else h
            body = self._chain(psi_in, [n for n in names if n.startswith("psi.")], last_relu=False)
            new_state = NetworkState(h_prev=h_prev, h_curr=h)
        else:
            h_prev = state.h_curr
            feat = self._chain(concat_channels([frames, h_prev]), [n for n in names if n.startswith("trunk.")])
            body = conv2d(feat, self.layers["head.out"])
            h = relu(conv2d(feat, self.layers["head.hidden"]))
            new_state = NetworkState(h_prev=h_prev, h_curr=h)

        if spec.residual:
            body = add(body, self._residual(center))
        return pixel_shuffle(body, spec.s), new_state

    def recurrent_map(self, h: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Evaluate ``phi(h, z)`` on plain arrays (``z`` is phi's non-state input).

        For ``middle`` this is ``z_t``; for ``full`` it is the stacked frames.
        """
        with no_grad():
            if self.spec.recurrence == "middle":
                return self.phi(Tensor(h), Tensor(z)).data
            if self.spec.recurrence == "full":
                feat = self._chain(
                    concat_channels([Tensor(z), Tensor(h)]), [n for n in self.layers if n.startswith("trunk.")]
                )
                return relu(conv2d(feat, self.layers["head.hidden"])).data
        raise UsageError("recurrent_map needs a recurrent network")

    def recurrent_input(self, window) -> np.ndarray:
        """The ``z`` that :meth:`recurrent_map` expects for a frame window."""
        window = [np.asarray(w, dtype=self.dtype) for w in window]
        if len(window) != self.spec.n_frames:
            raise UsageError(f"{self.spec.name} needs a window of {self.spec.n_frames} frames, got {len(window)}")
        frames = np.concatenate([w if w.ndim == 4 else w[None] for w in window], axis=1)
        if self.spec.recurrence == "middle":
            with no_grad():
                return self._chain(Tensor(frames), [n for n in self.layers if n.startswith("xi.")]).data
        if self.spec.recurrence == "full":
            return frames
        raise UsageError("recurrent_input needs a recurrent network")


def build(spec: NetworkSpec, seed: int = 0, dtype=np.float32, spectral_size: int = 32) -> Network:
    """Xavier-uniform weights, zero biases, deterministic per ``(seed, layer name)``.

    Constrained layers are normalized once (``power_iters_final`` iterations)
    so a freshly built network already satisfies its constraint.
    """
    layers = {}
    for name, c_in, c_out in layer_layout(spec):
        w = Tensor(_xavier(name, c_in, c_out, seed, dtype), requires_grad=True, name=f"{name}.weight")
        b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True, name=f"{name}.bias")
        layers[name] = Kernel(w, b, "zero")
    net = Network(spec, layers, spectral_size=spectral_size)
    net.normalize_constrained()
    return net


def step(net: Network, state: NetworkState, window) -> tuple[Tensor, NetworkState]:
    return net.step(state, window)


def window_indices(t: int, n: int, T: int) -> list[int]:
    """Edge-replicated frame indices ``t-T .. t+T`` clipped to ``[0, n)``."""
    return [min(max(t + d, 0), n - 1) for d in range(-T, T + 1)]


def run_sequence(
    net: Network,
    frames: np.ndarray,
    h0: np.ndarray | None = None,
    record_norms: bool = True,
    keep_states: bool = False,
    progress=None,
) -> SequenceResult:
    """Super-resolve an LR RGB sequence ``(N, 3, H, W)`` into HR Y ``(N, 1, sH, sW)``.

    ``h_0`` is zero unless given. Missing window frames at both ends are
    filled by edge replication.
    """
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[0] == 0:
        raise DomainError("run_sequence needs a non-empty (N, 3, H, W) sequence")
    n, _, H, W = frames.shape
    s = net.spec.s
    frames = frames.astype(net.dtype, copy=False)
    out = np.empty((n, 1, H * s, W * s), dtype=net.dtype)
    state = net.init_state(1, H, W, h0)
    res = SequenceResult(out)
    recurrent = net.spec.recurrence != "none"
    with no_grad():
        for t in range(n):
            window = [Tensor(frames[i][None]) for i in window_indices(t, n, net.spec.T)]
            y, state = net.step(state, window)
            out[t] = y.data[0]
            if recurrent:
                if record_norms:
                    res.hidden_norms.append(float(np.linalg.norm(state.h_curr.data.astype(np.float64))))
                if keep_states:
                    res.hidden_states.append(state.h_curr.data[0].copy())
            if progress is not None:
                progress(t)
    res.final_state = state
    return res


# --------------------------------------------------------------------------
# checkpoint container
# --------------------------------------------------------------------------

MAGIC = b"LIPVSRCK"
_HEADER = struct.Struct("<8sQ")


def write_container(meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    """JSON manifest + little-endian tensor blob."""
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = np.dtype(arr.dtype).newbyteorder("<")
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dt.str, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = dict(meta, tensors=entries, blob_nbytes=offset)
    mbytes = json.dumps(manifest, sort_keys=True).encode()
    return _HEADER.pack(MAGIC, len(mbytes)) + mbytes + b"".join(chunks)


def read_container(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < _HEADER.size:
        raise FormatError("checkpoint truncated before header")
    magic, mlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError("not a lipvsr checkpoint (bad magic)")
    start = _HEADER.size
    if len(data) < start + mlen:
        raise FormatError("checkpoint truncated inside manifest")
    try:
        manifest = json.loads(data[start : start + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt manifest: {exc}") from None
    blob = data[start + mlen :]
    if len(blob) != manifest.get("blob_nbytes"):
        raise FormatError(f"blob has {len(blob)} bytes, manifest says {manifest.get('blob_nbytes')}")
    tensors = {}
    for e in manifest["tensors"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        if e["offset"] + e["nbytes"] > len(blob) or count * dt.itemsize != e["nbytes"]:
            raise FormatError(f"tensor {e['name']} has inconsistent extent")
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=e["offset"]).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(dt.newbyteorder("="))
    return manifest, tensors


def export_checkpoint(net: Network, path=None, finalize: bool = True) -> bytes:
    """Serialize ``net`` with float32 weights.

    With ``finalize`` the constrained layers first receive the final SRNL
    normalization (``power_iters_final`` warm-started iterations on
    ``net.spectral_size``) *in place*, so the saved weights and ``net`` agree.
    """
    if finalize and net.spec.srnl is not None and net.spec.srnl.is_spectral:
        net.normalize_constrained(iters=net.spec.srnl.power_iters_final)
    tensors = {name: t.data.astype(np.float32) for name, t in net.parameters()}
    meta = {"format": 1, "kind": "network", "spec": net.spec.to_dict(), "spectral_size": net.spectral_size}
    data = write_container(meta, tensors)
    if path is not None:
        with open(path, "wb") as fh:
            fh.write(data)
    return data


def import_checkpoint(data_or_path, dtype=np.float32) -> Network:
    if isinstance(data_or_path, (bytes, bytearray)):
        data = bytes(data_or_path)
    else:
        with open(data_or_path, "rb") as fh:
            data = fh.read()
    manifest, tensors = read_container(data)
    if manifest.get("kind") != "network":
        raise FormatError(f"checkpoint kind {manifest.get('kind')!r} is not a network")
    try:
        spec = NetworkSpec.from_dict(manifest["spec"])
    except (ConfigError, TypeError, KeyError) as exc:
        raise FormatError(f"bad spec in manifest: {exc}") from None
    layers = {}
    for name, c_in, c_out in layer_layout(spec):
        wk, bk = f"{name}.weight", f"{name}.bias"
        if wk not in tensors or bk not in tensors:
            raise FormatError(f"checkpoint lacks tensors for layer {name}")
        w, b = tensors.pop(wk), tensors.pop(bk)
        if w.shape != (c_out, c_in, KERNEL_SIZE, KERNEL_SIZE) or b.shape != (c_out,):
            raise FormatError(f"layer {name}: stored shapes {w.shape}/{b.shape} do not match the spec")
        layers[name] = Kernel(
            Tensor(w.astype(dtype), requires_grad=True, name=wk), Tensor(b.astype(dtype), requires_grad=True, name=bk)
        )
    if tensors:
        raise FormatError(f"unexpected tensors in checkpoint: {sorted(tensors)}")
    return Network(spec, layers, spectral_size=manifest.get("spectral_size", 32))
