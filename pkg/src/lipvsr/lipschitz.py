"""Spectral analysis and normalization of convolution operators.

The operator norm of a conv layer is estimated by power iteration on the
layer's true linear action (conv followed by its adjoint) over a given input
shape, never on the reshaped ``(C_out, C_in*k*k)`` matrix, which can
underestimate it. :func:`materialize_operator` builds the dense matrix for
small shapes and serves as an SVD oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .diffops import Kernel, Tensor, conv2d_array, conv2d_transpose_array
from .errors import ConfigError, DomainError, ShapeError

DEFAULT_MAX_ELEMENTS = 1 << 24


@dataclass(frozen=True)
class SrnlConfig:
    alpha: float = 1.0
    beta: float = 1.0
    power_iters_train: int = 1
    power_iters_final: int = 100

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if not 0 < self.beta <= 1:
            raise ConfigError(f"beta must lie in (0, 1], got {self.beta}")
        if self.power_iters_train < 1 or self.power_iters_final < 1:
            raise ConfigError("power iteration counts must be >= 1")

    @property
    def is_spectral(self) -> bool:
        """beta == 1 reduces SRNL to plain spectral normalization."""
        return self.beta == 1.0


HARD = SrnlConfig(alpha=1.0, beta=1.0)
SOFT = SrnlConfig(alpha=2.0, beta=0.1)


DEFAULT_BLOCK = 8


def _unit(a: np.ndarray) -> np.ndarray:
    return a / np.linalg.norm(a)


@dataclass
class PowerIterState:
    """Warm-start state: ``u`` is the current top singular direction (unit
    norm, shaped like the layer input); ``basis`` holds the whole iterated
    block as orthonormal rows."""

    u: np.ndarray
    sigma_estimate: float = 0.0
    basis: np.ndarray | None = None


def _orthonormal_rows(w: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # QR of the transposed block; columns that collapsed (null space of the
    # operator) are refilled with random directions so the block stays full rank
    q, r = np.linalg.qr(w.T)
    diag = np.abs(np.diag(r))
    dead = diag <= 1e-12 * max(diag.max(initial=0.0), 1e-300)
    if dead.any():
        q[:, dead] = rng.standard_normal((q.shape[0], int(dead.sum())))
        q, _ = np.linalg.qr(q)
    return q.T


def spectral_norm(
    kern: Kernel,
    input_shape: tuple[int, int, int],
    iters: int = 100,
    state: PowerIterState | None = None,
    seed: int = 0,
    history: list | None = None,
    block: int = DEFAULT_BLOCK,
) -> tuple[float, PowerIterState]:
    """Largest singular value of the bias-free conv operator on ``input_shape``.

    Block power iteration: ``block`` orthonormal directions are pushed
    through ``A^T A`` together and the estimate is the top Ritz value of the
    block. Conv operators often have clusters of nearly equal singular values,
    where a single vector converges very slowly; the block only needs a gap
    after its last direction. The estimate never decreases from one iteration
    to the next.

    ``state`` warm-starts the iteration and is updated in place. When
    ``history`` is a list, the estimate after each iteration is appended.
    """
    if iters < 1:
        raise ConfigError("iters must be >= 1")
    if block < 1:
        raise ConfigError("block must be >= 1")
    if len(input_shape) != 3 or input_shape[0] != kern.c_in:
        raise ShapeError(f"input_shape {input_shape} does not match kernel C_in={kern.c_in}")
    shape = tuple(int(d) for d in input_shape)
    n = int(np.prod(shape))
    p = min(block, n)
    w = kern.weight.data.astype(np.float64, copy=False)
    mode = kern.padding
    rng = np.random.default_rng(seed)

    if not np.any(w):
        u = _unit(rng.standard_normal(shape))
        if state is None:
            state = PowerIterState(u)
        state.u, state.sigma_estimate, state.basis = u, 0.0, None
        if history is not None:
            history.extend([0.0] * iters)
        return 0.0, state

    if state is not None and state.basis is not None and state.basis.shape == (p, n):
        v = state.basis
    elif state is not None and state.u.shape == shape:
        v = np.concatenate([state.u.reshape(1, n), rng.standard_normal((p - 1, n))])
        v = _orthonormal_rows(v, rng)
    else:
        v = _orthonormal_rows(rng.standard_normal((p, n)), rng)

    def forward(rows):
        return conv2d_array(rows.reshape(p, *shape), w, None, mode)

    sigma = 0.0
    for _ in range(iters):
        z = forward(v)
        v = _orthonormal_rows(conv2d_transpose_array(z, w, mode).reshape(p, n), rng)
        z = forward(v).reshape(p, -1)
        # Rayleigh-Ritz on span(v): rotate the block onto its Ritz vectors
        theta, y = np.linalg.eigh(z @ z.T)
        order = np.argsort(theta)[::-1]
        theta, y = theta[order], y[:, order]
        v = y.T @ v
        sigma = float(np.sqrt(max(theta[0], 0.0)))
        if history is not None:
            history.append(sigma)

    u = _unit(v[0]).reshape(shape)
    if state is None:
        state = PowerIterState(u)
    state.u, state.sigma_estimate, state.basis = u, sigma, v
    return sigma, state


def materialize_operator(
    kern: Kernel, input_shape: tuple[int, int, int], max_elements: int = DEFAULT_MAX_ELEMENTS
) -> np.ndarray:
    """Dense ``(C_out*H*W, C_in*H*W)`` matrix of the bias-free conv.

    Under circular padding this is the block matrix of doubly block-circulant
    blocks. Row/column order is C-order flattening of (C, H, W).
    """
    c, h, w = input_shape
    if c != kern.c_in:
        raise ShapeError(f"input_shape {input_shape} does not match kernel C_in={kern.c_in}")
    n_in = c * h * w
    n_out = kern.c_out * h * w
    if n_in * n_out > max_elements:
        raise DomainError(f"operator would have {n_in * n_out} elements (budget {max_elements})")
    basis = np.eye(n_in, dtype=np.float64).reshape(n_in, c, h, w)
    cols = conv2d_array(basis, kern.weight.data.astype(np.float64), None, kern.padding)
    return cols.reshape(n_in, n_out).T.copy()


def stable_rank(m: np.ndarray) -> float:
    """``||m||_F^2 / ||m||_2^2``."""
    m = np.asarray(m, dtype=np.float64)
    s = np.linalg.svd(m, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        raise DomainError("stable rank of a zero matrix is undefined")
    return float(np.sum(s**2) / s[0] ** 2)


def _srn_matrix(m: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    top = s[0] * np.outer(u[:, 0], vt[0])
    resid = m - top
    r_fro2 = float(np.sum(s[1:] ** 2))
    srank = 1.0 + r_fro2 / s[0] ** 2
    target = max(1.0, beta * srank)
    gamma = np.sqrt((target - 1.0) * s[0] ** 2 / r_fro2) if r_fro2 > 0 else 0.0
    return (alpha / s[0]) * (top + gamma * resid)


def srnl_normalize(
    kern: Kernel,
    cfg: SrnlConfig,
    input_shape: tuple[int, int, int],
    state: PowerIterState | None = None,
    iters: int | None = None,
    seed: int = 0,
) -> tuple[Kernel, PowerIterState | None]:
    """Rescale ``kern`` so its operator norm becomes ``cfg.alpha``.

    With ``beta == 1`` the weights are multiplied by ``alpha / sigma`` where
    sigma is the power-iteration estimate on ``input_shape``. With
    ``beta < 1`` the reshaped ``(C_out, C_in*k*k)`` matrix is split into its
    top singular component and a residual; the top component is set to norm
    ``alpha`` and the residual is shrunk so the stable rank becomes
    ``max(1, beta * srank)``. The bias is never touched.
    """
    w = kern.weight.data
    if iters is None:
        iters = cfg.power_iters_final if state is None else cfg.power_iters_train
    if not np.any(w):
        return kern, state
    if cfg.is_spectral:
        sigma, state = spectral_norm(kern, input_shape, iters=iters, state=state, seed=seed)
        new_w = (w * (cfg.alpha / sigma)).astype(w.dtype)
    else:
        m = w.reshape(w.shape[0], -1).astype(np.float64)
        new_w = _srn_matrix(m, cfg.alpha, cfg.beta).reshape(w.shape).astype(w.dtype)
    weight = Tensor(new_w, requires_grad=kern.weight.requires_grad)
    return Kernel(weight, kern.bias, kern.padding), state


def layer_norms(
    layers: Sequence[tuple[Kernel, tuple[int, int, int]]], iters: int = 100, seed: int = 0
) -> list[float]:
    return [spectral_norm(k, shape, iters=iters, seed=seed + i)[0] for i, (k, shape) in enumerate(layers)]


def certify_network(
    layers: Sequence[tuple[Kernel, tuple[int, int, int]]], iters: int = 100, seed: int = 0
) -> float:
    """Product of per-layer operator norms: an upper bound on the Lipschitz
    constant of a conv/ReLU chain."""
    if not layers:
        raise DomainError("certify_network needs at least one layer")
    return float(np.prod(layer_norms(layers, iters=iters, seed=seed)))


def empirical_contraction(
    phi: Callable[[np.ndarray, np.ndarray], np.ndarray],
    h_shape: tuple[int, ...],
    z_shape: tuple[int, ...] | None = None,
    trials: int = 1000,
    rng: np.random.Generator | None = None,
    h_scale: float = 1.0,
) -> float:
    """Largest observed ``||phi(h, z) - phi(h', z)|| / ||h - h'||``.

    Half the trials draw independent pairs, the other half draw ``h'`` as a
    small perturbation of ``h`` so that local slopes are probed as well.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    for i in range(trials):
        h = h_scale * rng.random(h_shape)
        if i % 2 == 0:
            h2 = h_scale * rng.random(h_shape)
        else:
            h2 = h + 1e-3 * h_scale * rng.standard_normal(h_shape)
        z = None if z_shape is None else rng.random(z_shape)
        den = np.linalg.norm(h - h2)
        if den == 0:
            continue
        num = np.linalg.norm(np.asarray(phi(h, z), dtype=np.float64) - np.asarray(phi(h2, z), dtype=np.float64))
        worst = max(worst, float(num / den))
    return worst
