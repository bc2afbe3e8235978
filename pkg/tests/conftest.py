import numpy as np
import pytest


def numeric_grad(fn, arr, eps=1e-5):
    """Central finite differences of scalar ``fn()`` w.r.t. ``arr`` (mutated in place)."""
    g = np.zeros_like(arr, dtype=np.float64)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + eps
        fp = fn()
        arr[i] = old - eps
        fm = fn()
        arr[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / den)


def brute_operator(w, shape, padding):
    """Dense conv matrix assembled tap by tap from the kernel entries.

    Independent of the im2col path: every (out, in) coupling is written from
    the index arithmetic of a same-size cross-correlation.
    """
    co, ci, k, _ = w.shape
    c, h, wd = shape
    p = k // 2
    m = np.zeros((co * h * wd, ci * h * wd))
    for o in range(co):
        for y in range(h):
            for x in range(wd):
                row = (o * h + y) * wd + x
                for i in range(ci):
                    for ky in range(k):
                        for kx in range(k):
                            yy, xx = y + ky - p, x + kx - p
                            if padding == "circular":
                                yy, xx = yy % h, xx % wd
                            elif not (0 <= yy < h and 0 <= xx < wd):
                                continue
                            m[row, (i * h + yy) * wd + xx] += w[o, i, ky, kx]
    return m


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance verdicts

_VERDICTS: dict[str, tuple[bool, str]] = {}


def record_verdict(criterion: str, ok: bool, detail: str) -> None:
    """Remember a criterion's outcome for the end-of-run summary."""
    _VERDICTS[criterion] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_VERDICTS):
        ok, detail = _VERDICTS[key]
        terminalreporter.write_line(f"criterion {key:<3} {'PASS' if ok else 'FAIL'}  {detail}")
