"""Deterministic small-tensor math kernels.

All functions are pure and dtype-preserving: float32 in gives float32 out,
float64 in gives float64 out. Accumulation order is fixed (row-major,
left-to-right) so repeated runs are bitwise identical.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

KL_EPS = 1e-8


def softmax(values: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Exp-normalize a vector (or the last axis of an array) at the given temperature."""
    values = np.asarray(values)
    if values.size == 0:
        raise ValueError("softmax: empty input")
    if temperature <= 0:
        raise ValueError(f"softmax: temperature must be positive, got {temperature}")
    z = values / np.asarray(temperature, dtype=values.dtype)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def bilinear_resize(grid: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Resize an (h, w, d) grid to (H, W, d) with corner-aligned bilinear sampling.

    Corner alignment makes the no-op resize exact: when target equals the
    source shape the input is returned unchanged (as a copy).
    """
    grid = np.asarray(grid)
    if grid.ndim == 2:
        return bilinear_resize(grid[:, :, None], target)[:, :, 0]
    if grid.ndim != 3:
        raise ValueError(f"bilinear_resize: expected (h, w, d) grid, got shape {grid.shape}")
    h, w, _ = grid.shape
    H, W = target
    if H < 1 or W < 1:
        raise ValueError(f"bilinear_resize: target dims must be >= 1, got {target}")
    if (H, W) == (h, w):
        return grid.copy()

    def axis_coords(n_src: int, n_dst: int) -> np.ndarray:
        if n_dst == 1 or n_src == 1:
            return np.zeros(n_dst)
        return np.arange(n_dst) * ((n_src - 1) / (n_dst - 1))

    ry = axis_coords(h, H)
    rx = axis_coords(w, W)
    y0 = np.floor(ry).astype(np.intp)
    x0 = np.floor(rx).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ry - y0).astype(grid.dtype)[:, None, None]
    fx = (rx - x0).astype(grid.dtype)[None, :, None]

    g00 = grid[np.ix_(y0, x0)]
    g01 = grid[np.ix_(y0, x1)]
    g10 = grid[np.ix_(y1, x0)]
    g11 = grid[np.ix_(y1, x1)]
    top = g00 * (1 - fx) + g01 * fx
    bottom = g10 * (1 - fx) + g11 * fx
    return top * (1 - fy) + bottom * fy


def conv2d(inp: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """2-D convolution with symmetric zero padding (f-1)/2, preserving H and W.

    inp: (H, W, Cin), kernel: (Cout, Cin, f, f), bias: (Cout,).
    """
    inp = np.asarray(inp)
    kernel = np.asarray(kernel)
    bias = np.asarray(bias)
    if inp.ndim != 3 or kernel.ndim != 4:
        raise ValueError("conv2d: expected (H, W, Cin) input and (Cout, Cin, f, f) kernel")
    cout, cin, f, f2 = kernel.shape
    if f != f2 or f % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square with odd size, got {f}x{f2}")
    if inp.shape[2] != cin:
        raise ValueError(f"conv2d: channel mismatch, input {inp.shape[2]} vs kernel {cin}")
    H, W, _ = inp.shape
    pad = (f - 1) // 2
    xp = np.pad(inp, ((pad, pad), (pad, pad), (0, 0)))
    out = np.broadcast_to(bias.astype(inp.dtype), (H, W, cout)).copy()
    for i in range(f):
        for j in range(f):
            # (H, W, Cin) @ (Cin, Cout)
            out += xp[i : i + H, j : j + W, :] @ kernel[:, :, i, j].T.astype(inp.dtype)
    return out


def conv2d_backward(
    inp: np.ndarray, kernel: np.ndarray, d_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv2d w.r.t. input, kernel, and bias given d_out (H, W, Cout)."""
    cout, cin, f, _ = kernel.shape
    H, W, _ = inp.shape
    pad = (f - 1) // 2
    xp = np.pad(inp, ((pad, pad), (pad, pad), (0, 0)))
    d_xp = np.zeros_like(xp)
    d_k = np.zeros_like(kernel)
    for i in range(f):
        for j in range(f):
            patch = xp[i : i + H, j : j + W, :]
            d_k[:, :, i, j] = np.einsum("hwc,hwo->oc", patch, d_out)
            d_xp[i : i + H, j : j + W, :] += d_out @ kernel[:, :, i, j].astype(d_out.dtype)
    d_inp = d_xp[pad : pad + H, pad : pad + W, :]
    d_b = d_out.sum(axis=(0, 1))
    return d_inp, d_k, d_b


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) in nats for two probability vectors of equal length.

    q is floored at KL_EPS before the log so zero reference bins stay finite.
    Zero entries of p contribute exactly zero.
    """
    p = np.asarray(p)
    q = np.asarray(q)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError(f"kl_divergence: shape mismatch {p.shape} vs {q.shape}")
    for name, v in (("p", p), ("q", q)):
        if abs(float(v.sum()) - 1.0) > 1e-6:
            raise ValueError(f"kl_divergence: {name} does not sum to 1")
    qc = np.maximum(q, KL_EPS)
    terms = np.where(p > 0, p * np.log(np.maximum(p, KL_EPS) / qc), 0.0)
    return float(terms.sum())


def finite_diff_gradient(
    f: Callable[[np.ndarray], float], theta: np.ndarray, step: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function of a flat vector."""
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        tp = theta.copy()
        tm = theta.copy()
        tp[i] += step
        tm[i] -= step
        grad[i] = (f(tp) - f(tm)) / (2 * step)
    return grad


def assert_finite(arr: np.ndarray, what: str = "array") -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{what} contains NaN or Inf")


def sequential_sum(values: Sequence[float] | np.ndarray) -> float:
    """Left-to-right scalar accumulation; the reference order for patch sums."""
    total = 0.0
    for v in np.asarray(values).ravel():
        total += float(v)
    return total
