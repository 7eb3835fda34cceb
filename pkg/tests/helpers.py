"""Shared independent oracles used by the unit and acceptance suites.

Everything here deliberately avoids the library's own computation paths:
brute-force DFT summation, explicit finite differences, index-shift
warps with manual border handling.
"""

from __future__ import annotations

import numpy as np
import torch

from freqreg.data import make_synthetic_pair
from freqreg.registration import RegistrationNetwork, correction_loss, resample


def brute_dft_magnitude(img: np.ndarray) -> np.ndarray:
    """O(N^4) direct DFT magnitude with the DC bin moved to the center."""
    h, w = img.shape
    out = np.zeros((h, w), dtype=complex)
    for u in range(h):
        for v in range(w):
            acc = 0.0 + 0.0j
            for m in range(h):
                for n in range(w):
                    acc += img[m, n] * np.exp(-2j * np.pi * (u * m / h + v * n / w))
            out[u, v] = acc
    mag = np.abs(out)
    return np.roll(np.roll(mag, h // 2, axis=0), w // 2, axis=1)


def fd_gradient(fn, x: torch.Tensor, step: float = 1e-4) -> torch.Tensor:
    """Central finite-difference gradient of a scalar function, elementwise."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        hi = float(fn(x))
        flat[i] = orig - step
        lo = float(fn(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-8):
    denom = torch.maximum(
        torch.maximum(analytic.abs(), numeric.abs()), torch.full_like(analytic, floor)
    )
    return (analytic - numeric).abs() / denom


def shift_columns(img: np.ndarray, k: int) -> np.ndarray:
    """Shift image content k columns to the right with border replication."""
    out = np.empty_like(img)
    w = img.shape[1]
    for j in range(w):
        out[:, j] = img[:, int(np.clip(j - k, 0, w - 1))]
    return out


def smooth_test_image(seed: int, size: int = 64) -> np.ndarray:
    """A smooth blob image in [0, 1], convenient for warp experiments."""
    return make_synthetic_pair(np.random.default_rng(seed), size).source.astype(np.float64)


def overfit_shift_experiment(
    shift_px: int = 3, steps: int = 500, size: int = 64, seed: int = 7, lr: float = 1e-2
) -> float:
    """Fit a registration network on one (shifted, fixed) pair using only the
    correction loss; returns the final warped-vs-fixed mean absolute error."""
    torch.manual_seed(0)
    fixed_np = smooth_test_image(seed, size)
    moving_np = shift_columns(fixed_np, shift_px)
    fixed = torch.from_numpy(fixed_np).unsqueeze(0).unsqueeze(0)
    moving = torch.from_numpy(moving_np).unsqueeze(0).unsqueeze(0)
    net = RegistrationNetwork((8, 16, 16, 16)).to(torch.float64)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    for _ in range(steps):
        dvf = net(moving, fixed)
        loss = correction_loss(moving, fixed, dvf.unsqueeze(1))
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        dvf = net(moving, fixed)
        warped = resample(moving, dvf.unsqueeze(1))
        return float((warped - fixed).abs().mean())
