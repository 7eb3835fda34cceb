#!/usr/bin/env python3
"""Generate frozen oracle values for the metric tests.

Computes PSNR/SSIM/MS-SSIM on deterministic image pairs with independent
third-party implementations (scikit-image for PSNR/SSIM, TensorFlow for
MS-SSIM) and prints a dict literal to paste into tests/test_metrics.py.

Dev-only: requires scikit-image and tensorflow, which are not runtime
dependencies of the package.
"""

import os

os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "3")

import numpy as np


def make_pair(seed: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic test pair: smooth or noisy base plus scaled perturbation."""
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    kind = seed % 2
    base = rng.random((size, size))
    if kind == 0:
        base = gaussian_filter(base, sigma=3.0)
        base = (base - base.min()) / (base.max() - base.min())
    noise_scale = [0.02, 0.05, 0.1, 0.2, 0.35][seed % 5]
    other = np.clip(base + noise_scale * rng.standard_normal((size, size)), 0.0, 1.0)
    return base, other


def main():
    from skimage.metrics import peak_signal_noise_ratio, structural_similarity
    import tensorflow as tf

    print("SSIM/PSNR oracle pairs (64x64), MS-SSIM oracle pairs (256x256)")
    print("METRIC_ORACLE = {")
    print('    "ssim_pairs": {')
    for i in range(5):
        seed = 1000 + i
        a, b = make_pair(seed, 64)
        p = peak_signal_noise_ratio(a, b, data_range=1.0)
        s = structural_similarity(
            a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
            use_sample_covariance=False, win_size=11,
        )
        print(f"        {seed}: ({p!r}, {s!r}),")
    print("    },")
    print('    "ms_ssim_pairs": {')
    for i in range(5):
        seed = 2000 + i
        a, b = make_pair(seed, 256)
        ms = float(
            tf.image.ssim_multiscale(
                tf.convert_to_tensor(a[..., None]),
                tf.convert_to_tensor(b[..., None]),
                max_val=1.0,
            )
        )
        print(f"        {seed}: {ms!r},")
    print("    },")
    print("}")


if __name__ == "__main__":
    main()
