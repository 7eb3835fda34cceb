"""Deformable registration: displacement fields, warping, and correction loss.

A displacement field (DVF) assigns every output pixel a 2-vector
``(dy, dx)`` in pixel units; warping samples the moving image at
``p + dvf[p]`` with bilinear interpolation and border replication. The
registration network estimates a DVF from a (moving, fixed) image pair
and is U-Net shaped with a zero-initialized final layer, so the initial
warp is exactly the identity.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def resample(img: torch.Tensor, dvf: torch.Tensor) -> torch.Tensor:
    """Warp ``img`` by a displacement field, sampling at ``p + dvf[p]``.

    ``img`` has shape (..., H, W) and ``dvf`` shape (..., H, W, 2) with
    components (dy, dx) in pixels; leading dimensions must match. Samples
    outside the grid replicate the border. Differentiable with respect to
    both inputs; with a zero field the output is bit-identical to the
    input.
    """
    if dvf.shape[-1] != 2:
        raise ValueError(f"displacement field must end in 2 components, got {tuple(dvf.shape)}")
    if dvf.shape[:-1] != img.shape:
        raise ValueError(
            f"field shape {tuple(dvf.shape)} does not match image {tuple(img.shape)}"
        )
    if not torch.isfinite(dvf).all():
        raise ValueError("displacement field contains non-finite values")

    h, w = img.shape[-2], img.shape[-1]
    lead = img.shape[:-2]
    flat_img = img.reshape(-1, h, w)
    flat_dvf = dvf.reshape(-1, h, w, 2)
    b = flat_img.shape[0]

    ys = torch.arange(h, dtype=img.dtype, device=img.device).view(1, h, 1)
    xs = torch.arange(w, dtype=img.dtype, device=img.device).view(1, 1, w)
    sy = (ys + flat_dvf[..., 0]).clamp(0, h - 1)
    sx = (xs + flat_dvf[..., 1]).clamp(0, w - 1)

    y0 = sy.floor()
    x0 = sx.floor()
    ty = sy - y0
    tx = sx - x0
    y0 = y0.long()
    x0 = x0.long()
    y1 = (y0 + 1).clamp(max=h - 1)
    x1 = (x0 + 1).clamp(max=w - 1)

    flat = flat_img.reshape(b, h * w)

    def take(yi, xi):
        return flat.gather(1, (yi * w + xi).reshape(b, h * w)).reshape(b, h, w)

    out = (
        (1 - ty) * (1 - tx) * take(y0, x0)
        + (1 - ty) * tx * take(y0, x1)
        + ty * (1 - tx) * take(y1, x0)
        + ty * tx * take(y1, x1)
    )
    return out.reshape(*lead, h, w)


def smoothness_loss(dvf: torch.Tensor) -> torch.Tensor:
    """Mean squared forward-difference gradient of a displacement field.

    Differences are taken along both spatial axes for both components and
    averaged over every valid difference element (diffusion regularizer).
    Invariant to adding a constant vector to the whole field.
    """
    if dvf.shape[-1] != 2:
        raise ValueError(f"displacement field must end in 2 components, got {tuple(dvf.shape)}")
    if not torch.isfinite(dvf).all():
        raise ValueError("displacement field contains non-finite values")
    dy = dvf[..., 1:, :, :] - dvf[..., :-1, :, :]
    dx = dvf[..., :, 1:, :] - dvf[..., :, :-1, :]
    total = (dy**2).sum() + (dx**2).sum()
    count = dy.numel() + dx.numel()
    if count == 0:
        return torch.zeros((), dtype=dvf.dtype, device=dvf.device)
    return total / count


def correction_loss(gen: torch.Tensor, target: torch.Tensor, dvf: torch.Tensor) -> torch.Tensor:
    """Mean absolute error between the target and the warped generated image.

    Equals ``mean |target - resample(gen, dvf)|``; robust supervision for
    misaligned pairs, since the field can absorb the misalignment.
    """
    if gen.shape != target.shape:
        raise ValueError(
            f"gen and target shapes differ: {tuple(gen.shape)} vs {tuple(target.shape)}"
        )
    return (target - resample(gen, dvf)).abs().mean()


class RegistrationNetwork(nn.Module):
    """U-Net that maps a (moving, fixed) pair to a displacement field.

    Encoder/decoder widths follow ``widths`` (one stride-2 level each);
    the final convolution is zero-initialized so an untrained network
    returns the all-zero field (identity warp). Input spatial size must
    be divisible by 2**len(widths).
    """

    def __init__(self, widths: tuple[int, ...] = (16, 32, 32, 32)):
        super().__init__()
        if len(widths) < 1:
            raise ValueError("registration network needs at least one level")
        self.widths = tuple(int(w) for w in widths)
        self.encoders = nn.ModuleList()
        in_ch = 2
        for width in self.widths:
            self.encoders.append(
                nn.Sequential(
                    nn.Conv2d(in_ch, width, 3, stride=2, padding=1),
                    nn.LeakyReLU(0.2, inplace=True),
                )
            )
            in_ch = width
        self.decoders = nn.ModuleList()
        rev = self.widths[::-1]
        in_ch = rev[0]
        for i, width in enumerate(rev):
            self.decoders.append(
                nn.Sequential(
                    nn.Conv2d(in_ch, width, 3, padding=1),
                    nn.LeakyReLU(0.2, inplace=True),
                )
            )
            skip = rev[i + 1] if i + 1 < len(rev) else 0
            in_ch = width + skip
        self.final = nn.Conv2d(self.widths[0] + 2, 2, 3, padding=1)
        nn.init.zeros_(self.final.weight)
        nn.init.zeros_(self.final.bias)

    def forward(self, moving: torch.Tensor, fixed: torch.Tensor) -> torch.Tensor:
        """Estimate the field warping ``moving`` toward ``fixed``.

        Both inputs are (B, 1, H, W); the result is (B, H, W, 2).
        """
        if moving.shape != fixed.shape:
            raise ValueError(
                f"moving and fixed shapes differ: {tuple(moving.shape)} vs {tuple(fixed.shape)}"
            )
        h, w = moving.shape[-2], moving.shape[-1]
        stride = 2 ** len(self.widths)
        if h % stride or w % stride:
            raise ValueError(
                f"input size {h}x{w} must be divisible by {stride} "
                f"for a {len(self.widths)}-level registration network"
            )
        x = torch.cat([moving, fixed], dim=1)
        inp = x
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
        for i, dec in enumerate(self.decoders):
            if i > 0:
                x = torch.cat([x, skips[-1 - i]], dim=1)
            x = dec(x)
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = torch.cat([x, inp], dim=1)
        field = self.final(x)
        return field.permute(0, 2, 3, 1)


def estimate_dvf(
    moving: torch.Tensor, fixed: torch.Tensor, net: RegistrationNetwork
) -> torch.Tensor:
    """Run the registration network on one pair or a batch.

    Accepts (H, W) or (B, 1, H, W) inputs of matching shape and returns a
    field of shape (H, W, 2) or (B, H, W, 2) respectively.
    """
    if moving.shape != fixed.shape:
        raise ValueError(
            f"moving and fixed shapes differ: {tuple(moving.shape)} vs {tuple(fixed.shape)}"
        )
    single = moving.ndim == 2
    if single:
        moving = moving.unsqueeze(0).unsqueeze(0)
        fixed = fixed.unsqueeze(0).unsqueeze(0)
    field = net(moving, fixed)
    return field[0] if single else field
