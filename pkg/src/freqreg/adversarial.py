"""Adversarial networks and composite training objectives.

Covers the least-squares GAN losses, cycle and identity consistency, and
the assembly of the full generator/discriminator objectives for every
training mode: plain supervised GAN, registration-corrected GAN, plain
CycleGAN, single- and dual-registration CycleGAN, each with an optional
frequency-domain loss.

Images are (B, 1, H, W) tensors in [0, 1]. Discriminators return raw
score maps (no sigmoid); the LSGAN losses regress those scores toward
1 (real) and 0 (fake).
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable, Optional

import torch
import torch.nn as nn

from freqreg.kspace import FrequencyMask, build_radial_mask, frequency_loss, frequency_weight
from freqreg.registration import RegistrationNetwork, resample, smoothness_loss

FAMILIES = ("gan", "cycle_gan")
REGISTRATIONS = ("none", "single", "dual")
FREQUENCIES = ("off", "f_low", "f_hi", "f_all")


@dataclass(frozen=True)
class TrainingMode:
    """One cell of the experiment matrix.

    ``family`` picks the model family, ``registration`` how many
    registration networks correct misalignment (dual only exists for
    cycle models), ``frequency`` the K-space loss preset, and ``noise``
    whether targets are artificially misaligned during training.
    """

    family: str = "gan"
    registration: str = "none"
    frequency: str = "off"
    noise: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}, expected one of {FAMILIES}")
        if self.registration not in REGISTRATIONS:
            raise ValueError(
                f"unknown registration {self.registration!r}, expected one of {REGISTRATIONS}"
            )
        if self.frequency not in FREQUENCIES:
            raise ValueError(
                f"unknown frequency {self.frequency!r}, expected one of {FREQUENCIES}"
            )
        if self.registration == "dual" and self.family != "cycle_gan":
            raise ValueError("dual registration requires the cycle_gan family")

    @classmethod
    def parse(cls, token: str) -> "TrainingMode":
        """Parse a compact mode token such as ``gan+n+r+f_low`` or ``cycle+n+r2``."""
        parts = [p.strip() for p in token.split("+") if p.strip()]
        if not parts:
            raise ValueError("empty mode token")
        family_alias = {"gan": "gan", "cycle": "cycle_gan", "cycle_gan": "cycle_gan"}
        if parts[0] not in family_alias:
            raise ValueError(f"mode token must start with gan or cycle, got {parts[0]!r}")
        family = family_alias[parts[0]]
        registration = "none"
        frequency = "off"
        noise = False
        for flag in parts[1:]:
            if flag in ("n", "noise"):
                noise = True
            elif flag == "r":
                registration = "single"
            elif flag == "r2":
                registration = "dual"
            elif flag in ("f_low", "f_hi", "f_all"):
                frequency = flag
            else:
                raise ValueError(f"unknown mode flag {flag!r} in {token!r}")
        return cls(family=family, registration=registration, frequency=frequency, noise=noise)

    def token(self) -> str:
        parts = ["gan" if self.family == "gan" else "cycle"]
        if self.noise:
            parts.append("n")
        if self.registration == "single":
            parts.append("r")
        elif self.registration == "dual":
            parts.append("r2")
        if self.frequency != "off":
            parts.append(self.frequency)
        return "+".join(parts)

    def label(self) -> str:
        """Human-readable name in the ``GAN w/ n, r`` table style."""
        base = "GAN" if self.family == "gan" else "CycleGAN"
        flags = []
        if self.noise:
            flags.append("n")
        if self.registration == "single":
            flags.append("r")
        elif self.registration == "dual":
            flags.append("r2")
        name = f"{base} w/ {', '.join(flags)}" if flags else f"{base} w/o n, r"
        if self.frequency != "off":
            name += f" + {self.frequency}"
        return name

    @classmethod
    def enumerate_objectives(cls, noise: bool = False) -> list["TrainingMode"]:
        """All 20 structurally distinct objective assemblies (5 family/registration
        combinations x 4 frequency settings); the noise flag does not change the
        objective, only the data pipeline."""
        modes = []
        for family in FAMILIES:
            for registration in REGISTRATIONS:
                if registration == "dual" and family != "cycle_gan":
                    continue
                for frequency in FREQUENCIES:
                    modes.append(
                        cls(
                            family=family,
                            registration=registration,
                            frequency=frequency,
                            noise=noise,
                        )
                    )
        return modes


@dataclass(frozen=True)
class LossWeights:
    """Weights of the composite generator objective.

    ``correction``/``smoothness`` weight the registration correction loss
    and the field smoothness penalty, ``cycle``/``identity`` the cycle
    model consistency terms, ``frequency`` the K-space loss on a disk
    mask of ``mask_radius`` bins. ``w_freq`` normally stays None and the
    low/high balance follows the mode's frequency preset; set it to pin
    an explicit value in [0, 1].
    """

    correction: float = 20.0
    smoothness: float = 10.0
    cycle: float = 10.0
    identity: float = 1.0
    frequency: float = 0.1
    w_freq: Optional[float] = None
    mask_radius: int = 21

    def __post_init__(self):
        for f in fields(self):
            if f.name == "w_freq":
                continue
            value = getattr(self, f.name)
            if value < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0, got {value}")
        if self.w_freq is not None and not 0.0 <= self.w_freq <= 1.0:
            raise ValueError(f"w_freq must lie in [0, 1], got {self.w_freq}")

    def resolve_w_freq(self, mode: "TrainingMode") -> float:
        if self.w_freq is not None:
            return self.w_freq
        return frequency_weight(mode.frequency) if mode.frequency != "off" else 1.0


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.body(x)


class ResidualGenerator(nn.Module):
    """Residual encoder-decoder translator with outputs bounded to [0, 1].

    Two stride-2 downsampling convolutions, ``blocks`` residual blocks at
    the bottleneck, two upsampling convolutions, and a sigmoid output.
    Input spatial size must be divisible by 4.
    """

    def __init__(self, blocks: int = 9, base: int = 64):
        super().__init__()
        b = int(base)
        layers = [
            nn.Conv2d(1, b, 7, padding=3),
            nn.InstanceNorm2d(b),
            nn.ReLU(inplace=True),
            nn.Conv2d(b, 2 * b, 3, stride=2, padding=1),
            nn.InstanceNorm2d(2 * b),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * b, 4 * b, 3, stride=2, padding=1),
            nn.InstanceNorm2d(4 * b),
            nn.ReLU(inplace=True),
        ]
        layers += [ResidualBlock(4 * b) for _ in range(int(blocks))]
        layers += [
            nn.ConvTranspose2d(4 * b, 2 * b, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(2 * b),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(2 * b, b, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(b),
            nn.ReLU(inplace=True),
            nn.Conv2d(b, 1, 7, padding=3),
            nn.Sigmoid(),
        ]
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ValueError(f"generator input size must be divisible by 4, got {tuple(x.shape)}")
        return self.body(x)


class PatchDiscriminator(nn.Module):
    """Patch discriminator returning a raw real-valued score map."""

    def __init__(self, layers: int = 4, base: int = 64):
        super().__init__()
        mods = [nn.Conv2d(1, base, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
        ch = base
        for _ in range(1, int(layers)):
            nxt = min(ch * 2, base * 8)
            mods += [
                nn.Conv2d(ch, nxt, 4, stride=2, padding=1),
                nn.InstanceNorm2d(nxt),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            ch = nxt
        mods.append(nn.Conv2d(ch, 1, 4, padding=1))
        self.body = nn.Sequential(*mods)

    def forward(self, x):
        return self.body(x)


@dataclass
class NetworkBundle:
    """The networks a training mode may touch; unused slots stay None."""

    g: Optional[nn.Module] = None
    f: Optional[nn.Module] = None
    d_x: Optional[nn.Module] = None
    d_y: Optional[nn.Module] = None
    r_x: Optional[RegistrationNetwork] = None
    r_y: Optional[RegistrationNetwork] = None

    def required_names(self, mode: TrainingMode) -> list[str]:
        names = ["g", "d_y"]
        if mode.family == "cycle_gan":
            names += ["f", "d_x"]
        if mode.registration in ("single", "dual"):
            names.append("r_y")
        if mode.registration == "dual":
            names.append("r_x")
        return names

    def require(self, mode: TrainingMode) -> None:
        missing = [n for n in self.required_names(mode) if getattr(self, n) is None]
        if missing:
            raise ValueError(
                f"mode {mode.token()!r} requires network(s) {', '.join(missing)} "
                "but they are missing from the bundle"
            )

    def named(self) -> dict[str, nn.Module]:
        return {
            f.name: getattr(self, f.name)
            for f in fields(self)
            if getattr(self, f.name) is not None
        }

    def generator_side(self, mode: TrainingMode) -> list[nn.Module]:
        """Networks updated jointly in the generator step."""
        nets = [self.g]
        if mode.family == "cycle_gan":
            nets.append(self.f)
        if mode.registration in ("single", "dual"):
            nets.append(self.r_y)
        if mode.registration == "dual":
            nets.append(self.r_x)
        return nets

    def discriminator_side(self, mode: TrainingMode) -> list[nn.Module]:
        nets = [self.d_y]
        if mode.family == "cycle_gan":
            nets.append(self.d_x)
        return nets


def lsgan_discriminator_loss(scores_real: torch.Tensor, scores_fake: torch.Tensor) -> torch.Tensor:
    """Least-squares discriminator loss: real scores to 1, fake scores to 0."""
    return ((scores_real - 1.0) ** 2).mean() + (scores_fake**2).mean()


def lsgan_generator_loss(scores_fake: torch.Tensor) -> torch.Tensor:
    """Least-squares generator loss: fake scores pushed toward 1."""
    return ((scores_fake - 1.0) ** 2).mean()


def cycle_loss(
    x: torch.Tensor,
    y: torch.Tensor,
    g: Callable[[torch.Tensor], torch.Tensor],
    f: Callable[[torch.Tensor], torch.Tensor],
    literal_form: bool = False,
) -> torch.Tensor:
    """Cycle consistency: round trips through both generators reproduce the input.

    The standard form compares F(G(x)) with x and G(F(y)) with y.
    ``literal_form`` instead compares F(G(x)) with y and G(F(y)) with x
    (kept selectable for comparison; it rewards mapping across domains
    rather than reconstructing).
    """
    rec_x = f(g(x))
    rec_y = g(f(y))
    if literal_form:
        return (rec_x - y).abs().mean() + (rec_y - x).abs().mean()
    return (rec_x - x).abs().mean() + (rec_y - y).abs().mean()


def identity_loss(
    x: torch.Tensor,
    y: torch.Tensor,
    g: Callable[[torch.Tensor], torch.Tensor],
    f: Callable[[torch.Tensor], torch.Tensor],
) -> torch.Tensor:
    """Content preservation: G applied to y (and F to x) should change nothing."""
    return (g(y) - y).abs().mean() + (f(x) - x).abs().mean()


_mask_cache: dict[tuple[int, int, int], FrequencyMask] = {}


def _cached_mask(h: int, w: int, r: int) -> FrequencyMask:
    key = (h, w, r)
    if key not in _mask_cache:
        _mask_cache[key] = build_radial_mask(h, w, r)
    return _mask_cache[key]


def _registered(fake: torch.Tensor, target: torch.Tensor, reg_net: RegistrationNetwork):
    """Estimate a field for (fake -> target) and warp fake by it."""
    dvf = reg_net(fake, target)
    warped = resample(fake, dvf.unsqueeze(1))
    return dvf, warped


def generator_objective(
    mode: TrainingMode,
    weights: LossWeights,
    batch: tuple[torch.Tensor, torch.Tensor],
    nets: NetworkBundle,
    fake_y: Optional[torch.Tensor] = None,
    fake_x: Optional[torch.Tensor] = None,
    cycle_literal: bool = False,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Assemble the generator-side objective for a training mode.

    Returns the scalar objective and a breakdown of weighted components
    that sums to it. ``fake_y``/``fake_x`` may carry precomputed generator
    outputs (with graph) to avoid duplicate forward passes; when omitted
    they are computed from the bundle.

    For the gan family the supervision term is the L1 correction loss:
    through the estimated displacement field when registration is active,
    and directly against the target otherwise (the plain supervised
    baseline). Cycle models are unsupervised unless registration is
    active. When registration is active the frequency loss compares the
    *registered* generated image against the target.
    """
    nets.require(mode)
    x, y = batch
    if x.shape != y.shape:
        raise ValueError(f"batch shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")
    parts: dict[str, torch.Tensor] = {}
    h, w = x.shape[-2], x.shape[-1]
    mask = _cached_mask(h, w, weights.mask_radius) if mode.frequency != "off" else None
    w_freq = weights.resolve_w_freq(mode)

    if fake_y is None:
        fake_y = nets.g(x)
    parts["adv_g"] = lsgan_generator_loss(nets.d_y(fake_y))

    if mode.family == "gan":
        if mode.registration == "single":
            dvf, warped = _registered(fake_y, y, nets.r_y)
            parts["corr_g"] = weights.correction * (y - warped).abs().mean()
            parts["smooth_g"] = weights.smoothness * smoothness_loss(dvf)
            freq_img = warped
        else:
            parts["corr_g"] = weights.correction * (y - fake_y).abs().mean()
            freq_img = fake_y
        if mode.frequency != "off":
            parts["freq_g"] = weights.frequency * frequency_loss(freq_img, y, mask, w_freq)
    else:
        if fake_x is None:
            fake_x = nets.f(y)
        parts["adv_f"] = lsgan_generator_loss(nets.d_x(fake_x))

        rec_x = nets.f(fake_y)
        rec_y = nets.g(fake_x)
        if cycle_literal:
            cyc = (rec_x - y).abs().mean() + (rec_y - x).abs().mean()
        else:
            cyc = (rec_x - x).abs().mean() + (rec_y - y).abs().mean()
        parts["cycle"] = weights.cycle * cyc
        parts["identity"] = weights.identity * identity_loss(x, y, nets.g, nets.f)

        freq_img_y = fake_y
        freq_img_x = fake_x
        if mode.registration in ("single", "dual"):
            dvf_y, warped_y = _registered(fake_y, y, nets.r_y)
            parts["corr_g"] = weights.correction * (y - warped_y).abs().mean()
            parts["smooth_g"] = weights.smoothness * smoothness_loss(dvf_y)
            freq_img_y = warped_y
        if mode.registration == "dual":
            dvf_x, warped_x = _registered(fake_x, x, nets.r_x)
            parts["corr_f"] = weights.correction * (x - warped_x).abs().mean()
            parts["smooth_f"] = weights.smoothness * smoothness_loss(dvf_x)
            freq_img_x = warped_x
        if mode.frequency != "off":
            parts["freq_g"] = weights.frequency * frequency_loss(freq_img_y, y, mask, w_freq)
            parts["freq_f"] = weights.frequency * frequency_loss(freq_img_x, x, mask, w_freq)

    total = sum(parts.values())
    return total, parts


def discriminator_objective(
    mode: TrainingMode,
    batch: tuple[torch.Tensor, torch.Tensor],
    nets: NetworkBundle,
    fake_y: Optional[torch.Tensor] = None,
    fake_x: Optional[torch.Tensor] = None,
) -> dict[str, torch.Tensor]:
    """Per-discriminator LSGAN losses with generated images held constant.

    Fake images are detached (or generated without graph), so these losses
    carry no gradient back into any generator or registration network.
    Registration and frequency terms never appear here.
    """
    nets.require(mode)
    x, y = batch
    if fake_y is None:
        with torch.no_grad():
            fake_y = nets.g(x)
    else:
        fake_y = fake_y.detach()
    losses = {"d_y": lsgan_discriminator_loss(nets.d_y(y), nets.d_y(fake_y))}
    if mode.family == "cycle_gan":
        if fake_x is None:
            with torch.no_grad():
                fake_x = nets.f(y)
        else:
            fake_x = fake_x.detach()
        losses["d_x"] = lsgan_discriminator_loss(nets.d_x(x), nets.d_x(fake_x))
    return losses
