"""Image quality metrics: PSNR, SSIM, MS-SSIM, and report aggregation.

The SSIM family follows the canonical parameterization: 11x11 Gaussian
window with sigma 1.5, stabilization constants k1=0.01 and k2=0.03, and
for MS-SSIM the 5-scale weights (0.0448, 0.2856, 0.3001, 0.2363,
0.1333). Images too small for 5 dyadic scales use the largest feasible
scale count with renormalized weights; reports record the count used.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

PSNR_CAP_DB = 100.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ValueError(f"expected 2D images, got shape {a.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images return the 100 dB cap."""
    a, b = _check_pair(a, b)
    if data_range <= 0:
        raise ValueError(f"data_range must be > 0, got {data_range}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(data_range**2 / mse), PSNR_CAP_DB)


def _gaussian_kernel_1d() -> np.ndarray:
    half = SSIM_WINDOW // 2
    xs = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(xs**2) / (2.0 * SSIM_SIGMA**2))
    return k / k.sum()


_KERNEL_1D = _gaussian_kernel_1d()


def _filter_valid(img: np.ndarray) -> np.ndarray:
    # Separable Gaussian, valid mode: equivalent to cropping the window
    # radius off a full filtering pass, so no boundary policy leaks in.
    tmp = convolve2d(img, _KERNEL_1D[:, None], mode="valid")
    return convolve2d(tmp, _KERNEL_1D[None, :], mode="valid")


def _ssim_and_cs(a: np.ndarray, b: np.ndarray, data_range: float) -> tuple[float, float]:
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = _filter_valid(a)
    mu_b = _filter_valid(b)
    var_a = _filter_valid(a * a) - mu_a**2
    var_b = _filter_valid(b * b) - mu_b**2
    cov = _filter_valid(a * b) - mu_a * mu_b
    luminance = (2.0 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    contrast_structure = (2.0 * cov + c2) / (var_a + var_b + c2)
    return float((luminance * contrast_structure).mean()), float(contrast_structure.mean())


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean local structural similarity over an 11x11 Gaussian window."""
    a, b = _check_pair(a, b)
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(
            f"image {a.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )
    return _ssim_and_cs(a, b, data_range)[0]


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    img = img[: h - h % 2, : w - w % 2]
    return 0.25 * (img[0::2, 0::2] + img[0::2, 1::2] + img[1::2, 0::2] + img[1::2, 1::2])


def ms_ssim_scales(h: int, w: int) -> int:
    """Largest feasible MS-SSIM scale count (up to 5) for an image size."""
    scales = 0
    size = min(h, w)
    while scales < len(MSSSIM_WEIGHTS) and size >= SSIM_WINDOW:
        scales += 1
        size //= 2
    return scales


def ms_ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Multi-scale SSIM: weighted product of contrast-structure terms across
    dyadic scales, with the full SSIM at the coarsest scale."""
    a, b = _check_pair(a, b)
    scales = ms_ssim_scales(*a.shape)
    if scales < 1:
        raise ValueError(
            f"image {a.shape} is too small for MS-SSIM at window {SSIM_WINDOW}"
        )
    weights = np.asarray(MSSSIM_WEIGHTS[:scales])
    weights = weights / weights.sum()
    values = []
    for level in range(scales):
        ssim_val, cs_val = _ssim_and_cs(a, b, data_range)
        values.append(ssim_val if level == scales - 1 else cs_val)
        if level < scales - 1:
            a = _downsample2(a)
            b = _downsample2(b)
    values = np.maximum(np.asarray(values), 0.0)
    return float(np.prod(values**weights))


@dataclass(frozen=True)
class SliceRecord:
    """Per-slice metric values for one generator direction."""

    index: int
    generator: str
    psnr: float
    ssim: float
    ms_ssim: float


def compute_slice_metrics(
    prediction: np.ndarray,
    target: np.ndarray,
    index: int = 0,
    generator: str = "G",
    data_range: float = 1.0,
) -> SliceRecord:
    return SliceRecord(
        index=index,
        generator=generator,
        psnr=psnr(prediction, target, data_range),
        ssim=ssim(prediction, target, data_range),
        ms_ssim=ms_ssim(prediction, target, data_range),
    )


METRIC_NAMES = ("psnr", "ssim", "ms_ssim")


def _summarize(records: list[SliceRecord]) -> dict[str, dict[str, float]]:
    summary: dict[str, dict[str, float]] = {}
    for generator in sorted({r.generator for r in records}):
        values = [r for r in records if r.generator == generator]
        entry: dict[str, float] = {"count": len(values)}
        for name in METRIC_NAMES:
            data = np.asarray([getattr(r, name) for r in values], dtype=np.float64)
            entry[f"{name}_mean"] = float(data.mean())
            entry[f"{name}_std"] = float(data.std())
        summary[generator] = entry
    return summary


@dataclass
class MetricsReport:
    """Per-slice records plus per-generator aggregates.

    Aggregates are always recomputable from the records; table rounding
    (PSNR to one decimal, SSIM/MS-SSIM to two) is applied only when
    formatting for display.
    """

    records: list[SliceRecord]
    summary: dict[str, dict[str, float]]
    scales: int
    config_fingerprint: str = ""

    def recompute_summary(self) -> dict[str, dict[str, float]]:
        return _summarize(self.records)

    def generators(self) -> list[str]:
        return sorted(self.summary.keys())

    def mean(self, metric: str, generator: str = "G") -> float:
        return self.summary[generator][f"{metric}_mean"]

    def save(self, path: str | Path) -> Path:
        """Write one JSON record per slice followed by a summary block."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            for record in self.records:
                fh.write(json.dumps({"type": "record", **asdict(record)}) + "\n")
            fh.write(
                json.dumps(
                    {
                        "type": "summary",
                        "summary": self.summary,
                        "scales": self.scales,
                        "config_fingerprint": self.config_fingerprint,
                    }
                )
                + "\n"
            )
        return path

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        records = []
        summary: dict[str, dict[str, float]] = {}
        scales = 0
        fingerprint = ""
        for line in Path(path).read_text().splitlines():
            obj = json.loads(line)
            if obj["type"] == "record":
                obj.pop("type")
                records.append(SliceRecord(**obj))
            elif obj["type"] == "summary":
                summary = obj["summary"]
                scales = obj["scales"]
                fingerprint = obj.get("config_fingerprint", "")
        return cls(
            records=records, summary=summary, scales=scales, config_fingerprint=fingerprint
        )

    def format_table(self) -> str:
        """Aligned human-readable summary with display rounding."""
        lines = [f"{'generator':<10} {'slices':>6} {'PSNR':>7} {'SSIM':>6} {'MS-SSIM':>8}"]
        for generator in self.generators():
            entry = self.summary[generator]
            lines.append(
                f"{generator:<10} {int(entry['count']):>6} "
                f"{entry['psnr_mean']:>7.1f} {entry['ssim_mean']:>6.2f} "
                f"{entry['ms_ssim_mean']:>8.2f}"
            )
        return "\n".join(lines)


def aggregate(
    records: list[SliceRecord], scales: int = 0, config_fingerprint: str = ""
) -> MetricsReport:
    """Fold slice records into a report with per-generator mean/std."""
    if not records:
        raise ValueError("cannot aggregate an empty record list")
    return MetricsReport(
        records=list(records),
        summary=_summarize(list(records)),
        scales=scales,
        config_fingerprint=config_fingerprint,
    )
