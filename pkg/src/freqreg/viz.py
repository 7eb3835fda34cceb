"""Qualitative result figures: input, ground truth, predictions, residuals."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from freqreg.data import SlicePair
from freqreg.trainer import Checkpoint, build_networks, load_checkpoint, restore_networks, _predict

# Residuals are displayed on a fixed [0, RESIDUAL_VMAX] gray scale so
# panels are comparable across models and samples.
RESIDUAL_VMAX = 0.25
_PAD = 2


@dataclass(frozen=True)
class FigureLayout:
    path: Path
    rows: int
    cols: int
    panel_h: int
    panel_w: int
    pad: int

    @property
    def width_px(self) -> int:
        return self.cols * self.panel_w + (self.cols + 1) * self.pad

    @property
    def height_px(self) -> int:
        return self.rows * self.panel_h + (self.rows + 1) * self.pad


def residual_panel(prediction: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Absolute residual |prediction - target| before any colormapping."""
    if prediction.shape != target.shape:
        raise ValueError(f"shapes differ: {prediction.shape} vs {target.shape}")
    return np.abs(np.asarray(prediction, dtype=np.float64) - np.asarray(target, dtype=np.float64))


def _to_u8(img: np.ndarray, vmax: float = 1.0) -> np.ndarray:
    return np.round(np.clip(img / vmax, 0.0, 1.0) * 255.0).astype(np.uint8)


def emit_residual_figure(
    checkpoints: Checkpoint | str | Path | Sequence[Checkpoint | str | Path],
    pairs: Sequence[SlicePair],
    path: str | Path,
) -> FigureLayout:
    """Write a grid image: input, ground truth, then per-model prediction and residual.

    One row per sample pair; two columns per checkpoint. Images use the
    [0, 1] gray scale, residuals a fixed [0, 0.25] scale.
    """
    if len(pairs) < 1:
        raise ValueError("need at least one sample pair")
    if isinstance(checkpoints, (Checkpoint, str, Path)):
        checkpoints = [checkpoints]
    loaded = [
        c if isinstance(c, Checkpoint) else load_checkpoint(c) for c in checkpoints
    ]

    sources = [np.asarray(p.source, dtype=np.float32) for p in pairs]
    targets = [np.asarray(p.target, dtype=np.float64) for p in pairs]
    panel_h, panel_w = sources[0].shape

    model_columns: list[list[np.ndarray]] = []
    for ckpt in loaded:
        config = ckpt.config
        nets = build_networks(config)
        restore_networks(ckpt, nets)
        preds = _predict(nets.g, sources, batch_size=max(1, config.schedule.batch_size))
        pred_col = [_to_u8(np.asarray(p)) for p in preds]
        res_col = [
            _to_u8(residual_panel(p, t), vmax=RESIDUAL_VMAX) for p, t in zip(preds, targets)
        ]
        model_columns += [pred_col, res_col]

    columns = [
        [_to_u8(s) for s in sources],
        [_to_u8(t) for t in targets],
        *model_columns,
    ]
    rows, cols = len(pairs), len(columns)
    canvas = np.full(
        (rows * panel_h + (rows + 1) * _PAD, cols * panel_w + (cols + 1) * _PAD),
        255,
        dtype=np.uint8,
    )
    for ci, column in enumerate(columns):
        for ri, panel in enumerate(column):
            top = _PAD + ri * (panel_h + _PAD)
            left = _PAD + ci * (panel_w + _PAD)
            canvas[top : top + panel_h, left : left + panel_w] = panel

    path = Path(path)
    Image.fromarray(canvas, mode="L").save(path)
    return FigureLayout(
        path=path, rows=rows, cols=cols, panel_h=panel_h, panel_w=panel_w, pad=_PAD
    )
