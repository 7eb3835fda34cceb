"""Data pipeline: volumes, slicing, augmentation, misalignment, synthetic pairs.

Volumes are (D, H, W) arrays sliced axially into 2D images after
percentile normalization to [0, 1]. Training pairs flow through online
augmentation (one random affine applied identically to source and
target, preserving alignment) and, optionally, artificial misalignment
("noise"): a second, independent affine applied to the target only.

A synthetic paired-modality generator provides a desk-scale stand-in for
real two-modality medical data: smooth random blob images with an
analytic pseudo-modality transform that is deterministic and pixelwise,
hence learnable to high fidelity.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from scipy import ndimage


@dataclass
class Volume3D:
    """A 3D intensity volume with (D, H, W) voxels; spacing is metadata only."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise ValueError(f"expected a 3D volume, got shape {self.voxels.shape}")


def normalize_volume(vol: Volume3D) -> Volume3D:
    """Normalize a volume to [0, 1] using its 0.5 and 99.5 percentiles.

    Values are clipped to the percentile window, then mapped linearly.
    A constant volume (degenerate window) maps to all zeros.
    """
    vox = vol.voxels
    if vox.size < 1:
        raise ValueError("volume has no voxels")
    if not np.isfinite(vox).all():
        raise ValueError("volume contains non-finite voxels")
    lo, hi = np.percentile(vox, [0.5, 99.5])
    if hi <= lo:
        return Volume3D(np.zeros_like(vox, dtype=np.float32), vol.spacing)
    out = (np.clip(vox, lo, hi) - lo) / (hi - lo)
    return Volume3D(out.astype(np.float32), vol.spacing)


def slice_volume(vol: Volume3D, blank_max_intensity: float = 0.0) -> list[np.ndarray]:
    """Axial slices of a (normalized) volume, dropping uninformative ones.

    A slice is kept iff its maximum intensity exceeds ``blank_max_intensity``
    (default: strictly positive). Order along the depth axis is preserved.
    """
    return [s for s in vol.voxels if float(s.max()) > blank_max_intensity]


@dataclass(frozen=True)
class AffineParams:
    """Rotation (degrees), translation (ty, tx) in pixels, uniform scale factor."""

    rotation: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)
    scale: float = 1.0

    @classmethod
    def identity(cls) -> "AffineParams":
        return cls()

    def is_identity(self) -> bool:
        return (
            self.rotation == 0.0
            and self.translation[0] == 0.0
            and self.translation[1] == 0.0
            and self.scale == 1.0
        )


@dataclass(frozen=True)
class AugmentationRanges:
    """Half-ranges of the uniform augmentation draws.

    Defaults match the full-scale protocol: rotation up to +-10 degrees,
    translation up to +-26 pixels per axis, scale in [0.9, 1.1]. Smaller
    images shrink translation proportionally via configuration.
    """

    rotation: float = 10.0
    translation: float = 26.0
    scale: float = 0.1

    def scaled(self, factor: float) -> "AugmentationRanges":
        return AugmentationRanges(
            rotation=self.rotation * factor,
            translation=self.translation * factor,
            scale=self.scale * factor,
        )


def sample_augmentation(
    rng: np.random.Generator, ranges: AugmentationRanges = AugmentationRanges()
) -> AffineParams:
    """Draw independent uniform affine parameters from the given ranges.

    Draw order (rotation, ty, tx, scale) is fixed so parameter streams are
    reproducible from a seeded generator.
    """
    rotation = float(rng.uniform(-ranges.rotation, ranges.rotation))
    ty = float(rng.uniform(-ranges.translation, ranges.translation))
    tx = float(rng.uniform(-ranges.translation, ranges.translation))
    scale = float(rng.uniform(1.0 - ranges.scale, 1.0 + ranges.scale))
    return AffineParams(rotation=rotation, translation=(ty, tx), scale=scale)


def apply_affine(img: np.ndarray, p: AffineParams) -> np.ndarray:
    """Rotate about the image center, scale about the center, then translate.

    Bilinear interpolation with border replication; output stays in [0, 1]
    for [0, 1] inputs. Identity parameters return the input exactly.
    """
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"expected a 2D image, got shape {img.shape}")
    if not np.isfinite(img).all():
        raise ValueError("image contains non-finite values")
    theta = np.deg2rad(p.rotation)
    c, s = np.cos(theta), np.sin(theta)
    # Forward map (row, col): q = scale * R(theta) @ (p - center) + center + t.
    # scipy's affine_transform wants the inverse: input = M @ output + offset.
    forward = p.scale * np.array([[c, -s], [s, c]])
    inv = np.linalg.inv(forward)
    center = (np.asarray(img.shape, dtype=float) - 1.0) / 2.0
    t = np.asarray(p.translation, dtype=float)
    offset = center - inv @ (center + t)
    out = ndimage.affine_transform(img, inv, offset=offset, order=1, mode="nearest")
    return np.clip(out, 0.0, 1.0).astype(img.dtype, copy=False)


@dataclass
class SlicePair:
    """A paired (source, target) slice; ``misalignment`` records injected noise."""

    source: np.ndarray
    target: np.ndarray
    misalignment: Optional[AffineParams] = None

    def __post_init__(self):
        if self.source.shape != self.target.shape:
            raise ValueError(
                f"source and target shapes differ: {self.source.shape} vs {self.target.shape}"
            )


def augment_pair(
    pair: SlicePair, rng: np.random.Generator, ranges: AugmentationRanges = AugmentationRanges()
) -> SlicePair:
    """Apply one augmentation draw identically to source and target.

    Both images move together, so the pair stays aligned.
    """
    p = sample_augmentation(rng, ranges)
    return SlicePair(
        source=apply_affine(pair.source, p),
        target=apply_affine(pair.target, p),
        misalignment=pair.misalignment,
    )


def inject_misalignment(
    pair: SlicePair, rng: np.random.Generator, ranges: AugmentationRanges = AugmentationRanges()
) -> SlicePair:
    """Misalign the target by a fresh affine draw; the source is untouched.

    The drawn parameters are recorded on the returned pair so the
    transformation is auditable and reproducible. Injecting twice is an
    error.
    """
    if pair.misalignment is not None:
        raise ValueError("pair is already misaligned; refusing a second injection")
    p = sample_augmentation(rng, ranges)
    return SlicePair(
        source=pair.source,
        target=apply_affine(pair.target, p),
        misalignment=p,
    )


def pseudo_modality_transform(source: np.ndarray) -> np.ndarray:
    """Analytic pixelwise map from the source modality to the target modality.

    Inverts intensity inside the foreground (bright source tissue becomes
    dark and vice versa), gated by a smooth foreground mask so background
    stays exactly zero, then applies a fixed monotone contrast curve.
    Zero pixels map to zero, positive pixels to positive values, so both
    modalities share the same support.
    """
    src = np.asarray(source, dtype=np.float64)
    u = np.clip(src / 0.15, 0.0, 1.0)
    mask = u * u * (3.0 - 2.0 * u)
    out = (mask * (1.0 - 0.85 * src)) ** 0.9
    return out.astype(np.float32)


def make_synthetic_pair(rng: np.random.Generator, size: int) -> SlicePair:
    """Generate one aligned synthetic (source, target) pair of the given size.

    The source is a sum of 3-6 random Gaussian bumps normalized to
    [0, 1] (intensities below 1e-6 snapped to zero so the background has
    exact empty support); the target is its pseudo-modality transform.
    """
    if size < 16:
        raise ValueError(f"synthetic pair size must be >= 16, got {size}")
    n_bumps = int(rng.integers(3, 7))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    raw = np.zeros((size, size), dtype=np.float64)
    for _ in range(n_bumps):
        cy = rng.uniform(0.15, 0.85) * size
        cx = rng.uniform(0.15, 0.85) * size
        sigma = rng.uniform(0.10, 0.22) * size
        amp = rng.uniform(0.6, 1.0)
        raw += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))
    lo, hi = raw.min(), raw.max()
    src = (raw - lo) / (hi - lo)
    src[src < 1e-6] = 0.0
    source = src.astype(np.float32)
    return SlicePair(source=source, target=pseudo_modality_transform(source))


class SyntheticPairDataset:
    """Deterministic, lazily generated synthetic slice pairs.

    Pair ``i`` is a pure function of ``(seed, start + i)``, so disjoint
    index windows over the same seed form disjoint train/val/test splits
    and parallel prefetching cannot perturb the stream.
    """

    def __init__(self, seed: int, size: int, start: int, count: int):
        if count < 0:
            raise ValueError("count must be >= 0")
        self.seed = int(seed)
        self.size = int(size)
        self.start = int(start)
        self.count = int(count)
        self._cache: dict[int, SlicePair] = {}

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, i: int) -> SlicePair:
        if not 0 <= i < self.count:
            raise IndexError(i)
        if i not in self._cache:
            universe_index = self.start + i
            rng = np.random.default_rng(
                np.random.SeedSequence(self.seed, spawn_key=(3, universe_index))
            )
            self._cache[i] = make_synthetic_pair(rng, self.size)
        return self._cache[i]


# ---------------------------------------------------------------------------
# Volume file ingestion


_RAW_SUFFIX = ".raw"


def save_volume_raw(vol: Volume3D, path: str | Path) -> Path:
    """Write a volume as little-endian float32 with a text sidecar header."""
    path = Path(path)
    if path.suffix != _RAW_SUFFIX:
        path = path.with_suffix(_RAW_SUFFIX)
    path.parent.mkdir(parents=True, exist_ok=True)
    vol.voxels.astype("<f4").tofile(path)
    header = path.with_suffix(".hdr")
    d, h, w = vol.voxels.shape
    header.write_text(
        f"shape: {d} {h} {w}\n"
        f"dtype: float32\n"
        f"spacing: {vol.spacing[0]} {vol.spacing[1]} {vol.spacing[2]}\n"
    )
    return path


def _load_volume_raw(path: Path) -> Volume3D:
    header = path.with_suffix(".hdr")
    if not header.exists():
        raise FileNotFoundError(f"missing sidecar header {header}")
    fields: dict[str, str] = {}
    for line in header.read_text().splitlines():
        if ":" in line:
            key, value = line.split(":", 1)
            fields[key.strip()] = value.strip()
    shape = tuple(int(v) for v in fields["shape"].split())
    if len(shape) != 3:
        raise ValueError(f"header shape must have 3 dims, got {fields['shape']!r}")
    spacing = tuple(float(v) for v in fields.get("spacing", "1 1 1").split())
    data = np.fromfile(path, dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise ValueError(
            f"{path}: expected {int(np.prod(shape))} voxels from header, found {data.size}"
        )
    return Volume3D(data.reshape(shape), spacing)  # type: ignore[arg-type]


_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32, 64: np.float64, 256: np.int8, 512: np.uint16}


def _read_nifti_minimal(path: Path) -> Volume3D:
    """Built-in single-file NIfTI-1 reader for the common scalar volume case."""
    import gzip
    import struct

    opener = gzip.open if path.name.lower().endswith(".gz") else open
    with opener(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 352:
        raise ValueError(f"{path}: too short for a NIfTI-1 file")
    (sizeof_hdr,) = struct.unpack_from("<i", blob, 0)
    endian = "<"
    if sizeof_hdr != 348:
        (sizeof_hdr,) = struct.unpack_from(">i", blob, 0)
        if sizeof_hdr != 348:
            raise ValueError(f"{path}: bad NIfTI-1 header size")
        endian = ">"
    magic = blob[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise ValueError(f"{path}: unrecognized NIfTI magic {magic!r}")
    dim = struct.unpack_from(f"{endian}8h", blob, 40)
    if dim[0] != 3:
        raise ValueError(f"{path}: expected a 3D volume, got dim[0]={dim[0]}")
    nx, ny, nz = dim[1], dim[2], dim[3]
    (datatype,) = struct.unpack_from(f"{endian}h", blob, 70)
    if datatype not in _NIFTI_DTYPES:
        raise ValueError(f"{path}: unsupported NIfTI datatype code {datatype}")
    pixdim = struct.unpack_from(f"{endian}8f", blob, 76)
    (vox_offset,) = struct.unpack_from(f"{endian}f", blob, 108)
    scl_slope, scl_inter = struct.unpack_from(f"{endian}2f", blob, 112)
    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(endian)
    count = nx * ny * nz
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=int(vox_offset))
    arr = data.reshape(nz, ny, nx).astype(np.float32)  # x varies fastest
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        arr = arr * slope + scl_inter
    spacing = (float(pixdim[3]), float(pixdim[2]), float(pixdim[1]))
    return Volume3D(arr, spacing)


def _load_volume_nifti(path: Path) -> Volume3D:
    try:
        import nibabel as nib
    except ImportError:
        return _read_nifti_minimal(path)
    img = nib.load(str(path))
    arr = np.asarray(img.get_fdata(), dtype=np.float32)
    if arr.ndim != 3:
        raise ValueError(f"{path}: expected a 3D volume, got shape {arr.shape}")
    zooms = img.header.get_zooms()[:3]
    # NIfTI stores (X, Y, Z); axial slices live along Z, so depth goes first.
    return Volume3D(np.transpose(arr, (2, 1, 0)), (float(zooms[2]), float(zooms[1]), float(zooms[0])))


def load_volume(path: str | Path) -> Volume3D:
    """Load a volume from a NIfTI file or the raw float32 fallback format."""
    path = Path(path)
    name = path.name.lower()
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        return _load_volume_nifti(path)
    if name.endswith(_RAW_SUFFIX):
        return _load_volume_raw(path)
    raise ValueError(f"unsupported volume format: {path}")


_VOLUME_EXTENSIONS = (".nii.gz", ".nii", ".raw")


def _strip_volume_suffix(name: str) -> Optional[str]:
    lower = name.lower()
    for ext in _VOLUME_EXTENSIONS:
        if lower.endswith(ext):
            return name[: -len(ext)]
    return None


@dataclass(frozen=True)
class VolumePairPaths:
    patient: str
    source: Path
    target: Path


def find_volume_pairs(
    root: str | Path, source_modality: str = "t1", target_modality: str = "t2"
) -> list[VolumePairPaths]:
    """Discover per-patient volume pairs under a directory tree.

    Files are matched by basename: ``<patient>_<modality>.<ext>`` with both
    modalities present in the same directory.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} is not a directory")
    sources: dict[str, Path] = {}
    targets: dict[str, Path] = {}
    for dirpath, _dirnames, filenames in os.walk(root):
        for fname in sorted(filenames):
            stem = _strip_volume_suffix(fname)
            if stem is None:
                continue
            m = re.match(rf"^(.*)_({re.escape(source_modality)}|{re.escape(target_modality)})$", stem)
            if not m:
                continue
            patient = f"{Path(dirpath).relative_to(root)}/{m.group(1)}"
            if m.group(2) == source_modality:
                sources[patient] = Path(dirpath) / fname
            else:
                targets[patient] = Path(dirpath) / fname
    pairs = [
        VolumePairPaths(patient, sources[patient], targets[patient])
        for patient in sorted(sources.keys() & targets.keys())
    ]
    return pairs


def split_patients(
    patients: Iterable[str],
    seed: int,
    counts: Optional[tuple[int, int, int]] = None,
    fractions: tuple[float, float, float] = (0.8, 0.04, 0.16),
) -> dict[str, list[str]]:
    """Randomly split patients into disjoint train/val/test sets.

    Splitting happens at the patient level so no patient contributes
    slices to more than one split. ``counts`` gives exact split sizes;
    otherwise ``fractions`` are applied (train takes the remainder).
    """
    ids = sorted(set(patients))
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    if counts is not None:
        n_train, n_val, n_test = counts
        if n_train + n_val + n_test > len(order):
            raise ValueError(
                f"split counts {counts} exceed available patients ({len(order)})"
            )
    else:
        n_val = int(round(fractions[1] * len(order)))
        n_test = int(round(fractions[2] * len(order)))
        n_train = len(order) - n_val - n_test
    splits = {
        "train": sorted(order[:n_train]),
        "val": sorted(order[n_train : n_train + n_val]),
        "test": sorted(order[n_train + n_val : n_train + n_val + n_test]),
    }
    all_assigned: set[str] = set()
    for members in splits.values():
        overlap = all_assigned & set(members)
        if overlap:
            raise AssertionError(f"split overlap at patient level: {sorted(overlap)}")
        all_assigned |= set(members)
    return splits


class VolumePairDataset:
    """Slice pairs from per-patient volume files of two modalities.

    Volumes are normalized then sliced; a slice pair is retained iff
    either side carries information (max intensity above the blank
    threshold), keeping source/target slice indices in lockstep.
    """

    def __init__(
        self,
        pairs: Iterable[VolumePairPaths],
        blank_max_intensity: float = 0.0,
    ):
        self.blank_max_intensity = blank_max_intensity
        self._pairs: list[SlicePair] = []
        self.per_patient: dict[str, int] = {}
        for pair in pairs:
            src = normalize_volume(load_volume(pair.source))
            tgt = normalize_volume(load_volume(pair.target))
            if src.voxels.shape != tgt.voxels.shape:
                raise ValueError(
                    f"{pair.patient}: modality shapes differ "
                    f"{src.voxels.shape} vs {tgt.voxels.shape}"
                )
            kept = 0
            for s, t in zip(src.voxels, tgt.voxels):
                if (
                    float(s.max()) > self.blank_max_intensity
                    or float(t.max()) > self.blank_max_intensity
                ):
                    self._pairs.append(SlicePair(source=s, target=t))
                    kept += 1
            self.per_patient[pair.patient] = kept

    def __len__(self) -> int:
        return len(self._pairs)

    def __getitem__(self, i: int) -> SlicePair:
        return self._pairs[i]


class SampleStream:
    """Deterministic per-iteration plan of indices and parameter generators.

    Every (iteration, slot) position owns child generators derived from
    the master seed, so the full augmentation/misalignment parameter
    stream is bit-reproducible and independent of prefetch order.
    """

    def __init__(self, master_seed: int, dataset_len: int, batch_size: int):
        if dataset_len < 1:
            raise ValueError("dataset is empty")
        self.master_seed = int(master_seed)
        self.dataset_len = int(dataset_len)
        self.batch_size = int(batch_size)

    def plan(self, iteration: int) -> list[tuple[int, np.random.Generator, np.random.Generator]]:
        """(dataset index, augmentation rng, misalignment rng) per batch slot."""
        idx_rng = np.random.default_rng(
            np.random.SeedSequence(self.master_seed, spawn_key=(0, iteration))
        )
        indices = idx_rng.integers(0, self.dataset_len, size=self.batch_size)
        out = []
        for slot, index in enumerate(indices):
            aug = np.random.default_rng(
                np.random.SeedSequence(self.master_seed, spawn_key=(1, iteration, slot))
            )
            noise = np.random.default_rng(
                np.random.SeedSequence(self.master_seed, spawn_key=(2, iteration, slot))
            )
            out.append((int(index), aug, noise))
        return out
