"""Training loop, checkpointing, evaluation, and the experiment matrix runner.

One logical loop per experiment: sample an augmented (optionally
misaligned) batch, update the active discriminator(s) with fakes held
constant, then jointly update the generator(s) and registration
network(s). Validation PSNR is logged periodically and selects the best
checkpoint. All randomness derives from the config seed, so runs are
bit-reproducible under the deterministic-math flag.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import json
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch

from freqreg.adversarial import (
    NetworkBundle,
    PatchDiscriminator,
    ResidualGenerator,
    TrainingMode,
    discriminator_objective,
    generator_objective,
)
from freqreg.config import ExperimentConfig, config_from_dict
from freqreg.data import (
    SampleStream,
    SyntheticPairDataset,
    VolumePairDataset,
    augment_pair,
    find_volume_pairs,
    inject_misalignment,
    split_patients,
)
from freqreg.metrics import (
    MetricsReport,
    aggregate,
    compute_slice_metrics,
    ms_ssim_scales,
    psnr,
    ssim,
)
from freqreg.registration import RegistrationNetwork

CHECKPOINT_FORMAT = "freqreg-checkpoint-v1"


class TrainingDivergedError(RuntimeError):
    """Raised when an objective goes non-finite; the step is aborted."""


def build_networks(config: ExperimentConfig) -> NetworkBundle:
    """Construct the networks a mode requires, in a fixed seeded order."""
    mode = config.mode
    model = config.model
    gen = lambda: ResidualGenerator(model.generator_blocks, model.generator_base)
    disc = lambda: PatchDiscriminator(model.discriminator_layers, model.discriminator_base)
    reg = lambda: RegistrationNetwork(model.registration_widths)
    bundle = NetworkBundle(g=gen(), d_y=disc())
    if mode.family == "cycle_gan":
        bundle.f = gen()
        bundle.d_x = disc()
    if mode.registration in ("single", "dual"):
        bundle.r_y = reg()
    if mode.registration == "dual":
        bundle.r_x = reg()
    return bundle


def build_datasets(config: ExperimentConfig) -> dict[str, Any]:
    """Materialize train/val/test slice-pair datasets from the config."""
    data = config.data
    if data.synthetic:
        n_train, n_val, n_test = data.train_pairs, data.val_pairs, data.test_pairs
        return {
            "train": SyntheticPairDataset(config.seed, data.image_size, 0, n_train),
            "val": SyntheticPairDataset(config.seed, data.image_size, n_train, n_val),
            "test": SyntheticPairDataset(
                config.seed, data.image_size, n_train + n_val, n_test
            ),
        }
    if not data.root:
        raise ValueError("non-synthetic data requires data.root")
    pairs = find_volume_pairs(data.root, data.source_modality, data.target_modality)
    if not pairs:
        raise ValueError(f"no volume pairs found under {data.root}")
    by_patient = {p.patient: p for p in pairs}
    splits = split_patients(
        by_patient.keys(),
        seed=config.seed,
        counts=data.split_counts,
        fractions=data.split_fractions,
    )
    return {
        name: VolumePairDataset(
            [by_patient[pid] for pid in members], data.blank_max_intensity
        )
        for name, members in splits.items()
    }


# ---------------------------------------------------------------------------
# Checkpoint archive


@dataclass
class Checkpoint:
    manifest: dict[str, Any]
    params: dict[str, dict[str, np.ndarray]]
    optimizers: dict[str, Any]

    @property
    def iteration(self) -> int:
        return int(self.manifest["iteration"])

    @property
    def config(self) -> ExperimentConfig:
        return config_from_dict(self.manifest["config"])

    def save(self, path: str | Path) -> Path:
        """Re-serialize the archive; loading and saving is byte-stable."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        archive = {
            "manifest": self.manifest,
            "params": self.params,
            "optimizers": self.optimizers,
        }
        path.write_bytes(_stable_dumps(archive))
        return path


def _state_to_numpy(obj):
    if isinstance(obj, torch.Tensor):
        return obj.detach().cpu().numpy()
    if isinstance(obj, dict):
        return {k: _state_to_numpy(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return type(obj)(_state_to_numpy(v) for v in obj)
    return obj


def _state_to_torch(obj):
    if isinstance(obj, np.ndarray):
        return torch.from_numpy(obj.copy())
    if isinstance(obj, dict):
        return {k: _state_to_torch(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return type(obj)(_state_to_torch(v) for v in obj)
    return obj


def save_checkpoint(
    path: str | Path,
    nets: NetworkBundle,
    config: ExperimentConfig,
    iteration: int,
    optimizers: Optional[dict[str, torch.optim.Optimizer]] = None,
    extra: Optional[dict[str, Any]] = None,
) -> Path:
    """Write a single-archive checkpoint: manifest + per-network parameter blobs.

    Content is serialized with a fixed pickle protocol and numpy arrays
    only, so saving the same state twice produces byte-identical files.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": config.to_dict(),
        "config_fingerprint": config.fingerprint(),
        "mode": config.mode.token(),
        "iteration": int(iteration),
        "rng": {"torch": torch.get_rng_state().numpy().tobytes()},
    }
    if extra:
        manifest.update(extra)
    params = {
        name: {k: v.detach().cpu().numpy() for k, v in net.state_dict().items()}
        for name, net in nets.named().items()
    }
    opt_state = {
        name: _state_to_numpy(opt.state_dict()) for name, opt in (optimizers or {}).items()
    }
    archive = {"manifest": manifest, "params": params, "optimizers": opt_state}
    path.write_bytes(_stable_dumps(archive))
    return path


def _stable_dumps(obj) -> bytes:
    # Plain pickle output depends on object identity (memoization), so a
    # loaded-and-resaved archive could differ byte-wise from the original.
    # Disabling the memo makes the bytes a pure function of content.
    import io

    buf = io.BytesIO()
    pickler = pickle.Pickler(buf, protocol=4)
    pickler.fast = True
    pickler.dump(obj)
    return buf.getvalue()


def load_checkpoint(path: str | Path) -> Checkpoint:
    archive = pickle.loads(Path(path).read_bytes())
    manifest = archive["manifest"]
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} archive")
    return Checkpoint(
        manifest=manifest, params=archive["params"], optimizers=archive["optimizers"]
    )


def restore_networks(ckpt: Checkpoint, nets: NetworkBundle) -> None:
    for name, net in nets.named().items():
        if name not in ckpt.params:
            raise ValueError(f"checkpoint is missing parameters for network {name!r}")
        state = {k: torch.from_numpy(v.copy()) for k, v in ckpt.params[name].items()}
        net.load_state_dict(state)


def param_hash(module: torch.nn.Module) -> str:
    """Digest of all parameters and buffers; detects any in-place update."""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainResult:
    config: ExperimentConfig
    out_dir: Optional[Path]
    final_checkpoint: Optional[Path]
    best_checkpoint: Optional[Path]
    log: list[dict]
    best_val_psnr: float = float("nan")


class Trainer:
    """Alternating optimization driver for one experiment config."""

    def __init__(self, config: ExperimentConfig, out_dir: Optional[str | Path] = None):
        self.config = config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if config.threads is not None:
            torch.set_num_threads(config.threads)
        torch.set_flush_denormal(True)
        if config.deterministic:
            torch.use_deterministic_algorithms(True)
        torch.manual_seed(config.seed)

        self.nets = build_networks(config)
        self.nets.require(config.mode)
        self.datasets = build_datasets(config)
        if len(self.datasets["train"]) < 1:
            raise ValueError("training split is empty")
        self.stream = SampleStream(
            config.seed, len(self.datasets["train"]), config.schedule.batch_size
        )
        self.aug_ranges = config.data.augmentation.ranges()
        self.noise_ranges = config.data.augmentation.noise_ranges()

        gen_params = [p for net in self.nets.generator_side(config.mode) for p in net.parameters()]
        disc_params = [
            p for net in self.nets.discriminator_side(config.mode) for p in net.parameters()
        ]
        opt = config.optimizer
        self.opt_g = torch.optim.Adam(
            gen_params, lr=opt.lr, betas=(opt.beta1, opt.beta2), weight_decay=opt.weight_decay
        )
        self.opt_d = torch.optim.Adam(
            disc_params, lr=opt.lr, betas=(opt.beta1, opt.beta2), weight_decay=opt.weight_decay
        )
        self.iteration = 0
        self.log: list[dict] = []
        self._log_fh = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "config.yaml").write_text(config.to_yaml())
            self._log_fh = (self.out_dir / "log.jsonl").open("w")

    # -- data ---------------------------------------------------------------

    def make_batch(self, iteration: int) -> tuple[torch.Tensor, torch.Tensor]:
        """Augmented (and, in noise modes, misaligned) training batch."""
        xs, ys = [], []
        train = self.datasets["train"]
        for index, aug_rng, noise_rng in self.stream.plan(iteration):
            pair = train[index]
            pair = augment_pair(pair, aug_rng, self.aug_ranges)
            if self.config.mode.noise:
                pair = inject_misalignment(pair, noise_rng, self.noise_ranges)
            xs.append(pair.source)
            ys.append(pair.target)
        x = torch.from_numpy(np.stack(xs)).to(torch.float32).unsqueeze(1)
        y = torch.from_numpy(np.stack(ys)).to(torch.float32).unsqueeze(1)
        return x, y

    # -- optimization sub-steps ----------------------------------------------

    def discriminator_step(
        self,
        batch: tuple[torch.Tensor, torch.Tensor],
        fake_y: Optional[torch.Tensor] = None,
        fake_x: Optional[torch.Tensor] = None,
    ) -> dict[str, float]:
        losses = discriminator_objective(
            self.config.mode, batch, self.nets, fake_y=fake_y, fake_x=fake_x
        )
        total = sum(losses.values())
        if not torch.isfinite(total):
            raise TrainingDivergedError(
                f"non-finite discriminator loss at iteration {self.iteration}: "
                + ", ".join(f"{k}={float(v.detach())}" for k, v in losses.items())
            )
        self.opt_d.zero_grad()
        total.backward()
        self.opt_d.step()
        return {k: float(v.detach()) for k, v in losses.items()}

    def generator_step(
        self,
        batch: tuple[torch.Tensor, torch.Tensor],
        fake_y: Optional[torch.Tensor] = None,
        fake_x: Optional[torch.Tensor] = None,
    ) -> tuple[float, dict[str, float]]:
        total, parts = generator_objective(
            self.config.mode,
            self.config.weights,
            batch,
            self.nets,
            fake_y=fake_y,
            fake_x=fake_x,
            cycle_literal=self.config.cycle_literal,
        )
        if not torch.isfinite(total):
            raise TrainingDivergedError(
                f"non-finite generator loss at iteration {self.iteration}: "
                + ", ".join(f"{k}={float(v.detach())}" for k, v in parts.items())
            )
        self.opt_g.zero_grad()
        total.backward()
        self.opt_g.step()
        return float(total.detach()), {k: float(v.detach()) for k, v in parts.items()}

    def step(self) -> dict:
        """One iteration: sample batch, D update (fakes constant), then G update."""
        batch = self.make_batch(self.iteration)
        x, _y = batch
        fake_y = self.nets.g(x)
        fake_x = self.nets.f(batch[1]) if self.config.mode.family == "cycle_gan" else None
        d_losses = self.discriminator_step(batch, fake_y=fake_y, fake_x=fake_x)
        g_total, g_parts = self.generator_step(batch, fake_y=fake_y, fake_x=fake_x)
        entry = {
            "type": "train",
            "iteration": self.iteration,
            "g_total": g_total,
            "g_parts": g_parts,
            "d_losses": d_losses,
        }
        self.iteration += 1
        return entry

    # -- validation and logging ----------------------------------------------

    def validate(self) -> Optional[dict]:
        val = self.datasets.get("val")
        if val is None or len(val) == 0:
            return None
        psnrs, ssims = [], []
        with torch.no_grad():
            for start in range(0, len(val), self.config.schedule.batch_size):
                pairs = [val[i] for i in range(start, min(start + self.config.schedule.batch_size, len(val)))]
                x = torch.from_numpy(np.stack([p.source for p in pairs])).to(torch.float32).unsqueeze(1)
                pred = self.nets.g(x).squeeze(1).numpy()
                for p, pr in zip(pairs, pred):
                    psnrs.append(psnr(pr, p.target))
                    ssims.append(ssim(pr.astype(np.float64), p.target.astype(np.float64)))
        return {
            "type": "val",
            "iteration": self.iteration,
            "psnr": float(np.mean(psnrs)),
            "ssim": float(np.mean(ssims)),
        }

    def _emit(self, entry: dict) -> None:
        self.log.append(entry)
        if self._log_fh is not None:
            self._log_fh.write(json.dumps(entry) + "\n")
            self._log_fh.flush()

    def _save(self, name: str) -> Optional[Path]:
        if self.out_dir is None:
            return None
        return save_checkpoint(
            self.out_dir / name,
            self.nets,
            self.config,
            self.iteration,
            optimizers={"generator": self.opt_g, "discriminator": self.opt_d},
        )

    def restore(self, ckpt: Checkpoint) -> None:
        """Resume from a checkpoint recorded under the same config fingerprint."""
        recorded = ckpt.manifest["config_fingerprint"]
        if recorded != self.config.fingerprint():
            raise ValueError(
                f"checkpoint fingerprint {recorded} does not match config "
                f"{self.config.fingerprint()}"
            )
        restore_networks(ckpt, self.nets)
        if "generator" in ckpt.optimizers:
            self.opt_g.load_state_dict(_state_to_torch(ckpt.optimizers["generator"]))
        if "discriminator" in ckpt.optimizers:
            self.opt_d.load_state_dict(_state_to_torch(ckpt.optimizers["discriminator"]))
        rng = ckpt.manifest.get("rng", {})
        if "torch" in rng:
            state = np.frombuffer(rng["torch"], dtype=np.uint8).copy()
            torch.set_rng_state(torch.from_numpy(state))
        self.iteration = ckpt.iteration

    def train(self) -> TrainResult:
        schedule = self.config.schedule
        best_psnr = float("-inf")
        best_path: Optional[Path] = None

        val = self.validate()
        if val is not None:
            self._emit(val)
            best_psnr = val["psnr"]
            best_path = self._save("ckpt_best.pkl")

        while self.iteration < schedule.iterations:
            entry = self.step()
            if schedule.log_interval and (entry["iteration"] % schedule.log_interval == 0):
                self._emit(entry)
            done = self.iteration >= schedule.iterations
            if schedule.val_interval and (self.iteration % schedule.val_interval == 0 or done):
                val = self.validate()
                if val is not None:
                    self._emit(val)
                    if val["psnr"] > best_psnr:
                        best_psnr = val["psnr"]
                        best_path = self._save("ckpt_best.pkl")
            if schedule.checkpoint_interval and (
                self.iteration % schedule.checkpoint_interval == 0
            ):
                self._save(f"ckpt_iter{self.iteration:07d}.pkl")

        final_path = self._save("ckpt_final.pkl")
        if self._log_fh is not None:
            self._log_fh.close()
            self._log_fh = None
        return TrainResult(
            config=self.config,
            out_dir=self.out_dir,
            final_checkpoint=final_path,
            best_checkpoint=best_path,
            log=self.log,
            best_val_psnr=best_psnr,
        )


def train(config: ExperimentConfig, out_dir: Optional[str | Path] = None) -> TrainResult:
    return Trainer(config, out_dir=out_dir).train()


# ---------------------------------------------------------------------------
# Evaluation


def _predict(gen: torch.nn.Module, sources: list[np.ndarray], batch_size: int) -> list[np.ndarray]:
    preds = []
    with torch.no_grad():
        for start in range(0, len(sources), batch_size):
            x = torch.from_numpy(np.stack(sources[start : start + batch_size]))
            x = x.to(torch.float32).unsqueeze(1)
            preds.extend(gen(x).squeeze(1).numpy().astype(np.float64))
    return preds


def evaluate(
    checkpoint: Checkpoint | str | Path,
    split: str = "test",
    config: Optional[ExperimentConfig] = None,
) -> MetricsReport:
    """Score a checkpoint's generator(s) on a dataset split.

    No augmentation or misalignment is applied at test time. Cycle-family
    checkpoints report both translation directions (G: source to target,
    F: target to source).
    """
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = load_checkpoint(checkpoint)
    if config is None:
        config = checkpoint.config
    nets = build_networks(config)
    restore_networks(checkpoint, nets)
    datasets = build_datasets(config)
    if split not in datasets:
        raise ValueError(f"unknown split {split!r}; expected one of {sorted(datasets)}")
    dataset = datasets[split]
    if len(dataset) == 0:
        raise ValueError(f"split {split!r} is empty")

    pairs = [dataset[i] for i in range(len(dataset))]
    batch_size = config.schedule.batch_size
    records = []
    preds_g = _predict(nets.g, [p.source for p in pairs], batch_size)
    for i, (pair, pred) in enumerate(zip(pairs, preds_g)):
        records.append(
            compute_slice_metrics(pred, pair.target.astype(np.float64), index=i, generator="G")
        )
    if config.mode.family == "cycle_gan":
        preds_f = _predict(nets.f, [p.target for p in pairs], batch_size)
        for i, (pair, pred) in enumerate(zip(pairs, preds_f)):
            records.append(
                compute_slice_metrics(pred, pair.source.astype(np.float64), index=i, generator="F")
            )
    h = w = config.data.image_size
    return aggregate(
        records, scales=ms_ssim_scales(h, w), config_fingerprint=config.fingerprint()
    )


# ---------------------------------------------------------------------------
# Experiment matrix


@dataclass
class MatrixCell:
    mode: str
    label: str
    status: str
    summary: dict[str, dict[str, float]] = field(default_factory=dict)
    error: str = ""
    run_dir: str = ""

    def mean(self, metric: str, generator: str = "G") -> float:
        return self.summary[generator][f"{metric}_mean"]


@dataclass
class MatrixResult:
    cells: list[MatrixCell]

    def cell(self, mode: str) -> MatrixCell:
        token = TrainingMode.parse(mode).token()
        for cell in self.cells:
            if cell.mode == token:
                return cell
        raise KeyError(mode)

    def to_tsv(self) -> str:
        lines = ["mode\tlabel\tstatus\tgenerator\tpsnr\tssim\tms_ssim"]
        for cell in self.cells:
            if cell.status != "ok":
                lines.append(f"{cell.mode}\t{cell.label}\t{cell.status}\t-\t-\t-\t-")
                continue
            for gen in sorted(cell.summary):
                s = cell.summary[gen]
                lines.append(
                    f"{cell.mode}\t{cell.label}\tok\t{gen}\t"
                    f"{s['psnr_mean']:.6f}\t{s['ssim_mean']:.6f}\t{s['ms_ssim_mean']:.6f}"
                )
        return "\n".join(lines)

    def format_grid(self) -> str:
        """Aligned grid: metric x noise/registration rows, family x frequency columns."""

        def variant(mode: TrainingMode) -> str:
            flags = []
            if mode.noise:
                flags.append("n")
            if mode.registration == "single":
                flags.append("r")
            elif mode.registration == "dual":
                flags.append("r2")
            return "w/ " + ", ".join(flags) if flags else "w/o n, r"

        columns: list[tuple[str, str, str, str]] = []  # (header, family, freq, generator)
        for cell in self.cells:
            mode = TrainingMode.parse(cell.mode)
            freq = mode.frequency if mode.frequency != "off" else "baseline"
            gens = sorted(cell.summary) if cell.summary else ["G"]
            for gen in gens:
                base = "GAN" if mode.family == "gan" else "CycleGAN"
                header = base if mode.family == "gan" else f"{base} {gen}"
                if freq != "baseline":
                    header += f" {freq}"
                key = (header, mode.family, freq, gen)
                if key not in columns:
                    columns.append(key)
        rows: list[tuple[str, str]] = []
        for cell in self.cells:
            key = variant(TrainingMode.parse(cell.mode))
            if key not in [r[1] for r in rows]:
                rows.append((key, key))

        width = max([len(c[0]) for c in columns] + [8]) + 2
        label_w = max(len("MS-SSIM ") + max(len(r[0]) for r in rows), 18)
        out = [" " * label_w + "".join(f"{c[0]:>{width}}" for c in columns)]
        fmt = {"psnr": "{:.1f}", "ssim": "{:.2f}", "ms_ssim": "{:.2f}"}
        for metric, title in (("psnr", "PSNR"), ("ssim", "SSIM"), ("ms_ssim", "MS-SSIM")):
            for row_key, row_label in rows:
                line = f"{title + ' ' + row_label:<{label_w}}"
                for header, family, freq, gen in columns:
                    value = ""
                    for cell in self.cells:
                        mode = TrainingMode.parse(cell.mode)
                        cfreq = mode.frequency if mode.frequency != "off" else "baseline"
                        if variant(mode) == row_key and mode.family == family and cfreq == freq:
                            if cell.status != "ok":
                                value = "failed"
                            elif gen in cell.summary:
                                value = fmt[metric].format(cell.summary[gen][f"{metric}_mean"])
                            break
                    line += f"{value:>{width}}"
                out.append(line)
        return "\n".join(out)


def derive_mode_config(base: ExperimentConfig, mode: TrainingMode | str) -> ExperimentConfig:
    """Copy a config onto another mode, re-deriving the frequency-loss weights."""
    if isinstance(mode, str):
        mode = TrainingMode.parse(mode)
    d = base.to_dict()
    d["mode"] = mode.token()
    d["weights"]["frequency"] = None
    d["weights"]["w_freq"] = None
    return config_from_dict(d)


def _run_single_mode(config_dict: dict, out_dir: str, threads: int) -> dict:
    torch.set_num_threads(threads)
    config = config_from_dict(config_dict)
    result = train(config, out_dir=out_dir)
    report = evaluate(load_checkpoint(result.best_checkpoint or result.final_checkpoint))
    report.save(Path(out_dir) / "metrics.jsonl")
    return {"summary": report.summary, "run_dir": out_dir}


def run_experiment_matrix(
    base: ExperimentConfig,
    modes: list[TrainingMode | str],
    out_dir: str | Path,
    jobs: int = 1,
) -> MatrixResult:
    """Train and evaluate each mode under identical seeds and data.

    Sub-runs are independent; a failing cell is marked failed and the
    matrix continues. With ``jobs`` > 1 runs execute in parallel worker
    processes (each restricted to one torch thread), which cannot affect
    results because every run is seed-deterministic in isolation.
    """
    if not modes:
        raise ValueError("experiment matrix needs at least one mode")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    parsed = [TrainingMode.parse(m) if isinstance(m, str) else m for m in modes]
    cells = [MatrixCell(mode=m.token(), label=m.label(), status="pending") for m in parsed]

    tasks = []
    for mode in parsed:
        config = derive_mode_config(base, mode)
        run_dir = out_dir / mode.token().replace("+", "_")
        tasks.append((config.to_dict(), str(run_dir)))

    if jobs <= 1:
        outcomes = []
        for config_dict, run_dir in tasks:
            try:
                outcomes.append(_run_single_mode(config_dict, run_dir, torch.get_num_threads()))
            except Exception as exc:  # keep filling the rest of the table
                outcomes.append({"error": f"{type(exc).__name__}: {exc}"})
    else:
        ctx = torch.multiprocessing.get_context("spawn")
        outcomes = [None] * len(tasks)
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
            futures = {
                pool.submit(_run_single_mode, config_dict, run_dir, 1): i
                for i, (config_dict, run_dir) in enumerate(tasks)
            }
            for future in concurrent.futures.as_completed(futures):
                i = futures[future]
                try:
                    outcomes[i] = future.result()
                except Exception as exc:
                    outcomes[i] = {"error": f"{type(exc).__name__}: {exc}"}

    for cell, outcome in zip(cells, outcomes):
        if outcome is None or "error" in outcome:
            cell.status = "failed"
            cell.error = (outcome or {}).get("error", "worker returned no result")
        else:
            cell.status = "ok"
            cell.summary = outcome["summary"]
            cell.run_dir = outcome["run_dir"]

    result = MatrixResult(cells=cells)
    (out_dir / "matrix.tsv").write_text(result.to_tsv() + "\n")
    (out_dir / "matrix.txt").write_text(result.format_grid() + "\n")
    return result
