"""Two-phase protocol: pretext pretraining on the whole training pool, then
downstream fine-tuning on the labeled pairs, with deterministic seeded data
order, per-step latent noise, and resumable checkpoints."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch
from numpy.random import Generator, Philox, SeedSequence

from .checkpoint import Container, load_container, save_container
from .dataio import (
    MANIFEST_NAME,
    CTSlice,
    DatasetSplit,
    NormalizationSpec,
    ScanManifest,
    SliceEntry,
    read_slice,
)
from .losses import LossWeights, hybrid_loss
from .metrics import MetricReport, aggregate, evaluate_pair
from .model import RVAE, NonFiniteActivationError, RVAEConfig, FeatureExtractor, build_rvae
from .windowing import WindowSpec, window_level_values

PretextKind = Literal["none", "sswl", "reconstruction", "noisy_as_clean"]
PRETEXT_KINDS = ("none", "sswl", "reconstruction", "noisy_as_clean")

_PHASE_IDS = {"pretext": 1, "finetune": 2}
_SHUFFLE_TAG = 0x5408
_EPS_TAG = 0xE925
_NAC_TAG = 0x4AC1

TRAIN_LOG_COLUMNS = ("epoch", "phase", "lr", "train_loss", "val_mse", "wall_seconds")

Pair = tuple[np.ndarray, np.ndarray]


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class PretextTask:
    kind: PretextKind = "sswl"
    window: WindowSpec | None = None
    nac_sigma: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in PRETEXT_KINDS:
            raise ValueError(f"unknown pretext kind {self.kind!r}")
        if (self.kind == "sswl") != (self.window is not None):
            raise ValueError("a window is required exactly when kind is sswl")
        if (self.kind == "noisy_as_clean") != (self.nac_sigma > 0):
            raise ValueError("nac_sigma > 0 is required exactly when kind is noisy_as_clean")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 10
    learning_rate: float = 1e-5
    lr_decay_factor: float = 0.1
    lr_decay_every_epochs: int = 8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    pretext_epochs: int = 0
    finetune_epochs: int = 0
    seed: int = 0
    precision: int = 32
    pretext_loss: Literal["hybrid", "mse"] = "hybrid"

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError(f"lr_decay_factor must be in (0, 1], got {self.lr_decay_factor}")
        if self.lr_decay_every_epochs < 1:
            raise ValueError("lr_decay_every_epochs must be >= 1")
        if self.precision not in (32, 64):
            raise ValueError(f"precision must be 32 or 64, got {self.precision}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.pretext_loss not in ("hybrid", "mse"):
            raise ValueError(f"unknown pretext_loss {self.pretext_loss!r}")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == 64 else torch.float32


@dataclass
class LogRow:
    epoch: int
    phase: str
    lr: float
    train_loss: float
    val_mse: float
    wall_seconds: float

    def as_csv(self) -> str:
        return (
            f"{self.epoch},{self.phase},{self.lr!r},{self.train_loss!r},"
            f"{self.val_mse!r},{self.wall_seconds!r}"
        )


@dataclass
class TrainState:
    model: RVAE
    model_config: RVAEConfig
    optimizer: torch.optim.Adam
    phase: str = ""
    epoch: int = 0  # completed epochs within the current phase
    best_val_mse: float = math.inf
    best_params: dict[str, torch.Tensor] | None = None
    seed: int = 0
    precision: int = 32
    history: list[LogRow] = field(default_factory=list)
    diverged: bool = False


def init_train_state(model_config: RVAEConfig, cfg: TrainConfig) -> TrainState:
    model = build_rvae(model_config, seed=cfg.seed, dtype=cfg.dtype)
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=cfg.learning_rate,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=cfg.adam_eps,
    )
    return TrainState(
        model=model,
        model_config=model_config,
        optimizer=optimizer,
        seed=cfg.seed,
        precision=cfg.precision,
    )


def _dataset_manifest(root: Path) -> ScanManifest | None:
    path = Path(root) / MANIFEST_NAME
    return ScanManifest.load(path) if path.is_file() else None


def _load(root: Path, entry: SliceEntry, manifest: ScanManifest | None) -> CTSlice:
    return read_slice(Path(root) / entry.path, manifest=manifest)


def _pretext_pair(
    slc: CTSlice, task: PretextTask, norm: NormalizationSpec, index: int
) -> Pair:
    lo, hi = norm.hu_min, norm.hu_max
    nwl = np.clip((slc.pixels.astype(np.float64) - lo) / (hi - lo), 0.0, 1.0)
    if task.kind == "sswl":
        assert task.window is not None
        return nwl, window_level_values(slc.pixels, task.window)
    if task.kind == "reconstruction":
        return nwl, nwl
    # noisy_as_clean: noise-augmented LDCT in, original LDCT out.
    rng = Generator(Philox(SeedSequence((_NAC_TAG, index))))
    noisy = nwl + rng.normal(0.0, task.nac_sigma, size=nwl.shape)
    return noisy, nwl


def pretext_pairs_for_entries(
    entries: Sequence[SliceEntry],
    task: PretextTask,
    root: Path,
    *,
    norm: NormalizationSpec = NormalizationSpec(),
    manifest: ScanManifest | None = None,
) -> list[Pair]:
    if task.kind == "none":
        return []
    if manifest is None:
        manifest = _dataset_manifest(root)
    return [
        _pretext_pair(_load(root, entry, manifest), task, norm, i)
        for i, entry in enumerate(entries)
    ]


def build_pretext_pairs(
    split: DatasetSplit,
    task: PretextTask,
    *,
    norm: NormalizationSpec = NormalizationSpec(),
    manifest: ScanManifest | None = None,
) -> list[Pair]:
    """Pretext (input, target) images over the whole training pool (labeled + unlabeled)."""
    entries = [low for low, _ in split.labeled] + list(split.unlabeled)
    return pretext_pairs_for_entries(entries, task, split.root, norm=norm, manifest=manifest)


def build_denoise_pairs(
    pairs: Sequence[tuple[SliceEntry, SliceEntry]],
    root: Path,
    window: WindowSpec,
    *,
    norm: NormalizationSpec = NormalizationSpec(),
    manifest: ScanManifest | None = None,
) -> list[Pair]:
    """Downstream (normalized NWL LDCT input, window-leveled FDCT target) images.

    The input representation matches the pretext phase (NWL in, WL out), so the
    fine-tune phase only swaps the noisy windowed target for the clean one.
    """
    if manifest is None:
        manifest = _dataset_manifest(root)
    lo, hi = norm.hu_min, norm.hu_max
    out = []
    for low_entry, full_entry in pairs:
        low = _load(root, low_entry, manifest)
        full = _load(root, full_entry, manifest)
        nwl = np.clip((low.pixels.astype(np.float64) - lo) / (hi - lo), 0.0, 1.0)
        out.append((nwl, window_level_values(full.pixels, window)))
    return out


def windowed_view(
    pairs: Sequence[tuple[SliceEntry, SliceEntry]],
    root: Path,
    window: WindowSpec,
    *,
    manifest: ScanManifest | None = None,
) -> list[Pair]:
    """(window-leveled LDCT, window-leveled FDCT) images: the display-domain view
    used for noisy-input baselines and rendered grids."""
    if manifest is None:
        manifest = _dataset_manifest(root)
    out = []
    for low_entry, full_entry in pairs:
        low = _load(root, low_entry, manifest)
        full = _load(root, full_entry, manifest)
        out.append(
            (
                window_level_values(low.pixels, window),
                window_level_values(full.pixels, window),
            )
        )
    return out


def _stack_pairs(pairs: Sequence[Pair], dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
    shapes = {p[0].shape for p in pairs} | {p[1].shape for p in pairs}
    if len(shapes) != 1:
        raise ValueError(f"pairs have inconsistent shapes: {sorted(shapes)}")
    x = torch.from_numpy(np.stack([p[0] for p in pairs])[:, None, :, :]).to(dtype)
    y = torch.from_numpy(np.stack([p[1] for p in pairs])[:, None, :, :]).to(dtype)
    return x, y


def _epoch_permutation(seed: int, phase: str, epoch: int, n: int) -> np.ndarray:
    ss = SeedSequence((seed, _PHASE_IDS[phase], epoch, _SHUFFLE_TAG))
    return Generator(Philox(ss)).permutation(n)


def _step_eps(
    seed: int, phase: str, epoch: int, step: int, shape: tuple[int, int], dtype: torch.dtype
) -> torch.Tensor:
    ss = SeedSequence((seed, _PHASE_IDS[phase], epoch, step, _EPS_TAG))
    return torch.from_numpy(Generator(Philox(ss)).standard_normal(shape)).to(dtype)


def validation_mse(model: RVAE, pairs: Sequence[Pair], batch_size: int = 10) -> float:
    """Mean per-image MSE on the deterministic (eps = zeros) forward path.

    Errors are accumulated in float64 against the original targets.
    """
    if not pairs:
        return math.nan
    x, _ = _stack_pairs(pairs, next(model.parameters()).dtype)
    y = torch.from_numpy(np.stack([p[1] for p in pairs])[:, None, :, :]).double()
    total = 0.0
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            xb = x[start : start + batch_size]
            yb = y[start : start + batch_size]
            pred, _ = model(xb)
            err = (pred.double() - yb) ** 2
            total += float(err.flatten(1).mean(dim=1).sum())
    return total / x.shape[0]


def predict_pairs(
    model: RVAE, pairs: Sequence[Pair], batch_size: int = 10
) -> np.ndarray:
    """Deterministic predictions for the inputs of (input, target) pairs, as float64."""
    x, _ = _stack_pairs(pairs, next(model.parameters()).dtype)
    preds = []
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            out, _ = model(x[start : start + batch_size])
            preds.append(out[:, 0].double().numpy())
    return np.concatenate(preds, axis=0)


def evaluate_pairs(
    model: RVAE, pairs: Sequence[Pair], batch_size: int = 10
) -> list[MetricReport]:
    """Per-slice metric reports for a model over (input, target) pairs."""
    preds = predict_pairs(model, pairs, batch_size=batch_size)
    return [evaluate_pair(pred, target) for pred, (_, target) in zip(preds, pairs)]


def _append_log(path: Path | None, rows: Sequence[LogRow]) -> None:
    if path is None or not rows:
        return
    path = Path(path)
    lines = []
    if not path.exists():
        lines.append(",".join(TRAIN_LOG_COLUMNS))
    lines.extend(row.as_csv() for row in rows)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _clone_params(model: RVAE) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def train_phase(
    state: TrainState,
    pairs: Sequence[Pair],
    cfg: TrainConfig,
    weights: LossWeights,
    extractor: FeatureExtractor | None,
    val_pairs: Sequence[Pair],
    phase: str,
    epochs: int,
    *,
    log_path: Path | None = None,
) -> TrainState:
    """Run shuffled minibatch Adam epochs of the hybrid loss on one phase.

    Deterministic for fixed (seed, data, config): data order and per-step latent
    noise come from counter-based generators keyed by (seed, phase, epoch, step),
    so a resumed state continues with an identical loss sequence. Tracks
    validation MSE each epoch and retains the best parameters. A non-finite loss
    aborts the phase and restores the last best parameters.
    """
    if phase not in _PHASE_IDS:
        raise ValueError(f"unknown phase {phase!r}")
    if state.phase != phase:
        state.phase = phase
        state.epoch = 0
        state.best_val_mse = math.inf
        state.best_params = None
    if epochs <= state.epoch:
        return state
    if not pairs:
        raise ValueError("train_phase requires a non-empty pair list")

    model = state.model
    dtype = next(model.parameters()).dtype
    x, y = _stack_pairs(pairs, dtype)
    n = x.shape[0]
    bottleneck = state.model_config.bottleneck_enabled
    latent_dim = state.model_config.latent_dim
    phase_weights = weights
    if phase == "pretext" and cfg.pretext_loss == "mse":
        phase_weights = LossWeights(beta=0.0, alpha=0.0)

    new_rows: list[LogRow] = []
    for epoch in range(state.epoch, epochs):
        started = time.monotonic()
        lr = cfg.learning_rate * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every_epochs)
        for group in state.optimizer.param_groups:
            group["lr"] = lr
        perm = _epoch_permutation(state.seed, phase, epoch, n)
        loss_sum = 0.0
        seen = 0
        aborted = False
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = torch.from_numpy(perm[start : start + cfg.batch_size].copy())
            xb, yb = x[idx], y[idx]
            eps = None
            if bottleneck:
                eps = _step_eps(
                    state.seed, phase, epoch, step, (xb.shape[0], latent_dim), dtype
                )
            try:
                pred, latent = model(xb, eps)
                breakdown = hybrid_loss(pred, yb, latent, extractor, phase_weights)
                total = breakdown.total
                loss_value = float(total.detach())
            except NonFiniteActivationError:
                loss_value = math.nan
            if not math.isfinite(loss_value):
                if state.best_params is not None:
                    model.load_state_dict(state.best_params)
                state.diverged = True
                aborted = True
                break
            state.optimizer.zero_grad()
            total.backward()
            state.optimizer.step()
            loss_sum += loss_value * xb.shape[0]
            seen += xb.shape[0]
        if aborted:
            break
        train_loss = loss_sum / seen
        try:
            val_mse = validation_mse(model, val_pairs, batch_size=cfg.batch_size)
        except NonFiniteActivationError:
            val_mse = math.nan
        if val_pairs and not math.isfinite(val_mse):
            if state.best_params is not None:
                model.load_state_dict(state.best_params)
            state.diverged = True
            break
        selection = val_mse if val_pairs else train_loss
        if selection < state.best_val_mse or state.best_params is None:
            state.best_val_mse = selection
            state.best_params = _clone_params(model)
        row = LogRow(
            epoch=epoch,
            phase=phase,
            lr=lr,
            train_loss=train_loss,
            val_mse=val_mse,
            wall_seconds=time.monotonic() - started,
        )
        state.history.append(row)
        new_rows.append(row)
        state.epoch = epoch + 1
    _append_log(log_path, new_rows)
    return state


def save_train_state(state: TrainState, path: Path | str) -> None:
    """Checkpoint the full training state; round-trips bit-exactly."""
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in state.model.state_dict().items():
        arrays[f"params.{name}"] = tensor.detach().numpy()
    if state.best_params is not None:
        for name, tensor in state.best_params.items():
            arrays[f"best.{name}"] = tensor.detach().numpy()
    name_of = {id(p): n for n, p in state.model.named_parameters()}
    for param, opt_state in state.optimizer.state.items():
        pname = name_of[id(param)]
        arrays[f"opt.{pname}.exp_avg"] = opt_state["exp_avg"].detach().numpy()
        arrays[f"opt.{pname}.exp_avg_sq"] = opt_state["exp_avg_sq"].detach().numpy()
        arrays[f"opt.{pname}.step"] = np.asarray(float(opt_state["step"]), dtype=np.float64)
    meta = {
        "phase": state.phase,
        "epoch": state.epoch,
        "best_val_mse": state.best_val_mse,
        "seed": state.seed,
        "precision": state.precision,
        "diverged": state.diverged,
        "has_best": state.best_params is not None,
        "history": [
            [r.epoch, r.phase, r.lr, r.train_loss, r.val_mse, r.wall_seconds]
            for r in state.history
        ],
    }
    save_container(
        path,
        Container(
            kind="rvae_checkpoint",
            config=state.model_config.to_dict(),
            meta=meta,
            arrays=arrays,
        ),
    )


def load_train_state(path: Path | str, cfg: TrainConfig) -> TrainState:
    """Rebuild a TrainState from a checkpoint; training resumes exactly."""
    container = load_container(path)
    if container.kind != "rvae_checkpoint":
        raise ValueError(f"{path}: not a training checkpoint (kind={container.kind!r})")
    model_config = RVAEConfig.from_dict(container.config)
    meta = container.meta
    precision = int(meta["precision"])
    dtype = torch.float64 if precision == 64 else torch.float32
    model = build_rvae(model_config, dtype=dtype)
    params = {
        name[len("params.") :]: torch.from_numpy(arr).to(dtype)
        for name, arr in container.arrays.items()
        if name.startswith("params.")
    }
    model.load_state_dict(params)
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=cfg.learning_rate,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=cfg.adam_eps,
    )
    for pname, param in model.named_parameters():
        key = f"opt.{pname}.exp_avg"
        if key in container.arrays:
            optimizer.state[param] = {
                "step": torch.tensor(container.arrays[f"opt.{pname}.step"].item()),
                "exp_avg": torch.from_numpy(container.arrays[key]).to(dtype),
                "exp_avg_sq": torch.from_numpy(container.arrays[f"opt.{pname}.exp_avg_sq"]).to(
                    dtype
                ),
            }
    best_params = None
    if meta.get("has_best"):
        best_params = {
            name[len("best.") :]: torch.from_numpy(arr).to(dtype)
            for name, arr in container.arrays.items()
            if name.startswith("best.")
        }
    history = [
        LogRow(
            epoch=int(row[0]),
            phase=row[1],
            lr=float(row[2]),
            train_loss=float(row[3]),
            val_mse=float(row[4]),
            wall_seconds=float(row[5]),
        )
        for row in meta.get("history", [])
    ]
    return TrainState(
        model=model,
        model_config=model_config,
        optimizer=optimizer,
        phase=meta["phase"],
        epoch=int(meta["epoch"]),
        best_val_mse=float(meta["best_val_mse"]),
        best_params=best_params,
        seed=int(meta["seed"]),
        precision=precision,
        history=history,
        diverged=bool(meta["diverged"]),
    )


def run_sswl_idn(
    split: DatasetSplit,
    window: WindowSpec,
    model_config: RVAEConfig,
    cfg: TrainConfig,
    weights: LossWeights,
    extractor: FeatureExtractor | None,
    *,
    task: PretextTask | None = None,
    norm: NormalizationSpec = NormalizationSpec(),
    log_path: Path | None = None,
    checkpoint_dir: Path | None = None,
    evaluate_test: bool = True,
) -> tuple[TrainState, MetricReport | None]:
    """Full protocol: pretext phase over labeled + unlabeled LDCT, fine-tune on the
    labeled pairs starting from the phase-1 best checkpoint (same model and loss
    signature in both phases), then evaluate the final best parameters on the test
    partition."""
    if task is None:
        task = PretextTask(kind="sswl", window=window)
    manifest = _dataset_manifest(split.root)
    state = init_train_state(model_config, cfg)

    if task.kind != "none" and cfg.pretext_epochs > 0:
        pretext_train = build_pretext_pairs(split, task, norm=norm, manifest=manifest)
        pretext_val = pretext_pairs_for_entries(
            [low for low, _ in split.validation], task, split.root, norm=norm, manifest=manifest
        )
        train_phase(
            state,
            pretext_train,
            cfg,
            weights,
            extractor,
            pretext_val,
            "pretext",
            epochs=cfg.pretext_epochs,
            log_path=log_path,
        )
        if checkpoint_dir is not None:
            save_train_state(state, Path(checkpoint_dir) / "pretext_best.ckpt")
        # Phase 2 starts from the phase-1 best parameters; the shapes are
        # identical by construction, no translation involved.
        if state.best_params is not None:
            state.model.load_state_dict(state.best_params)

    finetune_train = build_denoise_pairs(
        split.labeled, split.root, window, norm=norm, manifest=manifest
    )
    finetune_val = build_denoise_pairs(
        split.validation, split.root, window, norm=norm, manifest=manifest
    )
    state.optimizer = torch.optim.Adam(
        state.model.parameters(),
        lr=cfg.learning_rate,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=cfg.adam_eps,
    )
    train_phase(
        state,
        finetune_train,
        cfg,
        weights,
        extractor,
        finetune_val,
        "finetune",
        epochs=cfg.finetune_epochs,
        log_path=log_path,
    )
    if checkpoint_dir is not None:
        save_train_state(state, Path(checkpoint_dir) / "last.ckpt")
    if state.best_params is not None:
        state.model.load_state_dict(state.best_params)
    if checkpoint_dir is not None:
        save_train_state(state, Path(checkpoint_dir) / "best.ckpt")

    report: MetricReport | None = None
    if evaluate_test and split.test:
        test_pairs = build_denoise_pairs(
            split.test, split.root, window, norm=norm, manifest=manifest
        )
        report = aggregate(evaluate_pairs(state.model, test_pairs, batch_size=cfg.batch_size))
    return state, report
