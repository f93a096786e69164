"""Experiment specs, sweep execution, run-directory artifacts, and report building."""
from __future__ import annotations

import itertools
import os
import shutil
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from numpy.random import SeedSequence

from .dataio import (
    MANIFEST_NAME,
    CTSlice,
    DoseLevel,
    NormalizationSpec,
    ScanManifest,
    SliceEntry,
    entry_for,
    make_splits,
    paired_entries,
    write_slice,
)
from .dosesim import (
    ABDOMEN_PALETTE,
    CHEST_PALETTE,
    NoiseScaleModel,
    extract_noise,
    generate_phantom_pair,
    synthesize_dose,
)
from .losses import LossWeights
from .metrics import MetricReport, aggregate, evaluate_pair, welch_t_test
from .metrics import ssim as ssim_metric
from .model import FeatureExtractorSpec, RVAEConfig, make_feature_extractor
from .training import (
    PRETEXT_KINDS,
    PretextTask,
    TrainConfig,
    build_denoise_pairs,
    evaluate_pairs,
    load_train_state,
    predict_pairs,
    run_sswl_idn,
    windowed_view,
)
from .windowing import WindowSpec

DATA_ROOT_ENV = "SSWL_DATA_ROOT"
METRIC_NAMES = ("psnr", "ssim", "mse", "nrmse")
METRICS_CSV_COLUMNS = ("slice", "psnr", "ssim", "mse", "nrmse")

PHANTOM_FAMILIES = {"abdomen": ABDOMEN_PALETTE, "chest": CHEST_PALETTE}


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "on", "yes"):
        return True
    if value in ("0", "false", "off", "no"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_sizes(text: str) -> tuple:
    sizes = []
    for item in text.split(","):
        item = item.strip()
        sizes.append("full" if item == "full" else int(item))
    if not sizes:
        raise ValueError("labeled_sizes must be non-empty")
    return tuple(sizes)


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(item.strip()) for item in text.split(","))


def _parse_optional_float(text: str) -> float | None:
    value = text.strip().lower()
    return None if value in ("", "none") else float(value)


def _fmt(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "on" if value else "off"
    return str(value)


@dataclass(frozen=True)
class ExperimentSpec:
    """Declarative sweep description, loadable from a flat key = value text file."""

    dataset_root: str = ""
    cross_domain_root: str | None = None
    pretext: str = "sswl"
    labeled_sizes: tuple = (250, 500, 1000, "full")
    repeats: int = 5
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    dose: float | None = None
    val_fraction: float = 0.15
    test_fraction: float = 0.2
    split_seed: int = 0
    window_center: float = 40.0
    window_width: float = 300.0
    hu_min: float = -1024.0
    hu_max: float = 3071.0
    nac_sigma: float = 0.05
    pretext_epochs: int = 10
    model_layers: int = 5
    model_filters: int = 96
    model_kernel: int = 5
    model_latent: int = 96
    model_hidden: int = 96
    model_bottleneck: bool = True
    batch_size: int = 10
    learning_rate: float = 1e-5
    lr_decay_factor: float = 0.1
    lr_decay_every_epochs: int = 8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 10
    precision: int = 32
    pretext_loss: str = "hybrid"
    beta: float = 0.6
    alpha: float = 1.0
    noise_model: str = "excess_quanta"
    feature_kind: str = "fixed_random"
    feature_seed: int = 0
    feature_path: str | None = None
    feature_layers: tuple[int, ...] = (0, 1, 2, 3)

    def __post_init__(self) -> None:
        if self.pretext not in PRETEXT_KINDS:
            raise ConfigError(f"unknown pretext kind {self.pretext!r}")
        if not self.labeled_sizes:
            raise ConfigError("labeled_sizes must be non-empty")
        if len(self.seeds) < self.repeats:
            raise ConfigError(
                f"need at least {self.repeats} seeds for {self.repeats} repeats, "
                f"got {len(self.seeds)}"
            )

    def window(self) -> WindowSpec:
        return WindowSpec(center=self.window_center, width=self.window_width)

    def norm(self) -> NormalizationSpec:
        return NormalizationSpec(hu_min=self.hu_min, hu_max=self.hu_max)

    def model_config(self, input_h: int, input_w: int) -> RVAEConfig:
        return RVAEConfig(
            n_enc_layers=self.model_layers,
            n_dec_layers=self.model_layers,
            filters=self.model_filters,
            kernel=self.model_kernel,
            latent_dim=self.model_latent,
            bottleneck_hidden=self.model_hidden,
            bottleneck_enabled=self.model_bottleneck,
            input_h=input_h,
            input_w=input_w,
        )

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            lr_decay_factor=self.lr_decay_factor,
            lr_decay_every_epochs=self.lr_decay_every_epochs,
            adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2,
            adam_eps=self.adam_eps,
            pretext_epochs=self.pretext_epochs,
            finetune_epochs=self.epochs,
            seed=seed,
            precision=self.precision,
            pretext_loss=self.pretext_loss,  # type: ignore[arg-type]
        )

    def pretext_task(self, pretext: str | None = None) -> PretextTask:
        kind = self.pretext if pretext is None else pretext
        if kind == "sswl":
            return PretextTask(kind="sswl", window=self.window())
        if kind == "noisy_as_clean":
            return PretextTask(kind="noisy_as_clean", nac_sigma=self.nac_sigma)
        return PretextTask(kind=kind)  # type: ignore[arg-type]

    def extractor_spec(self) -> FeatureExtractorSpec:
        return FeatureExtractorSpec(
            kind=self.feature_kind,  # type: ignore[arg-type]
            seed=self.feature_seed,
            path=self.feature_path,
            layers=self.feature_layers,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(beta=self.beta, alpha=self.alpha)


# Flat config-file keys -> (attribute, parser). README documents every key.
_SPEC_KEYS: dict[str, tuple[str, object]] = {
    "dataset.root": ("dataset_root", str),
    "dataset.cross_domain_root": ("cross_domain_root", str),
    "data.dose": ("dose", _parse_optional_float),
    "split.val_fraction": ("val_fraction", float),
    "split.test_fraction": ("test_fraction", float),
    "split.seed": ("split_seed", int),
    "window.center": ("window_center", float),
    "window.width": ("window_width", float),
    "norm.hu_min": ("hu_min", float),
    "norm.hu_max": ("hu_max", float),
    "pretext.kind": ("pretext", str),
    "pretext.nac_sigma": ("nac_sigma", float),
    "pretext.epochs": ("pretext_epochs", int),
    "model.layers": ("model_layers", int),
    "model.filters": ("model_filters", int),
    "model.kernel": ("model_kernel", int),
    "model.latent_dim": ("model_latent", int),
    "model.bottleneck_hidden": ("model_hidden", int),
    "model.bottleneck": ("model_bottleneck", _parse_bool),
    "train.batch_size": ("batch_size", int),
    "train.learning_rate": ("learning_rate", float),
    "train.lr_decay_factor": ("lr_decay_factor", float),
    "train.lr_decay_every_epochs": ("lr_decay_every_epochs", int),
    "train.adam_beta1": ("adam_beta1", float),
    "train.adam_beta2": ("adam_beta2", float),
    "train.adam_eps": ("adam_eps", float),
    "train.epochs": ("epochs", int),
    "train.precision": ("precision", int),
    "train.pretext_loss": ("pretext_loss", str),
    "loss.beta": ("beta", float),
    "loss.alpha": ("alpha", float),
    "noise.model": ("noise_model", str),
    "feature.kind": ("feature_kind", str),
    "feature.seed": ("feature_seed", int),
    "feature.path": ("feature_path", str),
    "feature.layers": ("feature_layers", _parse_ints),
    "experiment.labeled_sizes": ("labeled_sizes", _parse_sizes),
    "experiment.repeats": ("repeats", int),
    "experiment.seeds": ("seeds", _parse_ints),
}


def load_spec(path: Path | str) -> ExperimentSpec:
    """Parse a flat key = value spec file; every bad key is reported at once."""
    path = Path(path)
    values: dict[str, object] = {}
    problems: list[str] = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            problems.append(f"line {lineno}: expected 'key = value', got {raw!r}")
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _SPEC_KEYS:
            problems.append(f"line {lineno}: unknown key {key!r}")
            continue
        attr, parser = _SPEC_KEYS[key]
        try:
            values[attr] = parser(value)  # type: ignore[operator]
        except (ValueError, TypeError) as exc:
            problems.append(f"line {lineno}: bad value for {key}: {exc}")
    if problems:
        raise ConfigError(f"invalid spec {path}:\n" + "\n".join(problems))
    if "dataset_root" not in values:
        env_root = os.environ.get(DATA_ROOT_ENV)
        if env_root:
            values["dataset_root"] = env_root
        else:
            raise ConfigError(f"{path}: dataset.root is required (or set ${DATA_ROOT_ENV})")
    try:
        return ExperimentSpec(**values)  # type: ignore[arg-type]
    except (ConfigError, ValueError) as exc:
        raise ConfigError(f"invalid spec {path}: {exc}") from exc


def spec_to_text(spec: ExperimentSpec) -> str:
    """Deterministic flat-file snapshot of a spec (key order fixed)."""
    lines = []
    for key, (attr, _) in _SPEC_KEYS.items():
        value = getattr(spec, attr)
        if value is None:
            continue
        lines.append(f"{key} = {_fmt(value)}")
    return "\n".join(lines) + "\n"


def run_name(pretext: str, labeled_size, seed: int) -> str:
    return f"{pretext}_{labeled_size}_{seed}"


def _parse_run_name(name: str) -> tuple[str, str, int] | None:
    parts = name.rsplit("_", 2)
    if len(parts) != 3:
        return None
    pretext, size, seed = parts
    if pretext not in PRETEXT_KINDS:
        return None
    try:
        return pretext, size, int(seed)
    except ValueError:
        return None


def write_metrics_csv(
    path: Path | str, labels: Sequence[str], reports: Sequence[MetricReport]
) -> None:
    lines = [",".join(METRICS_CSV_COLUMNS)]
    for label, rep in zip(labels, reports):
        lines.append(f"{label},{rep.psnr_db!r},{rep.ssim!r},{rep.mse!r},{rep.nrmse!r}")
    mean = aggregate(reports)
    lines.append(f"mean,{mean.psnr_db!r},{mean.ssim!r},{mean.mse!r},{mean.nrmse!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_metrics_csv(path: Path | str) -> tuple[list[tuple[str, MetricReport]], MetricReport]:
    lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
    if not lines or lines[0] != ",".join(METRICS_CSV_COLUMNS):
        raise ValueError(f"{path}: unexpected metrics.csv header")
    per_slice: list[tuple[str, MetricReport]] = []
    mean: MetricReport | None = None
    for line in lines[1:]:
        label, p, s, m, r = line.split(",")
        rep = MetricReport(
            psnr_db=float(p), ssim=float(s), mse=float(m), nrmse=float(r), n_images=1
        )
        if label == "mean":
            mean = MetricReport(
                psnr_db=rep.psnr_db,
                ssim=rep.ssim,
                mse=rep.mse,
                nrmse=rep.nrmse,
                n_images=max(1, len(per_slice)),
            )
        else:
            per_slice.append((label, rep))
    if mean is None:
        raise ValueError(f"{path}: missing mean row")
    return per_slice, mean


def _pair_label(low: SliceEntry) -> str:
    return f"{low.scan_id}/{low.slice_index}"


def run_single(
    spec: ExperimentSpec,
    pretext: str,
    labeled_size,
    seed: int,
    run_dir: Path,
) -> MetricReport:
    """Execute one (pretext, labeled_size, seed) run and write its artifacts."""
    root = Path(spec.dataset_root)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise ConfigError(f"dataset manifest not found: {manifest_path}")
    manifest = ScanManifest.load(manifest_path)
    split = make_splits(
        manifest,
        labeled_size,
        spec.val_fraction,
        seed=spec.split_seed,
        test_scan_fraction=spec.test_fraction,
        subset_seed=seed,
        dose=spec.dose,
    )
    if not split.labeled:
        raise ConfigError("split produced no labeled pairs")
    first = split.labeled[0][0]
    model_config = spec.model_config(first.height, first.width)
    cfg = spec.train_config(seed)
    task = spec.pretext_task(pretext)
    extractor = make_feature_extractor(spec.extractor_spec()) if spec.beta > 0 else None

    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    snapshot = replace(
        spec, pretext=pretext, labeled_sizes=(labeled_size,), seeds=(seed,), repeats=1
    )
    (run_dir / "config.txt").write_text(spec_to_text(snapshot), encoding="utf-8")

    state, _ = run_sswl_idn(
        split,
        spec.window(),
        model_config,
        cfg,
        spec.loss_weights(),
        extractor,
        task=task,
        norm=spec.norm(),
        log_path=run_dir / "train_log.csv",
        checkpoint_dir=run_dir,
        evaluate_test=False,
    )

    test_pairs = build_denoise_pairs(
        split.test, split.root, spec.window(), norm=spec.norm(), manifest=manifest
    )
    reports = evaluate_pairs(state.model, test_pairs, batch_size=cfg.batch_size)
    labels = [_pair_label(low) for low, _ in split.test]
    write_metrics_csv(run_dir / "metrics.csv", labels, reports)

    if spec.cross_domain_root:
        cross_root = Path(spec.cross_domain_root)
        cross_manifest = ScanManifest.load(cross_root / MANIFEST_NAME)
        cross_entries = paired_entries(cross_manifest, spec.dose)
        cross_pairs = build_denoise_pairs(
            cross_entries, cross_root, spec.window(), norm=spec.norm(), manifest=cross_manifest
        )
        cross_reports = evaluate_pairs(state.model, cross_pairs, batch_size=cfg.batch_size)
        cross_labels = [_pair_label(low) for low, _ in cross_entries]
        write_metrics_csv(run_dir / "metrics_cross.csv", cross_labels, cross_reports)
    return aggregate(reports)


def run_sweep(
    spec: ExperimentSpec,
    out_root: Path,
    *,
    pretext: str | None = None,
    labeled_sizes: Sequence | None = None,
    force: bool = False,
) -> list[Path]:
    """Run every (labeled_size, seed) combination of the spec into out_root."""
    sel_pretext = pretext if pretext is not None else spec.pretext
    if sel_pretext not in PRETEXT_KINDS:
        raise ConfigError(f"unknown pretext kind {sel_pretext!r}")
    sizes = tuple(labeled_sizes) if labeled_sizes is not None else spec.labeled_sizes
    seeds = spec.seeds[: spec.repeats]
    out_root = Path(out_root)
    planned = [
        (size, seed, out_root / run_name(sel_pretext, size, seed))
        for size in sizes
        for seed in seeds
    ]
    existing = [d for _, _, d in planned if d.exists() and any(d.iterdir())]
    if existing and not force:
        names = ", ".join(str(d) for d in existing)
        raise ConfigError(f"run directories already exist (use --force to redo): {names}")
    for directory in existing:
        shutil.rmtree(directory)
    done = []
    for size, seed, directory in planned:
        run_single(spec, sel_pretext, size, seed, directory)
        done.append(directory)
    return done


_SWEEP_KEYS_IGNORED = {"pretext.kind", "experiment.labeled_sizes", "experiment.seeds", "experiment.repeats"}


def _core_config(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if "=" not in line:
            continue
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _SWEEP_KEYS_IGNORED:
            out[key] = value.strip()
    return out


@dataclass
class RunReport:
    """Aggregated sweep results: per-run means, per-config means, pairwise tests."""

    runs: dict = field(default_factory=dict)  # (pretext, size, seed) -> {"in":..., "cross":...}
    means: list = field(default_factory=list)  # row dicts in table order
    ttests: list = field(default_factory=list)  # row dicts


def _size_order(size: str):
    return (1, 0) if size == "full" else (0, int(size))


def collect_runs(run_root: Path) -> RunReport:
    run_root = Path(run_root)
    report = RunReport()
    core: dict[str, str] | None = None
    for child in sorted(run_root.iterdir()):
        if not child.is_dir():
            continue
        parsed = _parse_run_name(child.name)
        if parsed is None or not (child / "metrics.csv").is_file():
            continue
        pretext, size, seed = parsed
        config_path = child / "config.txt"
        if config_path.is_file():
            this_core = _core_config(config_path.read_text(encoding="utf-8"))
            if core is None:
                core = this_core
            elif this_core != core:
                diff = sorted(
                    k
                    for k in set(core) | set(this_core)
                    if core.get(k) != this_core.get(k)
                )
                raise ConfigError(
                    f"{child.name}: incompatible run config (differs on: {', '.join(diff)})"
                )
        _, mean = read_metrics_csv(child / "metrics.csv")
        cross = None
        if (child / "metrics_cross.csv").is_file():
            _, cross = read_metrics_csv(child / "metrics_cross.csv")
        report.runs[(pretext, size, seed)] = {"in": mean, "cross": cross}
    if not report.runs:
        raise ConfigError(f"no completed runs found under {run_root}")
    return report


def _metric_values(rep: MetricReport) -> dict[str, float]:
    return {"psnr": rep.psnr_db, "ssim": rep.ssim, "mse": rep.mse, "nrmse": rep.nrmse}


def build_report(run_root: Path, out_dir: Path) -> RunReport:
    """Aggregate run directories into the wide table, significance CSV, and plots."""
    report = collect_runs(run_root)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    groups: dict[tuple[str, str], dict[int, dict]] = {}
    for (pretext, size, seed), data in report.runs.items():
        groups.setdefault((pretext, size), {})[seed] = data
    ordered = sorted(groups, key=lambda key: (key[0], _size_order(key[1])))

    table_lines = [
        "pretext,labeled_size,runs,"
        + ",".join(f"in_{m}" for m in METRIC_NAMES)
        + ","
        + ",".join(f"cross_{m}" for m in METRIC_NAMES)
    ]
    for key in ordered:
        pretext, size = key
        runs = groups[key]
        in_mean = aggregate([runs[s]["in"] for s in sorted(runs)])
        cross_reports = [runs[s]["cross"] for s in sorted(runs) if runs[s]["cross"] is not None]
        cross_mean = aggregate(cross_reports) if cross_reports else None
        row = {
            "pretext": pretext,
            "labeled_size": size,
            "runs": len(runs),
            "in": in_mean,
            "cross": cross_mean,
        }
        report.means.append(row)
        in_vals = _metric_values(in_mean)
        cross_vals = (
            _metric_values(cross_mean)
            if cross_mean is not None
            else {m: "" for m in METRIC_NAMES}
        )
        table_lines.append(
            f"{pretext},{size},{len(runs)},"
            + ",".join(repr(in_vals[m]) for m in METRIC_NAMES)
            + ","
            + ",".join(
                repr(cross_vals[m]) if cross_vals[m] != "" else "" for m in METRIC_NAMES
            )
        )
    (out_dir / "report.csv").write_text("\n".join(table_lines) + "\n", encoding="utf-8")

    # Welch tests between every pretext pair at equal labeled size, one row per
    # (size, pair), columns grouped per metric.
    pretexts = sorted({p for p, _ in groups})
    sizes = sorted({s for _, s in groups}, key=_size_order)
    sig_lines = [
        "labeled_size,pretext_a,pretext_b,n_a,n_b,"
        + ",".join(f"{m}_t,{m}_df,{m}_p" for m in METRIC_NAMES)
    ]
    for size in sizes:
        for a, b in itertools.combinations(pretexts, 2):
            runs_a = groups.get((a, size))
            runs_b = groups.get((b, size))
            if not runs_a or not runs_b or len(runs_a) < 2 or len(runs_b) < 2:
                continue
            cells = [size, a, b, str(len(runs_a)), str(len(runs_b))]
            tests = {}
            for metric in METRIC_NAMES:
                va = [_metric_values(runs_a[s]["in"])[metric] for s in sorted(runs_a)]
                vb = [_metric_values(runs_b[s]["in"])[metric] for s in sorted(runs_b)]
                result = welch_t_test(va, vb)
                tests[metric] = result
                cells.extend(
                    [
                        repr(result.t_statistic),
                        repr(result.degrees_of_freedom),
                        repr(result.p_value),
                    ]
                )
            report.ttests.append(
                {"labeled_size": size, "pretext_a": a, "pretext_b": b, "tests": tests}
            )
            sig_lines.append(",".join(cells))
    (out_dir / "significance.csv").write_text("\n".join(sig_lines) + "\n", encoding="utf-8")

    _write_plots(out_dir, groups, pretexts, sizes)
    return report


def _write_plots(out_dir: Path, groups, pretexts, sizes) -> None:
    for metric in METRIC_NAMES:
        sidecar = [f"labeled_size,pretext,mean_{metric}"]
        fig, ax = plt.subplots(figsize=(5, 3.5))
        xs = list(range(len(sizes)))
        for pretext in pretexts:
            ys = []
            for size in sizes:
                runs = groups.get((pretext, size))
                if not runs:
                    ys.append(np.nan)
                    continue
                value = _metric_values(aggregate([runs[s]["in"] for s in sorted(runs)]))[metric]
                ys.append(value)
                sidecar.append(f"{size},{pretext},{value!r}")
            ax.plot(xs, ys, marker="o", label=pretext)
        ax.set_xticks(xs)
        ax.set_xticklabels([str(s) for s in sizes])
        ax.set_xlabel("labeled pairs")
        ax.set_ylabel(metric)
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_dir / f"plot_{metric}.png", dpi=120)
        plt.close(fig)
        (out_dir / f"plot_{metric}.csv").write_text("\n".join(sidecar) + "\n", encoding="utf-8")


def _roi_crop(image: np.ndarray, roi: tuple[int, int, int, int]) -> np.ndarray:
    x, y, w, h = roi
    if w < 7 or h < 7:
        raise ConfigError(f"ROI {roi} must be at least 7x7 for SSIM")
    if x < 0 or y < 0 or y + h > image.shape[0] or x + w > image.shape[1]:
        raise ConfigError(f"ROI {roi} falls outside the {image.shape} image")
    return image[y : y + h, x : x + w]


def _grid_image(panels: Sequence[np.ndarray], gap: int = 2) -> np.ndarray:
    height = panels[0].shape[0]
    sep = np.ones((height, gap), dtype=np.float64)
    cells: list[np.ndarray] = []
    for i, panel in enumerate(panels):
        if i:
            cells.append(sep)
        cells.append(np.clip(panel, 0.0, 1.0))
    return np.concatenate(cells, axis=1)


def evaluate_checkpoint(
    checkpoint: Path | None,
    manifest_path: Path,
    out_dir: Path,
    *,
    window: WindowSpec,
    norm: NormalizationSpec | None = None,
    dose: float | None = None,
    roi: tuple[int, int, int, int] | None = None,
    identity: bool = False,
    batch_size: int = 10,
) -> MetricReport:
    """Evaluate a checkpoint (or the identity stand-in) over every pair of a manifest."""
    manifest = ScanManifest.load(Path(manifest_path))
    entries = paired_entries(manifest, dose)
    if not entries:
        raise ConfigError(f"no (low, full) pairs found in {manifest_path}")
    missing = [
        entry.path
        for pair in entries
        for entry in pair
        if not manifest.resolve(entry).is_file()
    ]
    if missing:
        raise ConfigError("missing pair files: " + ", ".join(sorted(set(missing))))
    if norm is None:
        norm = NormalizationSpec()
    pairs = build_denoise_pairs(entries, manifest.root, window, norm=norm, manifest=manifest)
    labels = [_pair_label(low) for low, _ in entries]

    if identity:
        preds = np.stack([target for _, target in pairs])
    else:
        if checkpoint is None:
            raise ConfigError("a checkpoint is required unless --identity is given")
        state = load_train_state(Path(checkpoint), TrainConfig())
        shape = pairs[0][0].shape
        if (state.model_config.input_h, state.model_config.input_w) != shape:
            raise ConfigError(
                f"checkpoint expects {state.model_config.input_h}x"
                f"{state.model_config.input_w} inputs but the manifest slices are "
                f"{shape[0]}x{shape[1]}"
            )
        preds = predict_pairs(state.model, pairs, batch_size=batch_size)

    reports = [evaluate_pair(pred, target) for pred, (_, target) in zip(preds, pairs)]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out_dir / "metrics.csv", labels, reports)

    if roi is not None:
        grid_dir = out_dir / "grids"
        grid_dir.mkdir(exist_ok=True)
        # Grids show the display-domain (windowed) input next to target/prediction.
        display = windowed_view(entries, manifest.root, window, manifest=manifest)
        lines = ["slice,roi_ssim"]
        roi_values = []
        for label, pred, (_, target), (display_input, _) in zip(labels, preds, pairs, display):
            pred_roi = _roi_crop(pred, roi)
            target_roi = _roi_crop(target, roi)
            input_roi = _roi_crop(display_input, roi)
            value = ssim_metric(pred_roi, target_roi)
            roi_values.append(value)
            lines.append(f"{label},{value!r}")
            grid = _grid_image([input_roi, target_roi, pred_roi])
            name = label.replace("/", "_") + "_roi.png"
            plt.imsave(grid_dir / name, grid, cmap="gray", vmin=0.0, vmax=1.0)
        lines.append(f"mean,{sum(roi_values) / len(roi_values)!r}")
        (out_dir / "roi_metrics.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return aggregate(reports)


def simulate_phantoms(
    out_dir: Path,
    count: int,
    size: int,
    dose: float,
    seed: int,
    family: str = "abdomen",
) -> tuple[int, Path]:
    """Write a phantom corpus of (full, low) pairs plus its manifest."""
    if family not in PHANTOM_FAMILIES:
        raise ConfigError(f"unknown phantom family {family!r} (choose from {sorted(PHANTOM_FAMILIES)})")
    if count < 1:
        raise ConfigError(f"phantom count must be >= 1, got {count}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    palette = PHANTOM_FAMILIES[family]
    pair_seeds = SeedSequence(seed).generate_state(count)
    entries = []
    n_files = 0
    for i in range(count):
        scan_id = f"{family}-{seed:04d}-{i:04d}"
        full, low = generate_phantom_pair(
            int(pair_seeds[i]),
            size,
            size,
            DoseLevel(dose),
            palette=palette,
            body_region=family,
            scan_id=scan_id,
        )
        for slc in (full, low):
            name = f"{scan_id}_d{int(round(slc.dose.fraction * 1000)):04d}.ctsl"
            write_slice(slc, out_dir / name)
            entries.append(entry_for(slc, name))
            n_files += 1
    manifest = ScanManifest(entries=entries, root=out_dir)
    manifest_path = manifest.save()
    return n_files, manifest_path


def simulate_from_manifest(
    manifest_path: Path,
    source_dose: float,
    target_dose: float,
    noise_model: str = "excess_quanta",
) -> int:
    """Synthesize one new low-dose slice per (source-dose, full) pair; update the manifest."""
    manifest = ScanManifest.load(manifest_path)
    model = NoiseScaleModel(kind=noise_model)  # type: ignore[arg-type]
    pairs = paired_entries(manifest, source_dose)
    if not pairs:
        raise ConfigError(f"no pairs at dose {source_dose} in {manifest_path}")
    target = DoseLevel(target_dose)
    new_entries = []
    for low_entry, full_entry in pairs:
        low = manifest.load_slice(low_entry)
        full = manifest.load_slice(full_entry)
        noise = extract_noise(low, full)
        synth = synthesize_dose(full, noise, target, model)
        name = (
            f"{low_entry.scan_id}_s{low_entry.slice_index:04d}"
            f"_d{int(round(target_dose * 1000)):04d}.ctsl"
        )
        write_slice(synth, manifest.root / name)
        new_entries.append(entry_for(synth, name))
    manifest.entries.extend(new_entries)
    manifest.save(manifest_path)
    return len(new_entries)
