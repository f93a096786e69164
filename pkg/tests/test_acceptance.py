"""Acceptance suite: one test per criterion, each printing a pass line.

Criterion 7 runs the scaled phantom experiment (250 pairs at 64x64, 5% dose)
with budgets calibrated for a single CPU core; everything else is
property-based at its stated tolerance.
"""
from __future__ import annotations

import math
import time
from dataclasses import replace

import numpy as np
import pytest
import torch
from helpers import (
    finite_difference_gradients,
    max_relative_gradient_error,
    mse_oracle,
    nrmse_oracle,
    psnr_oracle,
    ssim_oracle_uniform,
    t_two_sided_p_oracle,
    tiny_config,
)

from sswl.cli import main
from sswl.dataio import (
    MANIFEST_NAME,
    CTSlice,
    DoseLevel,
    ScanManifest,
    make_splits,
    read_slice,
    write_slice,
)
from sswl.dosesim import NoiseScaleModel, extract_noise, synthesize_dose
from sswl.experiment import read_metrics_csv, simulate_phantoms
from sswl.losses import LossWeights, hybrid_loss, kl_loss, mse_loss
from sswl.metrics import aggregate, evaluate_pair, mse, nrmse, psnr, ssim, welch_t_test
from sswl.model import (
    FeatureExtractorSpec,
    RVAEConfig,
    build_rvae,
    gradients,
    make_feature_extractor,
)
from sswl.training import (
    PretextTask,
    TrainConfig,
    build_denoise_pairs,
    init_train_state,
    load_train_state,
    run_sswl_idn,
    save_train_state,
    train_phase,
    windowed_view,
)
from sswl.windowing import WindowSpec, window_level_values, window_to_affine

WINDOW = WindowSpec(center=40.0, width=300.0)

# Scaled-experiment settings calibrated on this (single-core CPU) platform.
EXPERIMENT_MODEL = dict(
    n_enc_layers=3,
    n_dec_layers=3,
    filters=16,
    kernel=5,
    latent_dim=16,
    bottleneck_hidden=16,
    input_h=64,
    input_w=64,
)
SUPERVISED_EPOCHS = 15
PRETEXT_EPOCHS = 25
FINETUNE_EPOCHS = 40


@pytest.fixture(scope="module")
def phantom_corpus(tmp_path_factory):
    """200 training + 50 test pairs, 64x64, 5% simulated dose."""
    root = tmp_path_factory.mktemp("acceptance_corpus")
    simulate_phantoms(root, count=250, size=64, dose=0.05, seed=11)
    return root


@pytest.fixture(scope="module")
def corpus_manifest(phantom_corpus):
    return ScanManifest.load(phantom_corpus / MANIFEST_NAME)


def passed(criterion: int, text: str) -> None:
    print(f"ACCEPTANCE {criterion} PASS: {text}")


def test_criterion_1_window_leveling_exactness():
    started = time.monotonic()
    values = window_level_values(np.array([-110.0, 40.0, 190.0]), WINDOW)
    assert values[0] == 0.0
    assert values[1] == 0.5
    assert values[2] == 1.0
    sweep = np.linspace(-3000.0, 5000.0, 10_000)
    out = window_level_values(sweep, WINDOW)
    assert np.all(np.diff(out) >= 0.0)
    affine = window_to_affine(WINDOW)
    inside = sweep[(sweep > WINDOW.lower) & (sweep < WINDOW.upper)]
    assert np.array_equal(window_level_values(inside, WINDOW), affine.apply(inside))
    elapsed = time.monotonic() - started
    assert elapsed < 1.0
    passed(1, f"window-leveling exact at -110/40/190, monotone over 1e4 points ({elapsed:.2f}s)")


def test_criterion_2_dose_synthesis_consistency():
    started = time.monotonic()
    rng = np.random.default_rng(2024)
    shape = (1024, 1024)  # >= 1e6 samples
    meta = dict(scan_id="acc2", slice_index=0, body_region="abdomen")
    full_px = rng.uniform(-500.0, 500.0, size=shape).astype(np.float32)
    low_px = (full_px + rng.normal(0.0, 40.0, size=shape)).astype(np.float32)
    full = CTSlice(pixels=full_px, dose=DoseLevel(1.0), **meta)
    low = CTSlice(pixels=low_px, dose=DoseLevel(0.25), **meta)
    noise = extract_noise(low, full)

    for kind in ("inverse_dose", "excess_quanta"):
        back = synthesize_dose(full, noise, DoseLevel(0.25), NoiseScaleModel(kind=kind))
        assert back.pixels.tobytes() == low.pixels.tobytes()

    source_var = float(np.var(noise.values))
    for kind, k2 in (("inverse_dose", 5.0), ("excess_quanta", 19.0 / 3.0)):
        out = synthesize_dose(full, noise, DoseLevel(0.05), NoiseScaleModel(kind=kind))
        residual = out.pixels.astype(np.float64) - full_px.astype(np.float64)
        ratio = float(np.var(residual)) / source_var
        assert ratio == pytest.approx(k2, rel=0.01)
    elapsed = time.monotonic() - started
    assert elapsed < 10.0
    passed(2, f"bit-exact add-back and k^2 variance scaling over 1e6 samples ({elapsed:.2f}s)")


def test_criterion_3_metrics_oracle_equivalence():
    started = time.monotonic()
    rng = np.random.default_rng(33)
    for trial in range(100):
        h = int(rng.integers(8, 33))
        w = int(rng.integers(8, 33))
        pred = rng.random((h, w))
        ref = rng.random((h, w))
        assert mse(pred, ref) == pytest.approx(mse_oracle(pred, ref), rel=1e-6)
        assert psnr(pred, ref) == pytest.approx(psnr_oracle(pred, ref), rel=1e-6)
        assert nrmse(pred, ref) == pytest.approx(nrmse_oracle(pred, ref), rel=1e-6)
        assert ssim(pred, ref) == pytest.approx(ssim_oracle_uniform(pred, ref), rel=1e-6)
        if trial < 10:
            assert ssim(pred, pred.copy()) == 1.0
            assert ssim(pred, ref) == ssim(ref, pred)
    result = welch_t_test([1, 2, 3, 4, 5], [2, 3, 4, 5, 6])
    assert result.t_statistic == pytest.approx(-1.0, abs=1e-12)
    assert result.degrees_of_freedom == pytest.approx(8.0, abs=1e-12)
    assert result.p_value == pytest.approx(0.3466, abs=1e-4)
    assert result.p_value == pytest.approx(
        t_two_sided_p_oracle(result.t_statistic, result.degrees_of_freedom), rel=1e-9
    )
    elapsed = time.monotonic() - started
    assert elapsed < 5.0
    passed(3, f"metrics match brute-force oracles on 100 pairs within 1e-6 ({elapsed:.2f}s)")


def _gradient_check(seed: int) -> tuple[float, float]:
    """Max relative error of analytic vs float64 central-difference gradients,
    for the float32 and float64 models, on the full hybrid loss."""
    config = tiny_config()
    weights = LossWeights(beta=0.6, alpha=1.0)
    extractor = make_feature_extractor(FeatureExtractorSpec(seed=seed))
    gen = np.random.default_rng(1000 + seed)
    x64 = torch.from_numpy(gen.uniform(0.05, 0.95, size=(2, 1, 16, 16)))
    y64 = torch.from_numpy(gen.uniform(0.05, 0.95, size=(2, 1, 16, 16)))
    eps64 = torch.from_numpy(gen.standard_normal((2, config.latent_dim)))

    def loss_for(model, x, y, eps):
        pred, latent = model(x, eps)
        return hybrid_loss(pred, y, latent, extractor, weights).total

    errors = {}
    for precision, dtype in ((32, torch.float32), (64, torch.float64)):
        model = build_rvae(config, seed=seed, dtype=dtype)
        x, y, eps = x64.to(dtype), y64.to(dtype), eps64.to(dtype)
        analytic = gradients(model, loss_for(model, x, y, eps))
        errors[precision] = {k: v.double().numpy() for k, v in analytic.items()}

    def fresh_model():
        return build_rvae(config, seed=seed, dtype=torch.float64)

    oracle = finite_difference_gradients(
        fresh_model, lambda m: loss_for(m, x64, y64, eps64)
    )
    return (
        max_relative_gradient_error(errors[32], oracle),
        max_relative_gradient_error(errors[64], oracle),
    )


def test_criterion_4_gradient_correctness():
    started = time.monotonic()
    worst32 = worst64 = 0.0
    for seed in (0, 1, 2):
        err32, err64 = _gradient_check(seed)
        worst32 = max(worst32, err32)
        worst64 = max(worst64, err64)
    assert worst32 < 1e-3
    assert worst64 < 1e-5
    elapsed = time.monotonic() - started
    assert elapsed < 120.0
    passed(
        4,
        f"hybrid-loss gradients match central differences over 3 seeds "
        f"(max rel err 32-bit {worst32:.2e} < 1e-3, 64-bit {worst64:.2e} < 1e-5, {elapsed:.0f}s)",
    )


def test_criterion_5_architecture_invariants():
    started = time.monotonic()
    model = build_rvae(RVAEConfig(), seed=0)
    x = torch.rand(1, 1, 256, 256, generator=torch.Generator().manual_seed(5))
    out, latent = model(x)
    assert out.shape == (1, 1, 256, 256)

    again, latent2 = model(x)
    assert torch.equal(out, again)
    assert torch.equal(latent.z, latent2.z)

    eps = torch.randn(1, 96, generator=torch.Generator().manual_seed(6))
    _, latent3 = model(x, eps)
    recomputed = latent3.mu + torch.exp(0.5 * latent3.log_var) * latent3.eps
    assert torch.equal(latent3.z, recomputed)

    tiny_off = tiny_config(bottleneck_enabled=False)
    model_off = build_rvae(tiny_off, seed=1)
    xt = torch.rand(2, 1, 16, 16, generator=torch.Generator().manual_seed(7))
    eps_a = torch.randn(2, 4, generator=torch.Generator().manual_seed(8))
    out_a, lat_a = model_off(xt, eps_a)
    out_b, lat_b = model_off(xt)
    assert torch.equal(out_a, out_b)
    assert lat_a is None and lat_b is None
    elapsed = time.monotonic() - started
    passed(5, f"shape-preserving, eps-deterministic, exact latent identity ({elapsed:.1f}s)")


def test_criterion_6_loss_component_laws():
    assert float(kl_loss(torch.zeros(3, 8), torch.zeros(3, 8))) == 0.0
    dim = 6
    per_dim = float(
        kl_loss(torch.ones(1, dim, dtype=torch.float64), torch.zeros(1, dim, dtype=torch.float64))
    ) / dim
    assert per_dim == pytest.approx(0.5, rel=1e-12)

    for dtype in (torch.float32, torch.float64):
        gen = torch.Generator().manual_seed(66)
        model = build_rvae(tiny_config(), seed=9, dtype=dtype)
        x = torch.rand(2, 1, 16, 16, generator=gen).to(dtype)
        y = torch.rand(2, 1, 16, 16, generator=gen).to(dtype)
        eps = torch.randn(2, 4, generator=gen).to(dtype)
        pred, latent = model(x, eps)
        extractor = make_feature_extractor(FeatureExtractorSpec(seed=3))
        weights = LossWeights(beta=0.6, alpha=1.0)
        out = hybrid_loss(pred, y, latent, extractor, weights)
        total = float(out.total.detach())
        recomposed = (
            float(out.mse_term.detach())
            + weights.beta * float(out.perceptual_term.detach())
            + weights.alpha * float(out.kl_term.detach())
        )
        ulp = float(torch.finfo(dtype).eps)
        assert abs(total - recomposed) <= 4.0 * ulp * abs(total)

        zero_weights = hybrid_loss(pred, y, latent, None, LossWeights(beta=0.0, alpha=0.0))
        assert torch.equal(zero_weights.total, mse_loss(pred, y))
    passed(6, "KL closed forms, 4-ulp component sum, exact MSE reduction at beta=alpha=0")


def _experiment_ingredients(corpus_manifest, labeled_size, seed):
    split = make_splits(
        corpus_manifest,
        labeled_size,
        0.15,
        seed=0,
        test_scan_fraction=0.2,
        subset_seed=seed,
    )
    model_config = RVAEConfig(**EXPERIMENT_MODEL)
    extractor = make_feature_extractor(FeatureExtractorSpec(seed=0))
    return split, model_config, extractor


def test_criterion_7a_supervised_gain(phantom_corpus, corpus_manifest):
    started = time.monotonic()
    split, model_config, extractor = _experiment_ingredients(corpus_manifest, "full", 0)
    assert len(split.labeled) == 200 - round(0.15 * 200)
    assert len(split.test) == 50

    # Noisy-input baseline in the display domain: windowed LDCT vs windowed FDCT.
    display = windowed_view(split.test, phantom_corpus, WINDOW)
    noisy_input = aggregate([evaluate_pair(inp, tgt) for inp, tgt in display])

    cfg = TrainConfig(
        batch_size=10,
        learning_rate=1e-3,
        lr_decay_factor=0.5,
        lr_decay_every_epochs=10,
        pretext_epochs=0,
        finetune_epochs=SUPERVISED_EPOCHS,
        seed=0,
    )
    state, report = run_sswl_idn(
        split,
        WINDOW,
        model_config,
        cfg,
        LossWeights(0.6, 1.0),
        extractor,
        task=PretextTask(kind="none"),
    )
    elapsed = time.monotonic() - started
    gain = report.psnr_db - noisy_input.psnr_db
    assert elapsed < 30 * 60
    assert gain >= 2.0
    passed(
        7,
        f"(a) supervised training raised test PSNR by {gain:.2f} dB "
        f"({noisy_input.psnr_db:.2f} -> {report.psnr_db:.2f}) in {elapsed / 60:.1f} min",
    )


def _write_experiment_spec(path, corpus, pretext):
    path.write_text(
        "\n".join(
            [
                f"dataset.root = {corpus}",
                f"pretext.kind = {pretext}",
                f"pretext.epochs = {PRETEXT_EPOCHS}",
                "experiment.labeled_sizes = 25",
                "experiment.repeats = 5",
                "experiment.seeds = 0,1,2,3,4",
                "split.val_fraction = 0.15",
                "split.test_fraction = 0.2",
                "split.seed = 0",
                "model.layers = 3",
                "model.filters = 16",
                "model.latent_dim = 16",
                "model.bottleneck_hidden = 16",
                "train.batch_size = 10",
                "train.learning_rate = 0.001",
                "train.lr_decay_factor = 0.5",
                "train.lr_decay_every_epochs = 20",
                f"train.epochs = {FINETUNE_EPOCHS}",
                "loss.beta = 0.6",
                "loss.alpha = 1.0",
            ]
        )
        + "\n",
        encoding="utf-8",
    )
    return path


def _best_finetune_val(run_dir) -> float:
    lines = (run_dir / "train_log.csv").read_text().strip().splitlines()[1:]
    values = []
    for line in lines:
        cells = line.split(",")
        if cells[1] == "finetune":
            values.append(float(cells[4]))
    return min(values)


def test_criterion_7b_sswl_beats_no_pretext(phantom_corpus, tmp_path_factory):
    started = time.monotonic()
    out = tmp_path_factory.mktemp("acceptance_7b")
    spec = _write_experiment_spec(out / "spec.txt", phantom_corpus, "sswl")
    assert main(["train", "--spec", str(spec), "--out", str(out)]) == 0
    assert main(["train", "--spec", str(spec), "--out", str(out), "--pretext", "none"]) == 0
    assert main(["report", "--runs", str(out)]) == 0

    wins = 0
    for seed in range(5):
        sswl_val = _best_finetune_val(out / f"sswl_25_{seed}")
        none_val = _best_finetune_val(out / f"none_25_{seed}")
        wins += sswl_val <= none_val
    assert wins >= 3

    sig_lines = (out / "report" / "significance.csv").read_text().strip().splitlines()
    assert len(sig_lines) == 2  # header + the sswl-vs-none row at size 25
    cells = sig_lines[1].split(",")
    assert cells[0] == "25" and {cells[1], cells[2]} == {"none", "sswl"}
    psnr_p = float(cells[7])
    assert 0.0 <= psnr_p <= 1.0
    elapsed = time.monotonic() - started
    passed(
        7,
        f"(b) SSWL-pretrained validation MSE <= no-pretext in {wins}/5 seeds; "
        f"report emitted the Welch test (PSNR p={psnr_p:.3f}) in {elapsed / 60:.1f} min",
    )


def test_criterion_8_reproducibility_and_persistence(phantom_corpus, tmp_path_factory):
    # Byte-identical outputs for identical spec + seeds, via the CLI.
    base = tmp_path_factory.mktemp("acceptance_8")
    spec_text = "\n".join(
        [
            f"dataset.root = {phantom_corpus}",
            "pretext.kind = sswl",
            "pretext.epochs = 1",
            "experiment.labeled_sizes = 6",
            "experiment.repeats = 1",
            "experiment.seeds = 3",
            "split.val_fraction = 0.15",
            "split.test_fraction = 0.2",
            "split.seed = 0",
            "model.layers = 2",
            "model.filters = 4",
            "model.latent_dim = 4",
            "model.bottleneck_hidden = 4",
            "train.batch_size = 4",
            "train.learning_rate = 0.001",
            "train.epochs = 2",
            "loss.beta = 0.1",
            "loss.alpha = 1.0",
        ]
    )
    for name in ("a", "b"):
        run_root = base / name
        spec = base / f"spec_{name}.txt"
        spec.write_text(spec_text + "\n", encoding="utf-8")
        assert main(["train", "--spec", str(spec), "--out", str(run_root)]) == 0
    for artifact in ("best.ckpt", "last.ckpt", "pretext_best.ckpt", "metrics.csv"):
        bytes_a = (base / "a" / "sswl_6_3" / artifact).read_bytes()
        bytes_b = (base / "b" / "sswl_6_3" / artifact).read_bytes()
        assert bytes_a == bytes_b, f"{artifact} differs between identical runs"

    # Mid-phase checkpoint resume continues with an identical loss sequence.
    manifest = ScanManifest.load(phantom_corpus / MANIFEST_NAME)
    split = make_splits(manifest, 6, 0.15, seed=0, test_scan_fraction=0.2)
    pairs = build_denoise_pairs(split.labeled, phantom_corpus, WINDOW)
    val_pairs = build_denoise_pairs(split.validation[:4], phantom_corpus, WINDOW)
    config = tiny_config(input_h=64, input_w=64)
    cfg = TrainConfig(batch_size=4, learning_rate=1e-3, finetune_epochs=6, seed=1)

    straight = init_train_state(config, cfg)
    train_phase(straight, pairs, cfg, LossWeights(0, 0), None, val_pairs, "finetune", epochs=6)

    partial = init_train_state(config, cfg)
    train_phase(partial, pairs, cfg, LossWeights(0, 0), None, val_pairs, "finetune", epochs=3)
    ckpt = base / "mid.ckpt"
    save_train_state(partial, ckpt)
    resumed = load_train_state(ckpt, cfg)
    train_phase(resumed, pairs, cfg, LossWeights(0, 0), None, val_pairs, "finetune", epochs=6)
    assert [r.train_loss for r in resumed.history] == [r.train_loss for r in straight.history]
    for key, tensor in straight.model.state_dict().items():
        assert torch.equal(resumed.model.state_dict()[key], tensor)

    # Slice files round-trip bit-exactly with CRC validation.
    rng = np.random.default_rng(88)
    slc = CTSlice(
        pixels=rng.uniform(-1024, 3071, size=(64, 64)).astype(np.float32),
        scan_id="acc8",
        slice_index=0,
        body_region="abdomen",
        dose=DoseLevel(0.05),
    )
    path = base / "slice.ctsl"
    write_slice(slc, path)
    assert read_slice(path).pixels.tobytes() == slc.pixels.tobytes()
    corrupted = bytearray(path.read_bytes())
    corrupted[-1] ^= 0x40
    path.write_bytes(bytes(corrupted))
    with pytest.raises(Exception, match="CRC"):
        read_slice(path)
    passed(8, "byte-identical reruns, exact mid-phase resume, CRC-validated round-trip")


@pytest.fixture(scope="module")
def micro_sweep_corpora(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance_9")
    main_dir = root / "main"
    cross_dir = root / "cross"
    simulate_phantoms(main_dir, count=30, size=32, dose=0.1, seed=21)
    simulate_phantoms(cross_dir, count=8, size=32, dose=0.1, seed=22, family="chest")
    return root, main_dir, cross_dir


def test_criterion_9_harness_contract(micro_sweep_corpora):
    started = time.monotonic()
    root, main_dir, cross_dir = micro_sweep_corpora
    out = root / "runs"
    spec = root / "spec.txt"
    spec.write_text(
        "\n".join(
            [
                f"dataset.root = {main_dir}",
                f"dataset.cross_domain_root = {cross_dir}",
                "pretext.kind = sswl",
                "pretext.epochs = 1",
                "experiment.labeled_sizes = 4,8",
                "experiment.repeats = 5",
                "experiment.seeds = 0,1,2,3,4",
                "split.val_fraction = 0.15",
                "split.test_fraction = 0.2",
                "split.seed = 0",
                "model.layers = 2",
                "model.filters = 4",
                "model.latent_dim = 4",
                "model.bottleneck_hidden = 4",
                "train.batch_size = 4",
                "train.learning_rate = 0.001",
                "train.epochs = 1",
                "loss.beta = 0.1",
                "loss.alpha = 1.0",
            ]
        )
        + "\n",
        encoding="utf-8",
    )
    assert main(["train", "--spec", str(spec), "--out", str(out)]) == 0
    assert main(["train", "--spec", str(spec), "--out", str(out), "--pretext", "none"]) == 0
    assert main(["report", "--runs", str(out)]) == 0

    report_lines = (out / "report" / "report.csv").read_text().strip().splitlines()
    header = report_lines[0].split(",")
    assert header == [
        "pretext", "labeled_size", "runs",
        "in_psnr", "in_ssim", "in_mse", "in_nrmse",
        "cross_psnr", "cross_ssim", "cross_mse", "cross_nrmse",
    ]
    rows = [line.split(",") for line in report_lines[1:]]
    assert len(rows) == 4  # 2 pretexts x 2 sizes
    assert all(r[2] == "5" for r in rows)

    # Every mean equals the recomputed aggregate of its 5 runs to 1e-12, for
    # both the in-domain and cross-domain groups.
    for row in rows:
        pretext, size = row[0], row[1]
        in_means, cross_means = [], []
        for seed in range(5):
            run_dir = out / f"{pretext}_{size}_{seed}"
            _, mean = read_metrics_csv(run_dir / "metrics.csv")
            in_means.append(mean)
            _, cross_mean = read_metrics_csv(run_dir / "metrics_cross.csv")
            cross_means.append(cross_mean)
        expected_in = aggregate(in_means)
        expected_cross = aggregate(cross_means)
        assert abs(float(row[3]) - expected_in.psnr_db) < 1e-12
        assert abs(float(row[4]) - expected_in.ssim) < 1e-12
        assert abs(float(row[5]) - expected_in.mse) < 1e-12
        assert abs(float(row[6]) - expected_in.nrmse) < 1e-12
        assert abs(float(row[7]) - expected_cross.psnr_db) < 1e-12
        assert abs(float(row[10]) - expected_cross.nrmse) < 1e-12

    sig_lines = (out / "report" / "significance.csv").read_text().strip().splitlines()
    assert len(sig_lines) == 1 + 2  # one none-vs-sswl row per labeled size
    elapsed = time.monotonic() - started
    passed(
        9,
        f"2x2x5 sweep -> 4 mean rows matching recomputed aggregates to 1e-12, "
        f"in-domain + cross-domain groups ({elapsed / 60:.1f} min)",
    )
