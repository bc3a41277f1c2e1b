"""Acceptance suite: one test per criterion, each printing a PASS line.

Criterion 1 is the desk-scale substitute for the paper-sized experiment: a
fixed-seed synthetic 7+2-language corpus (20 minutes per language) trained
with the tdnn-desk config must reach >= 90% closed-set in-set accuracy on the
held-out split in under 15 minutes end to end.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from openlid.archive import read_archive
from openlid.cli import default_sweep_grid, main
from openlid.corpus import Manifest, emit_kaldi_dir, emit_lexicon, top_words
from openlid.features import FrameConfig, dct_matrix, hz_to_mel, pitch_features, power_spectrum
from openlid.lda import apply_lda, fit_lda, load_lda, regularize, scatter_matrices
from openlid.models import build_crnn, build_tdnn, CrnnConfig, TdnnConfig, load_checkpoint, predict_utterance
from openlid.neural import GRAD_CHECKS, grad_check
from openlid.openset import classify_open

from conftest import record
from oracles import gaussian_classes, naive_counting_oracle, naive_power_spectrum

FULL_RUN_SEED = 42
FULL_RUN_MINUTES = 20.0
TIME_BUDGET_SECONDS = 900.0


def _passed(criterion, detail=""):
    print(f"ACCEPTANCE {criterion}: PASS {detail}".rstrip())


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    """The end-to-end synthetic experiment shared by criteria 1 and 2."""
    workdir = tmp_path_factory.mktemp("full_run")
    started = time.monotonic()
    for argv in (
        ["synth", "--seed", str(FULL_RUN_SEED), "--minutes", str(FULL_RUN_MINUTES),
         "--langs-in", "7", "--langs-out", "2"],
        ["features"],
        ["lda", "--dim", "6"],
        ["train", "--model", "tdnn-desk", "--epochs", "12", "--seed", "0"],
        ["sweep"],
    ):
        code = main(["--workdir", str(workdir), *argv])
        assert code == 0, f"stage {argv[0]} failed with exit code {code}"
    elapsed = time.monotonic() - started
    return workdir, elapsed


def _test_split_predictions(workdir: Path):
    manifest = Manifest.load(workdir / "manifest.tsv")
    transform = load_lda(workdir / "lda.lidl")
    model, header = load_checkpoint(workdir / "model.lidm")
    class_names = header["train_meta"]["class_labels"]
    test = manifest.subset(lambda r: r.split == "test")
    feats = read_archive(workdir / "feats.lidf", [r.id for r in test])
    probs, references = [], []
    for r in test:
        x = apply_lda(feats[r.id].data, transform).astype(np.float32)
        probs.append(predict_utterance(model, x))
        references.append(class_names.index(r.language.name)
                          if r.language.role == "in_set" else None)
    return np.vstack(probs), references


def test_c1_closed_set_accuracy_at_desk_scale(full_run):
    workdir, elapsed = full_run
    probs, references = _test_split_predictions(workdir)
    in_set = [(p, ref) for p, ref in zip(probs, references) if ref is not None]
    assert len(in_set) > 0
    correct = sum(int(np.argmax(p)) == ref for p, ref in in_set)
    accuracy = 100.0 * correct / len(in_set)
    assert accuracy >= 90.0, f"closed-set in-set accuracy {accuracy:.1f}% < 90%"
    assert elapsed < TIME_BUDGET_SECONDS, f"pipeline took {elapsed:.0f}s >= {TIME_BUDGET_SECONDS}s"
    _passed(1, f"(in-set accuracy {accuracy:.1f}% on {len(in_set)} utterances, "
               f"pipeline {elapsed:.0f}s)")


def test_c2_open_set_threshold_pattern(full_run):
    workdir, _ = full_run
    lines = (workdir / "sweep.csv").read_text().splitlines()
    assert lines[0] == "threshold,overall,in_set,out_of_set"
    rows = [line.split(",") for line in lines[1:]]
    taus = [float(r[0]) for r in rows]
    assert taus == pytest.approx(default_sweep_grid())

    in_set = [float(r[2]) for r in rows]
    oos = [float(r[3]) for r in rows]
    assert all(b <= a for a, b in zip(in_set, in_set[1:])), "in-set accuracy must be non-increasing"
    assert all(b >= a for a, b in zip(oos, oos[1:])), "out-of-set accuracy must be non-decreasing"

    # brute-force per-threshold re-evaluation must reproduce the CSV exactly
    probs, references = _test_split_predictions(workdir)
    max_probs = probs.max(axis=1)
    argmaxes = probs.argmax(axis=1)
    for row, tau in zip(rows, taus):
        n_in, n_out, ci, cr = naive_counting_oracle(max_probs, argmaxes, references, tau)
        expected = [
            f"{100.0 * (ci + cr) / (n_in + n_out):.1f}",
            f"{100.0 * ci / n_in:.1f}",
            f"{100.0 * cr / n_out:.1f}",
        ]
        assert row[1:] == expected, f"threshold {tau}: CSV {row[1:]} != oracle {expected}"
    _passed(2, f"(monotone over {len(rows)} thresholds, CSV == oracle)")


def test_c3_gradient_suite():
    started = time.monotonic()
    worst = {}
    for op in ("linear", "conv2d_2x2", "tdnn_layer", "lstm_cell",
               "lstm_bidirectional", "attention_pool", "softmax_cross_entropy"):
        assert op in GRAD_CHECKS
        errs = [grad_check(op, seed=seed) for seed in range(5)]
        worst[op] = max(errs)
        assert worst[op] <= 1e-3, (op, errs)
    elapsed = time.monotonic() - started
    assert elapsed < 60.0, f"gradient suite took {elapsed:.1f}s"
    _passed(3, f"(max rel err {max(worst.values()):.2e}, {elapsed:.1f}s)")


def test_c4_dsp_oracles():
    # FFT vs naive DFT across every power-of-two size
    rng = np.random.default_rng(0)
    for nfft in (8, 16, 32, 64, 128, 256, 512, 1024):
        frames = rng.standard_normal((2, nfft))
        fast = power_spectrum(frames, nfft)
        slow = naive_power_spectrum(frames, nfft)
        rel = np.max(np.abs(fast - slow) / np.maximum(np.abs(slow), 1e-12))
        assert rel <= 1e-6, (nfft, rel)

    # Parseval
    x = rng.standard_normal(1024)
    spec = np.fft.fft(x)
    lhs = np.sum(x ** 2)
    rhs = np.sum(np.abs(spec) ** 2) / x.size
    assert abs(lhs - rhs) / lhs <= 1e-6

    # DCT orthonormality
    d = dct_matrix(40)
    assert np.max(np.abs(d @ d.T - np.eye(40))) <= 1e-6

    # mel scale closed form
    assert abs(hz_to_mel(1000.0) - 1000.0) <= 0.2

    # pitch tracker on a pure 100 Hz sine
    sr = 16000
    t = np.arange(sr) / sr
    from openlid.corpus import AudioClip
    feats = pitch_features(AudioClip(0.5 * np.sin(2 * np.pi * 100.0 * t), sr), FrameConfig())
    voiced = feats[feats[:, 0] >= 0.5]
    median_f0 = np.median(np.exp(voiced[:, 1]))
    assert abs(median_f0 - 100.0) <= 2.0
    _passed(4, f"(median f0 {median_f0:.2f} Hz)")


def test_c5_lda_criteria():
    rng = np.random.default_rng(123)
    frames, labels = gaussian_classes(rng, n_classes=7, dim=55, per_class=150,
                                      mean_scale=10.0, sigma=1.0)
    transform = fit_lda(frames, labels, dim=6, shrinkage=0.01)
    projected = apply_lda(frames, transform)

    centroids = np.stack([projected[labels == c].mean(axis=0) for c in range(7)])
    d2 = ((projected[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    accuracy = np.mean(np.argmin(d2, axis=1) == labels)
    assert accuracy >= 0.99

    s_w, _, _, _ = scatter_matrices(projected, labels)
    pooled = s_w / (projected.shape[0] - 7)
    assert np.max(np.abs(np.diag(pooled) - 1.0)) <= 1e-3

    t1 = fit_lda(frames, labels, dim=1, shrinkage=0.01)
    s_w_raw, s_b, _, _ = scatter_matrices(frames, labels)
    w = t1.projection[:, 0]
    quotient = (w @ s_b @ w) / (w @ regularize(s_w_raw, 0.01) @ w)
    rel = abs(quotient - t1.eigenvalues[0]) / t1.eigenvalues[0]
    assert rel <= 1e-6
    _passed(5, f"(NCM accuracy {100 * accuracy:.2f}%, Rayleigh rel err {rel:.1e})")


def test_c6_metrics_oracle():
    rng = np.random.default_rng(99)
    for _ in range(1000):
        k = int(rng.integers(2, 9))
        n = int(rng.integers(2, 12))
        probs = rng.dirichlet(np.ones(k), size=n)
        references = [None if rng.random() < 0.5 else int(rng.integers(k)) for _ in range(n)]
        if not any(r is None for r in references):
            references[0] = None
        if all(r is None for r in references):
            references[-1] = 0
        tau = float(rng.uniform(0.0, 1.0))
        decisions = [classify_open(p, tau) for p in probs]
        from openlid.openset import evaluate
        report = evaluate(decisions, references, tau)
        oracle = naive_counting_oracle(probs.max(axis=1), probs.argmax(axis=1), references, tau)
        assert (report.n_in, report.n_out, report.correct_in, report.correct_reject) == oracle

    # boundary rule: a probability exactly at the threshold is accepted
    boundary = classify_open(np.array([0.7, 0.2, 0.1]), 0.7)
    assert not boundary.rejected and boundary.label == 0
    _passed(6, "(1000 randomized sets exact, boundary accepts)")


def test_c7_determinism(tmp_path):
    artifacts = ("feats.lidf", "feats.lidf.idx", "model.lidm", "sweep.csv", "sweep.svg")
    outputs = {}
    for run_name in ("one", "two"):
        workdir = tmp_path / run_name
        for argv in (
            ["synth", "--seed", "5", "--minutes", "0.2", "--langs-in", "3", "--langs-out", "1"],
            ["features"],
            ["lda", "--dim", "2"],
            ["train", "--model", "tdnn-desk", "--epochs", "3", "--seed", "1"],
            ["sweep"],
        ):
            assert main(["--workdir", str(workdir), *argv]) == 0
        outputs[run_name] = {name: (workdir / name).read_bytes() for name in artifacts}
    for name in artifacts:
        assert outputs["one"][name] == outputs["two"][name], f"{name} differs between runs"
    _passed(7, f"({len(artifacts)} artifacts bitwise identical)")


def test_c8_shape_contracts():
    tdnn = build_tdnn(TdnnConfig(), input_dim=6, seed=0)
    assert tdnn.min_frames == 15
    with pytest.raises(ValueError, match="15"):
        tdnn.forward(np.zeros((14, 6), dtype=np.float32))

    rng = np.random.default_rng(0)
    for d in (5, 6, 9):
        cfg = CrnnConfig(conv_channels=(2, 4), lstm_hidden=8, attention_dim=4, n_classes=7)
        crnn = build_crnn(cfg, input_dim=d, seed=0)
        assert crnn.lstm_input_dim == cfg.conv_channels[1] * (d - 2) + d

    crnn = build_crnn(CrnnConfig(conv_channels=(2, 4), lstm_hidden=8, attention_dim=4,
                                 n_classes=7), input_dim=6, seed=0)
    for seed in range(5):
        x = np.random.default_rng(seed).standard_normal((12, 6)).astype(np.float32)
        crnn.forward(x)
        assert abs(crnn.last_alpha.sum() - 1.0) <= 1e-6
    _passed(8, "(receptive field 15, width formula, attention weights normalized)")


def test_c9_golden_files(tmp_path):
    golden = Path(__file__).parent / "golden"
    manifest = Manifest([
        record("u1", duration=1.0, transcript="hola mundo"),
        record("u2", duration=2.0, transcript="ba ba hola"),
        record("u3", duration=0.5, transcript="ab"),
    ])
    emit_kaldi_dir(manifest, tmp_path)
    words = top_words([r.transcript for r in manifest], 1000)
    assert words == ["ba", "hola", "ab", "mundo"]
    emit_lexicon(words, tmp_path)
    for name in ("wav.scp", "text", "utt2spk", "corpus.txt", "lexicon.txt",
                 "nonsilence_phones.txt", "silence_phones.txt", "optional_silence.txt"):
        assert (tmp_path / name).read_bytes() == (golden / name).read_bytes(), name
    _passed(9, "(8 files byte-identical to fixtures)")
