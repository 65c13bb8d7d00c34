"""Acceptance suite: each criterion at its stated tolerance, one PASS/FAIL line apiece.

Run ``pytest tests/test_acceptance.py -v`` to see the verdict lines. The
full-scale training run (criteria 4 and 5) takes a few minutes on one core.
"""
import os

import numpy as np
import pytest

from lucidcam.cam import cam_gap_head, grad_cam, localization_score
from lucidcam.cli import run_cli
from lucidcam.data import (DataGenConfig, Sample, filter_outliers, generate_dataset, load_dataset_dir,
                           stratified_split)
from lucidcam.errors import FormatError
from lucidcam.model import grad_check, init_params, predict_logits, small_cam_net
from lucidcam.optim import (LossSmoother, LRCurve, OneCycleSchedule, TrainConfig, one_cycle, params_hash, train,
                            wd_grid_search)
from lucidcam.persist import checkpoint_bytes, load_checkpoint, parse_checkpoint, read_metrics, save_checkpoint
from lucidcam.rng import SplitMix64, derive_seed

# Localization floors observed over three seeded runs of the criterion-4
# pipeline (seeds 42, 43, 44), minus five points.
HIT_FLOOR = 1.0 - 0.05
MASS_FLOOR = 0.884 - 0.05


@pytest.fixture
def verdict(capsys):
    def report(number, ok, text):
        name = f"criterion {number}" if isinstance(number, int) else number
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {text}")
        assert ok, f"{name}: {text}"
    return report


def _img(seed, size):
    return np.random.default_rng(seed).random((3, size, size)).astype(np.float32)


def test_criterion_01_gradient_check(verdict):
    spec = small_cam_net((3, 16, 16))
    errors = [grad_check(spec, init_params(spec, s), _img(s, 16), eps=1e-2, seed=s) for s in range(50)]
    worst = max(errors)
    verdict(1, worst <= 1e-3, f"grad_check over 50 models, eps 1e-2*scale: worst {worst:.3g}, "
                              f"{sum(e <= 1e-3 for e in errors)}/50 within 1e-3")


def test_criterion_02_cam_equals_grad_cam(verdict):
    spec = small_cam_net()
    worst = 0.0
    for s in range(20):
        params, x = init_params(spec, s), _img(1000 + s, 96)
        for c in (0, 1):
            worst = max(worst, float(np.max(np.abs(grad_cam(spec, params, x, c).values
                                                   - cam_gap_head(spec, params, x, c).values))))
    verdict(2, worst <= 1e-5, f"CAM vs last-conv Grad-CAM, 20 models x 2 classes: max |diff| {worst:.3g}")


def test_criterion_03_one_cycle_shape(verdict):
    problems = []
    for total in (10, 63, 100, 250, 1001):
        s = OneCycleSchedule(total, 2e-2)
        lrs, moms = map(np.array, zip(*(one_cycle(i, s) for i in range(total + 1))))
        peak = int(np.floor(0.5 * total + 0.5))  # half-up, as everywhere in the package
        rises, falls = np.diff(lrs[:peak + 1]), np.diff(lrs[peak:])
        if lrs[0] != 2e-2 / 25:
            problems.append(f"{total}: lr(0)={lrs[0]!r}")
        if lrs[peak] != 2e-2:
            problems.append(f"{total}: lr(peak)={lrs[peak]!r}")
        if (rises < 0).any() or (falls > 0).any():
            problems.append(f"{total}: not unimodal")
        if int(np.argmin(moms)) != int(np.argmax(lrs)) or moms[peak] != moms.min():
            problems.append(f"{total}: momentum minimum off the lr peak")
    verdict(3, not problems, "one-cycle endpoints, unimodality, anti-phase momentum"
            + (f": {problems}" if problems else " hold for 5 cycle lengths"))


@pytest.fixture(scope="module")
def reference_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("reference")
    data, model = root / "data", root / "model.lcam"
    assert run_cli(["gen-data", "--out", str(data), "--n-train", "2000", "--n-valid", "500", "--size", "96",
                    "--pos-frac", "0.4", "--seed", "42"]) == 0
    assert run_cli(["train", "--data", str(data), "--max-lr", "2e-2", "--wd", "1e-4", "--epochs1", "1",
                    "--epochs2", "3", "--batch", "32", "--seed", "42", "--out", str(model),
                    "--log", str(root / "metrics.jsonl")]) == 0
    return data, model, root / "metrics.jsonl"


@pytest.mark.slow
def test_criterion_04_accuracy_surrogate(verdict, reference_run):
    _, model, _ = reference_run
    acc = load_checkpoint(str(model))[2]["val_acc"]
    verdict(4, acc >= 0.95, f"synthetic corpus 2000/500, seed 42, epochs 1+3: validation accuracy {acc:.4f}")


@pytest.mark.slow
def test_criterion_05_localization(verdict, reference_run):
    data, model, _ = reference_run
    spec, params, _ = load_checkpoint(str(model))
    valid, _ = filter_outliers(load_dataset_dir(str(data / "valid")))
    logits = predict_logits(spec, params, np.stack([s.image for s in valid]))
    hits, mass = [], []
    for s, lg in zip(valid, logits):
        if s.label == 1 and int(np.argmax(lg)) == 1:
            m, h = localization_score(grad_cam(spec, params, s.image, 1), s.mask, 8)
            hits.append(h)
            mass.append(m)
    hit, frac = float(np.mean(hits)), float(np.mean(mass))
    ok = hit >= max(0.70, HIT_FLOOR) and frac >= max(0.50, MASS_FLOOR)
    verdict(5, ok, f"{len(hits)} positives: hit rate {hit:.3f} (need >= {max(0.70, HIT_FLOOR):.2f}), "
                   f"mean mass {frac:.3f} (need >= {max(0.50, MASS_FLOOR):.2f})")


@pytest.mark.slow
def test_phase_two_loss_declines(verdict, reference_run):
    report = read_metrics(str(reference_run[2]))
    smoother = LossSmoother()
    smoothed = [smoother.update(s.train_loss) for s in report.steps if s.phase == 2]
    verdict("training invariant", smoothed[-1] < smoothed[0],
            f"phase-2 smoothed training loss {smoothed[0]:.4f} at start -> {smoothed[-1]:.4f} at end")


def test_criterion_06_phase_one_freeze(verdict):
    spec = small_cam_net((3, 32, 32))
    tr = generate_dataset(DataGenConfig(64, size=32, seed=1))
    va = generate_dataset(DataGenConfig(16, size=32, seed=2))
    params = init_params(spec, 1)
    convs = [n for n in params if n.startswith("conv")]
    before, head = params_hash(params, convs), params_hash(params, spec.head_param_names())
    train(spec, params, tr, va, TrainConfig(epochs_phase1=2, epochs_phase2=0, batch_size=16))
    same = params_hash(params, convs) == before
    moved = params_hash(params, spec.head_param_names()) != head
    verdict(6, same and moved, f"conv tensors identical after phase 1: {same}; head updated: {moved}")


def test_criterion_07_weight_decay_grid(verdict):
    curves = {1e-2: LRCurve([1e-6, 1e-4, 1e-3], [0.7, 0.5, 9.9], True, None),
              1e-4: LRCurve([1e-6, 1e-2, 1e-1], [0.7, 0.3, 9.9], True, None),
              1e-6: LRCurve([1e-6, 1e-2, 1e-1], [0.7, 0.3, 9.9], True, None)}
    spec = small_cam_net((3, 16, 16))
    chosen, _ = wd_grid_search(spec, init_params(spec, 0), [], finder=lambda sp, p, d, wd: curves[wd])
    verdict(7, chosen == 1e-4, f"crafted curves select wd {chosen!r}")


def test_criterion_08_outlier_filter(verdict):
    bad = []
    for n, seed in ((2000, 42), (500, derive_seed(42, 1))):
        cfg = DataGenConfig(n, seed=seed)
        data = generate_dataset(cfg)
        planted = {s.id for s in data if s.kind in ("bright", "dark")}
        removed = {i for i, _ in filter_outliers(data)[1]}
        if removed != planted:
            bad.append((n, sorted(removed ^ planted)))
    verdict(8, not bad, "filter removes exactly the planted bright/dark images on both default splits"
            + (f": mismatches {bad}" if bad else ""))


def _pipeline(root):
    data = root / "data"
    assert run_cli(["gen-data", "--out", str(data), "--n-train", "64", "--n-valid", "24", "--size", "32",
                    "--seed", "5", "--workers", "1"]) == 0
    assert run_cli(["train", "--data", str(data), "--epochs1", "1", "--epochs2", "1", "--batch", "16", "--seed", "5",
                    "--out", str(root / "m.lcam"), "--log", str(root / "m.jsonl")]) == 0
    for i, name in enumerate(sorted(os.listdir(data / "valid" / "images"))[:3]):
        assert run_cli(["explain", "--model", str(root / "m.lcam"), "--image", str(data / "valid" / "images" / name),
                        "--panel", "--out", str(root / f"heat{i}.png")]) == 0
    assert run_cli(["top-losses", "--data", str(data), "--model", str(root / "m.lcam"), "--grad-cam",
                    "--out", str(root / "top.png")]) == 0
    files = {}
    for dirpath, _, names in os.walk(root):
        for n in names:
            p = os.path.join(dirpath, n)
            files[os.path.relpath(p, root)] = open(p, "rb").read()
    return files


def test_criterion_09_determinism(verdict, tmp_path, capsys):
    a, b = _pipeline(tmp_path / "a"), _pipeline(tmp_path / "b")
    capsys.readouterr()
    differ = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    kinds = {k.rsplit(".", 1)[-1] for k in a}
    verdict(9, not differ and {"png", "lcam", "jsonl"} <= kinds,
            f"two seeded pipeline runs: {len(a)} files compared ({', '.join(sorted(kinds))}), "
            f"{len(differ)} differ" + (f": {differ[:5]}" if differ else ""))


def test_criterion_10_persistence(verdict, tmp_path):
    spec = small_cam_net(input_norm=([0.8, 0.5, 0.7], [0.1, 0.15, 0.1]))
    params = init_params(spec, 3)
    images = np.stack([_img(s, 96) for s in range(10)])
    path = str(tmp_path / "m.lcam")
    save_checkpoint(spec, params, {"k": 1}, path)
    spec2, params2, _ = load_checkpoint(path)
    same = predict_logits(spec2, params2, images).tobytes() == predict_logits(spec, params, images).tobytes()
    blob = checkpoint_bytes(spec, params)
    rejected = []
    for label, bad in (("magic", b"NOPE!\n" + blob[6:]), ("truncated", blob[: len(blob) // 2])):
        try:
            parse_checkpoint(bad)
        except FormatError:
            rejected.append(label)
    verdict(10, same and rejected == ["magic", "truncated"],
            f"logits bit-identical on 10 images: {same}; format errors raised for {rejected}")


def test_criterion_11_stratified_ratio(verdict):
    worst = 0.0
    z = np.zeros((3, 1, 1), np.float32)
    for seed in range(100):
        r = SplitMix64(seed)
        n, p, f = r.randint(20, 500), r.uniform(0.1, 0.9), r.uniform(0.1, 0.4)
        n_pos = max(1, round(n * p))
        data = [Sample(z, int(i < n_pos), id=f"{i:04d}") for i in range(n)]
        tr, va = stratified_split(data, f, seed)
        dev = abs(np.mean([s.label for s in tr]) - np.mean([s.label for s in va]))
        worst = max(worst, dev * min(len(tr), len(va)))
    verdict(11, worst <= 1.0, f"100 seeded splits: worst ratio gap x min split size = {worst:.3f} (need <= 1)")
