"""Acceptance suite: every criterion runs at its stated tolerance and
prints one PASS/FAIL line.  Run with `pytest tests/test_acceptance.py -s`.
"""

import json
import time
from contextlib import contextmanager

import numpy as np
import pytest
from scipy.spatial.distance import cdist

import oracles
from anomseg import bank, calibrate, cli, formats, metrics, morphpost, synth, tiler
from anomseg.bank import FeatureSet, SubsamplingConfig
from anomseg.metrics import ScoredPair
from anomseg.scorer import AnomalyMap


@contextmanager
def criterion(name):
    start = time.monotonic()
    try:
        yield
    except BaseException:
        print(f"[FAIL] {name}")
        raise
    print(f"[PASS] {name} ({time.monotonic() - start:.1f}s)")


def test_grid_properties():
    with criterion("patch grid: 1000 randomized (L, P, O) geometries, < 1 s"):
        rng = np.random.default_rng(2024)
        start = time.monotonic()
        checked = 0
        while checked < 1000:
            patch = int(rng.integers(2, 800))
            overlap = int(rng.integers(0, max(1, patch // 2)))
            if patch <= 2 * overlap:
                continue
            length = int(rng.integers(patch, 8 * patch + 1))
            starts = tiler.compute_axis_starts(length, patch, overlap)
            assert starts[0] == 0
            assert starts[-1] + patch - 1 == length - 1
            expected_n = -(-(length - patch) // (patch - 2 * overlap)) + 1
            assert len(starts) == expected_n
            for a, b in zip(starts, starts[1:]):
                assert b - a <= patch - 2 * overlap
            checked += 1
        assert time.monotonic() - start < 1.0


def test_subsampling_oracle():
    with criterion("subsampling equals brute force on 200 random sets, < 60 s"):
        rng = np.random.default_rng(7)
        start = time.monotonic()
        for _ in range(200):
            n = int(rng.integers(120, 1001))
            d = int(rng.integers(2, 65))
            k = int(rng.integers(1, min(100, n - 1) + 1))
            target = int(rng.integers(1, n + 1))
            data = rng.normal(0, 1, (n, d)).astype(np.float32)
            got = bank.select_prototypes(FeatureSet(data), SubsamplingConfig(k=k, target_size=target))
            # independent brute force: full cdist matrix, full sort, stable order
            dist = cdist(data.astype(np.float64), data.astype(np.float64))
            np.fill_diagonal(dist, np.inf)
            knn = np.sort(dist, axis=1)[:, :k]
            scores = (knn < knn.mean()).sum(axis=1)
            ref = data[np.argsort(scores, kind="stable")[:target]]
            assert np.array_equal(got, ref)
        assert time.monotonic() - start < 60.0


def test_morphology_oracles():
    with criterion("closing + hole filling match naive oracles, < 60 s"):
        rng = np.random.default_rng(99)
        start = time.monotonic()
        angles = rng.uniform(0.0, 180.0, 8)
        radius = 26
        elements = [morphpost.line_element(radius, float(a)) for a in angles]
        for i in range(500):
            mask = rng.random((64, 64)) < rng.uniform(0.2, 0.7)
            for elem in elements:
                got = morphpost.close_with_element(mask, elem)
                ref = oracles.close_naive(mask, elem.offsets, radius, radius + 1)
                assert np.array_equal(got, ref)
            assert np.array_equal(morphpost.fill_holes(mask), oracles.fill_holes_bfs(mask))
        assert time.monotonic() - start < 60.0


def test_metrics_oracles():
    with criterion("f1 + capped AU-ROC match sweep references (1e-9); constant = 0.5"):
        rng = np.random.default_rng(5)
        for _ in range(100):
            rows, cols = int(rng.integers(4, 20)), int(rng.integers(4, 20))
            pred = rng.random((rows, cols)) < 0.5
            gt = rng.random((rows, cols)) < rng.uniform(0.1, 0.6)
            if not gt.any() or gt.all():
                continue
            counts = metrics.accumulate_counts(pred, gt)
            assert (counts.tp, counts.fp, counts.fn, counts.tn) == oracles.confusion_loop(pred, gt)
            tp, fp, fn, _ = oracles.confusion_loop(pred, gt)
            ref_f1 = 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)
            assert abs(metrics.f1(counts) - ref_f1) < 1e-9
            scores = np.round(rng.random((rows, cols)), 2)
            got = metrics.auroc_capped([ScoredPair(scores, gt)], 0.05)
            ref = oracles.auroc_capped_sweep(scores, gt, 0.05)
            assert abs(got - ref) < 1e-9
        constant = ScoredPair(np.full((10, 10), 0.3), np.eye(10, dtype=bool))
        assert metrics.auroc_capped([constant], 0.05) == 0.5


def test_calibration_contract():
    with criterion("gain 1.0 flags 5% +- 0.5%; gain 1.4 flags < 5%; monotone"):
        rng = np.random.default_rng(12)
        maps = [AnomalyMap(rng.random((100, 100)).astype(np.float32)) for _ in range(5)]
        pooled = np.concatenate([m.scores.ravel() for m in maps])
        theta1 = calibrate.estimate_threshold(maps, p=0.95, gain=1.0).threshold
        frac1 = float((pooled > theta1).mean())
        assert abs(frac1 - 0.05) <= 0.005
        theta14 = calibrate.estimate_threshold(maps, p=0.95, gain=1.4).threshold
        assert float((pooled > theta14).mean()) < 0.05
        thetas_p = [calibrate.estimate_threshold(maps, p=p, gain=1.0).threshold
                    for p in (0.5, 0.75, 0.9, 0.95, 0.99, 1.0)]
        assert all(b >= a for a, b in zip(thetas_p, thetas_p[1:]))
        thetas_g = [calibrate.estimate_threshold(maps, p=0.95, gain=g).threshold
                    for g in (1.0, 1.1, 1.3, 1.5)]
        assert all(b > a for a, b in zip(thetas_g, thetas_g[1:]))


E2E_CONFIG = {
    "patch_size": 128,
    "min_overlap": 32,
    "layers": [7, 15, 23, 31],
    "k": 100,
    "target_size": 800,
    "subset_count": 1,
    "seed": 0,
}


def run_pipeline(root, jobs=1, subset_count=1):
    """synth -> build-bank -> calibrate -> infer -> evaluate, via the CLI."""
    root.mkdir(parents=True, exist_ok=True)
    config_path = root / "config.json"
    config_path.write_text(json.dumps(dict(E2E_CONFIG, subset_count=subset_count)))
    argv = lambda *a: [str(x) for x in a]
    assert cli.main(argv("synth", "--output", root / "data", "--seed", 0)) == 0
    assert cli.main(argv(
        "build-bank", "--manifest", root / "data" / "train.json",
        "--config", config_path, "--output", root / "bank.sadb")) == 0
    assert cli.main(argv(
        "calibrate", "--manifest", root / "data" / "train.json", "--bank", root / "bank.sadb",
        "--config", config_path, "--output", root / "cal.json", "--jobs", jobs)) == 0
    assert cli.main(argv(
        "infer", "--manifest", root / "data" / "test.json", "--bank", root / "bank.sadb",
        "--calibration", root / "cal.json", "--config", config_path,
        "--output", root / "pred", "--jobs", jobs)) == 0
    assert cli.main(argv(
        "evaluate", "--pred", root / "pred", "--manifest", root / "data" / "test.json",
        "--output", root / "report.json")) == 0
    return json.loads((root / "report.json").read_text())


def artifact_digests(root):
    return {
        str(p.relative_to(root)): formats.file_sha256(p)
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


@pytest.fixture(scope="module")
def e2e_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("e2e")
    start = time.monotonic()
    report_a = run_pipeline(base / "run_a", jobs=1)
    report_b = run_pipeline(base / "run_b", jobs=1)
    report_c = run_pipeline(base / "run_c", jobs=8)
    report_s4 = run_pipeline(base / "run_s4", jobs=1, subset_count=4)
    elapsed = time.monotonic() - start
    return {
        "base": base,
        "reports": (report_a, report_b, report_c, report_s4),
        "elapsed": elapsed,
    }


def test_end_to_end_synthetic(e2e_runs):
    with criterion("e2e synthetic: F1 >= 0.90, clean masks empty, "
                   "deterministic, < 5 min"):
        report_a, report_b, report_c, _ = e2e_runs["reports"]
        base = e2e_runs["base"]

        assert report_a["per_class"]["synthetic"]["f1"] >= 0.90

        clean_pixels = 0
        for i in range(20):
            mask = formats.read_mask(base / "run_a" / "pred" / f"test_clean_{i:03d}.mask.png")
            clean_pixels += int(mask.sum())
        assert clean_pixels == 0

        # masks cover >= 90% of the ground-truth tokens
        from anomseg import scorer

        covered = wanted = 0
        for i in range(20):
            mask = formats.read_mask(base / "run_a" / "pred" / f"test_anom_{i:03d}.mask.png")
            gt = formats.read_mask(base / "run_a" / "data" / "gt" / f"test_anom_{i:03d}.png")
            gt_up = scorer.resize_nearest(gt, *mask.shape)
            covered += int((mask & gt_up).sum())
            wanted += int(gt_up.sum())
        assert covered / wanted >= 0.90

        digests_a = artifact_digests(base / "run_a")
        assert digests_a == artifact_digests(base / "run_b")  # rerun
        assert digests_a == artifact_digests(base / "run_c")  # jobs 1 vs 8
        assert e2e_runs["elapsed"] < 300.0


def test_subsetwise_subsampling(e2e_runs):
    with criterion("subset-wise: planted outliers retained; e2e F1 drop < 0.02"):
        rng = np.random.default_rng(3)
        dense = np.concatenate([
            rng.normal(0.0, 0.05, (600, 4)),
            rng.normal(8.0, 0.05, (600, 4)),
        ])
        planted = np.stack([
            np.full(4, 200.0 + 60.0 * i) * np.sign(rng.normal(0, 1, 4)) for i in range(24)
        ])
        data = np.concatenate([dense, planted]).astype(np.float32)
        data = data[rng.permutation(len(data))]
        config = SubsamplingConfig(k=10, target_size=48, subset_count=4, seed=5)
        selected = bank.select_prototypes_subsetwise(FeatureSet(data), config)
        selected_set = {tuple(v) for v in selected}
        for v in planted.astype(np.float32):
            assert tuple(v) in selected_set

        report_s1 = e2e_runs["reports"][0]
        report_s4 = e2e_runs["reports"][3]
        f1_s1 = report_s1["per_class"]["synthetic"]["f1"]
        f1_s4 = report_s4["per_class"]["synthetic"]["f1"]
        assert f1_s1 - f1_s4 < 0.02
