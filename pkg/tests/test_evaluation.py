import json

import numpy as np
import pytest
import torch

from cdseg import evaluation as ev
from cdseg.diffusion import ConfigurationError, make_schedule
from cdseg.inference import InferenceSpec
from cdseg.nets import CDSegModel
from cdseg.training import LossConfig, TrainConfig

from test_nets import micro_config
from test_training import labeled_cloud


@pytest.fixture(scope="module")
def sched():
    return make_schedule("linear", 20, (1e-4, 0.02))


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(50)
    return CDSegModel(micro_config(), in_channels=3, num_classes=4)


class TestConfusionMatrix:
    def test_hand_tally(self):
        cm = ev.ConfusionMatrix.empty(2)
        cm.accumulate([0, 0, 1, 1], [0, 1, 1, 1])
        assert cm.counts.tolist() == [[1, 1], [0, 2]]
        assert cm.total == 4

    def test_all_correct_diagonal(self):
        cm = ev.ConfusionMatrix.empty(3)
        cm.accumulate([0, 1, 2, 2], [0, 1, 2, 2])
        assert np.array_equal(cm.counts, np.diag([1, 1, 2]))

    def test_unlabeled_skipped(self):
        cm = ev.ConfusionMatrix.empty(2)
        cm.accumulate([-1, 0, -1], [1, 0, 0])
        assert cm.total == 1

    def test_merge_additivity(self):
        rng = np.random.default_rng(0)
        gt = rng.integers(0, 3, 200)
        pred = rng.integers(0, 3, 200)
        whole = ev.ConfusionMatrix.empty(3).accumulate(gt, pred)
        for cut in rng.integers(1, 199, 10):
            a = ev.ConfusionMatrix.empty(3).accumulate(gt[:cut], pred[:cut])
            b = ev.ConfusionMatrix.empty(3).accumulate(gt[cut:], pred[cut:])
            assert np.array_equal(a.merge(b).counts, whole.counts)
            assert np.array_equal(b.merge(a).counts, whole.counts)

    def test_merge_associative(self):
        rng = np.random.default_rng(1)
        parts = [ev.ConfusionMatrix.empty(2).accumulate(rng.integers(0, 2, 20),
                                                        rng.integers(0, 2, 20))
                 for _ in range(3)]
        left = parts[0].merge(parts[1]).merge(parts[2])
        right = parts[0].merge(parts[1].merge(parts[2]))
        assert np.array_equal(left.counts, right.counts)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="range"):
            ev.ConfusionMatrix.empty(2).accumulate([0, 1], [0, 2])


class TestMetrics:
    def test_perfect(self):
        cm = ev.ConfusionMatrix.empty(3).accumulate([0, 1, 2], [0, 1, 2])
        rep = ev.metrics(cm)
        assert rep.miou == rep.macc == rep.allacc == 1.0

    def test_hand_case(self):
        cm = ev.ConfusionMatrix.empty(2).accumulate([0, 0, 1, 1], [0, 1, 1, 1])
        rep = ev.metrics(cm)
        assert rep.miou == pytest.approx(7 / 12)
        assert rep.allacc == pytest.approx(3 / 4)
        assert rep.macc == pytest.approx(3 / 4)
        assert rep.per_class_iou == [pytest.approx(0.5), pytest.approx(2 / 3)]

    def test_absent_class_excluded(self):
        cm = ev.ConfusionMatrix.empty(5).accumulate([0, 0, 1, 1], [0, 1, 1, 1])
        rep = ev.metrics(cm)
        assert rep.miou == pytest.approx(7 / 12)
        assert rep.per_class_iou[2:] == [None, None, None]

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            n = int(rng.integers(1, 101))
            k = int(rng.integers(2, 6))
            gt = rng.integers(0, k, n)
            pred = rng.integers(0, k, n)
            rep = ev.metrics(ev.ConfusionMatrix.empty(k).accumulate(gt, pred))
            ious = []
            for c in range(k):
                inter = np.sum((gt == c) & (pred == c))
                union = np.sum((gt == c) | (pred == c))
                if union:
                    ious.append(inter / union)
            assert rep.miou == pytest.approx(np.mean(ious))
            assert rep.allacc == pytest.approx(np.mean(gt == pred))

    def test_allacc_permutation_invariant(self):
        rng = np.random.default_rng(3)
        gt = rng.integers(0, 4, 100)
        pred = rng.integers(0, 4, 100)
        base = ev.metrics(ev.ConfusionMatrix.empty(4).accumulate(gt, pred))
        sigma = rng.permutation(4)
        rep = ev.metrics(ev.ConfusionMatrix.empty(4).accumulate(sigma[gt], sigma[pred]))
        assert rep.allacc == pytest.approx(base.allacc)
        assert rep.miou == pytest.approx(base.miou)


class TestNoiseSweep:
    def test_anchor_matches_plain_eval(self, model, sched):
        scenes = [labeled_cloud(np.random.default_rng(s), n=50) for s in range(2)]
        spec = InferenceSpec()
        result = ev.noise_sweep(model, scenes, sched, ["gaussian"], [0.1], spec, seed=4)
        anchor = next(c for c in result.cells if c["tau"] == 0.0)
        direct = ev.evaluate_scenes(model, scenes, sched, spec)
        assert anchor["miou"] == pytest.approx(direct.miou)

    def test_deterministic(self, model, sched):
        scenes = [labeled_cloud(np.random.default_rng(9), n=40)]
        spec = InferenceSpec()
        a = ev.noise_sweep(model, scenes, sched, ["uniform"], [0.5], spec, seed=5)
        b = ev.noise_sweep(model, scenes, sched, ["uniform"], [0.5], spec, seed=5)
        assert a.cells == b.cells

    def test_grid_structure(self, model, sched):
        scenes = [labeled_cloud(np.random.default_rng(10), n=40)]
        result = ev.noise_sweep(model, scenes, sched, ["gaussian", "poisson"],
                                [0.1, 0.5], InferenceSpec(), seed=6)
        keys = {(c["dist"], c["tau"]) for c in result.cells}
        assert keys == {(d, t) for d in ("gaussian", "poisson") for t in (0.0, 0.1, 0.5)}


class TestSparsitySweep:
    def test_full_fraction_equals_standard(self, sched):
        scenes = [labeled_cloud(np.random.default_rng(s), n=40) for s in range(4)]
        val = [labeled_cloud(np.random.default_rng(99), n=40)]

        def train_fn(subset, seed):
            torch.manual_seed(1000 + seed + len(subset))
            return CDSegModel(micro_config(), 3, 4)

        result = ev.sparsity_sweep(train_fn, scenes, val, sched, [1.0, 0.5], [0],
                                   InferenceSpec())
        full = next(c for c in result.cells if c["fraction"] == 1.0)
        direct = ev.evaluate_scenes(train_fn(scenes, 0), val, sched, InferenceSpec())
        assert full["miou"] == pytest.approx(direct.miou)
        assert full["train_scenes"] == 4
        half = next(c for c in result.cells if c["fraction"] == 0.5)
        assert half["train_scenes"] == 2


class TestSweepIO:
    def test_round_trip(self, tmp_path):
        result = ev.SweepResult(kind="noise", cells=[{"dist": "gaussian", "tau": 0.1,
                                                      "miou": 0.5}],
                                metadata={"seed": 1})
        path = tmp_path / "sweep.json"
        ev.save_sweep(result, path)
        back = ev.load_sweep(path)
        assert back.kind == result.kind and back.cells == result.cells

    def test_schema_version_checked(self, tmp_path):
        path = tmp_path / "sweep.json"
        path.write_text(json.dumps({"schema_version": 0, "kind": "noise",
                                    "cells": [], "metadata": {}}))
        with pytest.raises(ConfigurationError, match="schema"):
            ev.load_sweep(path)


class TestEmitPlots:
    def _noise_result(self):
        cells = [{"dist": d, "tau": t, "miou": 0.9 - t, "macc": 0.9 - t,
                  "allacc": 0.95 - t}
                 for d in ("gaussian", "uniform") for t in (0.0, 0.1, 0.5)]
        return ev.SweepResult(kind="noise", cells=cells, metadata={})

    def test_one_file_pair_per_dist_metric(self, tmp_path):
        files, msg = ev.emit_plots(self._noise_result(), tmp_path)
        svgs = [f for f in files if f.suffix == ".svg"]
        txts = [f for f in files if f.suffix == ".txt"]
        assert len(svgs) == len(txts) == 6  # 2 dists x 3 metrics
        assert "6" in msg or "12" in msg

    def test_tables_parse_back(self, tmp_path):
        files, _ = ev.emit_plots(self._noise_result(), tmp_path)
        table = next(f for f in files if f.name == "noise_gaussian_miou.txt")
        rows = [line.split() for line in table.read_text().splitlines()]
        taus = [float(r[0]) for r in rows]
        mious = [float(r[1]) for r in rows]
        assert taus == [0.0, 0.1, 0.5]
        assert mious == [0.9, 0.8, pytest.approx(0.4)]

    def test_empty_sweep(self, tmp_path):
        files, msg = ev.emit_plots(ev.SweepResult(kind="noise", cells=[], metadata={}),
                                   tmp_path)
        assert files == [] and "empty" in msg


class TestFrameworkCompare:
    def test_smoke_with_tiny_budget(self, tmp_path, sched):
        scenes = [labeled_cloud(np.random.default_rng(s), n=40) for s in range(2)]
        val = [labeled_cloud(np.random.default_rng(98), n=40)]
        result = ev.framework_compare(
            micro_config(), scenes, val, sched, LossConfig(lam=0.0, strategy="EW"),
            TrainConfig(batch_size=2, epochs=1), budget=2, val_interval=2,
            outdir=tmp_path, ncf_steps=3, seed=0)
        by_fw = {c["framework"]: c for c in result.cells}
        assert set(by_fw) == {"CNF", "NCF", "plain"}
        assert by_fw["CNF"]["inference_counters"]["nn_encoder"] == 1
        assert by_fw["NCF"]["inference_counters"]["nn_encoder"] == 3
        assert by_fw["CNF"]["inference_steps"] == 1
        assert by_fw["NCF"]["inference_steps"] == 3
        for c in result.cells:
            assert len(c["loss_curve"]) == 2
            assert c["history"]
