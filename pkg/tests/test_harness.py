import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from svda_lab.datagen import DatasetSpec
from svda_lab.harness import (
    Adam,
    DepthDataset,
    EvaluationError,
    TrainConfig,
    TrainingDiverged,
    compare,
    compute_metrics,
    evaluate,
    mean_metrics,
    train,
    trends,
)
from svda_lab.model import ConfigError, DepthViT, ModelConfig
from svda_lab.numerics import Tensor

TINY = ModelConfig(image_h=16, image_w=16, patch_size=4, d_model=8, num_layers=2, num_heads=2, d_k=4, mlp_hidden=16)
TINY_DATA = DatasetSpec(count=12, val_count=4, height=16, width=16)


def scalar_metrics(pred, gt):
    n = len(pred)
    e = [math.log(p) - math.log(g) for p, g in zip(pred, gt)]
    me = sum(e) / n
    return dict(
        abs_rel=sum(abs(p - g) / g for p, g in zip(pred, gt)) / n,
        sq_rel=sum((p - g) ** 2 / g for p, g in zip(pred, gt)) / n,
        rmse=math.sqrt(sum((p - g) ** 2 for p, g in zip(pred, gt)) / n),
        rmse_log=math.sqrt(sum(v * v for v in e) / n),
        srmse_log=math.sqrt(sum((v - me) ** 2 for v in e) / n),
        delta1=sum(max(p / g, g / p) < 1.25 for p, g in zip(pred, gt)) / n,
    )


positive = hnp.arrays(np.float64, st.integers(1, 30), elements=st.floats(1e-3, 10))


class TestMetrics:
    def test_identity(self):
        gt = np.random.default_rng(0).uniform(0.1, 1, size=(4, 5))
        m = compute_metrics(gt, gt)
        assert m.abs_rel == m.sq_rel == m.rmse == m.rmse_log == m.srmse_log == 0.0
        assert m.delta1 == 1.0

    def test_uniform_scaling(self):
        gt = np.random.default_rng(1).uniform(0.1, 1, size=(4, 5))
        m = compute_metrics(1.3 * gt, gt)
        assert m.delta1 == 0.0
        assert m.abs_rel == pytest.approx(0.3, abs=1e-12)
        assert m.srmse_log < 1e-12

    def test_hand_pair(self):
        oracle = scalar_metrics([1.0, 2.0], [2.0, 2.0])
        assert oracle["abs_rel"] == 0.25 and oracle["delta1"] == 0.5
        assert oracle["rmse"] == pytest.approx(math.sqrt(0.5), abs=1e-15)
        m = compute_metrics(np.array([1.0, 2.0]), np.array([2.0, 2.0]))
        for k, v in oracle.items():
            assert getattr(m, k) == pytest.approx(v, abs=1e-12), k

    def test_random_against_scalar_oracle(self):
        rng = np.random.default_rng(2)
        pred, gt = rng.uniform(0.05, 1, 50), rng.uniform(0.05, 1, 50)
        m = compute_metrics(pred, gt)
        for k, v in scalar_metrics(list(pred), list(gt)).items():
            assert getattr(m, k) == pytest.approx(v, rel=1e-12, abs=1e-15), k

    def test_prediction_floor(self):
        m = compute_metrics(np.array([0.0, 1.0]), np.array([1.0, 1.0]))
        assert math.isfinite(m.rmse_log) and m.delta1 == 0.5

    def test_non_positive_gt(self):
        with pytest.raises(EvaluationError):
            compute_metrics(np.ones(3), np.array([1.0, 0.0, 1.0]))

    @settings(max_examples=200, deadline=None)
    @given(st.data())
    def test_properties(self, data):
        gt = data.draw(positive)
        pred = data.draw(hnp.arrays(np.float64, gt.shape, elements=st.floats(1e-3, 10)))
        c = data.draw(st.floats(0.01, 100))
        m = compute_metrics(pred, gt)
        assert m.srmse_log <= m.rmse_log
        assert compute_metrics(gt, pred).delta1 == m.delta1
        scaled = compute_metrics(c * pred, c * gt)
        assert scaled.abs_rel == pytest.approx(m.abs_rel, rel=1e-9, abs=1e-12)
        assert all(v >= 0 for v in m.as_tuple()) and 0 <= m.delta1 <= 1

    def test_delta1_scale_invariant_away_from_threshold(self):
        rng = np.random.default_rng(3)
        gt = rng.uniform(0.1, 1, 200)
        pred = gt * rng.choice([0.5, 0.9, 1.1, 1.6], size=200)
        assert compute_metrics(7 * pred, 7 * gt).delta1 == compute_metrics(pred, gt).delta1


class TestTrain:
    def data(self):
        return DepthDataset.from_spec(TINY_DATA, "train"), DepthDataset.from_spec(TINY_DATA, "val")

    def test_single_epoch(self):
        tr, va = self.data()
        res = train(DepthViT(TINY), tr, va, TrainConfig(epochs=1, batch_size=4, diagnostic_batch_size=2))
        assert len(res.logs) == 1 and res.best_epoch == 1
        log = res.logs[0]
        assert math.isfinite(log.train_loss) and math.isfinite(log.val_loss)
        assert len(log.indicators) == 6 * 2 * 2

    def test_frozen_optimizer(self):
        tr, va = self.data()
        model = DepthViT(TINY, seed=2)
        before = model.state()
        res = train(model, tr, va, TrainConfig(epochs=3, batch_size=4, learning_rate=0.0, diagnostic_batch_size=1))
        for k, v in model.state().items():
            assert v.tobytes() == before[k].tobytes()
        losses = [e.train_loss for e in res.logs]
        assert max(losses) - min(losses) < 1e-12

    def test_best_epoch_minimizes_abs_rel(self):
        tr, va = self.data()
        res = train(DepthViT(TINY), tr, va, TrainConfig(epochs=4, batch_size=4, learning_rate=3e-3, diagnostic_batch_size=1))
        scores = [e.val_metrics.abs_rel for e in res.logs]
        assert res.best_epoch == 1 + int(np.argmin(scores))
        assert all(scores[res.best_epoch - 1] <= s for s in scores)

    def test_best_state_reproduces_best_metrics(self):
        tr, va = self.data()
        model = DepthViT(TINY)
        res = train(model, tr, va, TrainConfig(epochs=3, batch_size=4, diagnostic_batch_size=1))
        model.load_state(res.best_state)
        assert evaluate(model, va) == res.logs[res.best_epoch - 1].val_metrics

    def test_deterministic(self):
        tr, va = self.data()
        cfg = TrainConfig(epochs=2, batch_size=4, diagnostic_batch_size=2)
        a = train(DepthViT(TINY, seed=1), tr, va, cfg).logs
        b = train(DepthViT(TINY, seed=1), tr, va, cfg).logs
        assert a == b

    def test_nan_aborts(self):
        tr, va = self.data()
        tr.images[3] = np.nan
        with pytest.raises(TrainingDiverged, match=r"epoch 1, batch \d"):
            train(DepthViT(TINY), tr, va, TrainConfig(epochs=1, batch_size=4))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0)
        with pytest.raises(ConfigError):
            TrainConfig(optimizer="rmsprop")

    def test_sgd(self):
        tr, va = self.data()
        res = train(DepthViT(TINY), tr, va, TrainConfig(epochs=2, batch_size=4, optimizer="sgd", learning_rate=0.1, diagnostic_batch_size=0))
        assert res.logs[-1].indicators == []


def test_adam_first_step_is_signed_lr():
    p = {"w": Tensor(np.array([1.0, -1.0]), requires_grad=True)}
    p["w"].grad = np.array([0.3, -2.0])
    Adam(p, lr=0.1).step()
    np.testing.assert_allclose(p["w"].data, [0.9, -0.9], atol=1e-9)


class TestEvaluate:
    def test_oracle_stub(self):
        va = DepthDataset.from_spec(TINY_DATA, "val")
        lookup = {img.tobytes(): d for img, d in zip(va.images, va.depths)}
        m = evaluate(lambda imgs: np.stack([lookup[i.tobytes()] for i in imgs]), va)
        assert m.abs_rel == m.rmse == m.srmse_log == 0.0 and m.delta1 == 1.0

    def test_per_image_average(self):
        va = DepthDataset.from_spec(TINY_DATA, "val")
        model = DepthViT(TINY, seed=5)
        pred = model.predict(va.images)
        expected = mean_metrics([compute_metrics(p, g) for p, g in zip(pred, va.depths)])
        assert evaluate(model, va, batch_size=3) == expected

    def test_empty(self):
        with pytest.raises(EvaluationError):
            evaluate(lambda x: x, DepthDataset.from_scenes([]))


def test_compare():
    tr = DepthDataset.from_spec(TINY_DATA, "train")
    va = DepthDataset.from_spec(TINY_DATA, "val")
    report = compare(TINY, tr, va, TrainConfig(epochs=3, batch_size=6, diagnostic_batch_size=2))
    assert set(report.results) == {"svda", "baseline"}
    assert report.param_delta == TINY.num_layers * TINY.num_heads * TINY.d_k
    for res in report.results.values():
        assert len(res.logs) == 3 and all(math.isfinite(e.val_loss) for e in res.logs)
    by_mech = {}
    for t in report.trends:
        by_mech.setdefault(t.mechanism, set()).add(t.indicator)
        assert t.delta == t.last10_mean - t.first10_mean
    assert len(by_mech["svda"]) == 6
    assert by_mech["baseline"] == {"alignment", "selectivity", "robustness"}


def test_trends_windows():
    from svda_lab.harness import EpochLog, DepthMetrics
    from svda_lab.indicators import IndicatorSample

    m = DepthMetrics(0, 0, 0, 0, 0, 1)
    logs = [EpochLog(e, 0.0, 0.0, m, [IndicatorSample(e, 0, 0, "entropy", float(e))]) for e in range(1, 26)]
    (row,) = trends("svda", logs)
    assert row.first10_mean == 5.5 and row.last10_mean == 20.5 and row.delta == 15.0
