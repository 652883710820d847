import math

import numpy as np
import pytest

from alnmil.bags import Bag
from alnmil.errors import DivergenceError
from alnmil.milnet import ModelConfig, init_model, save_checkpoint
from alnmil.train import TrainConfig, cosine_warm_restarts, cross_entropy, sgd_step, train_loop, write_log


def _cosine_oracle(t, base, eta_min, t0, mult):
    # enumerate cycles explicitly: cycle i covers epochs [s_i, s_i + T_i] inclusive
    s, period = 0, t0
    while True:
        if t <= s + period:
            return eta_min + 0.5 * (base - eta_min) * (1 + math.cos(math.pi * (t - s) / period))
        s, period = s + period + 1, period * mult


class TestCrossEntropy:
    def test_uniform(self):
        loss, _ = cross_entropy([0.3, 0.3], 1)
        assert loss == pytest.approx(math.log(2), abs=1e-15)

    def test_stable(self):
        loss, d = cross_entropy([1000.0, -1000.0], 0)
        assert loss == 0.0 and np.all(np.isfinite(d))

    def test_grad_sums_to_zero(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            _, d = cross_entropy(rng.normal(size=4) * 10, int(rng.integers(4)))
            assert abs(d.sum()) < 1e-15


class TestSchedule:
    def test_points(self):
        cfg = TrainConfig(base_lr=1e-4, T_0=10, eta_min=0.0)
        assert cosine_warm_restarts(0, cfg) == 1e-4
        assert cosine_warm_restarts(10, cfg) == 0.0
        assert cosine_warm_restarts(5, cfg) == pytest.approx(5e-5, rel=1e-15)

    def test_restart_resets(self):
        cfg = TrainConfig(base_lr=1e-4, T_0=10, T_mult=2)
        assert cosine_warm_restarts(11, cfg) == 1e-4
        assert cosine_warm_restarts(31, cfg) == 0.0
        assert cosine_warm_restarts(32, cfg) == 1e-4

    def test_against_oracle(self):
        for t0, mult, eta in [(10, 2, 0.0), (3, 1, 1e-6), (7, 3, 2e-5)]:
            cfg = TrainConfig(base_lr=1e-4, T_0=t0, T_mult=mult, eta_min=eta)
            for t in range(300):
                assert cosine_warm_restarts(t, cfg) == pytest.approx(_cosine_oracle(t, 1e-4, eta, t0, mult), abs=1e-18)

    def test_bounds(self):
        cfg = TrainConfig(eta_min=1e-6)
        lrs = [cosine_warm_restarts(t / 4, cfg) for t in range(800)]
        assert min(lrs) >= 1e-6 and max(lrs) <= 1e-4


class TestStep:
    def _model(self, value):
        m = init_model(ModelConfig(feat_dim=1, attn_dim=1, featurizer=False))
        for k in m.params:
            m.params[k][...] = value
        m.zero_grad()
        return m

    def test_zero(self):
        m = self._model(0.0)
        sgd_step(m, 1e-2, TrainConfig())
        assert all(not v.any() for v in m.params.values())

    def test_lr_zero(self):
        m = init_model(ModelConfig(feat_dim=3, attn_dim=2, featurizer=False), seed=1)
        before = {k: v.copy() for k, v in m.params.items()}
        m.grads["clf_W"][...] = 5.0
        sgd_step(m, 0.0, TrainConfig())
        assert all(np.array_equal(before[k], m.params[k]) for k in before)

    def test_decay(self):
        m = self._model(1.0)
        sgd_step(m, 1.0, TrainConfig(base_lr=1.0, weight_decay_l2=0.1, l1_weight=0.0))
        assert all(np.all(v == 0.9) for v in m.params.values())

    def test_divergence(self):
        m = self._model(1.0)
        m.grads["clf_b"][...] = np.inf
        with pytest.raises(DivergenceError):
            sgd_step(m, 1.0, TrainConfig(base_lr=1.0))


def _toy_bags(n, seed, cohort):
    # positive bags contain one instance with a large first feature
    rng = np.random.default_rng(seed)
    bags = []
    for i in range(n):
        h = rng.normal(size=(5, 3))
        label = i % 2
        if label:
            h[rng.integers(5), 0] += 4.0
        bags.append(Bag(f"{cohort}{i:02d}", cohort, h, np.zeros(0), label))
    return bags


class TestLoop:
    def test_zero_epochs(self):
        m = init_model(ModelConfig(feat_dim=3, attn_dim=2, featurizer=False))
        best, log = train_loop(m, [], [], TrainConfig(epochs=0))
        assert best is m and log == []

    def test_learns_and_is_deterministic(self, tmp_path):
        cfg = TrainConfig(base_lr=0.05, epochs=30, seed=3)
        runs = []
        for k in range(2):
            m = init_model(ModelConfig(feat_dim=3, attn_dim=4, featurizer=False), seed=1)
            best, log = train_loop(m, _toy_bags(30, 0, "train"), _toy_bags(10, 1, "val"), cfg)
            save_checkpoint(tmp_path / f"c{k}.bin", best)
            write_log(tmp_path / f"l{k}.csv", log)
            runs.append(log)
        assert (tmp_path / "c0.bin").read_bytes() == (tmp_path / "c1.bin").read_bytes()
        assert (tmp_path / "l0.csv").read_bytes() == (tmp_path / "l1.csv").read_bytes()
        assert max(r["val_auroc"] for r in runs[0]) >= 0.95
        assert runs[0][-1]["train_loss"] < runs[0][0]["train_loss"]

    def test_log_format(self, tmp_path):
        write_log(tmp_path / "l.csv", [{"epoch": 0, "lr": 1e-4, "train_loss": 0.5, "val_auroc": None}])
        assert (tmp_path / "l.csv").read_text() == "epoch,lr,train_loss,val_auroc\n0,0.00010000,0.50000000,NA\n"

    def test_bad_config(self):
        with pytest.raises(ValueError):
            TrainConfig(T_0=0)
