import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advlab.attacks import AttackConfig
from advlab.data import ToyConfig, generate_toy
from advlab.errors import CheckpointFormatError, CompatibilityError, ConfigError, DomainError, TrainingError
from advlab.model import Mlp, MlpSpec, ParamVector, layout_for
from advlab.training import (
    LambdaSchedule,
    PiatConfig,
    SgdState,
    TrainConfig,
    interpolate_params,
    lambda_at,
    load_checkpoint,
    save_checkpoint,
    sgd_momentum_step,
    train,
    write_metrics_csv,
)

SMALL_TRAIN = generate_toy(ToyConfig(n_per_class=60, seed=21))
SMALL_TEST = generate_toy(ToyConfig(n_per_class=40, seed=22))


def small_cfg(**kwargs):
    base = dict(epochs=4, batch_size=32, seed=5, attack=AttackConfig(steps=2))
    base.update(kwargs)
    return TrainConfig(**base)


def run(cfg, **kwargs):
    return train(cfg, Mlp.init(MlpSpec(), cfg.seed), SMALL_TRAIN, SMALL_TEST, **kwargs)


class TestLambdaSchedule:
    def test_hand_values(self):
        s = LambdaSchedule()
        assert lambda_at(s, 1) == 2 / 11
        assert lambda_at(s, 10) == 11 / 20

    @settings(max_examples=50)
    @given(st.integers(1, 10_000))
    def test_stays_in_unit_interval_and_increases(self, n):
        s = LambdaSchedule()
        assert 0 <= lambda_at(s, n) < lambda_at(s, n + 1) < 1

    def test_epoch_zero_rejected(self):
        with pytest.raises(DomainError):
            lambda_at(LambdaSchedule(), 0)

    def test_parse(self):
        assert LambdaSchedule.parse("fixed:0.25") == LambdaSchedule(kind="fixed", value=0.25)
        assert LambdaSchedule.parse("rational:1,2,3,4") == LambdaSchedule("rational", 0.0, 1, 2, 3, 4)

    @pytest.mark.parametrize("text", ["fixed:1.5", "rational:2,1,1,10", "rational:1,2", "cosine:1", "fixed:x"])
    def test_parse_rejects(self, text):
        with pytest.raises(ConfigError):
            LambdaSchedule.parse(text)


class TestInterpolate:
    @settings(max_examples=100)
    @given(st.integers(0, 1000), st.floats(0.0, 1.0))
    def test_elementwise_against_scalar_oracle(self, seed, lam):
        layout = layout_for(MlpSpec(3, (4,), 2))
        rng = np.random.default_rng(seed)
        a = ParamVector(rng.normal(size=26), layout)
        b = ParamVector(rng.normal(size=26), layout)
        out = interpolate_params(a, b, lam).values
        for k in range(26):
            assert out[k] == lam * float(a.values[k]) + (1.0 - lam) * float(b.values[k])

    def test_endpoints(self):
        layout = layout_for(MlpSpec(3, (), 2))
        a, b = ParamVector(np.ones(8), layout), ParamVector(np.arange(8.0), layout)
        assert interpolate_params(a, b, 1.0).values.tolist() == [1.0] * 8
        assert interpolate_params(a, b, 0.0).values.tolist() == list(range(8))

    def test_errors(self):
        a = ParamVector(np.zeros(8), layout_for(MlpSpec(3, (), 2)))
        b = ParamVector(np.zeros(26), layout_for(MlpSpec(3, (4,), 2)))
        with pytest.raises(CompatibilityError):
            interpolate_params(a, b, 0.5)
        with pytest.raises(DomainError):
            interpolate_params(a, a, 1.5)


class TestSgd:
    def test_scalar_oracle_fifty_steps(self):
        # minimize 0.5 * k * theta^2 with an explicit scalar recurrence
        k, lr, m, wd = 3.0, 0.05, 0.9, 0.01
        theta, state = np.array([2.0]), SgdState()
        t, v = 2.0, 0.0
        for _ in range(50):
            theta = sgd_momentum_step(theta, k * theta, state, lr, m, wd)
            v = m * v + (k * t + wd * t)
            t = t - lr * v
        assert abs(theta[0] - t) <= 1e-12

    def test_non_finite_gradient(self):
        with pytest.raises(TrainingError):
            sgd_momentum_step(np.zeros(2), np.array([np.nan, 0.0]), SgdState(), 0.1, 0.9)

    def test_does_not_mutate_params(self):
        p = np.ones(3)
        sgd_momentum_step(p, np.ones(3), SgdState(), 0.1, 0.0)
        assert p.tolist() == [1.0, 1.0, 1.0]


class TestTrainLoop:
    def test_records(self):
        res = run(small_cfg())
        assert [r.epoch for r in res.records] == [1, 2, 3, 4]
        assert [r.lambda_used for r in res.records] == [lambda_at(LambdaSchedule(), n) for n in range(1, 5)]
        assert all(0 <= r.robust_acc_pgd <= r.clean_acc + 1 for r in res.records)
        assert all(r.wall_ms == 0 for r in res.records)

    def test_lambda_zero_matches_plain_training_bit_for_bit(self):
        fixed0 = run(small_cfg(piat=PiatConfig(True, LambdaSchedule(kind="fixed", value=0.0))))
        off = run(small_cfg(piat=PiatConfig(enabled=False)))
        assert fixed0.model.get_params().values.tobytes() == off.model.get_params().values.tobytes()
        assert [(r.loss_mean, r.robust_acc_pgd) for r in fixed0.records] == [(r.loss_mean, r.robust_acc_pgd) for r in off.records]

    def test_lambda_one_freezes_parameters(self):
        cfg = small_cfg(piat=PiatConfig(True, LambdaSchedule(kind="fixed", value=1.0)))
        init = Mlp.init(MlpSpec(), cfg.seed).get_params().values
        res = run(cfg)
        assert res.model.get_params().values.tobytes() == init.tobytes()

    def test_deterministic(self, tmp_path):
        run(small_cfg(), metrics_path=tmp_path / "a.csv")
        run(small_cfg(), metrics_path=tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_resume_equals_straight_run(self, tmp_path):
        straight = run(small_cfg(epochs=4), metrics_path=tmp_path / "s.csv")
        (tmp_path / "part").mkdir()
        run(small_cfg(epochs=2), checkpoint_dir=tmp_path / "part")
        state = load_checkpoint(tmp_path / "part" / "ckpt_final")
        assert state.epoch == 2
        resumed = train(small_cfg(epochs=4), None, SMALL_TRAIN, SMALL_TEST, resume=state, metrics_path=tmp_path / "r.csv")
        assert resumed.model.get_params().values.tobytes() == straight.model.get_params().values.tobytes()
        assert (tmp_path / "r.csv").read_bytes() == (tmp_path / "s.csv").read_bytes()

    def test_best_checkpoint_tracks_highest_robust_accuracy(self, tmp_path):
        res = run(small_cfg(epochs=5), checkpoint_dir=tmp_path)
        best = max(res.records, key=lambda r: r.robust_acc_pgd)
        first_best = next(r for r in res.records if r.robust_acc_pgd == best.robust_acc_pgd)
        state = load_checkpoint(tmp_path / "ckpt_best")
        assert state.epoch == first_best.epoch == res.best.best_epoch
        assert state.model.get_params().values.tobytes() == res.best.model.get_params().values.tobytes()

    def test_non_finite_loss_names_epoch_and_batch(self, monkeypatch):
        import advlab.training as tr

        calls = {"n": 0}
        real = tr.total_loss

        def flaky(model, x, x_adv, y, cfg):
            calls["n"] += 1
            loss = real(model, x, x_adv, y, cfg)
            return loss * float("nan") if calls["n"] == 6 else loss

        monkeypatch.setattr(tr, "total_loss", flaky)
        # 120 rows in batches of 32: call 6 is epoch 2, batch 1
        with pytest.raises(TrainingError, match="epoch 2, batch 1"):
            run(small_cfg())

    def test_empty_dataset(self):
        empty = SMALL_TRAIN.subset(np.array([], dtype=int))
        with pytest.raises(ConfigError):
            train(small_cfg(), Mlp.init(MlpSpec(), 0), empty, SMALL_TEST)

    def test_lr_schedule(self):
        cfg = small_cfg(lr_schedule=((3, 0.1), (10, 0.01)))
        assert [cfg.lr_at(e) for e in (1, 3, 9, 10)] == [0.5, 0.1, 0.1, 0.01]


class TestCheckpointFiles:
    def test_round_trip_exact(self, tmp_path):
        model = Mlp.init(MlpSpec(), 4)
        v = np.random.default_rng(0).normal(size=model.spec.n_params)
        save_checkpoint(model, SgdState(v), 7, tmp_path / "c", {"note": 1})
        state = load_checkpoint(tmp_path / "c")
        assert state.epoch == 7
        assert state.velocity.tobytes() == v.tobytes()
        assert state.model.get_params().values.tobytes() == model.get_params().values.tobytes()
        assert not (tmp_path / "c.tmp").exists()

    def test_truncated_file(self, tmp_path):
        model = Mlp.init(MlpSpec(), 4)
        save_checkpoint(model, None, 1, tmp_path / "c")
        raw = (tmp_path / "c").read_bytes()
        (tmp_path / "c").write_bytes(raw[:-3])
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(tmp_path / "c")


def test_metrics_csv_format(tmp_path):
    res = run(small_cfg(epochs=2))
    write_metrics_csv(res.records, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "epoch,lambda,loss,clean_acc,robust_acc_pgd,wall_ms"
    assert len(lines) == 3
    assert float(lines[1].split(",")[1]) == 2 / 11
