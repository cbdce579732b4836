import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advlab import numerics as nx
from advlab.analysis import (
    BoundaryGrid,
    boundary_delta,
    decision_boundary_grid,
    evaluate,
    evaluation_subset,
    flatness_score,
    loss_landscape,
    mean_boundary_delta,
    oscillation_score,
    symmetric_axis,
    theorem31_check,
    write_boundary_csv,
    write_landscape_csv,
    write_theorem_csv,
)
from advlab.attacks import AttackConfig
from advlab.errors import DegenerateInputError, DimensionError, DomainError
from advlab.model import Mlp, MlpSpec, ParamVector


class TestEvaluate:
    def test_report(self, toy_model, toy_test):
        rep = evaluate(toy_model, toy_test, [("fgsm", AttackConfig()), ("pgd", AttackConfig())])
        assert rep.clean_acc == toy_model.accuracy(toy_test.features, toy_test.labels)
        assert set(rep.robust_acc) == {"fgsm", "pgd"}
        assert rep.per_attack_config["pgd"]["epsilon"] == 0.1
        assert rep.to_json() == evaluate(toy_model, toy_test, [("fgsm", AttackConfig()), ("pgd", AttackConfig())]).to_json()

    def test_zero_budget_matches_clean(self, toy_model, toy_test):
        rep = evaluate(toy_model, toy_test, [("pgd", AttackConfig(epsilon=0.0))])
        assert rep.robust_acc["pgd"] == rep.clean_acc


class TestBoundary:
    def test_grid_matches_direct_predictions(self, toy_model):
        g = decision_boundary_grid(toy_model, resolution=7)
        assert g.preds.shape == (7, 7)
        x = np.array([[g.x1_values[2], g.x2_values[5], 0.825]])
        assert g.preds[2, 5] == toy_model.predict(x)[0]
        assert np.all(g.margins >= 0)

    def test_delta_of_identical_models_is_zero(self, toy_model):
        g = decision_boundary_grid(toy_model, resolution=11)
        assert boundary_delta(g, g) == 0.0

    def test_delta_counts_flipped_cells(self):
        x = np.arange(2.0)
        a = BoundaryGrid(x, x, 0.8, np.array([[0, 0], [1, 1]]), np.zeros((2, 2)))
        b = BoundaryGrid(x, x, 0.8, np.array([[0, 1], [0, 1]]), np.zeros((2, 2)))
        c = BoundaryGrid(x, x, 0.8, np.array([[1, 1], [0, 0]]), np.zeros((2, 2)))
        assert boundary_delta(a, b) == 0.5
        assert mean_boundary_delta([a, b, c]) == (0.5 + 0.5) / 2

    def test_geometry_mismatch(self, toy_model):
        with pytest.raises(DimensionError):
            boundary_delta(decision_boundary_grid(toy_model, resolution=5), decision_boundary_grid(toy_model, resolution=6))

    def test_csv(self, toy_model, tmp_path):
        write_boundary_csv(decision_boundary_grid(toy_model, resolution=3), tmp_path / "b.csv")
        lines = (tmp_path / "b.csv").read_text().splitlines()
        assert lines[0] == "x1,x2,pred,margin"
        assert len(lines) == 10


class TestLandscape:
    def test_axis_symmetry(self):
        m = symmetric_axis(21)
        assert m[10] == 0.0
        assert np.array_equal(m, -m[::-1])
        assert m[0] == -1.0 and m[-1] == 1.0

    def test_center_equals_loss_at_theta(self, toy_model, toy_test):
        grid = loss_landscape(toy_model, toy_test, grid_n=5, seed=1)
        batch = evaluation_subset(toy_test, 256, 1)
        ref = nx.softmax_cross_entropy(toy_model.logits(batch.features), batch.labels).item()
        assert abs(grid.losses[2, 2] - ref) <= 1e-12

    def test_directions_unit_and_params_restored(self, toy_model, toy_test):
        before = toy_model.get_params().values.tobytes()
        grid = loss_landscape(toy_model, toy_test, grid_n=3, seed=2, variant="pgd", attack=AttackConfig(steps=2))
        assert toy_model.get_params().values.tobytes() == before
        for d in grid.directions:
            assert abs(np.linalg.norm(d) - 1.0) < 1e-12

    def test_threads_do_not_change_result(self, toy_model, toy_test):
        a = loss_landscape(toy_model, toy_test, grid_n=5, seed=3, threads=1)
        b = loss_landscape(toy_model, toy_test, grid_n=5, seed=3, threads=4)
        assert a.losses.tobytes() == b.losses.tobytes()

    def test_zero_direction_rejected(self, toy_model, toy_test):
        n = toy_model.spec.n_params
        with pytest.raises(DegenerateInputError):
            loss_landscape(toy_model, toy_test, grid_n=3, directions=(np.zeros(n), np.ones(n)))

    def test_flatness_and_csv(self, toy_model, toy_test, tmp_path):
        grid = loss_landscape(toy_model, toy_test, grid_n=3, seed=4)
        assert flatness_score(grid) == float(np.std(grid.losses))
        write_landscape_csv(grid, tmp_path / "l.csv")
        assert (tmp_path / "l.csv").read_text().splitlines()[0] == "m1,m2,loss"

    def test_small_grid_rejected(self, toy_model, toy_test):
        with pytest.raises(DomainError):
            loss_landscape(toy_model, toy_test, grid_n=2)


class TestOscillation:
    def test_constant_series_scores_zero(self):
        assert oscillation_score([0.7] * 10) == 0.0

    def test_alternating_series(self):
        # ten diffs of alternating sign +-0.1: mean 0, std 0.1
        assert oscillation_score([0.5, 0.6] * 5 + [0.5]) == pytest.approx(0.1, abs=1e-12)

    def test_window(self):
        series = [0.0, 1.0, 0.0, 0.5, 0.5, 0.5]
        assert oscillation_score(series, window=3) == 0.0

    @pytest.mark.parametrize("window", [1, 7])
    def test_bad_window(self, window):
        with pytest.raises(DomainError):
            oscillation_score([0.1] * 6, window=window)

    @settings(max_examples=50)
    @given(st.lists(st.floats(0, 1), min_size=3, max_size=30), st.floats(-1, 1))
    def test_shift_invariant(self, series, c):
        a = oscillation_score(series)
        b = oscillation_score([v + c for v in series])
        assert abs(a - b) < 1e-9


def linear_spec():
    return MlpSpec(3, (), 2)


class TestTheoremCheck:
    def test_dyadic_linear_model_is_exact(self):
        spec = linear_spec()
        layout = Mlp(spec).layout
        rng = np.random.default_rng(0)
        a = ParamVector(rng.integers(-8, 8, spec.n_params).astype(float), layout)
        b = ParamVector(a.values + 4.0 * rng.integers(1, 5, spec.n_params), layout)
        x = rng.integers(-4, 4, size=(16, 3)).astype(float)
        rows = theorem31_check(a, b, spec, x, lambdas=(0.5, 0.75), shrinks=(0.5, 0.25))
        assert all(r.ratio == 1.0 for r in rows)

    def test_random_linear_model_to_rounding(self):
        spec = linear_spec()
        a, b = Mlp.init(spec, 1).get_params(), Mlp.init(spec, 2).get_params()
        x = np.random.default_rng(1).normal(size=(32, 3))
        for r in theorem31_check(a, b, spec, x):
            assert r.deviation < 1e-9

    def test_mlp_converges(self):
        spec = MlpSpec()
        a, b = Mlp.init(spec, 1).get_params(), Mlp.init(spec, 2).get_params()
        x = np.random.default_rng(2).normal(size=(64, 3))
        rows = theorem31_check(a, b, spec, x, lambdas=(0.9,), shrinks=(1e-2, 1e-3, 1e-4))
        devs = [r.deviation for r in rows]
        assert devs[0] > devs[1] > devs[2]
        assert devs[1] < 0.05

    def test_identical_vectors(self):
        p = Mlp.init(MlpSpec(), 1).get_params()
        with pytest.raises(DegenerateInputError):
            theorem31_check(p, p.copy(), MlpSpec(), np.ones((2, 3)))

    def test_lambda_one_rejected(self):
        spec = MlpSpec()
        a, b = Mlp.init(spec, 1).get_params(), Mlp.init(spec, 2).get_params()
        with pytest.raises(DomainError):
            theorem31_check(a, b, spec, np.ones((2, 3)), lambdas=(1.0,))

    def test_csv(self, tmp_path):
        spec = linear_spec()
        a, b = Mlp.init(spec, 1).get_params(), Mlp.init(spec, 2).get_params()
        rows = theorem31_check(a, b, spec, np.ones((2, 3)), lambdas=(0.5,), shrinks=(1e-2,))
        write_theorem_csv(rows, tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "lambda,shrink,ratio,deviation"
        assert len(lines) == 2
