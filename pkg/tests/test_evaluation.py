"""Error indicator algebra, testing rollouts, and sweep plumbing."""

import numpy as np
import pytest

from latdyn import dataset, evaluation
from latdyn.model import TABLEAUS, AutoencoderConfig, DynamicsConfig, LdmModel


def tiny_model(extent=16, seed=0):
    ae = AutoencoderConfig(2, (4, 4), 1, (extent,))
    dyn = DynamicsConfig(k=4, t_max=100.0, d_e=8, n_c=4)
    return LdmModel(ae, dyn, TABLEAUS["ralston2"], n_mu=1, seed=seed)


def make_norm():
    return dataset.Normalizer(np.array([-1.0]), np.array([1.0]))


rng = np.random.default_rng(0)


class TestIndicators:
    def test_all_vanish_on_perfect_prediction(self):
        truth = rng.standard_normal((8, 5))
        assert evaluation.eps_rel_mu(truth, truth) == 0.0
        assert evaluation.eps_rel_avg([truth], [truth]) == 0.0
        assert evaluation.eps_rel_t(truth, truth, 2) == 0.0
        assert evaluation.eps_rel_sup(truth, truth) == 0.0
        assert np.all(evaluation.eps_rel_vec(truth, truth, 1) == 0.0)

    def test_doubled_prediction(self):
        truth = rng.standard_normal((8, 1))
        assert evaluation.eps_rel_avg([truth], [2.0 * truth]) == pytest.approx(1.0)

    def test_mean_and_sup_by_hand(self):
        truth = np.zeros((3, 2))
        truth[:, 0] = [1.0, 0.0, 0.0]
        truth[:, 1] = [0.0, 1.0, 0.0]
        pred = truth.copy()
        pred[0, 0] += 0.1
        pred[1, 1] += 0.3
        assert evaluation.eps_rel_mu(truth, pred) == pytest.approx(0.2)
        assert evaluation.eps_rel_sup(truth, pred) == pytest.approx(0.3)

    def test_vec_norm_equals_scalar_indicator(self):
        truth = rng.standard_normal((16, 4)) + 3.0
        pred = truth + 0.05 * rng.standard_normal((16, 4))
        for t in range(4):
            vec = evaluation.eps_rel_vec(truth, pred, t)
            assert np.linalg.norm(vec) == pytest.approx(
                evaluation.eps_rel_t(truth, pred, t), rel=1e-14
            )

    def test_residual_homogeneity(self):
        truth = rng.standard_normal((8, 3)) + 2.0
        resid = rng.standard_normal((8, 3))
        full = evaluation.eps_rel_avg([truth], [truth + resid])
        half = evaluation.eps_rel_avg([truth], [truth + 0.5 * resid])
        assert half == pytest.approx(0.5 * full, rel=1e-12)

    def test_single_trajectory_avg_equals_mu(self):
        truth = rng.standard_normal((8, 6)) + 1.5
        pred = truth + 0.1 * rng.standard_normal((8, 6))
        assert evaluation.eps_rel_avg([truth], [pred]) == pytest.approx(
            evaluation.eps_rel_mu(truth, pred), rel=1e-14
        )

    def test_sup_dominates_mean(self):
        truth = rng.standard_normal((8, 6)) + 1.5
        pred = truth + 0.1 * rng.standard_normal((8, 6))
        per_t = [evaluation.eps_rel_t(truth, pred, k) for k in range(6)]
        assert evaluation.eps_rel_sup(truth, pred) >= evaluation.eps_rel_mu(truth, pred)
        assert evaluation.eps_rel_mu(truth, pred) >= min(per_t)

    def test_zero_norm_snapshot_raises(self):
        truth = np.zeros((4, 2))
        truth[:, 1] = 1.0
        with pytest.raises(evaluation.ZeroNormSnapshot):
            evaluation.eps_rel_mu(truth, truth)
        assert evaluation.first_nonzero_index(truth) == 1


class TestTestOperation:
    def test_zero_sigma_is_plain_rollout(self):
        model = tiny_model()
        norm = make_norm()
        u0 = rng.uniform(-0.5, 0.5, (16, 1))
        times = np.linspace(0.0, 1.0, 6)
        a = evaluation.test(model, norm, np.array([[0.1]]), u0, times, perturbation_sigma=0.0)
        pred_n = model.forward(norm.normalize(u0)[:, 0], times, np.array([0.1]))
        assert np.array_equal(a[:, :, 0], norm.denormalize(pred_n))

    def test_seeded_noise_reproducible(self):
        model = tiny_model()
        norm = make_norm()
        u0 = rng.uniform(-0.5, 0.5, (16, 1))
        times = np.linspace(0.0, 1.0, 4)
        kw = dict(perturbation_sigma=0.1, seed=42)
        a = evaluation.test(model, norm, np.array([[0.1]]), u0, times, **kw)
        b = evaluation.test(model, norm, np.array([[0.1]]), u0, times, **kw)
        assert np.array_equal(a, b)
        c = evaluation.test(model, norm, np.array([[0.1]]), u0, times, perturbation_sigma=0.1, seed=43)
        assert not np.array_equal(a, c)

    def test_sweep_noise_grid_accepted(self):
        cfg = evaluation.SweepConfig(noise_levels=(0.0, 0.05, 0.1, 0.2))
        assert cfg.noise_levels == (0.0, 0.05, 0.1, 0.2)
        with pytest.raises(ValueError):
            evaluation.SweepConfig(noise_levels=(0.5,))


class TestReport:
    def test_rejects_bad_values(self):
        rep = evaluation.ErrorReport()
        with pytest.raises(ValueError):
            rep.add(0, "train", "eps", 0, -1.0)
        with pytest.raises(ValueError):
            rep.add(0, "train", "eps", 0, np.nan)

    def test_csv_roundtrip(self, tmp_path):
        rep = evaluation.ErrorReport()
        rep.add((0.1,), "train", "eps_rel_mu", "all", 0.25)
        rep.add((0.2,), "interp", "eps_rel_mu", "all", 0.5)
        path = tmp_path / "report.csv"
        rep.write_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "param_id,split,indicator,time_or_window,value"
        assert len(lines) == 3

    def test_filtering(self):
        rep = evaluation.ErrorReport()
        rep.add(0, "train", "a", 0, 1.0)
        rep.add(0, "interp", "a", 0, 2.0)
        rep.add(0, "train", "b", 0, 3.0)
        assert rep.values("a").tolist() == [1.0, 2.0]
        assert rep.values("a", "train").tolist() == [1.0]


class TestSweeps:
    def synthetic_solver(self, times_fn):
        # reference "FOM": decaying bump matching nothing in particular
        def solver(mu, n_steps):
            times = times_fn(n_steps)
            x = np.linspace(-1, 1, 16)
            return np.stack(
                [np.exp(-(x**2) / (0.3 + mu[0])) * np.exp(-0.2 * t) + 0.5 for t in times],
                axis=1,
            )

        return solver

    def test_time_continuity_rows_complete(self):
        model = tiny_model()
        norm = make_norm()
        base_times = np.linspace(0.0, 1.0, 5)
        solver = self.synthetic_solver(lambda n: np.linspace(0.0, 1.0, n + 1))
        rep = evaluation.time_continuity_sweep(
            model, norm, solver, np.array([0.1]), (1, 2, 4), base_times
        )
        sups = rep.values("eps_rel_sup")
        assert sups.size == 3
        assert np.all(np.isfinite(sups))
        dts = rep.values("dt")
        assert dts[0] == pytest.approx(0.25)
        assert dts[-1] == pytest.approx(0.0625)

    def test_parameter_sweep_pure_function(self):
        model = tiny_model()
        norm = make_norm()
        times = np.linspace(0.0, 1.0, 5)
        solver = self.synthetic_solver(lambda n: np.linspace(0.0, 1.0, n + 1))
        lists = {
            "train": np.array([[0.1], [0.2]]),
            "interp": np.array([[0.1]]),  # same mu appears in both splits
        }
        rep = evaluation.parameter_sweep(model, norm, solver, lists, times, n_steps=4)
        train_vals = {r[0]: r[4] for r in rep.rows if r[1] == "train"}
        interp_vals = {r[0]: r[4] for r in rep.rows if r[1] == "interp"}
        assert train_vals[(0.1,)] == interp_vals[(0.1,)]
        assert len(rep.rows) == 3

    def test_zero_stability_sweep_ratios(self):
        model = tiny_model()
        norm = make_norm()
        times = np.linspace(0.0, 1.0, 5)
        solver = self.synthetic_solver(lambda n: np.linspace(0.0, 1.0, n + 1))
        truth = solver(np.array([0.1]), 4)
        rep, ratios = evaluation.zero_stability_sweep(
            model, norm, np.array([0.1]), truth[:, 0], truth, times, (0.0, 0.01, 0.05)
        )
        assert set(ratios) == {0.01, 0.05}
        assert all(v > 0 for v in ratios.values())
        assert rep.values("eps_rel_t").size == 3 * 5

    def test_deviation_ratio_eps_independent(self):
        # empirical constant: ratios across eps {1e-3, 1e-2, 5e-2} within 3x
        model = tiny_model(seed=4)
        norm = make_norm()
        times = np.linspace(0.0, 1.0, 6)
        solver = self.synthetic_solver(lambda n: np.linspace(0.0, 1.0, n + 1))
        truth = solver(np.array([0.1]), 5)
        _, ratios = evaluation.zero_stability_sweep(
            model, norm, np.array([0.1]), truth[:, 0], truth, times,
            (1e-3, 1e-2, 5e-2), seed=9,
        )
        vals = np.array(list(ratios.values()))
        assert vals.max() / vals.min() < 3.0
