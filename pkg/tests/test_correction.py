"""Correction-pathway tests: dataset maintenance, corrector training on
constructed distortions, uncertainty gating, candidate draws, and the running
mismatch estimate."""

import numpy as np
import pytest

import gmfbo.correction as corr_mod
from gmfbo.correction import (
    ATTEMPTS_PER_SLOT,
    CorrectionDataset,
    GridAlignmentError,
    Is3Sample,
    accept,
    corrected_objective,
    draw_candidate_near,
    estimate_mismatch,
    generate_is3_batch,
    reference_alpha,
    train_correction_model,
    update_correction_dataset,
)
from gmfbo.acquisition import sampling_cost
from gmfbo.kernel import FidelityState
from gmfbo.plant import (
    ControllerGains,
    GainBox,
    ObjectiveSpec,
    PlantConfig,
    TwinMismatchConfig,
    compute_metrics,
    noise_free_objective,
    simulate,
)

CFG = PlantConfig()
SPEC = ObjectiveSpec.raw()
GAINS = ControllerGains(120.0, 4.0)
IDENTITY = TwinMismatchConfig(table_noise=0.0)
BIAS = TwinMismatchConfig(table_noise=0.0, output_offset=-0.1)


def paired_responses(mismatch, gains=GAINS):
    return (simulate(gains, CFG, mismatch=mismatch), simulate(gains, CFG))


class TestDatasetUpdate:
    def test_default_grid_subsamples_to_367(self):
        r2, r1 = paired_responses(IDENTITY)
        assert r1.times.shape[0] == 1101
        dc = update_correction_dataset(CorrectionDataset.empty(), GAINS, r2, r1)
        assert len(dc) == 367  # ceil(1101/400) = 3, every 3rd sample

    def test_identity_pair_targets_equal_second_coordinate(self):
        r2, r1 = paired_responses(IDENTITY)
        dc = update_correction_dataset(CorrectionDataset.empty(), GAINS, r2, r1)
        np.testing.assert_array_equal(dc.targets, dc.inputs[:, 1])

    def test_replacement_policy_keeps_latest_pair(self):
        r2a, r1a = paired_responses(IDENTITY, ControllerGains(100.0, 3.0))
        r2b, r1b = paired_responses(IDENTITY, ControllerGains(150.0, 6.0))
        dc = update_correction_dataset(CorrectionDataset.empty(),
                                       ControllerGains(100.0, 3.0), r2a, r1a)
        dc = update_correction_dataset(dc, ControllerGains(150.0, 6.0), r2b, r1b)
        assert dc.gains == [ControllerGains(150.0, 6.0)]
        assert len(dc) == 367

    def test_accumulate_mode_appends(self):
        r2a, r1a = paired_responses(IDENTITY, ControllerGains(100.0, 3.0))
        r2b, r1b = paired_responses(IDENTITY, ControllerGains(150.0, 6.0))
        dc = update_correction_dataset(CorrectionDataset.empty(),
                                       ControllerGains(100.0, 3.0), r2a, r1a)
        dc = update_correction_dataset(dc, ControllerGains(150.0, 6.0), r2b, r1b,
                                       accumulate=True)
        assert len(dc) == 2 * 367
        assert len(dc.gains) == 2

    def test_mismatched_grid_raises(self):
        r2, r1 = paired_responses(IDENTITY)
        shifted = type(r2)(times=r2.times + 1e-6, outputs=r2.outputs, unstable=False)
        with pytest.raises(GridAlignmentError):
            update_correction_dataset(CorrectionDataset.empty(), GAINS, shifted, r1)


class TestTraining:
    def test_identity_map_learned(self):
        r2, r1 = paired_responses(IDENTITY)
        dc = update_correction_dataset(CorrectionDataset.empty(), GAINS, r2, r1)
        model = train_correction_model(dc, seed=0)
        mean, var = model.predict(r2.times, r2.outputs)  # includes held-out samples
        assert float(np.mean(np.abs(mean - r1.outputs))) < 1e-3
        assert np.all(var >= 0)

    def test_constant_bias_recovered(self):
        r2, r1 = paired_responses(BIAS)
        np.testing.assert_allclose(r2.outputs, r1.outputs - 0.1)
        dc = update_correction_dataset(CorrectionDataset.empty(), GAINS, r2, r1)
        model = train_correction_model(dc, seed=0)
        mean, _ = model.predict(r2.times, r2.outputs)
        assert float(np.max(np.abs(mean - r1.outputs))) < 1e-2

    def test_same_seed_same_hyperparameters(self):
        r2, r1 = paired_responses(IDENTITY)
        dc = update_correction_dataset(CorrectionDataset.empty(), GAINS, r2, r1)
        m1 = train_correction_model(dc, seed=7)
        m2 = train_correction_model(dc, seed=7)
        assert m1.hyperparams == m2.hyperparams

    def test_minimum_size_enforced(self):
        dc = CorrectionDataset(np.array([[0.0, 0.0], [0.1, 0.1], [0.2, 0.2]]),
                               np.array([0.0, 0.1, 0.2]))
        with pytest.raises(ValueError):
            train_correction_model(dc)

    def test_constant_targets_still_valid(self):
        n = 20
        dc = CorrectionDataset(
            np.column_stack([np.linspace(0, 1, n), np.linspace(0, 1, n)]),
            np.zeros(n))
        model = train_correction_model(dc, seed=0)
        mean, var = model.predict(np.array([0.5]), np.array([0.5]))
        assert np.isfinite(mean).all() and np.isfinite(var).all()


class TestCorrectedObjective:
    def test_perfect_twin_matches_noise_free_objective(self):
        r2, r1 = paired_responses(IDENTITY)
        dc = update_correction_dataset(CorrectionDataset.empty(), GAINS, r2, r1)
        model = train_correction_model(dc, seed=0)
        sample = corrected_objective(model, GAINS, CFG, SPEC, IDENTITY)
        g_true = noise_free_objective(compute_metrics(r1, CFG), SPEC)
        assert sample.g_corrected == pytest.approx(g_true, abs=1e-3)
        assert sample.fidelity == 0.1

    def test_bias_twin_corrected_overshoot(self):
        r2, r1 = paired_responses(BIAS)
        dc = update_correction_dataset(CorrectionDataset.empty(), GAINS, r2, r1)
        model = train_correction_model(dc, seed=0)
        sample = corrected_objective(model, GAINS, CFG, SPEC, BIAS)
        resp = simulate(GAINS, CFG, mismatch=BIAS)
        mean, _ = model.predict(resp.times, resp.outputs)
        true_os = compute_metrics(r1, CFG).overshoot
        corr_os = compute_metrics(type(r1)(r1.times, mean, False), CFG).overshoot
        assert abs(corr_os - true_os) < 1e-2
        # raw twin objective is carried alongside, uncorrected
        g_twin = noise_free_objective(compute_metrics(r2, CFG), SPEC)
        assert sample.g_twin == pytest.approx(g_twin, rel=1e-12)

    def test_zero_variance_model_gives_zero_bar_sigma(self):
        class Oracle:
            def predict(self, times, twin_outputs):
                y = np.asarray(twin_outputs, float)
                return y.copy(), np.zeros_like(y)

        sample = corrected_objective(Oracle(), GAINS, CFG, SPEC, IDENTITY)
        assert sample.bar_sigma_c == 0.0

    def test_never_calls_real_system(self, monkeypatch):
        r2, r1 = paired_responses(IDENTITY)
        dc = update_correction_dataset(CorrectionDataset.empty(), GAINS, r2, r1)
        model = train_correction_model(dc, seed=0)

        calls = {"real": 0, "twin": 0}
        real_simulate = corr_mod.simulate

        def counting(gains, cfg, mismatch=None, twin_seed=None):
            calls["real" if mismatch is None else "twin"] += 1
            return real_simulate(gains, cfg, mismatch=mismatch, twin_seed=twin_seed)

        monkeypatch.setattr(corr_mod, "simulate", counting)
        corrected_objective(model, GAINS, CFG, SPEC, IDENTITY)
        rng = np.random.default_rng(0)
        generate_is3_batch(model, GAINS, GainBox(), CFG, SPEC, IDENTITY,
                           n_c=2, rng=rng, alpha=1.0)
        assert calls["real"] == 0
        assert calls["twin"] >= 3
        with pytest.raises(ValueError):
            corrected_objective(model, GAINS, CFG, SPEC, None)


class TestGate:
    def test_boundary_conventions(self):
        mk = lambda s: Is3Sample(GAINS, 0.1, -0.5, -0.4, s)
        assert accept(mk(0.0), alpha=1.0, rho=0.1)
        assert accept(mk(0.099), alpha=1.0, rho=0.1)
        assert not accept(mk(0.1), alpha=1.0, rho=0.1)   # strict inequality
        assert not accept(mk(0.5), alpha=1.0, rho=0.1)

    def test_monotone_in_rho_over_fixed_samples(self):
        rng = np.random.default_rng(3)
        samples = [Is3Sample(GAINS, 0.1, -0.5, -0.4, float(rng.uniform(0, 0.3)))
                   for _ in range(50)]
        counts = [sum(accept(s, 1.0, rho) for s in samples)
                  for rho in (0.01, 0.05, 0.1, 0.2, 0.3)]
        assert counts == sorted(counts)

    def test_reference_alpha_unit_step(self):
        assert reference_alpha(CFG) == 1.0


class TestCandidateDraws:
    def test_zero_std_returns_center(self):
        rng = np.random.default_rng(0)
        k = draw_candidate_near(GAINS, GainBox(), rng, std_frac=0.0)
        assert k == GAINS

    def test_projection_onto_box(self):
        box = GainBox()
        rng = np.random.default_rng(1)
        edge = ControllerGains(box.kp_max, box.kd_max)
        for _ in range(200):
            k = draw_candidate_near(edge, box, rng)
            assert box.contains(k)

    def test_draw_statistics(self):
        box = GainBox()
        center = ControllerGains(115.0, 6.0)
        rng = np.random.default_rng(42)
        draws = np.array([[d.kp, d.kd] for d in
                          (draw_candidate_near(center, box, rng) for _ in range(10_000))])
        # few draws clip at this interior center, so sample std tracks the target
        assert np.std(draws[:, 0]) == pytest.approx(0.05 * 170.0, rel=0.05)
        assert np.std(draws[:, 1]) == pytest.approx(0.05 * 8.0, rel=0.05)


class TestBatch:
    def _model(self):
        r2, r1 = paired_responses(IDENTITY)
        dc = update_correction_dataset(CorrectionDataset.empty(), GAINS, r2, r1)
        return train_correction_model(dc, seed=0)

    def test_accepting_gate_fills_batch(self):
        model = self._model()
        rng = np.random.default_rng(5)
        batch = generate_is3_batch(model, GAINS, GainBox(), CFG, SPEC, IDENTITY,
                                   n_c=4, rng=rng, alpha=1.0, rho=1e9)
        assert len(batch.samples) == 4
        assert not batch.shortfall
        assert batch.attempts == 4

    def test_never_accepting_gate_exhausts_cap(self):
        model = self._model()
        rng = np.random.default_rng(5)
        batch = generate_is3_batch(model, GAINS, GainBox(), CFG, SPEC, IDENTITY,
                                   n_c=4, rng=rng, alpha=1.0, rho=0.0)
        assert batch.samples == []
        assert batch.shortfall
        assert batch.attempts == 4 * ATTEMPTS_PER_SLOT

    def test_same_seed_same_batch(self):
        model = self._model()
        b1 = generate_is3_batch(model, GAINS, GainBox(), CFG, SPEC, IDENTITY,
                                n_c=3, rng=np.random.default_rng(9), alpha=1.0)
        b2 = generate_is3_batch(model, GAINS, GainBox(), CFG, SPEC, IDENTITY,
                                n_c=3, rng=np.random.default_rng(9), alpha=1.0)
        assert b1.samples == b2.samples


class TestMismatchEstimate:
    def test_equal_pairs_give_zero(self):
        assert estimate_mismatch([(1.5, 1.5), (-0.3, -0.3)]) == 0.0

    def test_single_pair(self):
        assert estimate_mismatch([(2.0, 1.0)]) == pytest.approx(0.5)

    def test_mean_of_two(self):
        assert estimate_mismatch([(2.0, 1.0), (4.0, 5.0)]) == pytest.approx(0.375)

    def test_near_zero_reference_excluded(self):
        assert estimate_mismatch([(1e-12, 5.0), (2.0, 1.0)]) == pytest.approx(0.5)

    def test_no_valid_pairs_returns_current(self):
        assert estimate_mismatch([], current=0.5) == 0.5
        assert estimate_mismatch([(1e-15, 3.0)], current=0.7) == 0.7

    def test_nonnegative(self):
        rng = np.random.default_rng(6)
        pairs = [(float(rng.normal()), float(rng.normal())) for _ in range(100)]
        assert estimate_mismatch(pairs) >= 0.0


class TestCrossModuleChain:
    def test_perfect_twin_drives_clamps_to_trusting_ends(self):
        r2, r1 = paired_responses(IDENTITY)
        dc = update_correction_dataset(CorrectionDataset.empty(), GAINS, r2, r1)
        model = train_correction_model(dc, seed=0)
        rng = np.random.default_rng(11)
        batch = generate_is3_batch(model, GAINS, GainBox(), CFG, SPEC, IDENTITY,
                                   n_c=4, rng=rng, alpha=1.0)
        assert not batch.shortfall
        e = estimate_mismatch([(s.g_corrected, s.g_twin) for s in batch.samples])
        assert e < 0.05  # near-perfect agreement
        fs = FidelityState(e_is2=e)
        assert fs.l_gamma0 == 2.0                       # upper clamp
        assert sampling_cost(0.1, fs) == 0.1            # lower clamp
        assert sampling_cost(1.0, fs) == 1.0
