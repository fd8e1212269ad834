"""Plant, metric, and objective tests.

Oracles: closed-form second-order step response (overshoot exp(-pi zeta /
sqrt(1 - zeta^2)), exact trajectory) for the linearized loop, and a synthetic
first-order trace whose 10-90% rise is tau ln 9.
"""

import math

import numpy as np
import pytest

from gmfbo.plant import (
    ControllerGains,
    GainBox,
    Metrics,
    ObjectiveSpec,
    PlantConfig,
    StepResponse,
    TwinMismatchConfig,
    compute_metrics,
    evaluate_objective,
    noise_free_objective,
    objective,
    set_friction_scale,
    simulate,
    write_response_csv,
)

LINEAR = PlantConfig(coulomb_friction=0.0, u_max=1e6, dt=1e-4)
KP = 100.0


def natural_frequency(cfg: PlantConfig, kp: float) -> float:
    return math.sqrt(cfg.torque_constant * kp / (cfg.inertia * cfg.resistance))


def kd_for_damping_ratio(cfg: PlantConfig, kp: float, zeta: float) -> float:
    wn = natural_frequency(cfg, kp)
    return (cfg.resistance / cfg.torque_constant) * (
        2.0 * zeta * wn * cfg.inertia - cfg.damping) - cfg.back_emf


def exact_second_order(t, cfg: PlantConfig, kp: float, zeta: float, ref: float = 1.0):
    wn = natural_frequency(cfg, kp)
    wd = wn * math.sqrt(1.0 - zeta**2)
    return ref * (1.0 - np.exp(-zeta * wn * t)
                  * (np.cos(wd * t) + zeta * wn / wd * np.sin(wd * t)))


class TestLinearOracle:
    @pytest.mark.parametrize("zeta", [0.3, 0.5, 0.8])
    def test_overshoot_matches_closed_form(self, zeta):
        kd = kd_for_damping_ratio(LINEAR, KP, zeta)
        resp = simulate(ControllerGains(KP, kd), LINEAR)
        m = compute_metrics(resp, LINEAR)
        expected = math.exp(-math.pi * zeta / math.sqrt(1.0 - zeta**2))
        assert abs(m.overshoot - expected) < 0.01  # 1% absolute

    @pytest.mark.parametrize("zeta", [0.3, 0.5, 0.8])
    def test_trajectory_matches_closed_form(self, zeta):
        kd = kd_for_damping_ratio(LINEAR, KP, zeta)
        resp = simulate(ControllerGains(KP, kd), LINEAR)
        i0 = round(LINEAR.step_time / LINEAR.dt)
        t = resp.times[i0:] - LINEAR.step_time
        err = np.max(np.abs(resp.outputs[i0:] - exact_second_order(t, LINEAR, KP, zeta)))
        assert err < 5e-3
        assert not resp.unstable

    def test_first_order_rise_time(self):
        tau = 0.05
        cfg = PlantConfig(dt=1e-4)
        times = np.arange(0, cfg.step_time + cfg.horizon + 1e-12, cfg.dt)
        shifted = np.clip(times - cfg.step_time, 0.0, None)
        y = np.where(times >= cfg.step_time, 1.0 - np.exp(-shifted / tau), 0.0)
        m = compute_metrics(StepResponse(times, y, False), cfg)
        expected = tau * math.log(9.0)
        assert abs(m.rise_time - expected) / expected < 0.01
        assert m.overshoot == 0.0


class TestSimulate:
    def test_starts_at_rest_and_output_grid(self):
        cfg = PlantConfig()
        resp = simulate(ControllerGains(100.0, 5.0), cfg)
        n = round((cfg.step_time + cfg.horizon) / cfg.dt) + 1
        assert resp.outputs.shape == (n,)
        assert resp.times[0] == 0.0 and resp.outputs[0] == 0.0
        assert resp.times[-1] == pytest.approx(cfg.step_time + cfg.horizon)
        pre = resp.outputs[resp.times < cfg.step_time]
        assert np.allclose(pre, 0.0, atol=1e-9)  # no motion before the step

    def test_reaches_reference(self):
        cfg = PlantConfig()
        resp = simulate(ControllerGains(150.0, 5.0), cfg)
        assert abs(resp.outputs[-1] - cfg.amplitude) < 0.05

    def test_more_derivative_gain_less_overshoot(self):
        cfg = PlantConfig()
        m_low = compute_metrics(simulate(ControllerGains(150.0, 2.0), cfg), cfg)
        m_high = compute_metrics(simulate(ControllerGains(150.0, 6.0), cfg), cfg)
        assert m_high.overshoot < m_low.overshoot

    def test_negative_derivative_gain_destabilizes(self):
        cfg = PlantConfig()
        resp = simulate(ControllerGains(30.0, -6.0), cfg)
        assert resp.unstable
        assert np.max(np.abs(resp.outputs)) <= cfg.safety_cap + 1e-12

    def test_unstable_metrics_censored(self):
        cfg = PlantConfig()
        resp = simulate(ControllerGains(30.0, -6.0), cfg)
        m = compute_metrics(resp, cfg)
        assert m.overshoot == (cfg.safety_cap - cfg.amplitude) / cfg.amplitude
        assert m.transient_time == m.rise_time == m.settling_time == cfg.horizon

    def test_dead_zone_blocks_small_torque(self):
        cfg = PlantConfig(dead_zone=100.0)  # absurdly wide: no torque escapes
        resp = simulate(ControllerGains(100.0, 5.0), cfg)
        assert np.allclose(resp.outputs, 0.0)

    def test_dt_must_divide_timing(self):
        with pytest.raises(ValueError):
            PlantConfig(dt=3e-4)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            PlantConfig(inertia=0.0)
        with pytest.raises(ValueError):
            PlantConfig(coulomb_friction=-1.0)
        with pytest.raises(ValueError):
            ControllerGains(math.inf, 1.0)


class TestMetricsExtraction:
    def test_never_rising_signal_censors(self):
        cfg = PlantConfig()
        n = round((cfg.step_time + cfg.horizon) / cfg.dt) + 1
        resp = StepResponse(np.arange(n) * cfg.dt, np.zeros(n), False)
        m = compute_metrics(resp, cfg)
        assert m.rise_time == cfg.horizon
        assert m.transient_time == cfg.horizon
        assert m.settling_time == cfg.horizon
        assert m.overshoot == 0.0

    def test_instant_step_settles_immediately(self):
        cfg = PlantConfig()
        n = round((cfg.step_time + cfg.horizon) / cfg.dt) + 1
        t = np.arange(n) * cfg.dt
        y = np.where(t >= cfg.step_time, 1.0, 0.0)
        m = compute_metrics(StepResponse(t, y, False), cfg)
        assert m.rise_time == 0.0
        assert m.transient_time == 0.0
        assert m.settling_time == 0.0

    def test_settling_uses_last_band_exit(self):
        cfg = PlantConfig()
        n = round((cfg.step_time + cfg.horizon) / cfg.dt) + 1
        t = np.arange(n) * cfg.dt
        y = np.where(t >= cfg.step_time, 1.0, 0.0)
        # late excursion beyond 2% band at 0.6 s after the step
        k = round((cfg.step_time + 0.6) / cfg.dt)
        y = y.copy()
        y[k] = 1.05
        m = compute_metrics(StepResponse(t, y, False), cfg)
        assert m.settling_time == pytest.approx(0.6 + cfg.dt)
        assert m.transient_time == pytest.approx(0.6 + cfg.dt)
        assert m.overshoot == pytest.approx(0.05)

    def test_metrics_round_trip_array(self):
        m = Metrics(0.1, 0.2, 0.3, 0.4)
        assert np.allclose(m.as_array(), [0.1, 0.2, 0.3, 0.4])


class TestTwin:
    def test_identity_twin_reproduces_real(self):
        cfg = PlantConfig()
        g = ControllerGains(120.0, 4.0)
        ident = TwinMismatchConfig(table_noise=0.0)
        assert ident.is_identity
        r1 = simulate(g, cfg)
        r2 = simulate(g, cfg, mismatch=ident)
        np.testing.assert_array_equal(r1.outputs, r2.outputs)

    def test_frozen_table_reproducible(self):
        cfg = PlantConfig()
        g = ControllerGains(80.0, 3.0)
        mm = TwinMismatchConfig(seed=99)
        r1 = simulate(g, cfg, mismatch=mm)
        r2 = simulate(g, cfg, mismatch=mm)
        np.testing.assert_array_equal(r1.outputs, r2.outputs)

    def test_table_seed_changes_twin(self):
        cfg = PlantConfig()
        g = ControllerGains(80.0, 3.0)
        r1 = simulate(g, cfg, mismatch=TwinMismatchConfig(seed=1))
        r2 = simulate(g, cfg, mismatch=TwinMismatchConfig(seed=2))
        assert not np.array_equal(r1.outputs, r2.outputs)

    def test_unset_seed_requires_twin_seed(self):
        cfg = PlantConfig()
        g = ControllerGains(80.0, 3.0)
        mm = TwinMismatchConfig(seed=None)
        with pytest.raises(ValueError):
            simulate(g, cfg, mismatch=mm)
        r1 = simulate(g, cfg, mismatch=mm, twin_seed=5)
        r2 = simulate(g, cfg, mismatch=mm, twin_seed=5)
        np.testing.assert_array_equal(r1.outputs, r2.outputs)

    def test_default_twin_error_is_moderate_not_negligible(self):
        # the twin must mislead enough to matter and stay finite
        cfg = PlantConfig()
        spec = ObjectiveSpec.raw()
        rng = np.random.default_rng(77)
        rels = []
        for _ in range(30):
            g = ControllerGains(float(rng.uniform(30, 200)), float(rng.uniform(2, 10)))
            g1 = evaluate_objective(g, cfg, spec)
            g2 = evaluate_objective(g, cfg, spec, mismatch=TwinMismatchConfig())
            rels.append(abs(g2 - g1) / max(abs(g1), 1e-9))
        assert 0.05 < float(np.mean(rels)) < 5.0
        assert float(np.max(rels)) > 0.2

    def test_param_scales_shift_dynamics(self):
        cfg = PlantConfig()
        g = ControllerGains(120.0, 4.0)
        mm = TwinMismatchConfig(param_scales=(("inertia", 1.5),), table_noise=0.0)
        r_twin = simulate(g, cfg, mismatch=mm)
        r_real = simulate(g, cfg)
        assert not np.array_equal(r_twin.outputs, r_real.outputs)

    def test_affine_output_hook(self):
        cfg = PlantConfig()
        g = ControllerGains(120.0, 4.0)
        mm = TwinMismatchConfig(table_noise=0.0, output_gain=0.8, output_offset=0.1)
        r_twin = simulate(g, cfg, mismatch=mm)
        r_real = simulate(g, cfg)
        np.testing.assert_allclose(r_twin.outputs, 0.8 * r_real.outputs + 0.1)

    def test_mismatch_validation(self):
        with pytest.raises(ValueError):
            TwinMismatchConfig(param_scales=(("bogus_field", 1.1),))
        with pytest.raises(ValueError):
            TwinMismatchConfig(table_noise=-0.5)
        with pytest.raises(ValueError):
            TwinMismatchConfig(output_gain=0.0)


class TestObjective:
    def test_weighted_sum_of_z_scores(self):
        spec = ObjectiveSpec(weights=(0.02, 0.20, 0.70, 0.20),
                             means=(0.1, 0.2, 0.3, 0.4), stds=(0.5, 1.0, 2.0, 4.0),
                             noise_std=0.0)
        m = Metrics(0.2, 0.4, 0.9, 1.2)
        expected = (0.02 * (0.2 - 0.1) / 0.5 + 0.20 * (0.4 - 0.2) / 1.0
                    + 0.70 * (0.9 - 0.3) / 2.0 + 0.20 * (1.2 - 0.4) / 4.0)
        assert objective(m, spec) == pytest.approx(expected, rel=1e-12)
        assert noise_free_objective(m, spec) == objective(m, spec)

    def test_noise_is_seeded_and_additive(self):
        spec = ObjectiveSpec.raw(noise_std=0.02)
        m = Metrics(0.1, 0.2, 0.3, 0.4)
        base = noise_free_objective(m, spec)
        g1 = objective(m, spec, rng=np.random.default_rng(3))
        g2 = objective(m, spec, rng=np.random.default_rng(3))
        assert g1 == g2 != base
        assert abs(g1 - base) < 0.02 * 6

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            ObjectiveSpec(weights=(0.5, 0.5, 0.0, 0.5))
        with pytest.raises(ValueError):
            ObjectiveSpec(noise_std=-0.1)
        with pytest.raises(ValueError):
            ObjectiveSpec(stds=(1.0, 1.0, 1.0, 0.0))


class TestGainBox:
    def test_normalize_round_trip(self):
        box = GainBox()
        g = ControllerGains(120.0, 7.5)
        u = box.normalize(g)
        assert np.all((0 <= u) & (u <= 1))
        g2 = box.denormalize(u)
        assert g2.kp == pytest.approx(g.kp) and g2.kd == pytest.approx(g.kd)

    def test_clip_and_contains(self):
        box = GainBox()
        assert not box.contains(ControllerGains(500.0, 1.0))
        g = box.clip(500.0, 1.0)
        assert g.kp == box.kp_max and g.kd == box.kd_min
        assert box.contains(g)

    def test_degenerate_box_rejected(self):
        with pytest.raises(ValueError):
            GainBox(kp_min=10.0, kp_max=10.0)


class TestHooks:
    def test_friction_scaling(self):
        cfg = PlantConfig()
        doubled = set_friction_scale(cfg, 2.0)
        assert doubled.coulomb_friction == pytest.approx(2.0 * cfg.coulomb_friction)
        with pytest.raises(ValueError):
            set_friction_scale(cfg, 0.0)
        g = ControllerGains(60.0, 6.0)
        m1 = compute_metrics(simulate(g, cfg), cfg)
        m2 = compute_metrics(simulate(g, doubled), doubled)
        assert not np.allclose(m1.as_array(), m2.as_array())

    def test_response_csv_round_trip(self, tmp_path):
        cfg = PlantConfig()
        resp = simulate(ControllerGains(100.0, 5.0), cfg)
        path = tmp_path / "resp.csv"
        write_response_csv(resp, path)
        rows = path.read_text().strip().splitlines()
        assert rows[0] == "t,y"
        assert len(rows) == len(resp.times) + 1
        t1, y1 = rows[1].split(",")
        assert float(t1) == resp.times[0] and float(y1) == resp.outputs[0]
