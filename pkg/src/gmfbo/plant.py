"""Simulated servo plant, PD loop, step-response metrics, and scalar objective.

A current-driven rotary actuator under proportional-derivative position
control plays the real system (IS1). Its digital twin (IS2) runs the same
integrator with optionally perturbed constants and a frozen random static
nonlinearity on the torque map. Responses to a reference step are summarized
by four metrics (overshoot, transient time, rise time, settling time) and
collapsed to a weighted scalar objective.

Dynamics (explicit Euler, fixed dt):

    J dw/dt = tau(i) - b w - fc sign(w),   i = (sat(u) - ke w) / R
    u = kp e + kd de/dt,  e = y* - theta,  de/dt taken as -w (measurement side)

sign(0) = 0; saturation at +-u_max. The derivative term acts on the
measurement so the reference step injects no impulse.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class ControllerGains:
    kp: float
    kd: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.kp) and math.isfinite(self.kd)):
            raise ValueError(f"gains must be finite, got kp={self.kp}, kd={self.kd}")


@dataclass(frozen=True)
class GainBox:
    """Feasible box for the controller gains."""

    kp_min: float = 30.0
    kp_max: float = 200.0
    kd_min: float = 2.0
    kd_max: float = 10.0

    def __post_init__(self) -> None:
        if not (self.kp_min < self.kp_max and self.kd_min < self.kd_max):
            raise ValueError(f"degenerate gain box {self}")

    @property
    def ranges(self) -> np.ndarray:
        return np.array([self.kp_max - self.kp_min, self.kd_max - self.kd_min])

    @property
    def lows(self) -> np.ndarray:
        return np.array([self.kp_min, self.kd_min])

    def contains(self, g: ControllerGains) -> bool:
        return (self.kp_min <= g.kp <= self.kp_max) and (self.kd_min <= g.kd <= self.kd_max)

    def clip(self, kp: float, kd: float) -> ControllerGains:
        return ControllerGains(min(max(kp, self.kp_min), self.kp_max),
                               min(max(kd, self.kd_min), self.kd_max))

    def normalize(self, g: ControllerGains) -> np.ndarray:
        return (np.array([g.kp, g.kd]) - self.lows) / self.ranges

    def denormalize(self, u) -> ControllerGains:
        u = np.asarray(u, dtype=float)
        kp, kd = self.lows + u * self.ranges
        return ControllerGains(float(kp), float(kd))


@dataclass(frozen=True)
class PlantConfig:
    """Physical constants and experiment timing for the actuator."""

    inertia: float = 2.0e-3          # kg m^2
    damping: float = 4.0e-3          # N m s/rad
    torque_constant: float = 0.10    # N m/A
    back_emf: float = 0.10           # V s/rad
    resistance: float = 2.0          # ohm
    coulomb_friction: float = 1.0e-2 # N m
    u_max: float = 24.0              # V, symmetric input saturation
    dead_zone: float = 0.0           # N m, optional torque dead zone (backlash hook)
    dt: float = 1.0e-3               # s, integration step
    step_time: float = 0.1           # s, reference step instant t0
    horizon: float = 1.0             # s, post-step window T
    amplitude: float = 1.0           # rad, step size
    safety_cap: float = 8.0          # rad, |y| beyond this flags instability

    def __post_init__(self) -> None:
        for name in ("inertia", "damping", "torque_constant", "back_emf", "resistance",
                     "u_max", "dt", "step_time", "horizon", "amplitude", "safety_cap"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0.0):
                raise ValueError(f"{name} must be positive and finite, got {v}")
        for name in ("coulomb_friction", "dead_zone"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("step_time", "horizon"):
            ratio = getattr(self, name) / self.dt
            if abs(ratio - round(ratio)) > 1e-9:
                raise ValueError(f"dt must divide {name} exactly "
                                 f"({name}={getattr(self, name)}, dt={self.dt})")


_PHYSICAL_FIELDS = ("inertia", "damping", "torque_constant", "back_emf", "resistance",
                    "coulomb_friction", "u_max", "dead_zone")


@dataclass(frozen=True)
class TwinMismatchConfig:
    """How the digital twin deviates from the real plant.

    param_scales multiplies named physical constants; table_noise sets the
    peak fractional distortion of the twin's torque lookup table. The
    distortion is a partial-load braking error, zero at rest and at the
    saturation current where a motor map is calibrated and peaking in
    between, on reverse current only (the twin brakes harder than the real
    motor); a frozen node-smoothed draw roughens it into an irregular curve
    instead of a clean gain error. At the default 0.5 the twin's objective
    error is largest away from well-damped gains and drops several-fold near
    them, so the twin misleads a global search yet rewards correction near
    the goal. seed=None derives the table seed from the run's master seed
    instead of a fixed one.

    output_gain / output_offset apply an affine distortion to the recorded
    twin trajectory (measurement side, the loop itself is unaffected); they
    exist for correction-recovery studies.
    """

    param_scales: tuple[tuple[str, float], ...] = ()
    table_noise: float = 0.5
    table_size: int = 33
    seed: int | None = 1234
    output_gain: float = 1.0
    output_offset: float = 0.0

    def __post_init__(self) -> None:
        scales = self.param_scales
        if isinstance(scales, dict):
            scales = tuple(sorted(scales.items()))
            object.__setattr__(self, "param_scales", scales)
        for name, scale in scales:
            if name not in _PHYSICAL_FIELDS:
                raise ValueError(f"unknown physical constant '{name}' in param_scales")
            if not (math.isfinite(scale) and scale > 0.0):
                raise ValueError(f"scale for '{name}' must be positive, got {scale}")
        if self.table_noise < 0.0:
            raise ValueError("table_noise must be non-negative")
        if self.table_size < 2:
            raise ValueError("table_size must be at least 2")
        if not (math.isfinite(self.output_gain) and self.output_gain > 0.0):
            raise ValueError(f"output_gain must be positive, got {self.output_gain}")
        if not math.isfinite(self.output_offset):
            raise ValueError("output_offset must be finite")

    @property
    def is_identity(self) -> bool:
        """True when the twin reproduces the real system exactly."""
        return (not self.param_scales and self.table_noise == 0.0
                and self.output_gain == 1.0 and self.output_offset == 0.0)


@dataclass
class StepResponse:
    times: np.ndarray
    outputs: np.ndarray
    unstable: bool


@dataclass(frozen=True)
class Metrics:
    """Step-response summary. Times are measured from the step instant and
    censored at the horizon when the event never occurs."""

    overshoot: float
    transient_time: float
    rise_time: float
    settling_time: float

    def as_array(self) -> np.ndarray:
        return np.array([self.overshoot, self.transient_time,
                         self.rise_time, self.settling_time])


@dataclass(frozen=True)
class ObjectiveSpec:
    """Weights and normalization constants mapping metrics to the scalar objective."""

    weights: tuple[float, float, float, float] = (0.02, 0.20, 0.70, 0.20)
    means: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    stds: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    noise_std: float = 0.02

    def __post_init__(self) -> None:
        if len(self.weights) != 4 or any(w <= 0 for w in self.weights):
            raise ValueError(f"need 4 positive weights, got {self.weights}")
        if len(self.means) != 4 or len(self.stds) != 4 or any(s <= 0 for s in self.stds):
            raise ValueError("need 4 means and 4 positive stds")
        if self.noise_std < 0.0:
            raise ValueError("noise_std must be non-negative")

    @classmethod
    def raw(cls, weights=(0.02, 0.20, 0.70, 0.20), noise_std: float = 0.0) -> "ObjectiveSpec":
        """Identity normalization: the objective is the plain weighted metric sum."""
        return cls(weights=tuple(weights), noise_std=noise_std)


@lru_cache(maxsize=64)
def _torque_table(kt: float, u_max: float, resistance: float, table_size: int,
                  noise_frac: float, seed: int) -> tuple[float, float, tuple[float, ...]]:
    """Frozen perturbed torque map tau(i) as (grid_low, grid_step, values).

    The grid spans twice the saturation current u_max/R (direction reversals
    briefly exceed it). Node torques are kt*i scaled by 1 - noise_frac * w *
    mod where w is a one-sided partial-load bump in x = i/i_sat (clipped to
    [-1, 1]) acting on reverse current only: zero at rest and at saturation,
    peaking near a third of the rated current. A motor map is calibrated at
    rest and near rated current in the driving direction; what the twin
    mischaracterizes is partial-load braking, where friction and magnetic
    nonlinearity interact and the map is never checked, so the twin brakes
    harder than the real motor there. Well-damped responses spend one brief
    braking pulse in that band while oscillatory or sluggish gains re-enter
    it every reversal and accumulate error, leaving twin error largest away
    from good gains and several-fold smaller near them; a directional torque
    error is also one that output feedback cannot cancel. mod is a seeded
    node-smoothed draw (unit std, clipped) that roughens the curve into an
    irregular distortion rather than a clean gain error. The factor is
    floored at 0.02 so extreme noise_frac values never flip the torque
    direction.
    """
    i_sat = u_max / resistance
    grid = np.linspace(-2.0 * i_sat, 2.0 * i_sat, table_size)
    base = kt * grid
    vals = base
    if noise_frac > 0:
        rng = np.random.default_rng(seed)
        draw = np.convolve(rng.normal(0.0, 1.0, table_size),
                           np.ones(9) / 9.0, mode="same")
        draw = np.clip(draw / max(float(draw.std()), 1e-12), -1.0, 1.0)
        x = np.clip(grid / i_sat, -1.0, 1.0)
        w = 7.962 * x * np.exp(-((np.abs(x) - 0.33) ** 2) / 0.125)
        w = np.where(x < 0.0, w, 0.0)
        factor = np.maximum(1.0 - noise_frac * w * (1.0 + 0.5 * draw), 0.02)
        vals = base * factor
    return float(grid[0]), float(grid[1] - grid[0]), tuple(float(v) for v in vals)


def _effective_config(cfg: PlantConfig, mismatch: TwinMismatchConfig) -> PlantConfig:
    scales = dict(mismatch.param_scales)
    if not scales:
        return cfg
    return replace(cfg, **{name: getattr(cfg, name) * scales[name]
                           for name in scales})


def simulate(gains: ControllerGains, cfg: PlantConfig,
             mismatch: TwinMismatchConfig | None = None,
             twin_seed: int | None = None) -> StepResponse:
    """Closed-loop unit-step response on [0, t0 + T], sampled every dt.

    mismatch=None runs the real system; otherwise the twin (scaled constants
    plus the frozen torque-table perturbation). twin_seed overrides the
    table seed when the mismatch config leaves it unset.
    """
    eff = cfg if mismatch is None else _effective_config(cfg, mismatch)
    n_steps = round((cfg.step_time + cfg.horizon) / cfg.dt)
    k_step = round(cfg.step_time / cfg.dt)

    table = None
    if mismatch is not None and mismatch.table_noise > 0.0:
        seed = mismatch.seed if mismatch.seed is not None else twin_seed
        if seed is None:
            raise ValueError("twin table seed unset: provide mismatch.seed or twin_seed")
        table = _torque_table(eff.torque_constant, eff.u_max, eff.resistance,
                              mismatch.table_size, mismatch.table_noise, int(seed))

    kp, kd = gains.kp, gains.kd
    J, b = eff.inertia, eff.damping
    kt, ke, R = eff.torque_constant, eff.back_emf, eff.resistance
    fc, umax, dz = eff.coulomb_friction, eff.u_max, eff.dead_zone
    dt, amp, cap = cfg.dt, cfg.amplitude, cfg.safety_cap

    if table is not None:
        g_lo, g_step, vals = table
        inv_step = 1.0 / g_step
        last = len(vals) - 1

    theta = 0.0
    omega = 0.0
    out = [0.0] * (n_steps + 1)
    unstable = False
    for k in range(n_steps):
        ref = amp if k >= k_step else 0.0
        u = kp * (ref - theta) - kd * omega
        if u > umax:
            u = umax
        elif u < -umax:
            u = -umax
        i = (u - ke * omega) / R
        if table is None:
            tau = kt * i
        else:
            pos = (i - g_lo) * inv_step
            if pos <= 0.0:
                tau = vals[0]
            elif pos >= last:
                tau = vals[last]
            else:
                j = int(pos)
                tau = vals[j] + (pos - j) * (vals[j + 1] - vals[j])
        if dz > 0.0:
            if tau > dz:
                tau -= dz
            elif tau < -dz:
                tau += dz
            else:
                tau = 0.0
        fric = fc if omega > 0.0 else (-fc if omega < 0.0 else 0.0)
        acc = (tau - b * omega - fric) / J
        theta += dt * omega
        omega += dt * acc
        out[k + 1] = theta
        if theta > cap or theta < -cap:
            unstable = True

    outputs = np.asarray(out)
    if unstable:
        outputs = np.clip(outputs, -cap, cap)
    if mismatch is not None and (mismatch.output_gain != 1.0 or mismatch.output_offset != 0.0):
        outputs = mismatch.output_gain * outputs + mismatch.output_offset
    times = np.arange(n_steps + 1) * dt
    return StepResponse(times=times, outputs=outputs, unstable=unstable)


def compute_metrics(resp: StepResponse, cfg: PlantConfig) -> Metrics:
    """Step metrics over the post-step window [t0, t0 + T].

    Overshoot: max(0, (peak - ref)/ref). Rise: first 10% to first 90%
    crossing interval. Transient/settling: first instant after which the
    response stays inside the 5% / 2% band. Non-events censor at T; an
    unstable response censors everything at its maximum.
    """
    T = cfg.horizon
    ref = cfg.amplitude
    if resp.unstable:
        return Metrics(overshoot=(cfg.safety_cap - ref) / ref,
                       transient_time=T, rise_time=T, settling_time=T)
    i0 = round(cfg.step_time / cfg.dt)
    y = resp.outputs[i0:]
    t = resp.times[i0:] - cfg.step_time

    overshoot = max(0.0, (float(y.max()) - ref) / ref)

    idx10 = np.nonzero(y >= 0.1 * ref)[0]
    idx90 = np.nonzero(y >= 0.9 * ref)[0]
    if idx10.size and idx90.size:
        rise = float(t[idx90[0]] - t[idx10[0]])
    else:
        rise = T

    def _entry_time(band: float) -> float:
        bad = np.nonzero(np.abs(y - ref) > band * ref)[0]
        if bad.size == 0:
            return 0.0
        last_bad = int(bad[-1])
        if last_bad == y.size - 1:
            return T
        return float(t[last_bad + 1])

    return Metrics(overshoot=overshoot, transient_time=_entry_time(0.05),
                   rise_time=rise, settling_time=_entry_time(0.02))


def objective(metrics: Metrics, spec: ObjectiveSpec,
              rng: np.random.Generator | None = None) -> float:
    """Weighted sum of normalized metrics, plus Gaussian observation noise if rng given."""
    z = (metrics.as_array() - np.asarray(spec.means)) / np.asarray(spec.stds)
    g = float(np.dot(spec.weights, z))
    if rng is not None and spec.noise_std > 0.0:
        g += float(rng.normal(0.0, spec.noise_std))
    return g


def noise_free_objective(metrics: Metrics, spec: ObjectiveSpec) -> float:
    return objective(metrics, spec, rng=None)


def set_friction_scale(cfg: PlantConfig, factor: float) -> PlantConfig:
    """Config with Coulomb friction scaled by factor (non-stationary scenario hook)."""
    if factor <= 0.0:
        raise ValueError("friction factor must be positive")
    return replace(cfg, coulomb_friction=cfg.coulomb_friction * factor)


def evaluate_objective(gains: ControllerGains, cfg: PlantConfig, spec: ObjectiveSpec,
                       mismatch: TwinMismatchConfig | None = None,
                       rng: np.random.Generator | None = None,
                       twin_seed: int | None = None) -> float:
    """Simulate, summarize, and score in one call."""
    resp = simulate(gains, cfg, mismatch, twin_seed=twin_seed)
    return objective(compute_metrics(resp, cfg), spec, rng)


def write_response_csv(resp: StepResponse, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "y"])
        for t, y in zip(resp.times, resp.outputs):
            w.writerow([repr(float(t)), repr(float(y))])
