"""Optimization drivers: the guided multi-fidelity loop and its baselines.

Methods:
  gmfbo          adaptive kernel coupling and costs, corrected-twin batches
  bo_ei          plain expected improvement on the real system only
  mfbo_caei      two-fidelity caEI with fixed coupling and fixed twin cost
  mfbo_modified  two-fidelity caEI with adaptive coupling driven by twin
                 re-runs at real-system queries (no corrected twin)

Each run is deterministic for a master seed. Independent named substreams
(LHS design, observation noise, candidate draws, fit restarts, acquisition
restarts, correction fits) are derived from the master seed, so changing how
one component consumes randomness leaves the others' draws intact; paired
cross-method comparisons rely on this.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import qmc

from .acquisition import AcquisitionState, sampling_cost, select_candidate
from .correction import (
    CorrectionDataset,
    CorrectionModel,
    estimate_mismatch,
    generate_is3_batch,
    train_correction_model,
    update_correction_dataset,
)
from .gp import GPNumericalError, HyperPriors, PosteriorGP, SurrogateDataset, fit_hyperparameters
from .kernel import FidelityState, KernelHyperparams
from .plant import (
    ControllerGains,
    GainBox,
    ObjectiveSpec,
    PlantConfig,
    TwinMismatchConfig,
    compute_metrics,
    objective,
    set_friction_scale,
    simulate,
)

METHODS = ("gmfbo", "bo_ei", "mfbo_caei", "mfbo_modified")

_STREAM_CODES = {"lhs": 1, "noise": 2, "candidate": 3, "fit": 4, "acq": 5, "corr": 6}

MISMATCH_REF_EPS = 1e-9   # reference magnitudes below this are skipped in ratios
FIXED_L_GAMMA0 = 0.5      # baseline MFBO coupling lengthscale (prior median)
FIXED_TWIN_COST = 0.5     # baseline MFBO twin query cost


def stream(master_seed: int, name: str) -> np.random.Generator:
    """Named child generator of the master seed."""
    return np.random.default_rng(np.random.SeedSequence([master_seed, _STREAM_CODES[name]]))


@dataclass(frozen=True)
class NonStationaryEvent:
    """Plant change switched in after a fixed number of real-system evaluations."""

    friction_factor: float = 2.0
    after_is1_evals: int = 4

    def __post_init__(self) -> None:
        if self.friction_factor <= 0.0:
            raise ValueError("friction_factor must be positive")
        if self.after_is1_evals < 0:
            raise ValueError("after_is1_evals must be non-negative")


@dataclass(frozen=True)
class RunConfig:
    """One optimization run: method, budgets, plant stack, and seed."""

    method: str = "gmfbo"
    n_iterations: int = 20
    n0_is1: int = 2
    n0_is2: int = 4
    n_c: int = 4
    s_prime: float = 0.1
    alpha: float = 1.0
    beta: float = 4.0
    rho: float = 0.002
    e_init: float = 0.1
    seed: int = 0
    box: GainBox = field(default_factory=GainBox)
    plant: PlantConfig = field(default_factory=PlantConfig)
    mismatch: TwinMismatchConfig = field(default_factory=TwinMismatchConfig)
    objective: ObjectiveSpec = field(default_factory=ObjectiveSpec.raw)
    event: NonStationaryEvent | None = None
    dc_accumulate: bool = False
    is3_at_init: bool = False
    surrogate_restarts: int = 8
    surrogate_max_evals: int = 120
    correction_restarts: int = 2
    correction_max_evals: int = 60

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.n_iterations < 1:
            raise ValueError("n_iterations must be at least 1")
        if self.n0_is1 < 1 or self.n0_is2 < 1:
            raise ValueError("initial design sizes must be at least 1")
        if self.n_c < 1:
            raise ValueError("n_c must be at least 1")
        if not 0.0 < self.s_prime < 1.0:
            raise ValueError("s_prime must lie strictly between 0 and 1")
        if self.alpha <= 0.0 or self.beta < 0.0 or self.rho <= 0.0:
            raise ValueError("alpha and rho must be positive, beta non-negative")
        if self.e_init < 0.0:
            raise ValueError("e_init must be non-negative")

    def surrogate_priors(self) -> HyperPriors:
        return HyperPriors(restarts=self.surrogate_restarts,
                           max_evals=self.surrogate_max_evals)

    def correction_priors(self) -> HyperPriors:
        return HyperPriors(restarts=self.correction_restarts,
                           max_evals=self.correction_max_evals)


@dataclass(frozen=True)
class IterationRecord:
    """One evaluated point (or probe) in chronological order.

    iteration 0 marks initialization; loop iterations count from 1. Rows with
    in_dataset=False (modified-MFBO twin probes) are logged but excluded from
    the surrogate data and the unbiased cost.
    """

    iteration: int
    source: str               # is1 | is2 | is3
    fidelity: float
    kp: float
    kd: float
    objective: float
    e_is2: float              # running mismatch after this iteration's update
    l_gamma0: float
    cost: float               # adaptive sampling cost charged at query time
    cumulative_cost: float    # unbiased cost: sum of fidelities of dataset rows
    best_is1: float
    bar_sigma_c: float = math.nan
    in_dataset: bool = True
    exploration: bool = False


def unbiased_cost(records: list[IterationRecord]) -> float:
    """Independent recomputation of the final cumulative unbiased cost."""
    return float(sum(r.fidelity for r in records if r.in_dataset))


@dataclass
class RunResult:
    config: RunConfig
    records: list[IterationRecord]
    best_gains: ControllerGains
    best_objective: float
    final_e: float
    fallback_fits: int = 0
    correction_shortfalls: int = 0

    def is1_evaluations(self) -> int:
        return sum(1 for r in self.records if r.source == "is1" and r.in_dataset)

    def is1_evals_to_threshold(self, threshold: float) -> int | None:
        """Real-system evaluations (initialization included) until the best
        observed real objective first drops to the threshold; None if never."""
        count = 0
        best = math.inf
        for r in self.records:
            if r.source == "is1" and r.in_dataset:
                count += 1
                best = min(best, r.objective)
                if best <= threshold:
                    return count
        return None

    def e_trace(self) -> list[tuple[int, float]]:
        """Running mismatch at the end of each iteration (last row wins)."""
        out: dict[int, float] = {}
        for r in self.records:
            out[r.iteration] = r.e_is2
        return sorted(out.items())


class _Driver:
    """Shared machinery for all methods; one instance per run."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.lhs_rng = stream(cfg.seed, "lhs")
        self.noise_rng = stream(cfg.seed, "noise")
        self.cand_rng = stream(cfg.seed, "candidate")
        self.fit_rng = stream(cfg.seed, "fit")
        self.acq_rng = stream(cfg.seed, "acq")
        self.corr_rng = stream(cfg.seed, "corr")
        self.fs = self._initial_fidelity_state()
        self.data = SurrogateDataset.empty(3)
        self.records: list[IterationRecord] = []
        self.cum_cost = 0.0
        self.is1_count = 0
        self.best_is1 = math.inf
        self.best_gains: ControllerGains | None = None
        self.plant_now = cfg.plant
        self.dc = CorrectionDataset.empty()
        self.corr_model: CorrectionModel | None = None
        self.corr_warm: KernelHyperparams | None = None
        self.surr_warm: KernelHyperparams | None = None
        self.pairs: list[tuple[float, float]] = []   # mismatch history
        self.fallback_fits = 0
        self.correction_shortfalls = 0

    def _initial_fidelity_state(self) -> FidelityState:
        cfg = self.cfg
        if cfg.method == "mfbo_caei":
            return FidelityState(e_is2=cfg.e_init, s_prime=cfg.s_prime, beta=cfg.beta,
                                 fixed_l_gamma0=FIXED_L_GAMMA0,
                                 fixed_cost=FIXED_TWIN_COST)
        return FidelityState(e_is2=cfg.e_init, s_prime=cfg.s_prime, beta=cfg.beta)

    # ------------------------------------------------------------------ plant
    def _maybe_trigger_event(self) -> None:
        ev = self.cfg.event
        if ev is not None and self.is1_count == ev.after_is1_evals:
            self.plant_now = set_friction_scale(self.cfg.plant, ev.friction_factor)

    def eval_is1(self, gains: ControllerGains):
        """Real-system query: trajectory plus noisy objective observation."""
        resp = simulate(gains, self.plant_now)
        g = objective(compute_metrics(resp, self.plant_now), self.cfg.objective,
                      rng=self.noise_rng)
        self.is1_count += 1
        self._maybe_trigger_event()
        return resp, g

    def eval_is2(self, gains: ControllerGains) -> float:
        """Twin objective observation (twin never sees the plant change)."""
        resp = simulate(gains, self.cfg.plant, mismatch=self.cfg.mismatch)
        return objective(compute_metrics(resp, self.cfg.plant), self.cfg.objective,
                         rng=self.noise_rng)

    def twin_trajectory(self, gains: ControllerGains):
        return simulate(gains, self.cfg.plant, mismatch=self.cfg.mismatch)

    # ------------------------------------------------------------- recording
    def record(self, iteration: int, source: str, fidelity: float,
               gains: ControllerGains, g: float, bar_sigma_c: float = math.nan,
               in_dataset: bool = True, exploration: bool = False) -> None:
        if in_dataset:
            self.cum_cost += fidelity
        if source == "is1" and in_dataset and g < self.best_is1:
            self.best_is1 = g
            self.best_gains = gains
        self.records.append(IterationRecord(
            iteration=iteration, source=source, fidelity=fidelity,
            kp=gains.kp, kd=gains.kd, objective=g, e_is2=self.fs.e_is2,
            l_gamma0=self.fs.l_gamma0, cost=sampling_cost(fidelity, self.fs),
            cumulative_cost=self.cum_cost, best_is1=self.best_is1,
            bar_sigma_c=bar_sigma_c, in_dataset=in_dataset,
            exploration=exploration))

    def add_observation(self, gains: ControllerGains, fidelity: float, g: float,
                        tag: str) -> None:
        u = self.cfg.box.normalize(gains)
        self.data.add(np.append(u, fidelity), g, tag)

    def restamp_iteration(self, iteration: int) -> None:
        """Rewrite this iteration's rows with the post-update mismatch state."""
        for i, r in enumerate(self.records):
            if r.iteration == iteration:
                self.records[i] = replace(r, e_is2=self.fs.e_is2,
                                          l_gamma0=self.fs.l_gamma0)

    # ------------------------------------------------------------------ init
    def initialize(self) -> None:
        cfg = self.cfg
        sampler = qmc.LatinHypercube(d=2, seed=self.lhs_rng)
        u_is1 = sampler.random(cfg.n0_is1)
        is1_runs = []
        for u in u_is1:
            gains = cfg.box.denormalize(u)
            resp, g = self.eval_is1(gains)
            self.add_observation(gains, 1.0, g, "is1")
            self.record(0, "is1", 1.0, gains, g)
            is1_runs.append((gains, resp))
        if cfg.method == "bo_ei":
            return
        u_is2 = sampler.random(cfg.n0_is2)
        for u in u_is2:
            gains = cfg.box.denormalize(u)
            g = self.eval_is2(gains)
            self.add_observation(gains, cfg.s_prime, g, "is2")
            self.record(0, "is2", cfg.s_prime, gains, g)
        if cfg.method == "gmfbo" and cfg.is3_at_init:
            for gains, resp in is1_runs:
                self.guided_update(0, gains, resp)

    # ------------------------------------------------------------- surrogate
    def fit_surrogate(self) -> PosteriorGP:
        cfg = self.cfg
        fit_seed = int(self.fit_rng.integers(2**31))
        fit = fit_hyperparameters(self.data, cfg.surrogate_priors(), self.fs,
                                  seed=fit_seed, warm_start=self.surr_warm)
        if fit.fallback:
            self.fallback_fits += 1
        self.surr_warm = fit.hyperparams
        try:
            return PosteriorGP.build(self.data, fit.hyperparams, self.fs)
        except GPNumericalError:
            self.fallback_fits += 1
            med = cfg.surrogate_priors().median_hyperparams()
            try:
                return PosteriorGP.build(self.data, med, self.fs)
            except GPNumericalError:
                # last resort: inflate noise so the loop always completes
                noisy = replace(med, noise_var=1e-2)
                return PosteriorGP.build(self.data, noisy, self.fs)

    # -------------------------------------------------------- guided pathway
    def guided_update(self, iteration: int, gains: ControllerGains,
                      resp_is1) -> None:
        """Post-IS1 bookkeeping: correction pair, corrector retrain, gated
        twin batch, and the mismatch-driven state update."""
        cfg = self.cfg
        resp_is2 = self.twin_trajectory(gains)
        self.dc = update_correction_dataset(self.dc, gains, resp_is2, resp_is1,
                                            accumulate=cfg.dc_accumulate)
        if len(self.dc) < 4:
            return
        corr_seed = int(self.corr_rng.integers(2**31))
        self.corr_model = train_correction_model(
            self.dc, seed=corr_seed, priors=cfg.correction_priors(),
            warm_start=self.corr_warm)
        self.corr_warm = self.corr_model.hyperparams
        batch = generate_is3_batch(
            self.corr_model, gains, cfg.box, cfg.plant, cfg.objective,
            cfg.mismatch, n_c=cfg.n_c, rng=self.cand_rng, alpha=cfg.alpha,
            rho=cfg.rho, s_prime=cfg.s_prime)
        if batch.shortfall:
            self.correction_shortfalls += 1
        for s in batch.samples:
            self.add_observation(s.gains, cfg.s_prime, s.g_corrected, "is3")
            self.record(iteration, "is3", cfg.s_prime, s.gains, s.g_corrected,
                        bar_sigma_c=s.bar_sigma_c)
            self.pairs.append((s.g_corrected, s.g_twin))
        self.fs = self.fs.with_mismatch(
            estimate_mismatch(self.pairs, current=self.fs.e_is2))
        self.restamp_iteration(iteration)

    def modified_update(self, iteration: int, gains: ControllerGains,
                        g_is1: float) -> None:
        """Mismatch estimate from a twin probe at the real query's gains."""
        g_probe = self.eval_is2(gains)
        self.record(iteration, "is2", self.cfg.s_prime, gains, g_probe,
                    in_dataset=False)
        if abs(g_is1) >= MISMATCH_REF_EPS:
            self.pairs.append((g_is1, g_probe))
        vals = [abs(g1 - g2) / abs(g1) for g1, g2 in self.pairs]
        if vals:
            self.fs = self.fs.with_mismatch(float(np.mean(vals)))
        self.restamp_iteration(iteration)

    # ------------------------------------------------------------------ loop
    def run(self) -> RunResult:
        cfg = self.cfg
        self.initialize()
        sources = (1.0,) if cfg.method == "bo_ei" else None
        for n in range(1, cfg.n_iterations + 1):
            model = self.fit_surrogate()
            state = AcquisitionState.from_dataset(self.data, self.fs)
            sel = select_candidate(model, state, cfg.s_prime, self.acq_rng,
                                   sources=sources)
            gains = cfg.box.denormalize(sel.point)
            if sel.fidelity == 1.0:
                resp, g = self.eval_is1(gains)
                self.add_observation(gains, 1.0, g, "is1")
                self.record(n, "is1", 1.0, gains, g, exploration=sel.exploration)
                if cfg.method == "gmfbo":
                    self.guided_update(n, gains, resp)
                elif cfg.method == "mfbo_modified":
                    self.modified_update(n, gains, g)
            else:
                g = self.eval_is2(gains)
                self.add_observation(gains, cfg.s_prime, g, "is2")
                self.record(n, "is2", cfg.s_prime, gains, g,
                            exploration=sel.exploration)
        assert self.best_gains is not None  # n0_is1 >= 1 guarantees an IS1 row
        return RunResult(config=cfg, records=self.records,
                         best_gains=self.best_gains,
                         best_objective=self.best_is1, final_e=self.fs.e_is2,
                         fallback_fits=self.fallback_fits,
                         correction_shortfalls=self.correction_shortfalls)


def initialize_dataset(cfg: RunConfig, seed: int | None = None) -> SurrogateDataset:
    """Initial design only: LHS gains evaluated at both sources."""
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    driver = _Driver(cfg)
    driver.initialize()
    return driver.data


def run_gmfbo(cfg: RunConfig) -> RunResult:
    if cfg.method != "gmfbo":
        cfg = replace(cfg, method="gmfbo")
    return _Driver(cfg).run()


def run_baseline_bo(cfg: RunConfig) -> RunResult:
    if cfg.method != "bo_ei":
        cfg = replace(cfg, method="bo_ei")
    return _Driver(cfg).run()


def run_mfbo(cfg: RunConfig, adaptive_kernel: bool = False) -> RunResult:
    method = "mfbo_modified" if adaptive_kernel else "mfbo_caei"
    if cfg.method != method:
        cfg = replace(cfg, method=method)
    return _Driver(cfg).run()


def run_method(cfg: RunConfig) -> RunResult:
    """Dispatch on cfg.method."""
    return _Driver(cfg).run()


__all__ = [
    "FIXED_L_GAMMA0", "FIXED_TWIN_COST", "METHODS", "IterationRecord",
    "NonStationaryEvent", "RunConfig", "RunResult", "initialize_dataset",
    "run_baseline_bo", "run_gmfbo", "run_method", "run_mfbo", "stream",
    "unbiased_cost",
]
