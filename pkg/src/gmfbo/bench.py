"""Experiment harness: objective calibration, paired Monte Carlo comparison,
the initial-dataset ablation grid, the non-stationary scenario, and CSV export.

Pairing discipline: every method in one benchmark consumes the identical,
explicitly listed run seeds, so per-method outputs are independent of method
order and of worker count. All exported floats are written with repr() so
re-runs are byte-identical.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from multiprocessing import Pool
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from .gmfbo import METHODS, IterationRecord, NonStationaryEvent, RunConfig, RunResult, run_method
from .plant import (
    ControllerGains,
    GainBox,
    ObjectiveSpec,
    PlantConfig,
    TwinMismatchConfig,
    compute_metrics,
    evaluate_objective,
    set_friction_scale,
    simulate,
)

DESK_WEIGHTS = (0.02, 0.20, 0.70, 0.20)
HARDWARE_WEIGHTS = (0.01, 0.09, 0.82, 0.09)
WEIGHT_PROFILES = {"desk": DESK_WEIGHTS, "hardware": HARDWARE_WEIGHTS}

DEFAULT_MARGIN = 0.1      # threshold = grid-true optimum + this, in objective units
DEFAULT_GRID = 50         # resolution of the ground-truth objective grid
DEFAULT_N_EXPER = 20      # desk-scale repetition count
STD_FLOOR = 1e-9          # per-metric std floor for degenerate probes
Z95 = 1.96


@dataclass(frozen=True)
class CalibrationResult:
    """Per-metric normalization constants measured from noise-free probes."""

    means: tuple[float, float, float, float]
    stds: tuple[float, float, float, float]
    weights: tuple[float, float, float, float]
    probe_count: int

    def to_spec(self, noise_std: float = 0.02) -> ObjectiveSpec:
        return ObjectiveSpec(weights=self.weights, means=self.means,
                             stds=self.stds, noise_std=noise_std)


def calibrate_weights(plant: PlantConfig, probe_count: int = 10, seed: int = 0,
                      weights: tuple[float, ...] = DESK_WEIGHTS,
                      box: GainBox | None = None) -> CalibrationResult:
    """Metric means/stds from noise-free real-system runs at LHS gains."""
    if probe_count < 2:
        raise ValueError("probe_count must be at least 2")
    box = box or GainBox()
    sampler = qmc.LatinHypercube(d=2, seed=np.random.default_rng(
        np.random.SeedSequence([seed, 1])))
    rows = []
    for u in sampler.random(probe_count):
        resp = simulate(box.denormalize(u), plant)
        rows.append(compute_metrics(resp, plant).as_array())
    m = np.array(rows)
    means = tuple(float(x) for x in m.mean(axis=0))
    stds = tuple(float(max(x, STD_FLOOR)) for x in m.std(axis=0))
    return CalibrationResult(means=means, stds=stds,
                             weights=tuple(float(w) for w in weights),
                             probe_count=probe_count)


def grid_true_optimum(plant: PlantConfig, spec: ObjectiveSpec,
                      box: GainBox | None = None,
                      resolution: int = DEFAULT_GRID) -> tuple[ControllerGains, float]:
    """Noise-free real-system optimum over a uniform gain grid."""
    box = box or GainBox()
    kps = np.linspace(box.kp_min, box.kp_max, resolution)
    kds = np.linspace(box.kd_min, box.kd_max, resolution)
    best_v = math.inf
    best_g = ControllerGains(float(kps[0]), float(kds[0]))
    for kp in kps:
        for kd in kds:
            g = ControllerGains(float(kp), float(kd))
            v = evaluate_objective(g, plant, spec)
            if v < best_v:
                best_v, best_g = v, g
    return best_g, float(best_v)


@dataclass(frozen=True)
class Curve:
    """Aligned mean curve with a 95% confidence band."""

    x: tuple[float, ...]
    mean: tuple[float, ...]
    ci_lo: tuple[float, ...]
    ci_hi: tuple[float, ...]


@dataclass
class MethodOutcome:
    method: str
    seeds: list[int]
    n_star: list[float]            # censored runs counted at budget + 1
    censored: list[bool]
    best_curve: Curve              # x = IS1 evaluation count
    cost_curve: Curve              # x = BO iteration
    runs: list[RunResult]

    def mean_n_star(self) -> float:
        return float(np.mean(self.n_star))

    def n_star_display(self, budget: int) -> str:
        """Table-style cell: '>budget' when censoring pushes the mean past it."""
        mean = self.mean_n_star()
        if any(self.censored) and mean > budget:
            return f">{budget}"
        return f"{mean:.1f}"


@dataclass
class BenchmarkSummary:
    config: RunConfig
    methods: list[str]
    seeds: list[int]
    threshold: float
    margin: float
    optimum: float
    is1_budget: int
    outcomes: dict[str, MethodOutcome] = field(default_factory=dict)


def _ci(values: np.ndarray) -> tuple[float, float]:
    n = len(values)
    half = Z95 * float(values.std()) / math.sqrt(n) if n > 1 else 0.0
    mean = float(values.mean())
    return mean - half, mean + half


def _mean_curve(x: np.ndarray, per_run: np.ndarray) -> Curve:
    mean, lo, hi = [], [], []
    for j in range(per_run.shape[1]):
        col = per_run[:, j]
        l, h = _ci(col)
        mean.append(float(col.mean()))
        lo.append(l)
        hi.append(h)
    return Curve(x=tuple(float(v) for v in x), mean=tuple(mean),
                 ci_lo=tuple(lo), ci_hi=tuple(hi))


def _best_by_is1_count(records: list[IterationRecord], budget: int) -> np.ndarray:
    """Best observed real objective after each IS1 evaluation, carried forward."""
    out = np.full(budget, np.nan)
    best = math.inf
    k = 0
    for r in records:
        if r.source == "is1" and r.in_dataset:
            best = min(best, r.objective)
            if k < budget:
                out[k] = best
            k += 1
    if k == 0:
        raise ValueError("run contains no real-system evaluations")
    out[k:] = best
    return out


def _cost_by_iteration(records: list[IterationRecord], n_iterations: int) -> np.ndarray:
    out = np.zeros(n_iterations + 1)
    for r in records:
        out[r.iteration] = r.cumulative_cost
    for i in range(1, n_iterations + 1):
        if out[i] == 0.0:
            out[i] = out[i - 1]
    return out


def _n_star(result: RunResult, threshold: float, budget: int) -> tuple[float, bool]:
    n = result.is1_evals_to_threshold(threshold)
    if n is None:
        return float(budget + 1), True
    return float(n), False


def _run_task(task: tuple[str, int, RunConfig]) -> tuple[str, int, RunResult]:
    method, seed, cfg = task
    return method, seed, run_method(replace(cfg, method=method, seed=seed))


def monte_carlo(methods: list[str], cfg: RunConfig, n_exper: int = DEFAULT_N_EXPER,
                seed: int = 0, margin: float = DEFAULT_MARGIN,
                threshold: float | None = None,
                grid_resolution: int = DEFAULT_GRID,
                jobs: int = 1) -> BenchmarkSummary:
    """Paired-seed comparison of methods on one scenario.

    n* counts real-system evaluations, initialization included, until the best
    observed real objective reaches the threshold (grid-true optimum plus
    margin, computed noise-free). Runs that never reach it are censored at the
    IS1 budget and flagged, never dropped.
    """
    if n_exper < 2:
        raise ValueError("n_exper must be at least 2")
    if not methods:
        raise ValueError("methods must be non-empty")
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; choose from {METHODS}")
    optimum = math.nan
    if threshold is None:
        _, optimum = grid_true_optimum(cfg.plant, cfg.objective,
                                       box=cfg.box, resolution=grid_resolution)
        threshold = optimum + margin
    seeds = [seed + i for i in range(n_exper)]
    budget = cfg.n0_is1 + cfg.n_iterations
    tasks = [(m, s, cfg) for m in methods for s in seeds]
    if jobs > 1:
        with Pool(processes=jobs) as pool:
            done = pool.map(_run_task, tasks)
    else:
        done = [_run_task(t) for t in tasks]
    by_key = {(m, s): res for m, s, res in done}

    summary = BenchmarkSummary(config=cfg, methods=list(methods), seeds=seeds,
                               threshold=float(threshold), margin=float(margin),
                               optimum=float(optimum), is1_budget=budget)
    for m in methods:
        runs = [by_key[(m, s)] for s in seeds]
        stars, cens = [], []
        best_rows = np.zeros((n_exper, budget))
        cost_rows = np.zeros((n_exper, cfg.n_iterations + 1))
        for i, res in enumerate(runs):
            ns, c = _n_star(res, threshold, budget)
            stars.append(ns)
            cens.append(c)
            best_rows[i] = _best_by_is1_count(res.records, budget)
            cost_rows[i] = _cost_by_iteration(res.records, cfg.n_iterations)
        summary.outcomes[m] = MethodOutcome(
            method=m, seeds=list(seeds), n_star=stars, censored=cens,
            best_curve=_mean_curve(np.arange(1, budget + 1), best_rows),
            cost_curve=_mean_curve(np.arange(cfg.n_iterations + 1), cost_rows),
            runs=runs)
    return summary


DEFAULT_ABLATION_GRID = (
    (1, 10), (2, 10), (3, 10), (4, 10), (5, 10), (10, 10),
    (2, 5), (2, 20), (2, 30),
)


@dataclass
class AblationTable:
    grid: list[tuple[int, int]]
    methods: list[str]
    cells: dict[tuple[int, int], BenchmarkSummary]

    def rows(self) -> list[dict[str, str]]:
        out = []
        for n0_is1, n0_is2 in self.grid:
            s = self.cells[(n0_is1, n0_is2)]
            row = {"n0_is1": str(n0_is1), "n0_is2": str(n0_is2)}
            for m in self.methods:
                o = s.outcomes[m]
                row[m] = o.n_star_display(s.is1_budget)
                row[m + "_mean"] = repr(o.mean_n_star())
                row[m + "_censored"] = str(sum(o.censored))
            out.append(row)
        return out


def ablation_grid(cfg: RunConfig, methods: list[str] | None = None,
                  grid: tuple[tuple[int, int], ...] = DEFAULT_ABLATION_GRID,
                  n_exper: int = DEFAULT_N_EXPER, seed: int = 0,
                  margin: float = DEFAULT_MARGIN,
                  grid_resolution: int = DEFAULT_GRID,
                  jobs: int = 1) -> AblationTable:
    """Initial-dataset sweep. The threshold is computed once; all cells share
    the same plant and objective."""
    if not grid:
        raise ValueError("ablation grid must be non-empty")
    methods = methods or ["bo_ei", "mfbo_caei", "gmfbo"]
    _, optimum = grid_true_optimum(cfg.plant, cfg.objective,
                                   box=cfg.box, resolution=grid_resolution)
    threshold = optimum + margin
    cells = {}
    for n0_is1, n0_is2 in grid:
        cell_cfg = replace(cfg, n0_is1=n0_is1, n0_is2=n0_is2)
        s = monte_carlo(methods, cell_cfg, n_exper=n_exper, seed=seed,
                        margin=margin, threshold=threshold, jobs=jobs)
        s.optimum = optimum
        cells[(n0_is1, n0_is2)] = s
    return AblationTable(grid=list(grid), methods=list(methods), cells=cells)


def post_event_evals_to_threshold(result: RunResult, threshold: float,
                                  event: NonStationaryEvent) -> int | None:
    """Real-system evaluations after the plant change until the best
    post-change real objective reaches the threshold; None if never."""
    count = 0
    seen = 0
    best = math.inf
    for r in result.records:
        if r.source == "is1" and r.in_dataset:
            seen += 1
            if seen <= event.after_is1_evals:
                continue
            count += 1
            best = min(best, r.objective)
            if best <= threshold:
                return count
    return None


def nonstationary_scenario(cfg: RunConfig, methods: list[str] | None = None,
                           n_exper: int = DEFAULT_N_EXPER, seed: int = 0,
                           margin: float = DEFAULT_MARGIN,
                           grid_resolution: int = DEFAULT_GRID,
                           jobs: int = 1) -> BenchmarkSummary:
    """Friction-change scenario: the threshold targets the post-change
    plant's grid-true optimum."""
    methods = methods or ["bo_ei", "gmfbo"]
    event = cfg.event or NonStationaryEvent()
    cfg = replace(cfg, event=event)
    changed = set_friction_scale(cfg.plant, event.friction_factor)
    _, optimum = grid_true_optimum(changed, cfg.objective,
                                   box=cfg.box, resolution=grid_resolution)
    summary = monte_carlo(methods, cfg, n_exper=n_exper, seed=seed,
                          margin=margin, threshold=optimum + margin, jobs=jobs)
    summary.optimum = optimum
    return summary


# ---------------------------------------------------------------- reporting

RECORD_COLUMNS = ("iteration", "source", "fidelity", "kp", "kd", "objective",
                  "e_is2", "l_gamma0", "cost", "cumulative_cost", "best_is1",
                  "bar_sigma_c", "in_dataset", "exploration")


def write_run_csv(result: RunResult, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RECORD_COLUMNS)
        for r in result.records:
            w.writerow([r.iteration, r.source, repr(r.fidelity), repr(r.kp),
                        repr(r.kd), repr(r.objective), repr(r.e_is2),
                        repr(r.l_gamma0), repr(r.cost),
                        repr(r.cumulative_cost), repr(r.best_is1),
                        repr(r.bar_sigma_c), int(r.in_dataset),
                        int(r.exploration)])


def _write_curve(curve: Curve, path: Path, x_name: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([x_name, "mean_best" if x_name == "is1_cost" else "mean_cost",
                    "ci_lo", "ci_hi"])
        for x, m, lo, hi in zip(curve.x, curve.mean, curve.ci_lo, curve.ci_hi):
            w.writerow([repr(x), repr(m), repr(lo), repr(hi)])


def export_summary(summary: BenchmarkSummary, out_dir: Path) -> list[Path]:
    """Write per-run logs, aligned curves, and the method table; returns paths."""
    out_dir = Path(out_dir)
    runs_dir = out_dir / "runs"
    try:
        runs_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {runs_dir}: {exc}") from exc
    written = []
    for m in summary.methods:
        o = summary.outcomes[m]
        for s, res in zip(o.seeds, o.runs):
            p = runs_dir / f"{m}_seed{s}.csv"
            write_run_csv(res, p)
            written.append(p)
        p = out_dir / f"curve_best_{m}.csv"
        _write_curve(o.best_curve, p, "is1_cost")
        written.append(p)
        p = out_dir / f"curve_cost_{m}.csv"
        _write_curve(o.cost_curve, p, "iteration")
        written.append(p)
    table = out_dir / "summary.csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "mean_n_star", "ci_lo", "ci_hi", "censored",
                    "display", "threshold", "is1_budget"])
        for m in summary.methods:
            o = summary.outcomes[m]
            lo, hi = _ci(np.array(o.n_star))
            w.writerow([m, repr(o.mean_n_star()), repr(lo), repr(hi),
                        sum(o.censored), o.n_star_display(summary.is1_budget),
                        repr(summary.threshold), summary.is1_budget])
    written.append(table)
    return written


def export_ablation(table: AblationTable, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "ablation.csv"
    rows = table.rows()
    cols = ["n0_is1", "n0_is2"]
    for m in table.methods:
        cols += [m, m + "_mean", m + "_censored"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for row in rows:
            w.writerow(row)
    return path


__all__ = [
    "AblationTable", "BenchmarkSummary", "CalibrationResult", "Curve",
    "DEFAULT_ABLATION_GRID", "DEFAULT_GRID", "DEFAULT_MARGIN",
    "DEFAULT_N_EXPER", "DESK_WEIGHTS", "HARDWARE_WEIGHTS", "MethodOutcome",
    "WEIGHT_PROFILES", "ablation_grid", "calibrate_weights",
    "export_ablation", "export_summary", "grid_true_optimum", "monte_carlo",
    "nonstationary_scenario", "post_event_evals_to_threshold",
    "write_run_csv",
]
