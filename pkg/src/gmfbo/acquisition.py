"""Acquisition layer: expected improvement, fidelity-aware sampling cost,
cost-aware EI, and candidate selection over gains x fidelity.

All candidate search happens in the normalized unit box; fidelity is chosen
from the two discrete sources even though the kernel treats it continuously.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .gp import PosteriorGP, SurrogateDataset
from .kernel import FidelityState

INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
RANDOM_RESTARTS = 8
PERTURBED_RESTARTS = 8
PERTURB_STD = 0.1        # normalized-space std for restarts seeded at incumbents
STEP_INIT = 0.25         # pattern-search initial step (normalized space)
STEP_TOL = 1e-3          # pattern-search termination step
DEGENERATE_EPS = 1e-15   # max caEI at or below this triggers random exploration


class FidelityNotInitializedError(ValueError):
    """Raised when an incumbent is requested for a fidelity with no data."""


def expected_improvement(mean, std, best):
    """Closed-form EI for minimization; scalar or elementwise on arrays.

    At std=0 the limit max(best - mean, 0) is used.
    """
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    if np.any(std < 0):
        raise ValueError("std must be non-negative")
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(std > 0, (best - mean) / np.where(std > 0, std, 1.0), 0.0)
        phi = INV_SQRT_2PI * np.exp(-0.5 * u * u)
        ei = np.where(std > 0,
                      std * (u * ndtr(u) + phi),
                      np.maximum(best - mean, 0.0))
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


def sampling_cost(s: float, fs: FidelityState) -> float:
    """Query cost: 1 at the real system, mismatch-scaled and clamped at the twin."""
    if s == 1.0:
        return 1.0
    if fs.fixed_cost is not None:
        return fs.fixed_cost
    lo, hi = fs.cost_clamp
    return float(min(max(fs.beta * fs.e_is2, lo), hi))


@dataclass
class AcquisitionState:
    """Per-fidelity incumbents plus the shared fidelity state and search knobs."""

    best_values: dict[float, float]
    best_points: dict[float, np.ndarray]      # normalized gains of each incumbent
    fs: FidelityState
    random_restarts: int = RANDOM_RESTARTS
    perturbed_restarts: int = PERTURBED_RESTARTS
    step_tol: float = STEP_TOL

    @classmethod
    def from_dataset(cls, data: SurrogateDataset, fs: FidelityState,
                     **knobs) -> "AcquisitionState":
        values: dict[float, float] = {}
        points: dict[float, np.ndarray] = {}
        for s in np.unique(data.fidelities):
            mask = data.fidelities == s
            idx = int(np.argmin(np.where(mask, data.targets, np.inf)))
            values[float(s)] = float(data.targets[idx])
            points[float(s)] = data.points[idx, :-1].copy()
        return cls(best_values=values, best_points=points, fs=fs, **knobs)

    def best_for(self, s: float) -> float:
        try:
            return self.best_values[float(s)]
        except KeyError:
            raise FidelityNotInitializedError(
                f"no observations at fidelity {s}; initial design must cover it"
            ) from None


def ca_ei(z, model: PosteriorGP, state: AcquisitionState) -> float:
    """Cost-aware EI at one augmented input [gains..., s]."""
    z = np.asarray(z, dtype=float)
    s = float(z[-1])
    best = state.best_for(s)
    mean, var = model.predict(z[None, :])
    ei = expected_improvement(float(mean[0]), math.sqrt(max(float(var[0]), 0.0)), best)
    return float(ei) / sampling_cost(s, state.fs)


def _ca_ei_batch(model: PosteriorGP, U: np.ndarray, s: float,
                 state: AcquisitionState) -> np.ndarray:
    Z = np.column_stack([U, np.full(U.shape[0], s)])
    mean, var = model.predict(Z)
    ei = expected_improvement(mean, np.sqrt(np.maximum(var, 0.0)), state.best_for(s))
    return ei / sampling_cost(s, state.fs)


def _pattern_search(model: PosteriorGP, s: float, state: AcquisitionState,
                    starts: np.ndarray, step_tol: float) -> tuple[np.ndarray, float]:
    """Batched coordinate pattern search maximizing caEI in the unit box.

    All restarts share a step size that halves when no restart improves;
    deterministic for a given start set.
    """
    X = np.clip(starts, 0.0, 1.0)
    fX = _ca_ei_batch(model, X, s, state)
    m, d = X.shape
    offsets = np.concatenate([np.eye(d), -np.eye(d)])   # (2d, d)
    step = STEP_INIT
    while step > step_tol:
        neighbors = np.clip(X[:, None, :] + step * offsets[None, :, :], 0.0, 1.0)
        flat = neighbors.reshape(-1, d)
        fN = _ca_ei_batch(model, flat, s, state).reshape(m, 2 * d)
        best_j = np.argmax(fN, axis=1)
        best_f = fN[np.arange(m), best_j]
        improved = best_f > fX
        if np.any(improved):
            X[improved] = neighbors[improved, best_j[improved]]
            fX[improved] = best_f[improved]
        else:
            step *= 0.5
    k = int(np.argmax(fX))
    return X[k], float(fX[k])


@dataclass
class SelectionResult:
    point: np.ndarray          # normalized gains
    fidelity: float
    value: float               # caEI at the selected point
    exploration: bool = False  # True when the posterior was degenerate

    def as_z(self) -> np.ndarray:
        return np.append(self.point, self.fidelity)


def select_candidate(model: PosteriorGP, state: AcquisitionState, s_prime: float,
                     rng: np.random.Generator,
                     sources: tuple[float, ...] | None = None) -> SelectionResult:
    """Maximize caEI over the given fidelity sources via multi-start search.

    Per fidelity: random restarts plus restarts perturbed around the current
    incumbents. Ties go to the real system. A degenerate posterior (no caEI
    mass anywhere) falls back to a random real-system point, flagged.
    """
    sources = sources if sources is not None else (s_prime, 1.0)
    incumbents = [p for p in state.best_points.values()]
    results: dict[float, tuple[np.ndarray, float]] = {}
    for s in sources:
        state.best_for(s)  # raises if the fidelity was never observed
        starts = [rng.uniform(0.0, 1.0, (state.random_restarts, 2))]
        for i in range(state.perturbed_restarts):
            center = incumbents[i % len(incumbents)]
            starts.append(center + rng.normal(0.0, PERTURB_STD, (1, 2)))
        results[s] = _pattern_search(model, s, state,
                                     np.vstack(starts), state.step_tol)

    if max(f for _, f in results.values()) <= DEGENERATE_EPS:
        return SelectionResult(point=rng.uniform(0.0, 1.0, 2), fidelity=1.0,
                               value=0.0, exploration=True)
    s_best = max(sources, key=lambda s: (results[s][1], s == 1.0))
    point, value = results[s_best]
    return SelectionResult(point=point, fidelity=s_best, value=value)


__all__ = [
    "DEGENERATE_EPS", "PERTURB_STD", "RANDOM_RESTARTS", "PERTURBED_RESTARTS",
    "STEP_INIT", "STEP_TOL", "AcquisitionState", "FidelityNotInitializedError",
    "SelectionResult", "ca_ei", "expected_improvement", "sampling_cost",
    "select_candidate",
]
