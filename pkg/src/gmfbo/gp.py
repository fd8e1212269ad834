"""Exact Gaussian-process regression on standardized targets.

Serves two consumers: the multi-source surrogate over augmented inputs
z = [k, s], and the trajectory correction model (which reuses the same
machinery by tagging its 2-d inputs with a constant fidelity of 1 so the
composite kernel reduces to a plain Matern-5/2).

Targets are standardized (population std, floored) before any likelihood or
posterior computation; the prior mean is identically zero on that scale.
Predictions are mapped back to raw units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize

from .kernel import (
    FidelityState,
    KernelHyperparams,
    composite_cov,
    gram_matrix,
    matern52,
    prior_variance,
)

LOG_2PI = math.log(2.0 * math.pi)
STD_FLOOR = 1e-12      # substituted when all targets are equal
JITTER_INIT = 1e-8     # diagonal jitter before factorization
JITTER_MAX = 1e-4      # doubling past this raises GPNumericalError
_FAIL_SCORE = 1e25     # sentinel objective for numerically failed evaluations


class GPNumericalError(RuntimeError):
    """Factorization failed even at maximum jitter. Carries the hyperparameters."""

    def __init__(self, msg: str, hp: KernelHyperparams | None = None):
        super().__init__(msg)
        self.hyperparams = hp


def standardize(values) -> tuple[np.ndarray, float, float]:
    """Center and scale by the population std. Returns (scaled, mean, std).

    The std is floored at STD_FLOOR so constant target vectors map to zeros
    rather than NaNs.
    """
    v = np.asarray(values, dtype=float)
    mean = float(np.mean(v))
    std = float(np.std(v))
    if std < STD_FLOOR:
        std = STD_FLOOR
    return (v - mean) / std, mean, std


def destandardize(values, mean: float, std: float):
    return np.asarray(values, dtype=float) * std + mean


class SurrogateDataset:
    """Observation set for the surrogate: rows z = [k..., s], targets, source tags."""

    def __init__(self, points, targets, source_tags):
        self.points = np.atleast_2d(np.asarray(points, dtype=float))
        self.targets = np.asarray(targets, dtype=float).ravel()
        self.source_tags = list(source_tags)
        self._validate()

    @classmethod
    def empty(cls, dim: int) -> "SurrogateDataset":
        return cls(np.empty((0, dim)), np.empty(0), [])

    def _validate(self) -> None:
        if self.points.shape[0] != self.targets.shape[0]:
            raise ValueError(f"points/targets length mismatch: "
                             f"{self.points.shape[0]} vs {self.targets.shape[0]}")
        if len(self.source_tags) != self.points.shape[0]:
            raise ValueError("one source tag required per point")
        if self.targets.size and not np.all(np.isfinite(self.targets)):
            raise ValueError("targets must be finite")
        if self.points.size and not np.all(np.isfinite(self.points)):
            raise ValueError("points must be finite")

    def add(self, z, target: float, tag: str) -> None:
        z = np.asarray(z, dtype=float).ravel()
        if self.points.ndim == 2 and self.points.shape[1] and z.shape[0] != self.points.shape[1]:
            raise ValueError(f"point dimension {z.shape[0]} != dataset dimension "
                             f"{self.points.shape[1]}")
        if not np.isfinite(target):
            raise ValueError(f"target must be finite, got {target}")
        if not 0.0 < z[-1] <= 1.0:
            raise ValueError(f"fidelity must lie in (0, 1], got {z[-1]}")
        self.points = np.vstack([self.points, z[None, :]]) if self.points.size else z[None, :]
        self.targets = np.append(self.targets, float(target))
        self.source_tags.append(tag)

    @property
    def fidelities(self) -> np.ndarray:
        return self.points[:, -1]

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for t in self.source_tags:
            out[t] = out.get(t, 0) + 1
        return out

    def best_at(self, fidelity: float) -> float:
        """Lowest target among rows stored at this fidelity value.

        Corrected-twin rows are stored at the twin fidelity, so they share
        its incumbent automatically.
        """
        mask = np.isclose(self.fidelities, fidelity, rtol=0.0, atol=1e-12)
        if not np.any(mask):
            raise ValueError(f"no observations at fidelity {fidelity}")
        return float(np.min(self.targets[mask]))

    def __len__(self) -> int:
        return int(self.targets.shape[0])


def _chol_with_jitter(A: np.ndarray, hp: KernelHyperparams | None = None):
    """Lower Cholesky of A, escalating diagonal jitter only on failure.

    First attempt is jitter-free so well-conditioned systems are factored
    exactly; afterwards jitter doubles from JITTER_INIT and gives up past
    JITTER_MAX.
    """
    jitter = 0.0
    eye = np.eye(A.shape[0])
    while True:
        try:
            L = cholesky(A + jitter * eye, lower=True, check_finite=False)
            return L, jitter
        except np.linalg.LinAlgError:
            jitter = JITTER_INIT if jitter == 0.0 else jitter * 2.0
            if jitter > JITTER_MAX:
                raise GPNumericalError(
                    f"Cholesky failed up to jitter {JITTER_MAX:g}", hp) from None


def log_marginal_likelihood(data: SurrogateDataset, hp: KernelHyperparams,
                            fs: FidelityState) -> float:
    """Evidence of the standardized targets under the composite-kernel GP."""
    if len(data) == 0:
        raise ValueError("log marginal likelihood of an empty dataset is undefined")
    y, _, _ = standardize(data.targets)
    C = gram_matrix(data.points, hp, fs) + hp.noise_var * np.eye(len(data))
    L, _ = _chol_with_jitter(C, hp)
    alpha = cho_solve((L, True), y, check_finite=False)
    return float(-0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * len(data) * LOG_2PI)


@dataclass(frozen=True)
class HyperPriors:
    """Priors, bounds, and restart budget for the MAP hyperparameter fit.

    Lengthscales and output variances carry log-normal priors; noise is flat
    in log space within its bounds; p is flat within p_bounds. The variance
    priors are deliberately asymmetric: the shared channel sigma0_sq centers
    on the standardized signal variance (1.0) while the low-fidelity-only
    channel sigma1_sq centers well below it. With few real-system points the
    evidence alone cannot decide how much structure the sources share, and a
    flat prior lets the fit dump everything into the low-fidelity-only term,
    which silences cross-source transfer regardless of the coupling
    lengthscale. Centering sigma1_sq small keeps that term a residual, so
    coupling stays governed by the mismatch-driven gamma0, while a genuinely
    divergent twin can still buy a larger sigma1_sq through the likelihood.
    """

    length_log_median: float = math.log(0.5)
    length_log_std: float = 1.0
    var0_log_median: float = 0.0
    var0_log_std: float = 1.0
    var1_log_median: float = math.log(0.04)
    var1_log_std: float = 1.2
    l_bounds: tuple[float, float] = (1e-2, 1e2)
    var_bounds: tuple[float, float] = (1e-3, 1e3)
    noise_bounds: tuple[float, float] = (1e-9, 1.0)
    p_bounds: tuple[float, float] = (0.0, 5.0)
    restarts: int = 8
    max_evals: int = 120   # L-BFGS function-evaluation cap per restart

    def median_hyperparams(self) -> KernelHyperparams:
        l = math.exp(self.length_log_median)
        noise = math.sqrt(self.noise_bounds[0] * self.noise_bounds[1])
        p = 0.5 * (self.p_bounds[0] + self.p_bounds[1])
        return KernelHyperparams(l0=l, l1=l,
                                 sigma0_sq=math.exp(self.var0_log_median),
                                 sigma1_sq=math.exp(self.var1_log_median),
                                 p=p, noise_var=noise, p_max=self.p_bounds[1])


@dataclass
class FitResult:
    hyperparams: KernelHyperparams
    fallback: bool          # True when every restart failed and prior medians were used
    score: float            # penalized negative evidence at the optimum
    lml: float = field(default=float("nan"))


class _FitProblem:
    """Penalized negative evidence with data-dependent structures precomputed.

    During a fit the gain-distance matrix, the gamma0 matrix (fixed
    lengthscale), and the fidelity products are constant; only elementwise
    kernel profiles and the Cholesky change per evaluation.
    """

    def __init__(self, data: SurrogateDataset, fs: FidelityState, priors: HyperPriors):
        self.y, _, _ = standardize(data.targets)
        self.n = len(data)
        k = data.points[:, :-1]
        s = data.points[:, -1]
        diff = k[:, None, :] - k[None, :, :]
        self.D = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        self.G0 = matern52(np.abs(s[:, None] - s[None, :]), fs.l_gamma0)
        self.A1 = np.outer(1.0 - s, 1.0 - s)
        self.B1 = 1.0 + np.outer(s, s)
        self.eye = np.eye(self.n)
        self.priors = priors
        # The low-fidelity term is identically zero only when every point is real-system.
        self.low_fid_active = bool(np.any(s != 1.0))
        self.log_B1 = np.log(self.B1)

    def hyperparams(self, u: np.ndarray) -> KernelHyperparams:
        return KernelHyperparams(
            l0=math.exp(u[0]), l1=math.exp(u[1]),
            sigma0_sq=math.exp(u[2]), sigma1_sq=math.exp(u[3]),
            p=float(u[4]), noise_var=math.exp(u[5]),
            p_max=self.priors.p_bounds[1])

    def neg_penalized(self, u: np.ndarray) -> float:
        l0 = math.exp(u[0])
        v0 = math.exp(u[2])
        noise = math.exp(u[5])
        C = self.G0 * (v0 * matern52(self.D, l0))
        if self.low_fid_active:
            l1 = math.exp(u[1])
            v1 = math.exp(u[3])
            C += (self.A1 * np.exp(u[4] * self.log_B1)) * (v1 * matern52(self.D, l1))
        C[np.diag_indices_from(C)] += noise
        try:
            L, _ = _chol_with_jitter(C)
        except GPNumericalError:
            return _FAIL_SCORE
        alpha = cho_solve((L, True), self.y, check_finite=False)
        lml = -0.5 * self.y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * self.n * LOG_2PI
        pr = self.priors
        log_prior = -0.5 * ((u[0] - pr.length_log_median) / pr.length_log_std) ** 2
        log_prior += -0.5 * ((u[2] - pr.var0_log_median) / pr.var0_log_std) ** 2
        if self.low_fid_active:
            log_prior += -0.5 * ((u[1] - pr.length_log_median) / pr.length_log_std) ** 2
            log_prior += -0.5 * ((u[3] - pr.var1_log_median) / pr.var1_log_std) ** 2
        val = -(lml + log_prior)
        if not np.isfinite(val):
            return _FAIL_SCORE
        return float(val)


def _draw_start(rng: np.random.Generator, priors: HyperPriors,
                bounds: list[tuple[float, float]]) -> np.ndarray:
    u = np.empty(6)
    for i in (0, 1):  # lengthscales from the log-normal prior
        u[i] = rng.normal(priors.length_log_median, priors.length_log_std)
    u[2] = rng.normal(priors.var0_log_median, priors.var0_log_std)
    u[3] = rng.normal(priors.var1_log_median, priors.var1_log_std)
    u[4] = rng.uniform(*priors.p_bounds)
    u[5] = rng.uniform(math.log(priors.noise_bounds[0]), math.log(priors.noise_bounds[1]))
    return np.clip(u, [b[0] for b in bounds], [b[1] for b in bounds])


def fit_hyperparameters(data: SurrogateDataset, priors: HyperPriors, fs: FidelityState,
                        seed: int = 0,
                        warm_start: KernelHyperparams | None = None) -> FitResult:
    """MAP fit via multi-start L-BFGS in log-hyperparameter space.

    Deterministic for a given (data, priors, fs, seed, warm_start). Starts are
    drawn from the prior; an optional warm start is prepended. When every
    start fails numerically the prior-median hyperparameters are returned
    with the fallback flag set.
    """
    if len(data) == 0:
        raise ValueError("cannot fit hyperparameters on an empty dataset")
    prob = _FitProblem(data, fs, priors)

    lb_l, ub_l = math.log(priors.l_bounds[0]), math.log(priors.l_bounds[1])
    lb_v, ub_v = math.log(priors.var_bounds[0]), math.log(priors.var_bounds[1])
    lb_n, ub_n = math.log(priors.noise_bounds[0]), math.log(priors.noise_bounds[1])
    med = priors.median_hyperparams()
    if prob.low_fid_active:
        bounds = [(lb_l, ub_l), (lb_l, ub_l), (lb_v, ub_v), (lb_v, ub_v),
                  priors.p_bounds, (lb_n, ub_n)]
    else:
        # Single-source data at s = 1: the low-fidelity parameters are inert; pin them.
        pin_l = math.log(med.l1)
        pin_v = math.log(med.sigma1_sq)
        bounds = [(lb_l, ub_l), (pin_l, pin_l), (lb_v, ub_v), (pin_v, pin_v),
                  (med.p, med.p), (lb_n, ub_n)]

    rng = np.random.default_rng(seed)
    starts = []
    if warm_start is not None:
        u = np.array([math.log(warm_start.l0), math.log(warm_start.l1),
                      math.log(warm_start.sigma0_sq), math.log(warm_start.sigma1_sq),
                      warm_start.p, math.log(max(warm_start.noise_var, priors.noise_bounds[0]))])
        starts.append(np.clip(u, [b[0] for b in bounds], [b[1] for b in bounds]))
    for _ in range(priors.restarts):
        starts.append(_draw_start(rng, priors, bounds))

    best_u = None
    best_val = _FAIL_SCORE
    for u0 in starts:
        res = minimize(prob.neg_penalized, u0, method="L-BFGS-B", bounds=bounds,
                       options={"maxfun": priors.max_evals, "ftol": 1e-9, "eps": 1e-6})
        val = float(res.fun)
        if val < best_val:
            best_val = val
            best_u = res.x
    if best_u is None or best_val >= _FAIL_SCORE:
        return FitResult(med, fallback=True, score=_FAIL_SCORE)
    hp = prob.hyperparams(best_u)
    return FitResult(hp, fallback=False, score=best_val,
                     lml=log_marginal_likelihood(data, hp, fs))


class PosteriorGP:
    """Factorized posterior over a fixed dataset and hyperparameters."""

    def __init__(self, data: SurrogateDataset, hp: KernelHyperparams, fs: FidelityState,
                 L: np.ndarray, alpha: np.ndarray, y_mean: float, y_std: float,
                 jitter: float):
        self.data = data
        self.hp = hp
        self.fs = fs
        self.L = L
        self.alpha = alpha
        self.y_mean = y_mean
        self.y_std = y_std
        self.jitter = jitter

    @classmethod
    def build(cls, data: SurrogateDataset, hp: KernelHyperparams,
              fs: FidelityState) -> "PosteriorGP":
        if len(data) == 0:
            raise ValueError("cannot build a posterior on an empty dataset")
        y, mu, sd = standardize(data.targets)
        C = gram_matrix(data.points, hp, fs) + hp.noise_var * np.eye(len(data))
        L, jitter = _chol_with_jitter(C, hp)
        alpha = cho_solve((L, True), y, check_finite=False)
        return cls(data, hp, fs, L, alpha, mu, sd, jitter)

    def predict(self, Z) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and (latent) variance at each row of Z, raw target units.

        Variance is clipped to [0, prior variance] for numerical hygiene.
        """
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        Kx = composite_cov(self.data.points, Z, self.hp, self.fs)
        mean_std = Kx.T @ self.alpha
        v = solve_triangular(self.L, Kx, lower=True, check_finite=False)
        prior = prior_variance(Z, self.hp)
        var_std = np.clip(prior - np.einsum("ij,ij->j", v, v), 0.0, prior)
        return (destandardize(mean_std, self.y_mean, self.y_std),
                var_std * self.y_std ** 2)


def posterior(model: PosteriorGP, z_star) -> tuple[float, float]:
    """Scalar posterior (mean, variance) at one augmented input."""
    m, v = model.predict(np.asarray(z_star, dtype=float)[None, :])
    return float(m[0]), float(v[0])


def build_posterior(data: SurrogateDataset, hp: KernelHyperparams,
                    fs: FidelityState) -> PosteriorGP:
    return PosteriorGP.build(data, hp, fs)


__all__ = [
    "GPNumericalError", "SurrogateDataset", "HyperPriors", "FitResult", "PosteriorGP",
    "standardize", "destandardize", "log_marginal_likelihood", "fit_hyperparameters",
    "posterior", "build_posterior", "STD_FLOOR", "JITTER_INIT", "JITTER_MAX",
]
