"""Multi-source covariance for gain-fidelity inputs.

Surrogate inputs are augmented rows z = [k, s]: controller gains k (already
normalized upstream when enabled) plus a fidelity tag s in (0, 1]. The real
system carries s = 1, the digital twin and corrected twin carry s = s' < 1.

Covariance between two rows:

    c(z1, z2) = gamma0(s1, s2) * c0(k1, k2) + gamma1(s1, s2) * c1(k1, k2)

with c_i(k1, k2) = sigma_i^2 * M(||k1 - k2||, l_i), M the Matern-5/2 profile,
gamma0 a Matern-5/2 on |s1 - s2| whose lengthscale adapts to the estimated
twin mismatch, and gamma1 = (1 - s1)(1 - s2)(1 + s1 s2)^p a low-fidelity-only
term that vanishes whenever either input is the real system.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SQRT5 = np.sqrt(5.0)

LENGTHSCALE_CLAMP = (0.1, 2.0)  # bounds for the mismatch-adaptive cross-source lengthscale
COST_CLAMP = (0.1, 1.0)         # bounds for the low-fidelity sampling cost


class InvalidHyperparameterError(ValueError):
    """Raised when a kernel hyperparameter is out of its legal range."""


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise InvalidHyperparameterError(msg)


@dataclass(frozen=True)
class KernelHyperparams:
    """Hyperparameters of the composite kernel plus the shared noise variance."""

    l0: float = 0.5          # lengthscale of the shared gain kernel
    l1: float = 0.5          # lengthscale of the low-fidelity gain kernel
    sigma0_sq: float = 1.0   # variance of the shared term
    sigma1_sq: float = 1.0   # variance of the low-fidelity term
    p: float = 1.0           # interaction exponent of gamma1, in [0, p_max]
    noise_var: float = 1e-4  # observation noise variance (standardized target units)
    p_max: float = 5.0

    def __post_init__(self) -> None:
        for name in ("l0", "l1", "sigma0_sq", "sigma1_sq"):
            v = getattr(self, name)
            _require(np.isfinite(v) and v > 0.0, f"{name} must be positive and finite, got {v}")
        _require(np.isfinite(self.noise_var) and self.noise_var >= 0.0,
                 f"noise_var must be non-negative, got {self.noise_var}")
        _require(np.isfinite(self.p) and 0.0 <= self.p <= self.p_max,
                 f"p must lie in [0, {self.p_max}], got {self.p}")


def matern52(r, l):
    """Matern-5/2 profile (1 + x + x^2/3) exp(-x) with x = sqrt(5) r / l.

    r may be a scalar or array of non-negative distances. Returns values in
    (0, 1] with matern52(0, l) == 1 exactly.
    """
    _require(np.isfinite(l) and l > 0.0, f"lengthscale must be positive, got {l}")
    x = SQRT5 * np.asarray(r, dtype=float) / l
    out = (1.0 + x + x * x / 3.0) * np.exp(-x)
    if out.ndim == 0:
        return float(out)
    return out


def cross_source_lengthscale(e_is2: float, s_prime: float = 0.1,
                             clamp: tuple[float, float] = LENGTHSCALE_CLAMP) -> float:
    """Mismatch-adaptive lengthscale clamp(s' / e_is2) for the gamma0 term.

    A perfect twin estimate (e_is2 == 0) maps to the upper clamp bound:
    zero mismatch means maximal cross-source correlation.
    """
    lo, hi = clamp
    _require(0.0 < lo <= hi, f"clamp bounds must be ordered and positive, got {clamp}")
    _require(np.isfinite(e_is2) and e_is2 >= 0.0, f"e_is2 must be non-negative, got {e_is2}")
    _require(0.0 < s_prime < 1.0, f"s_prime must lie in (0, 1), got {s_prime}")
    if e_is2 == 0.0:
        return hi
    return float(min(max(s_prime / e_is2, lo), hi))


@dataclass(frozen=True)
class FidelityState:
    """Current mismatch estimate and the quantities derived from it.

    fixed_l_gamma0 / fixed_cost pin the derived quantities for the
    non-adaptive multi-fidelity baseline; leave them None otherwise.
    """

    e_is2: float = 0.5
    s_prime: float = 0.1
    beta: float = 4.0
    lengthscale_clamp: tuple[float, float] = LENGTHSCALE_CLAMP
    cost_clamp: tuple[float, float] = COST_CLAMP
    fixed_l_gamma0: float | None = None
    fixed_cost: float | None = None
    l_gamma0: float = field(init=False)

    def __post_init__(self) -> None:
        _require(np.isfinite(self.e_is2) and self.e_is2 >= 0.0,
                 f"e_is2 must be non-negative, got {self.e_is2}")
        _require(0.0 < self.s_prime < 1.0, f"s_prime must lie in (0, 1), got {self.s_prime}")
        _require(self.beta > 0.0, f"beta must be positive, got {self.beta}")
        if self.fixed_l_gamma0 is not None:
            l = float(self.fixed_l_gamma0)
            _require(l > 0.0, f"fixed_l_gamma0 must be positive, got {l}")
        else:
            l = cross_source_lengthscale(self.e_is2, self.s_prime, self.lengthscale_clamp)
        object.__setattr__(self, "l_gamma0", l)

    def with_mismatch(self, e_is2: float) -> "FidelityState":
        """New state with an updated mismatch estimate (derived fields recomputed)."""
        return FidelityState(e_is2=float(e_is2), s_prime=self.s_prime, beta=self.beta,
                             lengthscale_clamp=self.lengthscale_clamp,
                             cost_clamp=self.cost_clamp,
                             fixed_l_gamma0=self.fixed_l_gamma0,
                             fixed_cost=self.fixed_cost)


def gamma0(s1: float, s2: float, fs: FidelityState) -> float:
    """Cross-source correlation: Matern-5/2 on |s1 - s2| at the adaptive lengthscale."""
    return float(matern52(abs(s1 - s2), fs.l_gamma0))


def gamma1(s1: float, s2: float, p: float) -> float:
    """Low-fidelity-only weight (1 - s1)(1 - s2)(1 + s1 s2)^p; zero if either s is 1."""
    return float((1.0 - s1) * (1.0 - s2) * (1.0 + s1 * s2) ** p)


def composite_kernel(z1: np.ndarray, z2: np.ndarray, hp: KernelHyperparams,
                     fs: FidelityState) -> float:
    """Scalar covariance between two augmented inputs z = [k..., s]."""
    z1 = np.asarray(z1, dtype=float)
    z2 = np.asarray(z2, dtype=float)
    if z1.shape != z2.shape or z1.ndim != 1 or z1.size < 2:
        raise ValueError(f"augmented inputs must be equal-shape 1-d [k..., s] rows, "
                         f"got shapes {z1.shape} and {z2.shape}")
    r = float(np.linalg.norm(z1[:-1] - z2[:-1]))
    s1, s2 = float(z1[-1]), float(z2[-1])
    c0 = hp.sigma0_sq * matern52(r, hp.l0)
    c1 = hp.sigma1_sq * matern52(r, hp.l1)
    return gamma0(s1, s2, fs) * c0 + gamma1(s1, s2, hp.p) * c1


def composite_cov(Z1: np.ndarray, Z2: np.ndarray, hp: KernelHyperparams,
                  fs: FidelityState) -> np.ndarray:
    """Covariance matrix between two stacks of augmented rows. Shape (n1, n2)."""
    Z1 = np.atleast_2d(np.asarray(Z1, dtype=float))
    Z2 = np.atleast_2d(np.asarray(Z2, dtype=float))
    k1, s1 = Z1[:, :-1], Z1[:, -1]
    k2, s2 = Z2[:, :-1], Z2[:, -1]
    diff = k1[:, None, :] - k2[None, :, :]
    r = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    g0 = matern52(np.abs(s1[:, None] - s2[None, :]), fs.l_gamma0)
    g1 = ((1.0 - s1)[:, None] * (1.0 - s2)[None, :]) * (1.0 + np.outer(s1, s2)) ** hp.p
    return g0 * (hp.sigma0_sq * matern52(r, hp.l0)) + g1 * (hp.sigma1_sq * matern52(r, hp.l1))


def prior_variance(Z: np.ndarray, hp: KernelHyperparams) -> np.ndarray:
    """Diagonal self-covariance c(z, z) for each row: sigma0^2 + gamma1(s, s) sigma1^2."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    s = Z[:, -1]
    return hp.sigma0_sq + (1.0 - s) ** 2 * (1.0 + s * s) ** hp.p * hp.sigma1_sq


def gram_matrix(Z: np.ndarray, hp: KernelHyperparams, fs: FidelityState) -> np.ndarray:
    """Symmetric Gram matrix of the composite kernel (no noise term)."""
    A = composite_cov(Z, Z, hp, fs)
    return 0.5 * (A + A.T)
