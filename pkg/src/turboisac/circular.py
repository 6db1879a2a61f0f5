"""Circular-statistics and scalar-belief primitives.

Von Mises (VM) beliefs represent angle knowledge through the natural
parameter eta = kappa * exp(j*mu); products of VM densities add natural
parameters. Wrapped factors are VM densities in a folded angle f*delta
and are reduced back to a single VM by a dominant-mode search plus a
second-order log-density expansion. Complex Gaussian beliefs combine by
precision weighting.

All functions are pure and operate on scalars or numpy arrays.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import ive

# Concentration cap: beyond this a VM belief is numerically a point mass.
KAPPA_MAX = 1.0e6
# Variance bounds for complex Gaussian beliefs. An uninformative belief
# carries VAR_CAP; VAR_FLOOR guards against cancellation in precision math.
VAR_CAP = 1.0e6
VAR_FLOOR = 1.0e-12

_TWO_PI = 2.0 * np.pi
# Uniform fallback grid for the dominant-mode search (cell centres, so the
# set never contains the ambiguous +/- pi point twice).
_GRID_64 = -np.pi + (np.arange(64) + 0.5) * (_TWO_PI / 64.0)
_GRID_256 = -np.pi + (np.arange(256) + 0.5) * (_TWO_PI / 256.0)


def wrap_angle(theta):
    """Wrap angles into (-pi, pi]."""
    w = np.mod(theta, _TWO_PI)
    w = np.where(w > np.pi, w - _TWO_PI, w)
    if np.ndim(theta) == 0:
        return float(w)
    return w


@dataclass
class VonMisesBelief:
    """Circular belief VM(theta; kappa*e^{j*mu}).

    kappa = 0 is the uniform density on the circle; kappa is capped at
    KAPPA_MAX, where the belief is effectively a point mass at mu.
    """

    mu: float
    kappa: float

    def __post_init__(self):
        if not np.isfinite(self.mu):
            raise ValueError("VonMisesBelief mu must be finite")
        if self.kappa < 0 or not np.isfinite(self.kappa):
            raise ValueError("VonMisesBelief kappa must be finite and >= 0")
        self.mu = wrap_angle(self.mu)
        self.kappa = min(float(self.kappa), KAPPA_MAX)

    @property
    def eta(self):
        """Natural parameter kappa * exp(j*mu)."""
        return self.kappa * np.exp(1j * self.mu)

    @classmethod
    def from_natural(cls, eta):
        kappa = abs(eta)
        mu = float(np.angle(eta)) if kappa > 0 else 0.0
        return cls(mu=mu, kappa=kappa)


@dataclass
class ComplexGaussianBelief:
    """Scalar circularly-symmetric Gaussian belief (mean, variance)."""

    mean: complex
    variance: float

    def __post_init__(self):
        if self.variance <= 0 or not np.isfinite(self.variance):
            raise ValueError("ComplexGaussianBelief variance must be finite and > 0")
        self.variance = min(float(self.variance), VAR_CAP)


@dataclass
class WrappedVmFactor:
    """VM factor in the folded angle fold*delta with natural parameter eta.

    fold = 0 would be a constant in delta and is rejected; such factors
    carry no angle information and are skipped upstream.
    """

    fold: int
    eta: complex

    def __post_init__(self):
        if int(self.fold) < 1:
            raise ValueError("WrappedVmFactor fold must be >= 1")
        self.fold = int(self.fold)


def vm_multiply(a, b):
    """Product of two VM beliefs: natural parameters add."""
    return VonMisesBelief.from_natural(a.eta + b.eta)


def bessel_ratio(order, kappa):
    """Modified-Bessel ratio I_order(kappa) / I_0(kappa), in [0, 1].

    Evaluated through exponentially scaled Bessel functions so the result
    stays finite for any concentration up to KAPPA_MAX. Accepts arrays for
    either argument (broadcasting).
    """
    kappa = np.minimum(np.asarray(kappa, dtype=float), KAPPA_MAX)
    order = np.asarray(order)
    ratio = ive(order, kappa) / ive(0, kappa)
    # Guard the order-0 case exactly and clip tiny negative round-off.
    ratio = np.where(order == 0, 1.0, np.clip(ratio, 0.0, 1.0))
    if ratio.ndim == 0:
        return float(ratio)
    return ratio


def log_bessel_i0(kappa):
    """log I_0(kappa), overflow-free for large concentrations."""
    kappa = np.minimum(np.asarray(kappa, dtype=float), KAPPA_MAX)
    out = kappa + np.log(ive(0, kappa))
    if out.ndim == 0:
        return float(out)
    return out


def gaussian_product(beliefs):
    """Precision-weighted product of complex Gaussian beliefs.

    The output precision is the exact sum of input precisions; the mean is
    the precision-weighted average of input means.
    """
    if not beliefs:
        raise ValueError("gaussian_product requires at least one belief")
    prec = 0.0
    num = 0.0 + 0.0j
    for b in beliefs:
        w = 1.0 / b.variance
        prec += w
        num += w * b.mean
    variance = max(1.0 / prec, VAR_FLOOR)
    return ComplexGaussianBelief(mean=num / prec, variance=variance)


# ---------------------------------------------------------------------------
# Wrapped-product reduction machinery.
#
# The product of factors VM(f*delta; eta_f) has log density (up to constant)
#   logp(delta) = sum_f Re{conj(eta_f) * exp(j*f*delta)}
# which is multimodal in delta. The reduction evaluates logp at the mixture
# component means of every factor plus a 64-point uniform grid, keeps the
# best candidate (ties broken by smallest wrapped mean), polishes it with a
# single Newton step, and matches the curvature at the mode:
#   kappa_out = -logp''(mode),  mu_out = mode.
# The same helpers back both the scalar operation below and the batched
# message updates in the localization engine.
# ---------------------------------------------------------------------------


def _vm_logpdf_terms(folds, etas, delta):
    """logp, logp', logp'' of the wrapped product at delta.

    folds: (F,) int; etas: (..., F) complex; delta: (...) real.
    """
    phase = np.exp(1j * np.multiply.outer(np.asarray(delta, dtype=float), folds))
    terms = np.conj(etas) * phase  # (..., F)
    logp = terms.real.sum(axis=-1)
    d1 = -(folds * terms.imag).sum(axis=-1)
    d2 = -(folds * folds * terms.real).sum(axis=-1)
    return logp, d1, d2


def _select_candidate(logp, cands):
    """Argmax over the last axis with smallest-wrapped-mean tie-breaking."""
    best = np.max(logp, axis=-1, keepdims=True)
    tied = logp >= best - 1e-12 * np.maximum(1.0, np.abs(best))
    wrapped = wrap_angle(cands)
    # Among tied candidates pick the smallest wrapped mean.
    masked = np.where(tied, wrapped, np.inf)
    idx = np.argmin(masked, axis=-1)
    return np.take_along_axis(wrapped, idx[..., None], axis=-1)[..., 0]


def _polish_mode(folds, etas, delta0):
    """One Newton refinement step, kept only if it does not lose density."""
    logp0, d1, d2 = _vm_logpdf_terms(folds, etas, delta0)
    with np.errstate(divide="ignore", invalid="ignore"):
        step = np.where(d2 < -1e-300, d1 / d2, 0.0)
    delta1 = delta0 - step
    logp1, _, d2_new = _vm_logpdf_terms(folds, etas, delta1)
    keep = logp1 >= logp0
    delta = np.where(keep, delta1, delta0)
    curvature = np.where(keep, d2_new, d2)
    kappa = np.clip(-curvature, 0.0, KAPPA_MAX)
    return wrap_angle(delta), kappa


def _component_means(fold, eta):
    """Means of the fold-component mixture representation of one factor."""
    base = np.angle(eta) if abs(eta) > 0 else 0.0
    return wrap_angle((base + _TWO_PI * np.arange(fold)) / fold)


def reduce_wrapped_vm_product(factors):
    """Collapse a product of wrapped VM factors to one VonMisesBelief.

    Each fold-f factor is an f-component mixture over delta; the dominant
    mode of the full product is located by candidate search (all component
    means plus a uniform grid) and refined by Newton steps. Beats between
    strong disagreeing factors can carve peaks narrower than a coarse
    grid cell, so the search grid is kept finer than the sharpest peak
    the fold range supports. An empty product is the uniform belief
    (kappa = 0).
    """
    if not factors:
        return VonMisesBelief(mu=0.0, kappa=0.0)
    folds = np.array([f.fold for f in factors], dtype=float)
    etas = np.array([f.eta for f in factors], dtype=complex)
    if not np.any(np.abs(etas) > 0):
        return VonMisesBelief(mu=0.0, kappa=0.0)
    cands = [_GRID_256]
    for f in factors:
        cands.append(_component_means(f.fold, f.eta))
    cands = np.concatenate(cands)
    logp, _, _ = _vm_logpdf_terms(folds, etas[None, :], cands)
    mode = _select_candidate(logp, cands)
    mu, kappa = _polish_mode(folds, etas, mode)
    mu, kappa = _polish_mode(folds, etas, mu)
    return VonMisesBelief(mu=float(mu), kappa=float(kappa))
