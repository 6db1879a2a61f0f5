"""Activity detection and channel estimation engine.

The decoder side treats the per-target mixing coefficients as noisy
linear observations c = A b of the sparse coefficient matrix B, where A
is the scaled pilot matrix and column j stacks one (target, BS) pair.
Entries b_{k,j} follow a spike-slab prior: zero unless user k is active
and the corresponding scattering path exists. A generalized AMP loop
estimates B; Bernoulli messages between path indicators and the
activity variable fuse the per-path evidence into activity posteriors.

All shapes: A (L, K); stacked coefficient arrays (L, J) and (K, J) with
J = n_targets * n_bs.
"""

from dataclasses import dataclass, field

import numpy as np

from .circular import VAR_FLOOR

_PROB_CLAMP = 1e-12
_LOGT_CLIP = 700.0


def _logit(p):
    p = np.clip(p, _PROB_CLAMP, 1.0 - _PROB_CLAMP)
    return np.log(p) - np.log1p(-p)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def spike_slab_denoise(r_hat, tau_r, weight, prior_var):
    """Posterior mean/variance of b under a Bernoulli-Gaussian prior.

    Prior: b = 0 with prob 1-weight, b ~ CN(0, prior_var) with prob
    weight; observation r_hat = b + CN(0, tau_r). Returns (b_hat, tau_b,
    logt) where logt is the clipped log likelihood ratio of slab vs
    spike, reused by the activity messages.
    """
    tau_r = np.maximum(tau_r, VAR_FLOOR)
    gamma = prior_var / (prior_var + tau_r)
    logt = np.log(tau_r / (prior_var + tau_r)) \
        + np.abs(r_hat) ** 2 * gamma / tau_r
    logt = np.clip(logt, -_LOGT_CLIP, _LOGT_CLIP)
    post_w = weight / (weight + (1.0 - weight) * np.exp(-logt))
    b_hat = post_w * gamma * r_hat
    second = post_w * (gamma**2 * np.abs(r_hat) ** 2 + gamma * tau_r)
    # Raw Bayes variance can exceed the slab variance for extreme weights;
    # clip so downstream variance bookkeeping never sees more than the prior.
    tau_b = np.clip(second - np.abs(b_hat) ** 2, 0.0, prior_var)
    return b_hat, tau_b, logt


@dataclass
class GampResult:
    b_hat: np.ndarray       # (K, J) posterior coefficient means
    tau_b: np.ndarray       # (K, J) posterior coefficient variances
    r_hat: np.ndarray       # (K, J) pseudo observations (extrinsic to prior)
    tau_r: np.ndarray       # (K, J) or (J,) pseudo-observation variances
    p_hat: np.ndarray       # (L, J) output extrinsics toward the coefficients
    tau_p: np.ndarray       # (L, J) or (J,) output extrinsic variances
    logt: np.ndarray        # (K, J) slab/spike log likelihood ratios
    iters: int
    tau_p_hist: list = field(default_factory=list)
    tau_b_hist: list = field(default_factory=list)


def gamp(A, mu_meas, var_meas, weight, prior_var, n_iter=20,
         variance_mode="scalar", damp=0.7, pilot_power=None, tol=0.0):
    """Generalized AMP for the stacked linear model mu_meas ~ A B.

    Measurements are Gaussian (mu_meas, var_meas) per entry. The scalar
    variance mode (default) tracks one output variance per column,
    tau_p = K * P * mean(tau_b), with P the mean pilot entry power; the
    vector mode propagates |A|^2 elementwise. Updates are damped by
    ``damp`` whenever the data-fit residual increases. Early exit when
    the relative coefficient change drops below ``tol``.
    """
    A = np.asarray(A)
    L, K = A.shape
    J = mu_meas.shape[1]
    var_meas = np.maximum(var_meas, VAR_FLOOR)
    if pilot_power is None:
        pilot_power = float(np.mean(np.abs(A) ** 2))
    abs2 = np.abs(A) ** 2 if variance_mode == "vector" else None

    b_hat = np.zeros((K, J), dtype=complex)
    tau_b = weight * prior_var * np.ones((K, J))
    s_hat = np.zeros((L, J), dtype=complex)
    r_hat = np.zeros((K, J), dtype=complex)
    tau_r = np.ones((K, J)) if variance_mode == "vector" else np.ones(J)
    logt = np.zeros((K, J))
    last_fit = np.inf
    tau_p_hist, tau_b_hist = [], []
    iters = 0

    for _ in range(n_iter):
        iters += 1
        if variance_mode == "vector":
            tau_p = abs2 @ tau_b  # (L, J)
        else:
            tau_p = K * pilot_power * tau_b.mean(axis=0)  # (J,)
        tau_p_hist.append(np.array(tau_p, copy=True))
        tau_b_hist.append(tau_b.mean(axis=0).copy())
        p_hat = A @ b_hat - tau_p * s_hat

        # Gaussian fusion with the measurement, in cancellation-free form.
        s_new = (mu_meas - p_hat) / (tau_p + var_meas)
        tau_s = 1.0 / (tau_p + var_meas)  # (L, J)

        if variance_mode == "vector":
            tau_r_new = 1.0 / (abs2.T @ tau_s)  # (K, J)
        else:
            tau_r_new = 1.0 / (L * pilot_power * tau_s.mean(axis=0))  # (J,)
        r_new = b_hat + tau_r_new * (A.conj().T @ s_new)
        b_new, tau_b_new, logt = spike_slab_denoise(r_new, tau_r_new, weight, prior_var)

        fit = float(np.mean(np.abs(mu_meas - A @ b_new) ** 2 / var_meas))
        if fit > last_fit:
            b_new = damp * b_new + (1.0 - damp) * b_hat
            tau_b_new = damp * tau_b_new + (1.0 - damp) * tau_b
            s_new = damp * s_new + (1.0 - damp) * s_hat
        last_fit = fit

        delta = np.sum(np.abs(b_new - b_hat) ** 2)
        scale = max(float(np.sum(np.abs(b_new) ** 2)), 1e-300)
        b_hat, tau_b, s_hat, r_hat, tau_r = b_new, tau_b_new, s_new, r_new, tau_r_new
        if tol > 0 and delta / scale < tol**2:
            break

    # Output extrinsics from the final coefficient state.
    if variance_mode == "vector":
        tau_p = abs2 @ tau_b
    else:
        tau_p = K * pilot_power * tau_b.mean(axis=0)
    p_hat = A @ b_hat - tau_p * s_hat
    return GampResult(
        b_hat=b_hat, tau_b=tau_b, r_hat=r_hat, tau_r=tau_r,
        p_hat=p_hat, tau_p=np.broadcast_to(tau_p, (L, J)).copy(),
        logt=logt, iters=iters,
        tau_p_hist=tau_p_hist, tau_b_hist=tau_b_hist,
    )


def v_to_b(lam_alpha_to_v, xi):
    """Slab weight toward the coefficient prior: activity times path
    probability."""
    return lam_alpha_to_v * xi


def v_to_alpha(logt, xi):
    """Per-path activity evidence from the slab/spike likelihood ratio.

    With path probability xi, the likelihood under an active user is
    xi*t + (1-xi) against 1 for an inactive one, so the normalized
    message is 1 - 1/((2-xi) + xi*exp(logt)).
    """
    t = np.exp(np.clip(logt, -_LOGT_CLIP, _LOGT_CLIP))
    lam = 1.0 - 1.0 / ((2.0 - xi) + xi * t)
    return np.clip(lam, _PROB_CLAMP, 1.0 - _PROB_CLAMP)


def alpha_to_v(lam_v_to_alpha, activity_prior):
    """Extrinsic activity messages and the fused activity posterior.

    Log odds from all (target, BS) path nodes and the Bernoulli prior
    add up; each outgoing message removes its own contribution. The
    prior may be a scalar or per-user (K,) array.
    Returns (lam_alpha_to_v (K, J), lam_fused (K,)).
    """
    logits = _logit(lam_v_to_alpha)  # (K, J)
    prior_logit = np.asarray(_logit(activity_prior))
    if prior_logit.ndim == 1:
        prior_logit = prior_logit[:, None]
    total = prior_logit + logits.sum(axis=1, keepdims=True)
    lam_out = _sigmoid(total - logits)
    lam_fused = _sigmoid(total[:, 0])
    return (
        np.clip(lam_out, _PROB_CLAMP, 1.0 - _PROB_CLAMP),
        np.clip(lam_fused, _PROB_CLAMP, 1.0 - _PROB_CLAMP),
    )


def adce_pass(A, mu_c_to_u, var_c_to_u, lam_alpha_to_v, xi, prior_var,
              activity_prior, n_iter=20, variance_mode="scalar", damp=0.7,
              pilot_power=None, tol=1e-5):
    """One decoder pass: GAMP over the stacked model plus activity fusion.

    mu_c_to_u, var_c_to_u: (L, J) coefficient extrinsics from the
    localization side. lam_alpha_to_v: (K, J) current activity messages.
    Returns (result, mu_u_to_c (L, J), var_u_to_c (L, J),
    lam_alpha_to_v (K, J), lam_fused (K,)).
    """
    weight = v_to_b(lam_alpha_to_v, xi)
    result = gamp(A, mu_c_to_u, var_c_to_u, weight, prior_var,
                  n_iter=n_iter, variance_mode=variance_mode, damp=damp,
                  pilot_power=pilot_power, tol=tol)
    lam_v2a = v_to_alpha(result.logt, xi)
    lam_a2v, lam_fused = alpha_to_v(lam_v2a, activity_prior)
    return result, result.p_hat, result.tau_p, lam_a2v, lam_fused
