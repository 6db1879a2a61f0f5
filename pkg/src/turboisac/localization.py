"""Target localization engine: message passing between position, angle
and mixing-coefficient beliefs.

The engine refines per-target position beliefs from the receive signal.
Each base station q observes a phase ramp exp(-j*n*delta_{m,q}) per
target m across its antennas n = 0..N-1; the spatial frequency delta
ties back to the target position through delta = pi*(y_b - y)/distance.
Messages about delta are Von Mises (fold n for antenna n), messages
about the mixing coefficients c_{l,m,q} are complex Gaussian, and
position beliefs are 2-D Gaussians updated by damped Newton-Gauss
triangulation against the bearing beliefs.

Array layout: (L, N, M, Q) for per-antenna messages, (L, M, Q) for
per-coefficient messages, (M, Q) for per-bearing quantities.
"""

from dataclasses import dataclass

import numpy as np

from .circular import (
    _GRID_256,
    _polish_mode,
    _select_candidate,
    _vm_logpdf_terms,
    KAPPA_MAX,
    VAR_CAP,
    VAR_FLOOR,
    bessel_ratio,
    wrap_angle,
)
from .scene import MIN_DISTANCE_M

# Levenberg damping kicks in when the normal-equation matrix is this
# ill-conditioned; the step then shrinks toward gradient descent.
_COND_LIMIT = 1e10
_DAMP_SCALE = 1e-6


def _inv2x2(mat):
    """Batched 2x2 inverse."""
    a = mat[..., 0, 0]
    b = mat[..., 0, 1]
    c = mat[..., 1, 0]
    d = mat[..., 1, 1]
    det = a * d - b * c
    out = np.empty_like(mat)
    out[..., 0, 0] = d / det
    out[..., 0, 1] = -b / det
    out[..., 1, 0] = -c / det
    out[..., 1, 1] = a / det
    return out


def triangulate(bearing_mu, bearing_kappa, bs_pos, prior_mean, prior_cov,
                init=None, max_steps=20, tol=1e-8):
    """MAP position from bearing beliefs plus a Gaussian position prior.

    Newton-Gauss iteration on the spatial-frequency residuals: each step
    linearizes delta_q(p) = pi*(y_q - y)/d_q, weights residuals by the
    bearing concentrations, and fuses with the prior by precision
    addition. Levenberg damping (1e-6 of the trace) is added whenever the
    normal matrix condition number exceeds 1e10. Iteration starts from
    ``init`` (defaults to the prior mean) and stops when the step norm
    drops below ``tol`` or after ``max_steps``.

    bearing_mu, bearing_kappa: (..., Q); bs_pos: (Q, 2). Returns
    (mean (..., 2), cov (..., 2, 2), steps_used).
    """
    mu = np.asarray(bearing_mu, dtype=float)
    kappa = np.asarray(bearing_kappa, dtype=float)
    bs_pos = np.asarray(bs_pos, dtype=float)
    prior_mean = np.asarray(prior_mean, dtype=float)
    prior_prec = _inv2x2(np.broadcast_to(np.asarray(prior_cov, dtype=float),
                                         mu.shape[:-1] + (2, 2)).copy())
    p = np.array(np.broadcast_to(init if init is not None else prior_mean,
                                 mu.shape[:-1] + (2,)), dtype=float)
    mean0 = np.broadcast_to(prior_mean, p.shape)

    steps_used = 0
    for _ in range(max_steps):
        jx, jy, resid = _bearing_jacobian(p, bs_pos, mu)
        h00 = np.sum(kappa * jx * jx, axis=-1) + prior_prec[..., 0, 0]
        h01 = np.sum(kappa * jx * jy, axis=-1) + prior_prec[..., 0, 1]
        h11 = np.sum(kappa * jy * jy, axis=-1) + prior_prec[..., 1, 1]
        dm = mean0 - p
        g0 = np.sum(kappa * jx * resid, axis=-1) \
            + prior_prec[..., 0, 0] * dm[..., 0] + prior_prec[..., 0, 1] * dm[..., 1]
        g1 = np.sum(kappa * jy * resid, axis=-1) \
            + prior_prec[..., 1, 0] * dm[..., 0] + prior_prec[..., 1, 1] * dm[..., 1]
        h00, h01, h11 = _damp_if_ill_conditioned(h00, h01, h11)
        det = h00 * h11 - h01 * h01
        step0 = (h11 * g0 - h01 * g1) / det
        step1 = (h00 * g1 - h01 * g0) / det
        p[..., 0] += step0
        p[..., 1] += step1
        steps_used += 1
        if max(np.max(np.abs(step0)), np.max(np.abs(step1))) < tol:
            break

    jx, jy, _ = _bearing_jacobian(p, bs_pos, mu)
    h = np.empty(p.shape[:-1] + (2, 2))
    h[..., 0, 0] = np.sum(kappa * jx * jx, axis=-1) + prior_prec[..., 0, 0]
    h[..., 0, 1] = np.sum(kappa * jx * jy, axis=-1) + prior_prec[..., 0, 1]
    h[..., 1, 0] = h[..., 0, 1]
    h[..., 1, 1] = np.sum(kappa * jy * jy, axis=-1) + prior_prec[..., 1, 1]
    return p, _inv2x2(h), steps_used


def _bearing_jacobian(p, bs_pos, mu):
    """Jacobian rows of delta_q(p) and wrapped residuals mu - delta(p)."""
    diff = bs_pos - p[..., None, :]  # (..., Q, 2)
    d = np.maximum(np.linalg.norm(diff, axis=-1), MIN_DISTANCE_M)
    delta_pred = np.pi * diff[..., 1] / d
    jx = np.pi * diff[..., 1] * diff[..., 0] / d**3
    jy = -np.pi * diff[..., 0] ** 2 / d**3
    return jx, jy, wrap_angle(mu - delta_pred)


def _damp_if_ill_conditioned(h00, h01, h11):
    tr = h00 + h11
    det = h00 * h11 - h01 * h01
    disc = np.sqrt(np.maximum(tr * tr - 4.0 * det, 0.0))
    lam_min = (tr - disc) / 2.0
    lam_max = (tr + disc) / 2.0
    bad = (lam_min <= 0) | (lam_max > _COND_LIMIT * np.maximum(lam_min, 1e-300))
    lift = np.where(bad, _DAMP_SCALE * tr, 0.0)
    return h00 + lift, h01, h11 + lift


def angle_prior(pos_mean, pos_cov, bs_pos):
    """Project a Gaussian position belief onto a bearing VM belief.

    The spatial frequency delta = pi*(y_b - y)/d has gradient along the
    tangential direction v (perpendicular to the BS-target line), so the
    linearized variance is (pi^2 - mu^2)/d^2 * v^T C v and the VM
    concentration is its inverse. The mean is clipped just inside
    (-pi, pi) to keep the concentration finite.

    pos_mean: (..., 2); pos_cov: (..., 2, 2); bs_pos: (..., 2).
    Returns (mu, kappa) arrays.
    """
    diff = np.asarray(bs_pos, dtype=float) - np.asarray(pos_mean, dtype=float)
    d = np.maximum(np.linalg.norm(diff, axis=-1), MIN_DISTANCE_M)
    mu = np.clip(np.pi * diff[..., 1] / d, -(np.pi - 1e-6), np.pi - 1e-6)
    ux = diff[..., 0] / d
    uy = diff[..., 1] / d
    # Tangential unit vector v = (-uy, ux).
    cov = np.asarray(pos_cov, dtype=float)
    v_cov_v = (uy * uy * cov[..., 0, 0]
               - 2.0 * ux * uy * cov[..., 0, 1]
               + ux * ux * cov[..., 1, 1])
    kappa = d * d / ((np.pi**2 - mu**2) * np.maximum(v_cov_v, 1e-300))
    return mu, np.clip(kappa, 0.0, KAPPA_MAX)


@dataclass
class TlMessages:
    """Message state of the localization engine."""

    eta_g_to_delta: np.ndarray   # (L, N, M, Q) wrapped VM factors, fold n
    eta_delta_to_g: np.ndarray   # (L, N, M, Q) VM beliefs about delta
    eta_f_to_delta: np.ndarray   # (M, Q) position-induced VM priors
    eta_delta_to_f: np.ndarray   # (M, Q) signal-side bearing beliefs
    mu_g_to_c: np.ndarray        # (L, N, M, Q)
    var_g_to_c: np.ndarray       # (L, N, M, Q)
    mu_c_to_g: np.ndarray        # (L, N, M, Q)
    var_c_to_g: np.ndarray       # (L, N, M, Q)
    mu_c_to_u: np.ndarray        # (L, M, Q)
    var_c_to_u: np.ndarray       # (L, M, Q)
    pos_to_f_mean: np.ndarray    # (M, Q, 2) leave-one-out position beliefs
    pos_to_f_cov: np.ndarray     # (M, Q, 2, 2)
    pos_mean: np.ndarray         # (M, 2) fused position estimates
    pos_cov: np.ndarray          # (M, 2, 2)


def init_tl_messages(L, N, M, Q, prior_mean, prior_cov):
    """Fresh message state: uniform angles, uninformative coefficients."""
    prior_mean = np.asarray(prior_mean, dtype=float)
    prior_cov = np.asarray(prior_cov, dtype=float)
    return TlMessages(
        eta_g_to_delta=np.zeros((L, N, M, Q), dtype=complex),
        eta_delta_to_g=np.zeros((L, N, M, Q), dtype=complex),
        eta_f_to_delta=np.zeros((M, Q), dtype=complex),
        eta_delta_to_f=np.zeros((M, Q), dtype=complex),
        mu_g_to_c=np.zeros((L, N, M, Q), dtype=complex),
        var_g_to_c=np.full((L, N, M, Q), VAR_CAP),
        mu_c_to_g=np.zeros((L, N, M, Q), dtype=complex),
        var_c_to_g=np.full((L, N, M, Q), VAR_CAP),
        mu_c_to_u=np.zeros((L, M, Q), dtype=complex),
        var_c_to_u=np.full((L, M, Q), VAR_CAP),
        pos_to_f_mean=np.broadcast_to(prior_mean[:, None, :], (M, Q, 2)).copy(),
        pos_to_f_cov=np.broadcast_to(prior_cov, (M, Q, 2, 2)).copy(),
        pos_mean=prior_mean.copy(),
        pos_cov=np.broadcast_to(prior_cov, (M, 2, 2)).copy(),
    )


def _interference_terms(y, eta_delta_to_g, mu_c_to_g, var_c_to_g, sigma2_z):
    """Interference-cancelled observations per (l, n, m, q).

    Treating every other target's contribution as Gaussian clutter with
    the current coefficient message and bearing belief, returns the
    residual observation mu_bar = y - sum_{m' != m} E[c' e^{-j n delta'}]
    and its effective noise variance, together with the rotation phase
    and Bessel ratio of the own bearing belief.
    """
    L, N, M, Q = eta_delta_to_g.shape
    kappa = np.abs(eta_delta_to_g)
    mu_delta = np.angle(np.where(kappa > 0, eta_delta_to_g, 1.0))
    orders = np.arange(N, dtype=float)[None, :, None, None]
    ratio = bessel_ratio(orders, kappa)
    phase = np.exp(-1j * orders * mu_delta)

    contrib = phase * mu_c_to_g * ratio
    # Residual clutter variance per contributor: message variance plus the
    # angle-uncertainty spread of the mean.
    clutter = var_c_to_g + np.abs(mu_c_to_g) ** 2 * (1.0 - ratio**2)
    mu_bar = y[:, :, None, :] - (contrib.sum(axis=2, keepdims=True) - contrib)
    noise = sigma2_z + (clutter.sum(axis=2, keepdims=True) - clutter)
    return mu_bar, noise, phase, ratio


def update_g_to_c(y, eta_delta_to_g, mu_c_to_g, var_c_to_g, sigma2_z):
    """Observation-to-coefficient messages, one per antenna.

    The observation y_{l,n,q} = c_{l,m,q} e^{-j n delta_{m,q}} + clutter
    is moment-matched over the bearing belief: the mean rotates the
    cancelled observation back by the mean phase scaled by the Bessel
    ratio, and the variance absorbs the residual phase uncertainty. The
    returned variance never drops below sigma2_z.
    """
    mu_bar, noise, phase, ratio = _interference_terms(
        y, eta_delta_to_g, mu_c_to_g, var_c_to_g, sigma2_z
    )
    mean = mu_bar * np.conj(phase) * ratio
    var = noise + np.abs(mu_bar) ** 2 - np.abs(mean) ** 2
    return mean, np.minimum(np.maximum(var, sigma2_z), VAR_CAP)


def update_c_to_g(mu_g_to_c, var_g_to_c, mu_u_to_c, var_u_to_c):
    """Coefficient-to-observation messages: leave-one-antenna-out fusion
    of the decoder-side prior with the other antennas' observations."""
    w = 1.0 / var_g_to_c
    zw = mu_g_to_c * w
    w_u = 1.0 / var_u_to_c
    w_tot = w.sum(axis=1, keepdims=True) + w_u[:, None, :, :]
    zw_tot = zw.sum(axis=1, keepdims=True) + (mu_u_to_c * w_u)[:, None, :, :]
    w_loo = np.maximum(w_tot - w, 1.0 / VAR_CAP)
    mean = (zw_tot - zw) / w_loo
    return mean, np.clip(1.0 / w_loo, VAR_FLOOR, VAR_CAP)


def update_c_to_u(mu_g_to_c, var_g_to_c):
    """Coefficient extrinsics toward the decoder: all antennas fused."""
    w = 1.0 / var_g_to_c
    w_tot = np.maximum(w.sum(axis=1), 1.0 / VAR_CAP)
    mean = (mu_g_to_c * w).sum(axis=1) / w_tot
    return mean, np.clip(1.0 / w_tot, VAR_FLOOR, VAR_CAP)


def update_g_to_delta(y, eta_delta_to_g, mu_c_to_g, var_c_to_g, sigma2_z):
    """Observation-to-bearing wrapped VM factors (fold n per antenna).

    With the coefficient belief (mu_c, var_c) and cancelled observation
    mu_bar, the likelihood in delta is VM in the folded angle n*delta
    with natural parameter 2*mu_c*conj(mu_bar)/(noise + var_c). Antenna
    n = 0 carries no angle information and stays at zero.
    """
    mu_bar, noise, _, _ = _interference_terms(
        y, eta_delta_to_g, mu_c_to_g, var_c_to_g, sigma2_z
    )
    eta = 2.0 * mu_c_to_g * np.conj(mu_bar) / (noise + var_c_to_g)
    eta[:, 0, :, :] = 0.0
    return eta


def _reduce_rows(eta_rows):
    """Dominant-mode reduction of per-(l, n) wrapped factor products.

    eta_rows: (L, F) natural parameters of fold f = 1..F factors from
    each observation row. Row (l, n) drops its own fold-n factor from the
    shared aggregate (extrinsic rule). Returns (L, N) complex natural
    parameters of the reduced beliefs, where N = F + 1.
    """
    L, F = eta_rows.shape
    N = F + 1
    folds = np.arange(1, N, dtype=float)
    agg = eta_rows.sum(axis=0)  # (F,)

    # Effective factor sets: row (l, n >= 1) replaces aggregate fold n by
    # the aggregate minus its own contribution.
    etas_eff = np.broadcast_to(agg, (L, N, F)).copy()
    rows = np.arange(L)[:, None]
    cols = np.arange(1, N)[None, :]
    etas_eff[rows, cols, cols - 1] -= eta_rows

    # Shared candidates: uniform grid plus component means of aggregates.
    groups = [np.full(_GRID_256.shape, -1)]
    cands = [_GRID_256]
    for f in range(1, N):
        base = np.angle(agg[f - 1]) if abs(agg[f - 1]) > 0 else 0.0
        cands.append(wrap_angle((base + 2.0 * np.pi * np.arange(f)) / f))
        groups.append(np.full(f, f))
    cands = np.concatenate(cands)
    groups = np.concatenate(groups)
    C = cands.size

    w = np.exp(1j * np.multiply.outer(folds, cands))  # (F, C)
    full = (np.conj(agg) @ w).real  # (C,)
    corr = np.einsum("lf,fc->lfc", np.conj(eta_rows), w).real  # (L, F, C)
    logp = np.empty((L, N, C))
    logp[:, 0, :] = full
    logp[:, 1:, :] = full[None, None, :] - corr
    # Rows with antenna n use their own modified fold-n candidates instead
    # of the aggregate's (their fold-n factor differs from the aggregate).
    for f in range(1, N):
        logp[:, f, groups == f] = -np.inf

    best_cand = np.empty((L, N))
    best_cand[:, 0] = _select_candidate(logp[:, 0, :], np.broadcast_to(cands, (L, C)))
    for f in range(1, N):
        own = etas_eff[:, f, f - 1]  # (L,)
        base = np.where(np.abs(own) > 0, np.angle(own), 0.0)
        own_cands = wrap_angle((base[:, None] + 2.0 * np.pi * np.arange(f)[None, :]) / f)
        own_logp, _, _ = _vm_logpdf_terms(folds, etas_eff[:, f, None, :], own_cands)
        cat_logp = np.concatenate([logp[:, f, :], own_logp], axis=-1)
        cat_cands = np.concatenate(
            [np.broadcast_to(cands, (L, C)), own_cands], axis=-1)
        best_cand[:, f] = _select_candidate(cat_logp, cat_cands)

    mode, kappa = _polish_mode(folds, etas_eff, best_cand)
    mode, kappa = _polish_mode(folds, etas_eff, mode)
    return np.clip(kappa, 0.0, KAPPA_MAX) * np.exp(1j * mode)


def update_delta_to_g(eta_g_to_delta, eta_f_to_delta):
    """Bearing beliefs toward each observation row: position prior plus
    the reduced product of all other rows' wrapped factors."""
    L, N, M, Q = eta_g_to_delta.shape
    out = np.empty_like(eta_g_to_delta)
    for q in range(Q):
        for m in range(M):
            out[:, :, m, q] = eta_f_to_delta[m, q] + _reduce_rows(
                eta_g_to_delta[:, 1:, m, q]
            )
    return out


# Secondary modes below this relative mass leave the projection unimodal.
_MODE_MASS_TOL = 1e-3


def _project_bearing_product(agg, folds):
    """Von Mises projection of one aggregated wrapped product.

    Locates the two strongest separated modes of the product density.
    When the secondary mode carries non-negligible mass, the projection
    moment-matches the two-component mixture: the resultant of disagreeing
    modes is short, so the returned concentration honestly collapses
    instead of committing to whichever mode is momentarily ahead. A
    dominant single mode reduces to the usual Newton-polished peak.
    """
    cands = [_GRID_256]
    for f in range(1, folds.size + 1):
        base = np.angle(agg[f - 1]) if abs(agg[f - 1]) > 0 else 0.0
        cands.append(wrap_angle((base + 2.0 * np.pi * np.arange(f)) / f))
    cands = np.concatenate(cands)
    logp, _, _ = _vm_logpdf_terms(folds, agg[None, :], cands)
    mode = _select_candidate(logp, cands)
    mu1, kappa1 = _polish_mode(folds, agg, mode)
    mu1, kappa1 = float(mu1), float(kappa1)
    logp1, _, _ = _vm_logpdf_terms(folds, agg, mu1)

    # Candidates inside the dominant peak would polish back onto it.
    sep = np.abs(wrap_angle(cands - mu1))
    d_min = max(3.0 * (2.0 * np.pi / _GRID_256.size),
                3.0 / np.sqrt(max(kappa1, 1.0)))
    away = sep >= d_min
    if not away.any():
        return min(kappa1, KAPPA_MAX) * np.exp(1j * mu1)
    idx = np.flatnonzero(away)
    second = cands[idx[np.argmax(logp[idx])]]
    mu2, kappa2 = _polish_mode(folds, agg, second)
    mu2, kappa2 = float(mu2), float(kappa2)
    if abs(wrap_angle(mu2 - mu1)) < d_min:
        return min(kappa1, KAPPA_MAX) * np.exp(1j * mu1)
    logp2, _, _ = _vm_logpdf_terms(folds, agg, mu2)

    # Laplace mass of each peak; curvature floored so a flat secondary
    # bump reads as broad rather than infinitely heavy.
    k_floor = 1e-2
    log_w2 = (float(logp2) - float(logp1)
              + 0.5 * (np.log(max(kappa1, k_floor)) - np.log(max(kappa2, k_floor))))
    w2 = np.exp(min(log_w2, 0.0))
    if w2 < _MODE_MASS_TOL:
        return min(kappa1, KAPPA_MAX) * np.exp(1j * mu1)

    r1 = bessel_ratio(1.0, kappa1)
    r2 = bessel_ratio(1.0, kappa2)
    res = (r1 * np.exp(1j * mu1) + w2 * r2 * np.exp(1j * mu2)) / (1.0 + w2)
    r = min(float(np.abs(res)), 1.0 - 1e-12)
    kappa_eff = r * (2.0 - r * r) / (1.0 - r * r)
    kappa_eff = min(kappa_eff, kappa1, KAPPA_MAX)
    return kappa_eff * np.exp(1j * float(np.angle(res)))


def update_delta_to_f(eta_g_to_delta):
    """Signal-side bearing beliefs: full product over all rows."""
    L, N, M, Q = eta_g_to_delta.shape
    folds = np.arange(1, N, dtype=float)
    out = np.empty((M, Q), dtype=complex)
    for q in range(Q):
        for m in range(M):
            agg = eta_g_to_delta[:, 1:, m, q].sum(axis=0)  # (F,)
            out[m, q] = _project_bearing_product(agg, folds)
    return out


def update_positions(msgs, bs_pos, prior_mean, prior_cov):
    """Triangulate fused and leave-one-bearing-out position beliefs.

    The fused belief uses all Q bearings; the belief sent toward bearing
    q omits that bearing (extrinsic rule). All 1 + Q problems per target
    share one batched Newton-Gauss solve, initialized at the current
    fused estimate.
    """
    M, Q = msgs.eta_delta_to_f.shape
    kappa = np.abs(msgs.eta_delta_to_f)
    mu = np.angle(np.where(kappa > 0, msgs.eta_delta_to_f, 1.0))
    # Problem axis: j < Q leaves bearing j out, j = Q keeps all.
    kap_batch = np.broadcast_to(kappa[:, None, :], (M, Q + 1, Q)).copy()
    for j in range(Q):
        kap_batch[:, j, j] = 0.0
    mu_batch = np.broadcast_to(mu[:, None, :], (M, Q + 1, Q))
    init = np.broadcast_to(msgs.pos_mean[:, None, :], (M, Q + 1, 2))
    mean, cov, _ = triangulate(
        mu_batch, kap_batch, bs_pos,
        prior_mean=np.asarray(prior_mean, dtype=float)[:, None, :],
        prior_cov=prior_cov, init=init,
    )
    msgs.pos_to_f_mean = mean[:, :Q, :]
    msgs.pos_to_f_cov = cov[:, :Q, :, :]
    msgs.pos_mean = mean[:, Q, :]
    msgs.pos_cov = cov[:, Q, :, :]


def _cap_precision(eta, kappa_cap):
    """Scale circular natural parameters down to at most kappa_cap."""
    if kappa_cap is None or not np.isfinite(kappa_cap):
        return eta
    kappa = np.abs(eta)
    scale = np.where(kappa > kappa_cap, kappa_cap / np.maximum(kappa, 1e-300), 1.0)
    return eta * scale


def tl_inner(y, msgs, mu_u_to_c, var_u_to_c, bs_pos, prior_mean, prior_cov,
             sigma2_z, n_inner=3, kappa_cap=None, eta_damp=1.0,
             bearing_damp=1.0, angle_prior_kappa_max=None):
    """One localization pass: n_inner rounds of the inner schedule.

    Each round refreshes bearings from the current observation factors,
    re-triangulates positions, projects them back to angle priors, and
    runs the coefficient chain (delta->g, g->c, c->g, g->delta). After
    the rounds the coefficient extrinsics toward the decoder and a final
    position refresh are produced.

    ``kappa_cap`` bounds the bearing precision fed to triangulation.
    Early outer iterations see aggregates built from barely separated
    coefficient estimates; those can align on a confident wrong mode and
    drag positions tens of meters before the coefficient chain has had a
    chance to resolve the targets. Growing the cap across outer
    iterations lets position commitment track accumulated evidence
    instead of transient consensus; once beliefs are genuinely tight the
    cap is inactive.

    ``eta_damp`` applies convex damping in natural parameters to the
    per-observation bearing factors between rounds (1.0 disables it),
    which smooths limit cycles of the bearing/coefficient feedback.

    ``bearing_damp`` applies the same convex damping to the aggregated
    signal-side bearing beliefs before triangulation. Near-endfire
    geometries produce tight aggregates whose modes can flip sides of
    the truth on alternating passes; blending consecutive aggregates
    centers the belief between flipping modes with honestly reduced
    confidence while leaving genuine fixed points untouched.
    """
    def _blend_f(eta_new):
        return bearing_damp * eta_new + (1.0 - bearing_damp) * msgs.eta_delta_to_f

    for _ in range(n_inner):
        msgs.eta_delta_to_f = _blend_f(_cap_precision(
            update_delta_to_f(msgs.eta_g_to_delta), kappa_cap))
        update_positions(msgs, bs_pos, prior_mean, prior_cov)
        mu_f, kappa_f = angle_prior(
            msgs.pos_to_f_mean, msgs.pos_to_f_cov, np.asarray(bs_pos)[None, :, :]
        )
        if angle_prior_kappa_max is not None:
            kappa_f = np.minimum(kappa_f, angle_prior_kappa_max)
        msgs.eta_f_to_delta = kappa_f * np.exp(1j * mu_f)
        msgs.eta_delta_to_g = update_delta_to_g(msgs.eta_g_to_delta, msgs.eta_f_to_delta)
        msgs.mu_g_to_c, msgs.var_g_to_c = update_g_to_c(
            y, msgs.eta_delta_to_g, msgs.mu_c_to_g, msgs.var_c_to_g, sigma2_z
        )
        msgs.mu_c_to_g, msgs.var_c_to_g = update_c_to_g(
            msgs.mu_g_to_c, msgs.var_g_to_c, mu_u_to_c, var_u_to_c
        )
        eta_new = update_g_to_delta(
            y, msgs.eta_delta_to_g, msgs.mu_c_to_g, msgs.var_c_to_g, sigma2_z
        )
        msgs.eta_g_to_delta = (eta_damp * eta_new
                               + (1.0 - eta_damp) * msgs.eta_g_to_delta)
    msgs.mu_c_to_u, msgs.var_c_to_u = update_c_to_u(msgs.mu_g_to_c, msgs.var_g_to_c)
    msgs.eta_delta_to_f = _blend_f(_cap_precision(
        update_delta_to_f(msgs.eta_g_to_delta), kappa_cap))
    update_positions(msgs, bs_pos, prior_mean, prior_cov)
    return msgs
