"""Bayesian position error bound and asymptotic MSE prediction.

Two analysis tools live here. The first is a Bayesian Cramer-Rao bound
on the total position MSE for the genie-aided case where activity and
path indicators are known: the information about target positions enters
only through the angle of arrival, so the Fisher blocks reduce to
per-target 2x2 outer products of the gradient of sin(theta), weighted by
the received coefficient energy at each base station. The second is a
state-evolution recursion that tracks the per-(target, BS) MSE of the
coefficient estimator across its inner iterations, with the denoiser
expectations evaluated by Monte Carlo on the scalar pseudo-channel
r_hat = b + CN(0, tau_r).

Conventions: position FIM blocks are stored without the 2/noise_var
measurement scaling; the bound applies it explicitly. The state
evolution runs in the same normalized units as the detector (gains
divided by the noise standard deviation), so pilot power enters in
natural watts.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .circular import VAR_FLOOR
from .detection import spike_slab_denoise, v_to_b
from .scene import (
    MIN_DISTANCE_M,
    aoa,
    pathloss,
    sample_scene,
    steering_vector,
    synthesize,
)

BOUNDS_CSV_COLUMNS = ("sweep_value", "bcrb_m2", "se_iter", "se_tau_b_db")


def aoa_curvature_prefactor(n_antennas):
    """Sum of squared antenna indices, pi^2 * sum_{n=0}^{N-1} n^2.

    This is the array-geometry factor multiplying the angle information:
    each antenna n contributes phase sensitivity (pi*n)^2 with respect to
    sin(theta).
    """
    n = n_antennas
    return np.pi**2 * n * (n - 1) * (2 * n - 1) / 6.0


def sin_aoa_gradient(target_pos, bs_pos):
    """Gradient of sin(theta_{m,q}) with respect to the target position.

    Returns (M, Q, 2). With d the target-BS distance, the components are
    [(y_b - y_t)(x_b - x_t) / d^3, -(x_b - x_t)^2 / d^3].
    """
    target_pos = np.asarray(target_pos, dtype=float)
    bs_pos = np.asarray(bs_pos, dtype=float)
    diff = bs_pos[None, :, :] - target_pos[:, None, :]  # (M, Q, 2)
    d = np.maximum(np.linalg.norm(diff, axis=-1), MIN_DISTANCE_M)
    gx = diff[..., 1] * diff[..., 0] / d**3
    gy = -(diff[..., 0] ** 2) / d**3
    return np.stack([gx, gy], axis=-1)


def path_variances_at(scene, target_pos):
    """Per-path gain variances recomputed for hypothetical target positions.

    Both hops move with the target: user-to-target and target-to-BS
    distances are re-evaluated, keeping user and BS locations fixed.
    Returns (K, M, Q).
    """
    cfg = scene.config
    d_ut = np.linalg.norm(
        scene.user_pos[:, None, :] - target_pos[None, :, :], axis=-1
    )  # (K, M)
    d_tb = np.linalg.norm(
        target_pos[:, None, :] - np.asarray(cfg.bs_pos)[None, :, :], axis=-1
    )  # (M, Q)
    return pathloss(cfg.c0, d_ut[:, :, None], d_tb[None, :, :])


def sigma_c2(scene, target_pos=None):
    """Received coefficient energy per target and BS, (M, Q).

    Sums alpha_k * |pilot|^2 * s_{k,m,q} * var(rho_{k,m,q}) over users
    and pilot symbols. When ``target_pos`` is given the path variances
    are recomputed there, otherwise the scene's own are used.
    """
    if target_pos is None:
        pv = scene.path_var
    else:
        pv = path_variances_at(scene, target_pos)
    energy = np.sum(np.abs(scene.pilots) ** 2, axis=0)  # (K,)
    mask = scene.active[:, None, None] * scene.paths
    return np.einsum("k,kmq->mq", energy, mask * pv)


def f11_bar(scene, target_pos=None):
    """Expected position information block, (2M, 2M) block diagonal.

    Per-target 2x2 block: prefactor * sum_q sigma_c2[m, q] * r r^T with
    r the gradient of sin(theta) at that BS. Expectation over the path
    gains is analytic (they are independent and zero mean), so only the
    coefficient variances enter.
    """
    cfg = scene.config
    if target_pos is None:
        target_pos = scene.target_pos
    sc2 = sigma_c2(scene, None if target_pos is scene.target_pos else target_pos)
    rv = sin_aoa_gradient(target_pos, cfg.bs_pos)  # (M, Q, 2)
    pref = aoa_curvature_prefactor(cfg.n_antennas)
    blocks = pref * np.einsum("mq,mqa,mqb->mab", sc2, rv, rv)  # (M, 2, 2)
    m = cfg.n_targets
    out = np.zeros((2 * m, 2 * m))
    for i in range(m):
        out[2 * i : 2 * i + 2, 2 * i : 2 * i + 2] = blocks[i]
    return out


def bcrb_position(scene, n_samples=1000, seed=0, plug_in=False):
    """Bayesian Cramer-Rao bound on the total position MSE, in m^2.

    tr((2/noise_var * E[F11_bar] + C_t^-1)^-1), with the expectation over
    target positions drawn from the prior (``n_samples`` draws), or the
    plug-in evaluation at the prior mean when ``plug_in`` is set. Raises
    numpy.linalg.LinAlgError if the assembled matrix is singular, which
    cannot happen for a positive-definite prior covariance.
    """
    cfg = scene.config
    m = cfg.n_targets
    cov = np.asarray(cfg.target_prior_cov, dtype=float)
    ct_inv_block = np.linalg.inv(cov)
    ct_inv = np.kron(np.eye(m), ct_inv_block)

    if plug_in:
        f_avg = f11_bar(scene, np.asarray(cfg.target_prior_mean, dtype=float))
    else:
        rng = np.random.default_rng(seed)
        chol = np.linalg.cholesky(cov)
        f_avg = np.zeros((2 * m, 2 * m))
        for _ in range(n_samples):
            pos = cfg.target_prior_mean + rng.standard_normal((m, 2)) @ chol.T
            f_avg += f11_bar(scene, pos)
        f_avg /= n_samples

    info = (2.0 / cfg.noise_var) * f_avg + ct_inv
    return float(np.trace(np.linalg.inv(info)))


@dataclass
class FimAssembly:
    """Component blocks of the posterior Fisher information matrix.

    Position blocks are unscaled (multiply by 2/noise_var for the data
    term). The prior is stored as its two ingredients, the 2M x 2M
    position precision and the per-path gain precision 2/var(rho) shared
    by the real and imaginary blocks. ``f22`` holds one KM x KM complex
    block per BS, row index m*K + k; ``f12_mean``/``f12_stderr`` are the
    Monte Carlo average of the position-gain cross block over path gain
    draws and its entrywise standard error, used to confirm the cross
    term vanishes in expectation.
    """

    f_prior_ct: np.ndarray      # (2M, 2M) inverse prior covariance
    f_prior_rho: np.ndarray     # (K, M, Q) precision 2/var(rho)
    f11_bar: np.ndarray         # (2M, 2M) expected position block
    sigma_c2: np.ndarray        # (M, Q) coefficient energies
    r_vectors: np.ndarray       # (M, Q, 2) gradients of sin(theta)
    f22: np.ndarray             # (Q, KM, KM) complex gain blocks
    f12_mean: np.ndarray        # (Q, 2M, KM) complex MC mean of cross block
    f12_stderr: np.ndarray      # (Q, 2M, KM) entrywise standard error
    n_cross_draws: int = 0

    def prior_matrix(self):
        """Full block-diagonal prior information matrix.

        Order: position block, then the real-part gain block, then the
        imaginary one, each with the flat gain index q-major, then m,
        then k. Only sensible for small scenes; the matrix is dense
        (2M + 2KMQ) square.
        """
        rho_diag = np.transpose(self.f_prior_rho, (2, 1, 0)).ravel()
        n = self.f_prior_ct.shape[0] + 2 * rho_diag.size
        out = np.zeros((n, n))
        m2 = self.f_prior_ct.shape[0]
        out[:m2, :m2] = self.f_prior_ct
        idx = m2 + np.arange(rho_diag.size)
        out[idx, idx] = rho_diag
        idx = m2 + rho_diag.size + np.arange(rho_diag.size)
        out[idx, idx] = rho_diag
        return out


def fim_position(scene, rho=None):
    """Position FIM for fixed path gains, (2M, 2M), unscaled.

    Uses the scene's drawn gains unless ``rho`` overrides them. Built
    from the derivative of the noiseless mean with respect to each
    target position: block (m, m') sums over BSs the product of
    coefficient correlation, steering-derivative correlation, and the
    outer product of the sin(theta) gradients.
    """
    cfg = scene.config
    m, q_n, n_ant = cfg.n_targets, cfg.n_bs, cfg.n_antennas
    if rho is None:
        mix = scene.mix  # (L, M, Q)
    else:
        g = scene.active[:, None, None] * scene.paths * rho
        mix = np.einsum("kmq,lk->lmq", g, scene.pilots)
    rv = sin_aoa_gradient(scene.target_pos, cfg.bs_pos)
    ramp = -1j * np.pi * np.arange(n_ant)
    out = np.zeros((2 * m, 2 * m))
    for q in range(q_n):
        v = steering_vector(scene.theta[:, q], n_ant)  # (M, N)
        vdot = ramp[None, :] * v
        cc = mix[:, :, q].T.conj() @ mix[:, :, q]       # (M, M) conj pattern below
        cc = cc.conj()                                   # now sum_l c_lm conj(c_lm')
        w = vdot @ vdot.conj().T                         # (M, M)
        t = np.real(cc * w)
        block = np.einsum("mM,ma,Mb->maMb", t, rv[:, q, :], rv[:, q, :])
        out += block.reshape(2 * m, 2 * m)
    return out


def fim_full(scene, n_cross_draws=200, seed=0):
    """Assemble the Fisher information components for one scene.

    Returns a FimAssembly with the expected position block, the per-BS
    gain blocks, and a Monte Carlo estimate of the position-gain cross
    block over path gain draws (its expectation is zero because the
    coefficients are linear in the zero-mean gains).
    """
    cfg = scene.config
    k_n, m_n, q_n, n_ant = cfg.n_users, cfg.n_targets, cfg.n_bs, cfg.n_antennas
    rv = sin_aoa_gradient(scene.target_pos, cfg.bs_pos)
    sc2 = sigma_c2(scene)
    mask = scene.active[:, None, None] * scene.paths  # (K, M, Q) 0/1
    gram = scene.pilots.T @ scene.pilots.conj()       # (K, K) sum_l x x*
    ramp = -1j * np.pi * np.arange(n_ant)

    f22 = np.zeros((q_n, m_n * k_n, m_n * k_n), dtype=complex)
    for q in range(q_n):
        v = steering_vector(scene.theta[:, q], n_ant)
        s = v @ v.conj().T                             # (M, M)
        u = mask[:, :, q].T                            # (M, K)
        f22[q] = np.einsum("mM,mk,MK,kK->mkMK", s, u, u, gram,
                           optimize=True).reshape(m_n * k_n, m_n * k_n)

    rng = np.random.default_rng(seed)
    mean = np.zeros((q_n, 2 * m_n, m_n * k_n), dtype=complex)
    sq = np.zeros((q_n, 2 * m_n, m_n * k_n))
    for _ in range(n_cross_draws):
        rho = rng.standard_normal((k_n, m_n, q_n)) + 1j * rng.standard_normal(
            (k_n, m_n, q_n)
        )
        rho *= np.sqrt(scene.path_var / 2.0)
        for q in range(q_n):
            v = steering_vector(scene.theta[:, q], n_ant)
            vdot = ramp[None, :] * v
            w2 = vdot @ v.conj().T                     # (M, M)
            g = mask[:, :, q] * rho[:, :, q]           # (K, M)
            c = scene.pilots @ g                       # (L, M)
            d = c.T @ scene.pilots.conj()              # (M, K)
            t = np.einsum("mk,Mk,mM->mMk", d, mask[:, :, q].T, w2)
            f12 = np.einsum("ma,mMk->maMk", rv[:, q, :], t).reshape(
                2 * m_n, m_n * k_n
            )
            mean[q] += f12
            sq[q] += np.abs(f12) ** 2
    mean /= n_cross_draws
    var = np.maximum(sq / n_cross_draws - np.abs(mean) ** 2, 0.0)
    stderr = np.sqrt(var / n_cross_draws)

    return FimAssembly(
        f_prior_ct=np.kron(
            np.eye(m_n), np.linalg.inv(np.asarray(cfg.target_prior_cov, dtype=float))
        ),
        f_prior_rho=2.0 / scene.path_var,
        f11_bar=f11_bar(scene),
        sigma_c2=sc2,
        r_vectors=rv,
        f22=f22,
        f12_mean=mean,
        f12_stderr=stderr,
        n_cross_draws=n_cross_draws,
    )


@dataclass
class SePrediction:
    """State evolution trajectories, one column per (target, BS) pair.

    ``tau_b`` has one extra leading row for the initialization; the
    output-side quantities satisfy tau_p[j] = K * P * tau_b[j]. The
    barred arrays are the Monte Carlo expectations: ``tau_bar_b`` is the
    tracked true MSE per iteration and ``tau_bar_r`` the expected
    pseudo-channel noise level (equal to tau_r here since the recursion
    is deterministic given its inputs).
    """

    tau_p: np.ndarray       # (iters, J)
    tau_c: np.ndarray       # (iters, J)
    tau_r: np.ndarray       # (iters, J)
    tau_b: np.ndarray       # (iters + 1, J) claimed denoiser variances
    tau_bar_b: np.ndarray   # (iters, J) Monte Carlo true MSE
    tau_bar_r: np.ndarray   # (iters, J)

    def mse_b(self):
        """Tracked coefficient MSE, mean of the final true-MSE row."""
        return float(np.mean(self.tau_bar_b[-1]))


def se_predict(var_c_to_u, weight, prior_var, pilot_power, n_users=None,
               pilot_len=None, n_iter=20, n_mc=10000, seed=0):
    """State evolution for the scalar-variance coefficient estimator.

    ``var_c_to_u`` (L', J) are the localization-side prior variances per
    pilot symbol, ``weight`` (K', J) the slab probabilities and
    ``prior_var`` (K', J) the slab variances, all in normalized units.
    The rows may pool several trials; ``n_users`` and ``pilot_len`` then
    give the physical K and L entering the scalar-variance relations
    tau_p = K*P*tau_b and the 1/(L*P) residual scaling. Denoiser
    expectations use ``n_mc`` total draws per iteration (rounded up to a
    whole number of replicates), with common random numbers across
    iterations. When tau_p - tau_c closes to zero it is floored, same
    convention as the detector.
    """
    v = np.asarray(var_c_to_u, dtype=float)
    w = np.asarray(weight, dtype=float)
    j_n = w.shape[1]
    pv = np.broadcast_to(np.asarray(prior_var, dtype=float), w.shape)
    k_phys = n_users if n_users is not None else w.shape[0]
    l_phys = pilot_len if pilot_len is not None else v.shape[0]
    p = float(pilot_power)

    rng = np.random.default_rng(seed)
    n_rep = max(1, int(np.ceil(n_mc / w.shape[0])))
    shape = (n_rep,) + w.shape
    act = rng.random(shape) < w
    slab = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * np.sqrt(
        pv / 2.0
    )
    b = act * slab
    noise = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * np.sqrt(
        0.5
    )

    tau_b = [np.maximum(np.mean(w * pv, axis=0), VAR_FLOOR)]
    tau_p, tau_c, tau_r, tau_bar_b = [], [], [], []
    for _ in range(n_iter):
        tp = k_phys * p * tau_b[-1]                        # (J,)
        tc = np.mean(tp * v / (tp + v), axis=0)
        diff = np.maximum(tp - tc, VAR_FLOOR)
        tr = tp**2 / (l_phys * p * diff)
        r_hat = b + noise * np.sqrt(tr)
        b_hat, tb, _ = spike_slab_denoise(r_hat, tr[None, None, :], w[None], pv[None])
        tau_p.append(tp)
        tau_c.append(tc)
        tau_r.append(tr)
        tau_b.append(np.maximum(np.mean(tb, axis=(0, 1)), VAR_FLOOR))
        tau_bar_b.append(np.mean(np.abs(b_hat - b) ** 2, axis=(0, 1)))

    tau_r = np.array(tau_r).reshape(n_iter, j_n)
    return SePrediction(
        tau_p=np.array(tau_p).reshape(n_iter, j_n),
        tau_c=np.array(tau_c).reshape(n_iter, j_n),
        tau_r=tau_r,
        tau_b=np.array(tau_b).reshape(n_iter + 1, j_n),
        tau_bar_b=np.array(tau_bar_b).reshape(n_iter, j_n),
        tau_bar_r=tau_r.copy(),
    )


def _trial_seed(root, trial, stream):
    seq = np.random.SeedSequence((root, trial, stream))
    return int(seq.generate_state(1)[0])


def se_vs_montecarlo_report(config, params, trials=50, seed=0, n_mc=10000):
    """Per-outer-iteration comparison of simulated and predicted MSE(B).

    Runs ``trials`` matched simulations, recording what the coefficient
    estimator consumed at each outer iteration (localization-side
    variances, slab weights) and the empirical coefficient MSE it
    achieved. The state evolution is then run once per outer iteration
    on the trial-pooled inputs. Trials that converge early keep their
    final state for the remaining iterations. Returns a list of dicts
    with keys outer_iter, mc_mse_b_db, se_mse_b_db (natural units, dB).
    """
    from .turbo import TurboConfig, run_turbo_hymp

    p = params or TurboConfig()
    n_outer = p.iter_out
    per_iter = [
        {"var": [], "weight": [], "prior": [], "mse": []} for _ in range(n_outer)
    ]

    for t in range(trials):
        scene = sample_scene(config, _trial_seed(seed, t, 0))
        y = synthesize(scene, _trial_seed(seed, t, 1))
        b_true_n = scene.gains.reshape(config.n_users, -1) / np.sqrt(config.noise_var)
        recs = []
        run_turbo_hymp(scene, y, p, observer=recs.append)
        while len(recs) < n_outer:
            recs.append(recs[-1])
        for i, rec in enumerate(recs[:n_outer]):
            per_iter[i]["var"].append(rec["var_c_to_u"])
            per_iter[i]["weight"].append(v_to_b(rec["lam_in"], config.path_prob))
            per_iter[i]["prior"].append(rec["prior_var_n"])
            per_iter[i]["mse"].append(
                float(np.mean(np.abs(rec["b_hat_n"] - b_true_n) ** 2))
            )

    rows = []
    for i, acc in enumerate(per_iter):
        se = se_predict(
            np.vstack(acc["var"]),
            np.vstack(acc["weight"]),
            np.vstack(acc["prior"]),
            pilot_power=config.power_w,
            n_users=config.n_users,
            pilot_len=config.pilot_len,
            n_iter=p.gamp_iters,
            n_mc=n_mc,
            seed=_trial_seed(seed, trials, 2 + i),
        )
        mc_nat = np.mean(acc["mse"]) * config.noise_var
        se_nat = se.mse_b() * config.noise_var
        rows.append({
            "outer_iter": i + 1,
            "mc_mse_b_db": 10.0 * np.log10(max(mc_nat, 1e-300)),
            "se_mse_b_db": 10.0 * np.log10(max(se_nat, 1e-300)),
        })
    return rows


def write_bounds_csv(path, rows):
    """Write bound/prediction rows with the fixed column set.

    Each row is a dict with any of the BOUNDS_CSV_COLUMNS keys; missing
    entries are left blank so bound sweeps and per-iteration prediction
    rows can share one file.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(BOUNDS_CSV_COLUMNS))
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row.get(c, "") for c in BOUNDS_CSV_COLUMNS})
