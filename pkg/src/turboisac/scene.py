"""Scene model for the uplink cell-free network.

A scene holds one random draw of the network: user activity, user and
target positions, per-hop scattering paths with their gains, pilot
matrix, and everything derived from those (angles, per-target mixing
coefficients, effective channel). Receive signals are synthesized from a
scene plus fresh noise.

Geometry conventions: positions are metric (x, y) pairs, base stations
use uniform linear arrays along x, and the angle of arrival theta at a
base station satisfies sin(theta) = (y_b - y) / distance. The antenna
phase ramp uses spatial frequency delta = pi * sin(theta) with antenna
index n = 0..N-1, i.e. steering entries exp(-j*n*delta).
"""

from dataclasses import dataclass, field

import numpy as np

# Distances are floored at 1 m (array reference distance) so path gains
# stay finite when a user lands on top of a base station.
MIN_DISTANCE_M = 1.0


def _dbm_to_watt(dbm):
    return 10.0 ** (dbm / 10.0) * 1e-3


@dataclass
class SceneConfig:
    """Static description of the network and its priors."""

    n_users: int = 500
    pilot_len: int = 200
    n_antennas: int = 8
    n_targets: int = 3
    n_bs: int = 4
    activity_prob: float = 0.2
    path_prob: float = 0.9
    power_w: float = _dbm_to_watt(10.0)
    noise_var: float = _dbm_to_watt(-109.0)
    c0: float = _dbm_to_watt(-50.0)
    bs_pos: np.ndarray = field(
        default_factory=lambda: np.array(
            [[0.0, 50.0], [100.0, 50.0], [50.0, 0.0], [50.0, 100.0]]
        )
    )
    target_prior_mean: np.ndarray = field(
        default_factory=lambda: np.array([[30.0, 40.0], [62.0, 68.0], [72.0, 30.0]])
    )
    target_prior_cov: np.ndarray = field(default_factory=lambda: np.eye(2))
    area: tuple = ((0.0, 100.0), (0.0, 100.0))

    def __post_init__(self):
        self.bs_pos = np.asarray(self.bs_pos, dtype=float).reshape(-1, 2)
        self.n_bs = self.bs_pos.shape[0]
        self.target_prior_mean = np.asarray(self.target_prior_mean, dtype=float).reshape(-1, 2)
        if self.target_prior_mean.shape[0] != self.n_targets:
            raise ValueError(
                f"need {self.n_targets} target prior means, got "
                f"{self.target_prior_mean.shape[0]}"
            )
        self.target_prior_cov = np.asarray(self.target_prior_cov, dtype=float)
        if self.target_prior_cov.shape != (2, 2):
            raise ValueError("target_prior_cov must be 2x2")
        for name in ("activity_prob", "path_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("power_w", "noise_var", "c0"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class Scene:
    """One random network realization (noise-free)."""

    config: SceneConfig
    active: np.ndarray        # (K,) bool
    user_pos: np.ndarray      # (K, 2)
    target_pos: np.ndarray    # (M, 2)
    paths: np.ndarray         # (K, M, Q) bool
    path_var: np.ndarray      # (K, M, Q) per-path gain variance
    rho: np.ndarray           # (K, M, Q) complex path gains
    pilots: np.ndarray        # (L, K) scaled pilot matrix, columns ~ sqrt(L*P)
    gains: np.ndarray         # (K, M, Q) active * path * rho
    theta: np.ndarray         # (M, Q) angles of arrival at each BS
    delta: np.ndarray         # (M, Q) spatial frequencies pi*sin(theta)
    mix: np.ndarray           # (L, M, Q) per-target mixing coefficients
    channel: np.ndarray       # (K, N, Q) effective per-user channel rows


def aoa(bs_pos, pos):
    """Angle of arrival at a ULA base station from a point.

    Supports broadcasting: bs_pos (..., 2) against pos (..., 2).
    """
    bs_pos = np.asarray(bs_pos, dtype=float)
    pos = np.asarray(pos, dtype=float)
    diff = bs_pos - pos
    d = np.maximum(np.linalg.norm(diff, axis=-1), MIN_DISTANCE_M)
    out = np.arcsin(np.clip(diff[..., 1] / d, -1.0, 1.0))
    if out.ndim == 0:
        return float(out)
    return out


def steering_vector(theta, n_antennas):
    """Array response [exp(-j*n*pi*sin(theta))], n = 0..N-1.

    theta may be an array; antennas occupy the trailing axis.
    """
    delta = np.pi * np.sin(np.asarray(theta, dtype=float))
    n = np.arange(n_antennas)
    return np.exp(-1j * np.multiply.outer(delta, n))


def pathloss(c0, d_hop1, d_hop2):
    """Two-hop squared-distance path gain variance c0 * d1^-2 * d2^-2."""
    d1 = np.maximum(np.asarray(d_hop1, dtype=float), MIN_DISTANCE_M)
    d2 = np.maximum(np.asarray(d_hop2, dtype=float), MIN_DISTANCE_M)
    out = c0 / (d1**2 * d2**2)
    if out.ndim == 0:
        return float(out)
    return out


def effective_channel(gains, theta, n_antennas):
    """Per-user effective channel rows h_k = sum_m gain_{k,m} v(theta_m)^T.

    gains: (K, M, Q); theta: (M, Q). Returns (K, N, Q).
    """
    v = steering_vector(theta, n_antennas)  # (M, Q, N)
    return np.einsum("kmq,mqn->knq", gains, v)


def sample_scene(config, seed):
    """Draw one scene: activity, positions, paths, gains and pilots.

    Activity is Bernoulli(activity_prob); users are uniform over the
    area; each true target position is Gaussian around its prior mean;
    path indicators are Bernoulli(path_prob); path gains are complex
    Gaussian with the two-hop pathloss variance; pilot entries are
    CN(0, 1/L) scaled by sqrt(L*P).
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    cfg = config
    K, L, M, Q = cfg.n_users, cfg.pilot_len, cfg.n_targets, cfg.n_bs

    active = rng.random(K) < cfg.activity_prob
    (x0, x1), (y0, y1) = cfg.area
    user_pos = np.column_stack(
        [rng.uniform(x0, x1, size=K), rng.uniform(y0, y1, size=K)]
    )
    chol = np.linalg.cholesky(cfg.target_prior_cov)
    target_pos = cfg.target_prior_mean + rng.standard_normal((M, 2)) @ chol.T
    paths = rng.random((K, M, Q)) < cfg.path_prob

    d_ut = np.maximum(
        np.linalg.norm(user_pos[:, None, :] - target_pos[None, :, :], axis=-1),
        MIN_DISTANCE_M,
    )  # (K, M)
    d_tb = np.maximum(
        np.linalg.norm(target_pos[:, None, :] - cfg.bs_pos[None, :, :], axis=-1),
        MIN_DISTANCE_M,
    )  # (M, Q)
    path_var = cfg.c0 / (d_ut[:, :, None] ** 2 * d_tb[None, :, :] ** 2)

    rho = np.sqrt(path_var / 2.0) * (
        rng.standard_normal((K, M, Q)) + 1j * rng.standard_normal((K, M, Q))
    )
    pilots = np.sqrt(cfg.pilot_len * cfg.power_w) * np.sqrt(0.5 / L) * (
        rng.standard_normal((L, K)) + 1j * rng.standard_normal((L, K))
    )

    gains = active[:, None, None] * paths * rho
    theta = aoa(cfg.bs_pos[None, :, :], target_pos[:, None, :])  # (M, Q)
    delta = np.pi * np.sin(theta)
    mix = np.einsum("lk,kmq->lmq", pilots, gains)
    channel = effective_channel(gains, theta, cfg.n_antennas)

    return Scene(
        config=cfg,
        active=active,
        user_pos=user_pos,
        target_pos=target_pos,
        paths=paths,
        path_var=path_var,
        rho=rho,
        pilots=pilots,
        gains=gains,
        theta=theta,
        delta=delta,
        mix=mix,
        channel=channel,
    )


def synthesize(scene, seed):
    """Receive signal Y (L, N, Q): pilot-mixed channel plus AWGN."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    cfg = scene.config
    L, N, Q = cfg.pilot_len, cfg.n_antennas, cfg.n_bs
    v = steering_vector(scene.theta, N)  # (M, Q, N)
    signal = np.einsum("lmq,mqn->lnq", scene.mix, v)
    noise = np.sqrt(cfg.noise_var / 2.0) * (
        rng.standard_normal((L, N, Q)) + 1j * rng.standard_normal((L, N, Q))
    )
    return signal + noise
