"""
Rank-one recovery for relaxed transceiver designs.

A lifted solution (F_k for the beamformers, or W~ for the relay) that is not
rank-one is turned into a transmittable design by drawing candidate vectors,
bounding every link term over the channel-error ball, and rescaling the
candidate so that all SINR and EH constraints hold at the worst case.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np
from scipy.optimize import brentq

from conic import (
    ConicSolverError,
    ProgramBuilder,
    SolverFailure,
    SolverStatus,
    eigen_factor,
    hermitian_part,
    solve,
)
from swipt_model import ChannelSet, SystemConfig, complex_gaussian

DEFAULT_RANDOMIZATIONS = 100
RELAY_SCALE_RTOL = 1e-8
RELAY_BRACKET_FACTOR = 1e6
RHO_FLOOR = 1e-6


class RecoveryFailure(ConicSolverError):
    pass


class RecoveryMode(Enum):
    BEAMFORMER = "Beamformer"
    RELAY = "Relay"


@dataclass(frozen=True, eq=False)
class WorstCaseBounds:
    """Entry [k, j] bounds |(h_k + e_k)^H W G f_j|^2; noise entries bound ||(h_k + e_k)^H W||^2."""

    lower_link: np.ndarray
    upper_link: np.ndarray
    upper_noise: np.ndarray
    lower_noise: np.ndarray


@dataclass(frozen=True, eq=False)
class RescaleSolution:
    scales: np.ndarray  # one per user for beamformers, a single entry for the relay
    ps_ratios: np.ndarray
    z: np.ndarray
    z_tilde: np.ndarray
    objective: float


@dataclass(frozen=True, eq=False)
class RecoveryContext:
    channels: ChannelSet
    cfg: SystemConfig
    robust: bool
    relay: Optional[np.ndarray] = None  # fixed W when recovering beamformers
    beamformers: Optional[np.ndarray] = None  # fixed f_k when recovering the relay
    sdr_objective: float = float("nan")


@dataclass(frozen=True, eq=False)
class RecoveredDesign:
    beamformers: np.ndarray
    relay: np.ndarray
    ps_ratios: np.ndarray
    objective: float
    trial: int
    feasible_candidates: int
    rescale: RescaleSolution


def worst_case_linear_bounds(h_hat, eta, b) -> Tuple[float, float]:
    c = abs(np.vdot(h_hat, b))
    spread = eta * np.linalg.norm(b)
    return max(c - spread, 0.0) ** 2, (c + spread) ** 2


def _solve_secular(norm_of, lo, hi, eta):
    """Multiplier nu in [lo, hi] with ||d(nu)|| = eta, where ||d|| decreases in nu."""
    f_lo, f_hi = norm_of(lo) - eta, norm_of(hi) - eta
    if f_lo <= 0:
        return lo
    if f_hi >= 0:
        return hi
    try:
        return brentq(lambda nu: norm_of(nu) - eta, lo, hi, xtol=1e-15, rtol=1e-13, maxiter=500)
    except (RuntimeError, ValueError) as e:
        raise SolverFailure(f"Secular equation did not converge on [{lo}, {hi}]: {e}") from e


def quadratic_extremizers(h_hat, eta, M):
    """
    Extremes of q(e) = (h + e)^H M (h + e) over ||e|| <= eta for PSD M.

    Returns (q_max, e_max, q_min, e_min). Both are found in the eigenbasis of
    M through the Lagrange condition (M - nu I) d = -M c (maximum, nu above the
    top eigenvalue) or (M + nu I) d = -M c (minimum, nu >= 0).
    """
    values, vectors = np.linalg.eigh(hermitian_part(np.asarray(M, dtype=complex)))
    values = np.clip(values, 0.0, None)
    c = vectors.conj().T @ h_hat
    grad = values * c

    def q_of(d):
        return float(np.sum(values * np.abs(c + d) ** 2))

    zero = np.zeros_like(c)
    top = values[-1]
    if eta == 0 or top == 0:
        nominal = q_of(zero)
        return nominal, vectors @ zero, nominal, vectors @ zero

    # maximum
    top_space = values >= top * (1.0 - 1e-12)
    top_grad = np.linalg.norm(grad[top_space])
    grad_norm = np.linalg.norm(grad)
    if top_grad > 1e-14 * max(1.0, grad_norm):

        def d_max(nu):
            return grad / (nu - values)

        nu = _solve_secular(lambda nu: np.linalg.norm(d_max(nu)), top + top_grad / eta, top + grad_norm / eta, eta)
        d_upper = d_max(nu)
    else:
        # hard case: no pull towards the top eigenspace
        rest = ~top_space
        d_rest = np.zeros_like(c)
        d_rest[rest] = grad[rest] / (top - values[rest])
        rest_norm = np.linalg.norm(d_rest)
        if rest_norm <= eta:
            d_upper = d_rest
            d_upper[np.flatnonzero(top_space)[0]] = np.sqrt(eta**2 - rest_norm**2)
        else:

            def d_hard(nu):
                d = np.zeros_like(c)
                d[rest] = grad[rest] / (nu - values[rest])
                return d

            nu = _solve_secular(lambda nu: np.linalg.norm(d_hard(nu)), top, top + grad_norm / eta, eta)
            d_upper = d_hard(nu)

    # minimum
    in_range = values > 1e-12 * top
    if np.linalg.norm(c[in_range]) <= eta:
        d_lower = np.zeros_like(c)
        d_lower[in_range] = -c[in_range]
    else:

        def d_min(nu):
            shifted = values + nu
            return np.divide(-grad, shifted, out=np.zeros_like(c), where=shifted > 0)

        nu = _solve_secular(lambda nu: np.linalg.norm(d_min(nu)), 0.0, grad_norm / eta, eta)
        d_lower = d_min(nu)

    return q_of(d_upper), vectors @ d_upper, q_of(d_lower), vectors @ d_lower


def worst_case_quadratic_bounds(h_hat, eta, W) -> Tuple[float, float]:
    upper, _, lower, _ = quadratic_extremizers(h_hat, eta, W @ W.conj().T)
    return upper, lower


def compute_bounds(beamformers, relay, channels: ChannelSet, robust: bool) -> WorstCaseBounds:
    k_users = beamformers.shape[0]
    radii = channels.error_radius if robust else np.zeros(k_users)
    forwarded = (relay @ channels.first_phase @ beamformers.T).T  # row j is W G f_j
    lower_link = np.zeros((k_users, k_users))
    upper_link = np.zeros((k_users, k_users))
    upper_noise = np.zeros(k_users)
    lower_noise = np.zeros(k_users)
    for k in range(k_users):
        h_hat = channels.second_phase_estimated[k]
        for j in range(k_users):
            lower_link[k, j], upper_link[k, j] = worst_case_linear_bounds(h_hat, radii[k], forwarded[j])
        upper_noise[k], lower_noise[k] = worst_case_quadratic_bounds(h_hat, radii[k], relay)
    return WorstCaseBounds(lower_link, upper_link, upper_noise, lower_noise)


def rescale_beamformers(candidates, relay, bounds: WorstCaseBounds, channels: ChannelSet, cfg: SystemConfig) -> Optional[RescaleSolution]:
    """Per-user power scales phi_k and ratios rho_k of minimum power for fixed beam directions."""
    k_users = candidates.shape[0]
    bs_powers = np.sum(np.abs(candidates) ** 2, axis=1)
    relay_powers = np.sum(np.abs(relay @ channels.first_phase @ candidates.T) ** 2, axis=0)

    builder = ProgramBuilder()
    phi = builder.real("phi", k_users)
    rho = builder.real("rho", k_users)
    builder.nonneg(phi, "phi >= 0")
    builder.nonneg(rho, "rho >= 0")
    builder.nonneg(1.0 - rho, "rho <= 1")

    z_exprs, z_tilde_exprs = [], []
    for k in range(k_users):
        weights = -bounds.upper_link[k].copy()
        weights[k] = bounds.lower_link[k, k] / cfg.sinr_target[k]
        z = (phi @ weights) - cfg.antenna_noise[k] - cfg.relay_noise * bounds.upper_noise[k]
        z_tilde = (phi @ bounds.lower_link[k]) + cfg.relay_noise * bounds.lower_noise[k] + cfg.antenna_noise[k]
        if cfg.circuit_noise[k] > 0:
            builder.hyperbolic(z, rho[k], cfg.circuit_noise[k], f"sinr[{k}]")
        else:
            builder.nonneg(z, f"sinr[{k}]")
            builder.nonneg(rho[k] - RHO_FLOOR, f"rho[{k}] floor")
        eh_floor = cfg.eh_target[k] / cfg.eh_efficiency[k]
        if eh_floor > 0:
            builder.hyperbolic(z_tilde, 1.0 - rho[k], eh_floor, f"eh[{k}]")
        z_exprs.append(z)
        z_tilde_exprs.append(z_tilde)
    builder.minimize(phi @ (bs_powers + relay_powers) + cfg.relay_noise * np.linalg.norm(relay) ** 2)

    solution = solve(builder.build())
    if solution.status != SolverStatus.OPTIMAL:
        logging.debug(f"Beamformer rescale rejected the candidate: {solution.status.value}")
        return None
    return RescaleSolution(
        scales=np.clip(solution.real_value(phi), 0.0, None),
        ps_ratios=np.clip(solution.real_value(rho), 0.0, 1.0),
        z=np.array([solution.real_value(z) for z in z_exprs], dtype=float),
        z_tilde=np.array([solution.real_value(z) for z in z_tilde_exprs], dtype=float),
        objective=solution.objective,
    )


def _ratio_interval(phi, a, b, cfg, k):
    """Feasible [rho_lo, rho_hi] for user k at relay scale phi (empty when lo > hi)."""
    decoded = phi * a - cfg.antenna_noise[k]
    if decoded <= 0:
        return np.inf, -np.inf
    rho_lo = cfg.circuit_noise[k] / decoded
    rho_hi = 1.0 - cfg.eh_target[k] / (cfg.eh_efficiency[k] * (phi * b + cfg.antenna_noise[k]))
    return max(rho_lo, RHO_FLOOR if cfg.circuit_noise[k] == 0 else 0.0), min(rho_hi, 1.0)


def rescale_relay(beamformers, relay, bounds: WorstCaseBounds, channels: ChannelSet, cfg: SystemConfig) -> Optional[RescaleSolution]:
    """Smallest common scale phi on W (and matching rho_k) meeting every worst-case constraint."""
    k_users = beamformers.shape[0]
    a = np.array(
        [
            bounds.lower_link[k, k] / cfg.sinr_target[k]
            - (np.sum(bounds.upper_link[k]) - bounds.upper_link[k, k])
            - cfg.relay_noise * bounds.upper_noise[k]
            for k in range(k_users)
        ]
    )
    b = np.sum(bounds.lower_link, axis=1) + cfg.relay_noise * bounds.lower_noise
    if np.any(a <= 0):
        logging.debug(f"Relay rescale rejected the candidate: no scale decodes user(s) {np.flatnonzero(a <= 0)}")
        return None

    minimal = np.empty(k_users)
    for k in range(k_users):

        def gap(phi, k=k):
            lo, hi = _ratio_interval(phi, a[k], b[k], cfg, k)
            return hi - lo if np.isfinite(lo) else -1.0

        lo = cfg.antenna_noise[k] / a[k] * (1.0 + 1e-12)
        hi = RELAY_BRACKET_FACTOR * max(1.0, lo)
        if gap(lo) >= 0:
            minimal[k] = lo
            continue
        if gap(hi) < 0:
            logging.warning(f"⚠️ Relay scale search hit the bracket end {hi:.3g} for user {k}")
            return None
        root = brentq(gap, lo, hi, xtol=1e-300, rtol=RELAY_SCALE_RTOL)
        minimal[k] = root * (1.0 + 2 * RELAY_SCALE_RTOL)

    phi = float(np.max(minimal))
    ratios = np.empty(k_users)
    for k in range(k_users):
        lo, hi = _ratio_interval(phi, a[k], b[k], cfg, k)
        ratios[k] = np.clip(0.5 * (lo + hi), 0.0, 1.0)

    forwarded = np.sum(np.abs(relay @ channels.first_phase @ beamformers.T) ** 2)
    relay_power = forwarded + cfg.relay_noise * np.linalg.norm(relay) ** 2
    return RescaleSolution(
        scales=np.array([phi]),
        ps_ratios=ratios,
        z=phi * a - cfg.antenna_noise,
        z_tilde=phi * b + cfg.antenna_noise,
        objective=float(np.sum(np.abs(beamformers) ** 2) + phi * relay_power),
    )


def _candidate_vectors(lifted, trial, rng):
    q, sqrt_values = eigen_factor(lifted)
    if trial == 0:
        return sqrt_values[0] * q[:, 0]
    return q @ (sqrt_values * complex_gaussian(rng, len(sqrt_values)))


def randomized_recovery(
    lifted,
    mode: RecoveryMode,
    context: RecoveryContext,
    randomizations: int = DEFAULT_RANDOMIZATIONS,
    rng: Optional[np.random.Generator] = None,
) -> RecoveredDesign:
    """Best rescaled candidate over the principal direction and randomizations - 1 Gaussian draws."""
    rng = rng if rng is not None else np.random.default_rng(0)
    trial_rngs = rng.spawn(max(randomizations - 1, 0))
    channels, cfg = context.channels, context.cfg
    nr = cfg.num_rs_antennas

    best: Optional[RecoveredDesign] = None
    feasible = 0
    for trial in range(randomizations):
        trial_rng = trial_rngs[trial - 1] if trial else None
        if mode == RecoveryMode.BEAMFORMER:
            candidates = np.vstack([_candidate_vectors(F, trial, trial_rng) for F in lifted])
            relay = context.relay
            bounds = compute_bounds(candidates, relay, channels, context.robust)
            rescale = rescale_beamformers(candidates, relay, bounds, channels, cfg)
            if rescale is None:
                continue
            beamformers = np.sqrt(rescale.scales)[:, None] * candidates
        else:
            candidate = _candidate_vectors(lifted, trial, trial_rng).reshape(nr, nr, order="F")
            beamformers = context.beamformers
            bounds = compute_bounds(beamformers, candidate, channels, context.robust)
            rescale = rescale_relay(beamformers, candidate, bounds, channels, cfg)
            if rescale is None:
                continue
            relay = np.sqrt(rescale.scales[0]) * candidate
        feasible += 1
        if best is None or rescale.objective < best.objective:
            best = RecoveredDesign(beamformers, relay, rescale.ps_ratios, rescale.objective, trial, 0, rescale)

    if best is None:
        raise RecoveryFailure(f"All {randomizations} {mode.value.lower()} candidates were infeasible")
    logging.debug(
        f"{mode.value} recovery: {feasible}/{randomizations} feasible candidates, "
        f"best trial {best.trial} at {best.objective:.4f} mW (relaxation {context.sdr_objective:.4f} mW)"
    )
    return RecoveredDesign(best.beamformers, best.relay, best.ps_ratios, best.objective, best.trial, feasible, best.rescale)
