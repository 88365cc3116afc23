"""
Switched-relaying (SR) transceiver designs.

The relay matrix is restricted to sqrt(beta) T_l with T_l taken from a small
codebook of permutation matrices. For every codebook entry a latent design
(beamformers, beta, power-splitting ratios) is optimized:

* non-robust: the concave-convex procedure (CCCP) on the difference-of-convex
  form in r = (p, q, phi = 1/beta, f), each step an SOCP, finished by a line
  search over beta with the beamformers re-solved;
* robust: a projected subgradient search over beta with an adaptive step,
  each evaluation a robust SDR with beta fixed.

The latent with the smallest total power is transmitted.
"""

import heapq
import itertools
import logging
import math
import time
from dataclasses import dataclass, replace
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np

from ao_design import (
    AoSettings,
    BeamformerSolution,
    DesignOutcome,
    TerminationReason,
    add_ratio_reciprocals,
    search_relay_gain,
    solve_bf_ps,
)
from conic import DEFAULT_TOL, RELAXED_TOL, AffineExpr, ConicSolverError, InfeasibleProgram, ProgramBuilder, solve_or_raise
from rank_one import DEFAULT_RANDOMIZATIONS, RHO_FLOOR
from swipt_model import (
    ChannelSet,
    ConfigurationError,
    ScaledPermutation,
    SystemConfig,
    Transceiver,
    permutation_matrix,
    total_power,
    verify_design,
)

ENUMERATION_CAP = 8
SCORE_DECIMALS = 10
DESCENT_TOLERANCE = 1e-6


class CodebookMethod(Enum):
    SUM_MAX = "sum_max"
    MAX_MIN = "max_min"
    RANDOM = "random"
    EXHAUSTIVE = "exhaustive"


@dataclass(frozen=True)
class SrSettings:
    tolerance: float = 2e-3
    max_iterations: int = 50
    step_size: float = 6.0
    beta_floor: float = 1e-6
    initial_beta: float = 1.0
    fallback_betas: Tuple[float, ...] = (4.0, 16.0)
    randomizations: int = DEFAULT_RANDOMIZATIONS
    solver_tol: float = DEFAULT_TOL
    beta_tolerance: float = 2e-3
    gain_search: bool = True
    gain_search_decades: float = 3.0

    def ao_view(self):
        return AoSettings(randomizations=self.randomizations, solver_tol=self.solver_tol, gain_search_decades=self.gain_search_decades)


@dataclass(frozen=True)
class CodebookSettings:
    size: int = 8
    method: CodebookMethod = CodebookMethod.SUM_MAX

    def build(self, channels: ChannelSet, rng: Optional[np.random.Generator] = None) -> "Codebook":
        return build_codebook(channels.first_phase, channels.second_phase_estimated, self.size, self.method, rng)


@dataclass(frozen=True)
class Codebook:
    permutations: Tuple[Tuple[int, ...], ...]
    method: CodebookMethod
    scores: Tuple[float, ...]

    @property
    def size(self):
        return len(self.permutations)

    def matrices(self):
        return [permutation_matrix(perm) for perm in self.permutations]

    def to_notation(self):
        return [list(perm) for perm in self.permutations]

    def __str__(self):
        lines = [f"{self.method.value} codebook with {self.size} permutation(s):"]
        for index, (perm, score) in enumerate(zip(self.permutations, self.scores)):
            lines.append(f"  T_{index} = {list(perm)}  score={score:.6f}")
        return "\n".join(lines)


def permutation_score(first_phase, estimated, permutation, method: CodebookMethod) -> float:
    k_users = estimated.shape[0]
    effective = estimated.conj() @ permutation_matrix(permutation) @ first_phase
    singular_values = np.linalg.svd(effective, compute_uv=False)[:k_users]
    if method == CodebookMethod.MAX_MIN:
        return float(singular_values[-1])
    return float(np.sum(singular_values))


def build_codebook(
    first_phase,
    estimated,
    size: int = 8,
    method: CodebookMethod = CodebookMethod.SUM_MAX,
    rng: Optional[np.random.Generator] = None,
) -> Codebook:
    nr = first_phase.shape[0]
    identity = tuple(range(nr))
    score_method = CodebookMethod.MAX_MIN if method == CodebookMethod.MAX_MIN else CodebookMethod.SUM_MAX

    def score(perm):
        return permutation_score(first_phase, estimated, perm, score_method)

    if size < 1 and method != CodebookMethod.EXHAUSTIVE:
        raise ConfigurationError("Codebook size must be at least 1")
    if method == CodebookMethod.RANDOM:
        if nr <= 20 and size > math.factorial(nr):
            raise ConfigurationError(f"Codebook size {size} exceeds {nr}! permutations")
        rng = rng if rng is not None else np.random.default_rng(0)
        chosen = [identity]
        while len(chosen) < size:
            perm = tuple(int(i) for i in rng.permutation(nr))
            if perm not in chosen:
                chosen.append(perm)
        return Codebook(tuple(chosen), method, tuple(score(perm) for perm in chosen))

    if nr > ENUMERATION_CAP:
        raise ConfigurationError(f"Enumerating {nr}! permutations is capped at Nr={ENUMERATION_CAP}; use method=random")
    if method == CodebookMethod.EXHAUSTIVE:
        chosen = list(itertools.permutations(range(nr)))
        return Codebook(tuple(chosen), method, tuple(score(perm) for perm in chosen))
    if size > math.factorial(nr):
        raise ConfigurationError(f"Codebook size {size} exceeds {nr}! permutations")

    # lexicographic enumeration; earlier permutations win ties
    scored = ((round(score(perm), SCORE_DECIMALS), -index, perm) for index, perm in enumerate(itertools.permutations(range(nr))))
    best = heapq.nlargest(size, scored)
    chosen = [(perm, s) for s, _, perm in best]
    if identity not in [perm for perm, _ in chosen]:
        chosen[-1] = (identity, round(score(identity), SCORE_DECIMALS))
    return Codebook(tuple(p for p, _ in chosen), method, tuple(float(s) for _, s in chosen))


@dataclass(frozen=True, eq=False)
class CccpPoint:
    """r = (p, q, phi, f) with p = 1/rho, q = 1/(1 - rho), phi = 1/beta."""

    p: np.ndarray
    q: np.ndarray
    phi: float
    beamformers: np.ndarray

    def power(self, channels: ChannelSet, cfg: SystemConfig) -> float:
        bs = np.sum(np.abs(self.beamformers) ** 2)
        forwarded = np.sum(np.abs(channels.first_phase @ self.beamformers.T) ** 2)
        return float(bs + (forwarded + cfg.relay_noise * cfg.num_rs_antennas) / self.phi)

    def to_transceiver(self, index, permutation) -> Transceiver:
        return Transceiver(
            self.beamformers,
            ScaledPermutation(index, tuple(permutation), 1.0 / self.phi),
            np.clip(1.0 / self.p, 0.0, 1.0),
        )


@dataclass(frozen=True, eq=False)
class DcPieces:
    """Per-user convex pieces: SINR holds iff w <= x, EH holds iff y <= z."""

    w: np.ndarray
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray


def effective_rows(permutation, channels: ChannelSet):
    """Row k is a_k = (T G)^H h_k, so that h_k^H T G f = a_k^H f."""
    forward = permutation_matrix(permutation) @ channels.first_phase
    return (forward.conj().T @ channels.second_phase_estimated.T).T


def dc_pieces(point: CccpPoint, permutation, channels: ChannelSet, cfg: SystemConfig) -> DcPieces:
    rows = effective_rows(permutation, channels)
    links = np.abs(rows.conj() @ point.beamformers.T) ** 2  # [k, j] = |a_k^H f_j|^2
    h_norms = np.sum(np.abs(channels.second_phase_estimated) ** 2, axis=1)
    phi, p, q = point.phi, point.p, point.q
    omega, psi = cfg.circuit_noise, cfg.eh_target / (4.0 * cfg.eh_efficiency)
    own = np.diag(links)
    total = np.sum(links, axis=1)
    w = total - own + cfg.antenna_noise * phi + cfg.relay_noise * h_norms + 0.25 * omega * (p + phi) ** 2
    x = 0.25 * omega * (p - phi) ** 2 + own / cfg.sinr_target
    y = psi * (q + phi) ** 2 - cfg.relay_noise * h_norms
    z = total + cfg.antenna_noise * phi + psi * (q - phi) ** 2
    return DcPieces(w, x, y, z)


@dataclass(frozen=True, eq=False)
class Linearization:
    """
    First-order expansion value + 2 Re{grad^H (r - origin)} of a convex piece.
    Real components carry half the partial derivative so one formula covers f.
    """

    origin: CccpPoint
    value: float
    grad_p: np.ndarray
    grad_q: np.ndarray
    grad_phi: float
    grad_f: np.ndarray

    def evaluate(self, point: CccpPoint) -> float:
        o = self.origin
        change = (
            self.grad_p @ (point.p - o.p)
            + self.grad_q @ (point.q - o.q)
            + self.grad_phi * (point.phi - o.phi)
            + np.real(np.sum(self.grad_f.conj() * (point.beamformers - o.beamformers)))
        )
        return float(self.value + 2.0 * change)

    def as_expr(self, p, q, phi, beamformers) -> AffineExpr:
        o = self.origin
        change = (p - o.p) @ self.grad_p + (q - o.q) @ self.grad_q + (phi - o.phi) * self.grad_phi
        for j in range(len(self.grad_f)):
            change = change + (self.grad_f[j].conj() @ (beamformers[j] - o.beamformers[j])).real
        return change * 2.0 + self.value


def linearize(point: CccpPoint, k: int, permutation, channels: ChannelSet, cfg: SystemConfig) -> Tuple[Linearization, Linearization]:
    k_users = cfg.num_users
    rows = effective_rows(permutation, channels)
    pieces = dc_pieces(point, permutation, channels, cfg)
    omega = cfg.circuit_noise[k]
    psi = cfg.eh_target[k] / (4.0 * cfg.eh_efficiency[k])
    a = rows[k]
    gram_f = np.outer(a, a.conj()) @ point.beamformers.T  # column j is G~_k f_j

    x_grad_p = np.zeros(k_users)
    x_grad_p[k] = 0.25 * omega * (point.p[k] - point.phi)
    x_grad_f = np.zeros_like(point.beamformers)
    x_grad_f[k] = gram_f[:, k] / cfg.sinr_target[k]
    x_hat = Linearization(point, pieces.x[k], x_grad_p, np.zeros(k_users), -0.25 * omega * (point.p[k] - point.phi), x_grad_f)

    z_grad_q = np.zeros(k_users)
    z_grad_q[k] = psi * (point.q[k] - point.phi)
    z_grad_phi = 0.5 * cfg.antenna_noise[k] - psi * (point.q[k] - point.phi)
    z_hat = Linearization(point, pieces.z[k], np.zeros(k_users), z_grad_q, z_grad_phi, gram_f.T.copy())
    return x_hat, z_hat


def cccp_step(point: CccpPoint, permutation, channels: ChannelSet, cfg: SystemConfig, settings: SrSettings = SrSettings()):
    """One convexified step; returns the next point, its power and the SOCP optimum."""
    k_users, nt, nr = cfg.num_users, cfg.num_bs_antennas, cfg.num_rs_antennas
    rows = effective_rows(permutation, channels)
    h_norms = np.sum(np.abs(channels.second_phase_estimated) ** 2, axis=1)

    builder = ProgramBuilder()
    p, q = add_ratio_reciprocals(builder, k_users)
    phi = builder.real("phi")
    f = builder.complex("f", (k_users, nt))
    bs_power = builder.real("P1")
    forward_power = builder.real("P2")
    noise_power = builder.real("P3")

    builder.squared_norm_bound(f.ravel(), bs_power, "P1 >= ||f||^2")
    forwarded = (f @ channels.first_phase.T).ravel()
    builder.soc(forward_power + phi, AffineExpr.concat([forwarded * 2.0, (forward_power - phi).reshape(1)]), "P2 phi >= ||G f||^2")
    if cfg.relay_noise > 0:
        builder.hyperbolic(noise_power, phi, cfg.relay_noise * nr, "P3 phi >= sigma_r^2 Nr")
    else:
        builder.nonneg(noise_power, "P3 >= 0")
        builder.nonneg(phi, "phi >= 0")

    for k in range(k_users):
        x_hat, z_hat = linearize(point, k, permutation, channels, cfg)
        decoded = x_hat.as_expr(p, q, phi, f) - phi * cfg.antenna_noise[k] - cfg.relay_noise * h_norms[k]
        leakage = [(rows[k].conj() @ f[j]).reshape(1) for j in range(k_users) if j != k]
        circuit = ((p[k] + phi) * (0.5 * np.sqrt(cfg.circuit_noise[k]))).reshape(1)
        builder.squared_norm_bound(AffineExpr.concat(leakage + [circuit]), decoded, f"sinr[{k}]")

        harvested = z_hat.as_expr(p, q, phi, f) + cfg.relay_noise * h_norms[k]
        demand = ((q[k] + phi) * np.sqrt(cfg.eh_target[k] / (4.0 * cfg.eh_efficiency[k]))).reshape(1)
        builder.squared_norm_bound(demand, harvested, f"eh[{k}]")

    builder.minimize(bs_power + forward_power + noise_power)
    solution = solve_or_raise(builder.build(), "CCCP step", settings.solver_tol)
    new_point = CccpPoint(
        p=solution.real_value(p),
        q=solution.real_value(q),
        phi=float(solution.real_value(phi)),
        beamformers=solution.value(f).reshape(k_users, nt),
    )
    return new_point, new_point.power(channels, cfg), solution.objective


def point_from_solution(bf: BeamformerSolution, beta: float) -> CccpPoint:
    if bf.rank_one:
        p, q = bf.p, bf.q
    else:
        # recovered ratios may sit on 0 or 1; p stays finite, q falls back to the relaxed value
        ratios = np.clip(bf.ps_ratios, RHO_FLOOR, 1.0)
        p = 1.0 / ratios
        with np.errstate(divide="ignore"):
            q = np.where(ratios < 1.0, 1.0 / (1.0 - ratios), bf.q)
    return CccpPoint(np.asarray(p, dtype=float), np.asarray(q, dtype=float), 1.0 / beta, bf.beamformers)


def polish_power_scale(
    point: CccpPoint,
    permutation,
    channels: ChannelSet,
    cfg: SystemConfig,
    settings: SrSettings = SrSettings(),
    rng: Optional[np.random.Generator] = None,
) -> Optional[CccpPoint]:
    """Re-solve the beamformers at the reached beta, then line-search beta; None when nothing improves."""
    beta = 1.0 / point.phi
    relay = np.sqrt(beta) * permutation_matrix(permutation)
    ao_settings = settings.ao_view()
    try:
        bf = solve_bf_ps(relay, channels, cfg, False, ao_settings, rng)
    except ConicSolverError as e:
        logging.debug(f"Polish at beta={beta:.5f} failed: {e}")
        return None
    bf, gain = search_relay_gain(relay, channels, cfg, False, ao_settings, rng, bf)
    polished = point_from_solution(bf, beta * gain)
    if polished.power(channels, cfg) >= point.power(channels, cfg):
        return None
    return polished


def _guarded_cccp_step(point: CccpPoint, iteration: int, permutation, channels, cfg, settings: SrSettings):
    """cccp_step with one retry at the relaxed solver tolerance; the retried point must verify."""
    try:
        return cccp_step(point, permutation, channels, cfg, settings)
    except ConicSolverError as e:
        logging.warning(f"⚠️ CCCP step {iteration} failed, retrying at tolerance {RELAXED_TOL:g}: {e}")
    candidate, power, bound = cccp_step(point, permutation, channels, cfg, replace(settings, solver_tol=RELAXED_TOL))
    report = verify_design(candidate.to_transceiver(0, permutation), channels, cfg)
    if not report.all_constraints_met:
        raise InfeasibleProgram(f"CCCP step {iteration} retry left the feasible set: {report}")
    return candidate, power, bound


def initial_point(permutation, channels, cfg, settings: SrSettings = SrSettings(), rng=None) -> CccpPoint:
    """Feasible start with beta frozen at 1, then at the fallback values."""
    T = permutation_matrix(permutation)
    for beta in (settings.initial_beta,) + tuple(settings.fallback_betas):
        try:
            bf = solve_bf_ps(np.sqrt(beta) * T, channels, cfg, False, settings.ao_view(), rng)
        except ConicSolverError as e:
            logging.debug(f"Start for {list(permutation)} at beta={beta} failed: {e}")
            continue
        return point_from_solution(bf, beta)
    raise InfeasibleProgram(f"No feasible start for permutation {list(permutation)}")


def design_latent_cccp(
    permutation,
    index: int,
    channels: ChannelSet,
    cfg: SystemConfig,
    settings: SrSettings = SrSettings(),
    rng: Optional[np.random.Generator] = None,
    start: Optional[CccpPoint] = None,
) -> DesignOutcome:
    started_at = time.perf_counter()
    try:
        point = start if start is not None else initial_point(permutation, channels, cfg, settings, rng)
    except ConicSolverError as e:
        logging.info(f"Latent {index} is infeasible: {e}")
        return DesignOutcome.infeasible(started_at)

    trace = [point.power(channels, cfg)]
    bounds: List[float] = []
    reason = TerminationReason.ITERATION_CAP
    iterations = 0
    for iteration in range(1, settings.max_iterations + 1):
        iterations = iteration
        try:
            candidate, power, bound = _guarded_cccp_step(point, iteration, permutation, channels, cfg, settings)
        except ConicSolverError as e:
            logging.warning(f"⚠️ CCCP step {iteration} failed from a feasible point: {e}")
            reason = TerminationReason.INFEASIBLE_SUBPROBLEM
            break
        if power > trace[-1] + DESCENT_TOLERANCE * max(1.0, trace[-1]):
            logging.warning(f"⚠️ CCCP ascent at step {iteration}: {trace[-1]:.6f} -> {power:.6f} mW")
            reason = TerminationReason.POWER_INCREASE
            break
        bounds.append(bound)
        if power > trace[-1]:
            # within solver noise of the last point, which is kept
            reason = TerminationReason.TOLERANCE
            break
        point = candidate
        trace.append(power)
        if trace[-2] - power <= settings.tolerance:
            reason = TerminationReason.TOLERANCE
            break

    if settings.gain_search and reason != TerminationReason.INFEASIBLE_SUBPROBLEM:
        polished = polish_power_scale(point, permutation, channels, cfg, settings, rng)
        if polished is not None:
            logging.debug(f"Latent {index} beta polish: {trace[-1]:.6f} -> {polished.power(channels, cfg):.6f} mW")
            point = polished
            trace.append(point.power(channels, cfg))

    tx = point.to_transceiver(index, permutation)
    outcome = DesignOutcome(
        transceiver=tx,
        total_power=total_power(tx, channels, cfg),
        power_trace=trace,
        iterations=iterations,
        converged=reason == TerminationReason.TOLERANCE,
        termination_reason=reason,
        wall_time=time.perf_counter() - started_at,
        sdr_bounds=bounds,
        codebook_index=index,
    )
    logging.debug(f"CCCP latent {index} {list(permutation)}: {outcome}")
    return outcome


@dataclass(eq=False)
class FixedBetaSolution:
    beta: float
    beamformers: np.ndarray
    ps_ratios: np.ndarray
    p: np.ndarray
    q: np.ndarray
    lifted: List[np.ndarray]
    sinr_duals: np.ndarray
    eh_duals: np.ndarray
    objective: float  # f(beta), the relaxed optimum
    transceiver: Transceiver
    design_power: float


def solve_fixed_beta_robust(
    beta: float,
    permutation,
    index: int,
    channels: ChannelSet,
    cfg: SystemConfig,
    settings: SrSettings = SrSettings(),
    rng: Optional[np.random.Generator] = None,
) -> FixedBetaSolution:
    if beta < settings.beta_floor:
        raise ConfigurationError(f"beta={beta} is below the floor {settings.beta_floor}")
    relay = np.sqrt(beta) * permutation_matrix(permutation)
    bf = solve_bf_ps(relay, channels, cfg, True, settings.ao_view(), rng, lmi_scale=1.0 / beta)
    tx = Transceiver(bf.beamformers, ScaledPermutation(index, tuple(permutation), beta), bf.ps_ratios)
    return FixedBetaSolution(
        beta=beta,
        beamformers=bf.beamformers,
        ps_ratios=bf.ps_ratios,
        p=bf.p,
        q=bf.q,
        lifted=bf.lifted,
        sinr_duals=bf.sinr_duals,
        eh_duals=bf.eh_duals,
        objective=bf.sdr_objective,
        transceiver=tx,
        design_power=bf.power,
    )


def beta_subgradient(solution: FixedBetaSolution, channels: ChannelSet, cfg: SystemConfig) -> float:
    """Derivative of the partial Lagrangian of the fixed-beta program with respect to beta."""
    G = channels.first_phase
    forwarded = sum(float(np.real(np.trace(G @ F @ G.conj().T))) for F in solution.lifted)
    beta_sq = solution.beta**2
    sinr_term = solution.sinr_duals @ ((cfg.antenna_noise + cfg.circuit_noise * solution.p) / beta_sq)
    eh_term = solution.eh_duals @ ((cfg.antenna_noise - cfg.eh_target * solution.q / cfg.eh_efficiency) / beta_sq)
    return float(forwarded + cfg.relay_noise * cfg.num_rs_antennas - sinr_term + eh_term)


@dataclass(frozen=True, eq=False)
class SubgradientState:
    """
    Search state over beta. best_* tracks the iterate with the smallest relaxed
    optimum f(beta); bracketed is set once the subgradient has changed sign or
    an infeasible beta forced a backtrack.
    """

    beta: float
    step: float
    floor: float
    x_duals: Optional[np.ndarray] = None
    y_duals: Optional[np.ndarray] = None
    subgradient: float = 0.0
    best_beta: Optional[float] = None
    best_design: Optional[Transceiver] = None
    best_objective: float = float("inf")
    best_power: float = float("inf")
    last_feasible_beta: Optional[float] = None
    bracketed: bool = False
    iteration: int = 0


def adapt_step(state: SubgradientState, s: float) -> Tuple[float, bool]:
    """Step for subgradient s: doubled while the sign holds before bracketing, halved on a sign flip."""
    if state.iteration == 0 or s == 0.0:
        return state.step, state.bracketed
    if np.sign(s) != np.sign(state.subgradient):
        return state.step / 2.0, True
    if state.bracketed:
        return state.step, True
    return state.step * 2.0, False


def subgradient_step(state: SubgradientState, solution: FixedBetaSolution, channels: ChannelSet, cfg: SystemConfig) -> SubgradientState:
    s = beta_subgradient(solution, channels, cfg)
    step, bracketed = adapt_step(state, s)
    improved = solution.objective < state.best_objective
    return replace(
        state,
        beta=max(solution.beta - step * s, state.floor),
        step=step,
        x_duals=solution.sinr_duals,
        y_duals=solution.eh_duals,
        subgradient=s,
        best_beta=solution.beta if improved else state.best_beta,
        best_design=solution.transceiver if improved else state.best_design,
        best_objective=solution.objective if improved else state.best_objective,
        best_power=solution.design_power if improved else state.best_power,
        last_feasible_beta=solution.beta,
        bracketed=bracketed,
        iteration=state.iteration + 1,
    )


def subgradient_settled(previous_objective: Optional[float], solution: FixedBetaSolution, state: SubgradientState, settings: SrSettings) -> bool:
    """Relative change of f and the beta move are both small, and the minimizer is bracketed or beta is stationary."""
    if previous_objective is None:
        return False
    change = abs(solution.objective - previous_objective) / max(abs(previous_objective), 1e-12)
    move = abs(state.beta - solution.beta)
    return change <= settings.tolerance and move <= settings.beta_tolerance * solution.beta and (state.bracketed or move == 0.0)


def design_latent_subgradient(
    permutation,
    index: int,
    channels: ChannelSet,
    cfg: SystemConfig,
    settings: SrSettings = SrSettings(),
    rng: Optional[np.random.Generator] = None,
) -> DesignOutcome:
    started_at = time.perf_counter()
    state = SubgradientState(beta=settings.initial_beta, step=settings.step_size, floor=settings.beta_floor)
    fallbacks = list(settings.fallback_betas)
    trace: List[float] = []
    bounds: List[float] = []
    previous_objective = None
    reason = TerminationReason.ITERATION_CAP
    iterations = 0
    for iteration in range(1, settings.max_iterations + 1):
        iterations = iteration
        try:
            solution = solve_fixed_beta_robust(state.beta, permutation, index, channels, cfg, settings, rng)
        except ConicSolverError as e:
            if state.last_feasible_beta is None:
                if not fallbacks:
                    logging.info(f"Robust latent {index} is infeasible: {e}")
                    return DesignOutcome.infeasible(started_at, iteration)
                state = replace(state, beta=fallbacks.pop(0))
                continue
            step = state.step / 2.0
            state = replace(
                state,
                step=step,
                beta=max(state.last_feasible_beta - step * state.subgradient, state.floor),
                bracketed=True,
            )
            logging.debug(f"beta infeasible, backtracking to {state.beta:.5f} with step {step:g}")
            continue

        state = subgradient_step(state, solution, channels, cfg)
        trace.append(state.best_objective)
        bounds.append(solution.objective)
        logging.debug(
            f"Latent {index} iteration {iteration}: beta={solution.beta:.5f}, f(beta)={solution.objective:.5f}, "
            f"s={state.subgradient:+.4e}, step={state.step:g}"
        )
        if subgradient_settled(previous_objective, solution, state, settings):
            reason = TerminationReason.TOLERANCE
            break
        previous_objective = solution.objective

    if state.best_design is None:
        return DesignOutcome.infeasible(started_at, iterations)
    outcome = DesignOutcome(
        transceiver=state.best_design,
        total_power=total_power(state.best_design, channels, cfg),
        power_trace=trace,
        iterations=iterations,
        converged=reason == TerminationReason.TOLERANCE,
        termination_reason=reason,
        wall_time=time.perf_counter() - started_at,
        sdr_bounds=bounds,
        codebook_index=index,
    )
    logging.debug(f"Subgradient latent {index} {list(permutation)}: {outcome}")
    return outcome


def convexity_excess(beta_a, beta_b, permutation, channels, cfg, settings: SrSettings = SrSettings(), rng=None) -> float:
    """f((a + b) / 2) - (f(a) + f(b)) / 2; positive values beyond solver tolerance are logged."""
    values = [
        solve_fixed_beta_robust(beta, permutation, 0, channels, cfg, settings, rng).objective
        for beta in (beta_a, 0.5 * (beta_a + beta_b), beta_b)
    ]
    excess = values[1] - 0.5 * (values[0] + values[2])
    if excess > 1e-4 * max(1.0, abs(values[1])):
        logging.warning(f"⚠️ f(beta) midpoint convexity violated on [{beta_a:g}, {beta_b:g}] by {excess:.3e} mW")
    return excess


def select_latent(powers) -> Optional[int]:
    """Index of the smallest finite power, lowest index on ties."""
    powers = np.asarray(powers, dtype=float)
    if not np.any(np.isfinite(powers)):
        return None
    return int(np.argmin(np.where(np.isfinite(powers), powers, np.inf)))


def _latent(robust, permutation, index, channels, cfg, settings, rng, start=None):
    if robust:
        return design_latent_subgradient(permutation, index, channels, cfg, settings, rng)
    return design_latent_cccp(permutation, index, channels, cfg, settings, rng, start)


def _starting_power(robust, permutation, index, channels, cfg, settings, rng):
    """Power of the beta-frozen start used by the simplified selection."""
    try:
        if robust:
            return solve_fixed_beta_robust(settings.initial_beta, permutation, index, channels, cfg, settings, rng).design_power, None
        start = initial_point(permutation, channels, cfg, settings, rng)
        return start.power(channels, cfg), start
    except ConicSolverError as e:
        logging.debug(f"Start of latent {index} is infeasible: {e}")
        return float("inf"), None


def design_sr(
    channels: ChannelSet,
    cfg: SystemConfig,
    codebook: Codebook,
    robust: bool,
    simplified: bool = False,
    settings: SrSettings = SrSettings(),
    rng: Optional[np.random.Generator] = None,
) -> DesignOutcome:
    started_at = time.perf_counter()
    if codebook.size == 0:
        raise ConfigurationError("Codebook is empty")
    rng = rng if rng is not None else np.random.default_rng(0)

    if simplified:
        starts = [_starting_power(robust, perm, l, channels, cfg, settings, rng) for l, perm in enumerate(codebook.permutations)]
        powers = [power for power, _ in starts]
        l_opt = select_latent(powers)
        if l_opt is None:
            return DesignOutcome.infeasible(started_at)
        chosen = _latent(robust, codebook.permutations[l_opt], l_opt, channels, cfg, settings, rng, starts[l_opt][1])
        if not chosen.feasible:
            return DesignOutcome.infeasible(started_at, chosen.iterations)
    else:
        latents = [_latent(robust, perm, l, channels, cfg, settings, rng) for l, perm in enumerate(codebook.permutations)]
        powers = [o.total_power if o.feasible else float("inf") for o in latents]
        l_opt = select_latent(powers)
        if l_opt is None:
            return DesignOutcome.infeasible(started_at, sum(o.iterations for o in latents))
        chosen = latents[l_opt]

    outcome = replace(
        chosen,
        codebook_index=l_opt,
        latent_powers=powers,
        wall_time=time.perf_counter() - started_at,
    )
    logging.info(
        f"{'Robust' if robust else 'Nominal'} {'simplified ' if simplified else ''}SR picked T_{l_opt}="
        f"{list(codebook.permutations[l_opt])}: {outcome}"
    )
    return outcome
