"""
Alternating-optimization (AO) transceiver designs.

Each AO iteration fixes the relay matrix W and solves a semidefinite
relaxation (SDR) for the beamformers and power-splitting ratios, then fixes
those and solves an SDR for the lifted relay vec(W) vec(W)^H. The robust
variants replace every SINR/EH row by an S-procedure LMI over the
channel-error ball.

With gain_search on, the beamformer step is followed by a line search over
the relay gain, which moves the iterate along the one direction neither
block can move it on its own.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from scipy.optimize import minimize_scalar

from conic import (
    AffineExpr,
    ConicSolverError,
    DEFAULT_TOL,
    InfeasibleProgram,
    ProgramBuilder,
    hermitian_part,
    principal_component,
    psd_corner,
    solve_or_raise,
)
from rank_one import DEFAULT_RANDOMIZATIONS, RecoveryContext, RecoveryMode, randomized_recovery
from swipt_model import (
    ChannelSet,
    FullMatrix,
    SystemConfig,
    Transceiver,
    check_feasibility_rank,
    complex_gaussian,
    total_power,
)

RANK_ONE_RATIO = 1e-6
INCREASE_TOLERANCE = 1e-9
GAIN_SEARCH_XATOL = 1e-3
GAIN_SEARCH_RTOL = 1e-6
INFEASIBLE_PENALTY = 1e12


class AoInit(Enum):
    IDENTITY = "identity"
    GAUSSIAN = "gaussian"
    SWITCHED = "switched"


class TerminationReason(Enum):
    TOLERANCE = "tolerance"
    POWER_INCREASE = "power_increase"
    ITERATION_CAP = "iteration_cap"
    INFEASIBLE_SUBPROBLEM = "infeasible_subproblem"


@dataclass(frozen=True)
class AoSettings:
    tolerance: float = 2e-3
    max_iterations: int = 20
    init: AoInit = AoInit.IDENTITY
    randomizations: int = DEFAULT_RANDOMIZATIONS
    solver_tol: float = DEFAULT_TOL
    gain_search: bool = True
    gain_search_decades: float = 3.0


@dataclass(eq=False)
class DesignOutcome:
    transceiver: Optional[Transceiver]
    total_power: float
    power_trace: List[float]
    iterations: int
    converged: bool
    termination_reason: TerminationReason
    wall_time: float
    feasible: bool = True
    sdr_bounds: List[float] = field(default_factory=list)
    codebook_index: Optional[int] = None
    latent_powers: Optional[List[float]] = None

    @classmethod
    def infeasible(cls, started_at, iterations=0):
        return cls(
            transceiver=None,
            total_power=float("nan"),
            power_trace=[],
            iterations=iterations,
            converged=False,
            termination_reason=TerminationReason.INFEASIBLE_SUBPROBLEM,
            wall_time=time.perf_counter() - started_at,
            feasible=False,
        )

    def __str__(self):
        if not self.feasible:
            return f"DesignOutcome(infeasible after {self.iterations} iteration(s), {self.wall_time:.2f}s)"
        return (
            f"DesignOutcome({self.total_power:.4f} mW after {self.iterations} iteration(s), "
            f"{self.termination_reason.value}, {self.wall_time:.2f}s)"
        )


@dataclass(eq=False)
class SdrAssembly:
    """Handles into a relaxed program: lifted variables, PS reciprocals, S-procedure slacks, rows."""

    builder: ProgramBuilder
    lifted: List[AffineExpr]
    p: Optional[AffineExpr] = None
    q: Optional[AffineExpr] = None
    lambdas: Optional[AffineExpr] = None
    mus: Optional[AffineExpr] = None
    sinr_blocks: List[int] = field(default_factory=list)
    eh_blocks: List[int] = field(default_factory=list)
    objective: Optional[AffineExpr] = None


@dataclass(eq=False)
class BeamformerSolution:
    beamformers: np.ndarray
    ps_ratios: np.ndarray
    p: np.ndarray
    q: np.ndarray
    lifted: List[np.ndarray]
    sdr_objective: float
    power: float
    rank_one: bool
    recovered: bool = False
    lambdas: Optional[np.ndarray] = None
    mus: Optional[np.ndarray] = None
    sinr_duals: Optional[np.ndarray] = None
    eh_duals: Optional[np.ndarray] = None


@dataclass(eq=False)
class RelaySolution:
    relay: np.ndarray
    ps_ratios: np.ndarray
    lifted: np.ndarray
    sdr_objective: float
    power: float
    rank_one: bool
    recovered: bool = False


def sum_exprs(exprs):
    total = exprs[0]
    for expr in exprs[1:]:
        total = total + expr
    return total


def _robust_lmi(builder, core, h_hat, corner_const, slack, radius, scale, name):
    """
    S-procedure block for (h + e)^H core (h + e) + corner_const >= 0 over ||e|| <= radius:
    scale * [[core, core h], [h^H core, h^H core h + corner_const]] + slack * diag(I, -radius^2).
    """
    n = len(h_hat)
    core_h = core @ h_hat
    corner = (h_hat.conj() @ core_h).real + corner_const
    block = AffineExpr.bmat([[core, core_h], [core_h.conj().reshape(1, n), corner]]) * scale
    shift = np.eye(n + 1)
    shift[n, n] = -(radius**2)
    return builder.psd(block + slack * shift, name)


def add_ratio_reciprocals(builder, k_users):
    """p_k = 1/rho_k and q_k = 1/(1 - rho_k) relaxed to p, q >= 1 with 1/p + 1/q <= 1."""
    p = builder.real("p", k_users)
    q = builder.real("q", k_users)
    u = builder.real("u", k_users)
    v = builder.real("v", k_users)
    builder.nonneg(p - 1.0, "p >= 1")
    builder.nonneg(q - 1.0, "q >= 1")
    builder.nonneg(1.0 - u - v, "u + v <= 1")
    for k in range(k_users):
        builder.hyperbolic(u[k], p[k], 1.0, f"u[{k}] p[{k}] >= 1")
        builder.hyperbolic(v[k], q[k], 1.0, f"v[{k}] q[{k}] >= 1")
    return p, q


def assemble_bf_ps(relay, channels: ChannelSet, cfg: SystemConfig, robust: bool, lmi_scale: float = 1.0) -> SdrAssembly:
    """Relaxed beamformer/PS program for a fixed relay matrix; rows are scaled by lmi_scale."""
    k_users, nt = cfg.num_users, cfg.num_bs_antennas
    builder = ProgramBuilder()
    forward = relay @ channels.first_phase
    noise_gram = cfg.relay_noise * (relay @ relay.conj().T)

    lifted = [builder.hermitian(f"F[{k}]", nt) for k in range(k_users)]
    for k, F in enumerate(lifted):
        builder.psd(F, f"F[{k}] psd")
    p, q = add_ratio_reciprocals(builder, k_users)
    relayed = [forward @ F @ forward.conj().T for F in lifted]
    asm = SdrAssembly(builder, lifted, p, q)

    if robust:
        asm.lambdas = builder.real("lambda", k_users)
        asm.mus = builder.real("mu", k_users)
        builder.nonneg(asm.lambdas, "lambda >= 0")
        builder.nonneg(asm.mus, "mu >= 0")

    total_relayed = sum_exprs(relayed)
    for k in range(k_users):
        h_hat = channels.second_phase_estimated[k]
        eh_floor = cfg.eh_target[k] / cfg.eh_efficiency[k]
        if robust:
            sinr_core = relayed[k] * (1.0 / cfg.sinr_target[k] + 1.0) - total_relayed - noise_gram
            eh_core = total_relayed + noise_gram
            radius = channels.error_radius[k]
            asm.sinr_blocks.append(
                _robust_lmi(builder, sinr_core, h_hat, -cfg.antenna_noise[k] - cfg.circuit_noise[k] * p[k], asm.lambdas[k], radius, lmi_scale, f"sinr[{k}]")
            )
            asm.eh_blocks.append(
                _robust_lmi(builder, eh_core, h_hat, cfg.antenna_noise[k] - eh_floor * q[k], asm.mus[k], radius, lmi_scale, f"eh[{k}]")
            )
        else:
            links = [(h_hat.conj() @ Q @ h_hat).real for Q in relayed]
            interference = sum_exprs(links) - links[k]
            noise = float(np.real(h_hat.conj() @ noise_gram @ h_hat))
            sinr_row = links[k] / cfg.sinr_target[k] - interference - noise - cfg.antenna_noise[k] - cfg.circuit_noise[k] * p[k]
            eh_row = sum_exprs(links) + noise + cfg.antenna_noise[k] - eh_floor * q[k]
            asm.sinr_blocks.append(builder.nonneg(sinr_row * lmi_scale, f"sinr[{k}]"))
            asm.eh_blocks.append(builder.nonneg(eh_row * lmi_scale, f"eh[{k}]"))

    objective = AffineExpr.constant(cfg.relay_noise * np.linalg.norm(relay) ** 2)
    for F, Q in zip(lifted, relayed):
        objective = objective + F.trace().real + Q.trace().real
    builder.minimize(objective)
    asm.objective = objective
    return asm


def _dual_corners(solution, blocks, robust):
    if robust:
        return np.array([psd_corner(solution.dual(b)) for b in blocks])
    return np.array([float(solution.dual(b)[0]) for b in blocks])


def solve_bf_ps(
    relay,
    channels: ChannelSet,
    cfg: SystemConfig,
    robust: bool,
    settings: AoSettings = AoSettings(),
    rng: Optional[np.random.Generator] = None,
    lmi_scale: float = 1.0,
) -> BeamformerSolution:
    asm = assemble_bf_ps(relay, channels, cfg, robust, lmi_scale)
    mode = "robust" if robust else "nominal"
    solution = solve_or_raise(asm.builder.build(), f"{mode} beamformer SDR", settings.solver_tol)

    lifted = [hermitian_part(solution.value(F)) for F in asm.lifted]
    p = solution.real_value(asm.p)
    q = solution.real_value(asm.q)
    ratios = np.clip(1.0 / p, 0.0, 1.0)
    components = [principal_component(F) for F in lifted]
    beamformers = np.vstack([f for f, _ in components])
    worst_ratio = max(ratio for _, ratio in components)
    rank_one = worst_ratio <= RANK_ONE_RATIO

    recovered = False
    if not rank_one:
        if not robust:
            logging.warning(f"⚠️ Nominal beamformer SDR returned a lifted solution with eigenvalue ratio {worst_ratio:.2e}")
        context = RecoveryContext(channels, cfg, robust, relay=relay, sdr_objective=solution.objective)
        design = randomized_recovery(lifted, RecoveryMode.BEAMFORMER, context, settings.randomizations, rng)
        beamformers, ratios, recovered = design.beamformers, design.ps_ratios, True

    tx = Transceiver(beamformers, FullMatrix(relay), ratios)
    result = BeamformerSolution(
        beamformers=beamformers,
        ps_ratios=ratios,
        p=p,
        q=q,
        lifted=lifted,
        sdr_objective=solution.objective,
        power=total_power(tx, channels, cfg),
        rank_one=rank_one,
        recovered=recovered,
        sinr_duals=_dual_corners(solution, asm.sinr_blocks, robust),
        eh_duals=_dual_corners(solution, asm.eh_blocks, robust),
    )
    if robust:
        result.lambdas = solution.real_value(asm.lambdas)
        result.mus = solution.real_value(asm.mus)
    logging.debug(f"{mode} beamformer step: SDR {solution.objective:.5f} mW, design {result.power:.5f} mW, rank-one={rank_one}")
    return result


def solve_bf_ps_nominal(relay, channels, cfg, settings=AoSettings(), rng=None) -> BeamformerSolution:
    return solve_bf_ps(relay, channels, cfg, False, settings, rng)


def solve_bf_ps_robust(relay, channels, cfg, settings=AoSettings(), rng=None) -> BeamformerSolution:
    return solve_bf_ps(relay, channels, cfg, True, settings, rng)


def relaxed_power(relay, channels: ChannelSet, cfg: SystemConfig, robust: bool, settings: AoSettings = AoSettings(), lmi_scale: float = 1.0) -> float:
    """Optimum of the relaxed beamformer program for a fixed relay, inf when it is infeasible."""
    asm = assemble_bf_ps(relay, channels, cfg, robust, lmi_scale)
    try:
        return solve_or_raise(asm.builder.build(), "relaxed beamformer SDR", settings.solver_tol).objective
    except ConicSolverError:
        return math.inf


def search_relay_gain(
    relay,
    channels: ChannelSet,
    cfg: SystemConfig,
    robust: bool,
    settings: AoSettings,
    rng: Optional[np.random.Generator],
    reference: BeamformerSolution,
) -> Tuple[BeamformerSolution, float]:
    """
    Bounded line search over the relay gain t (W -> sqrt(t) W), re-solving the
    beamformer step at every t. The two AO blocks cannot trade BS power against
    relay gain on their own, so a fixed point of the alternation is usually not
    a minimum along t.

    Returns the beamformer solution and the gain; (reference, 1.0) unless some
    t lowers the transmitted power.
    """

    def objective(log_t):
        t = 10.0**log_t
        value = relaxed_power(np.sqrt(t) * relay, channels, cfg, robust, settings, lmi_scale=1.0 / t)
        # slope back towards t = 1, which is feasible
        return value if math.isfinite(value) else INFEASIBLE_PENALTY * (1.0 + abs(log_t))

    decades = settings.gain_search_decades
    result = minimize_scalar(objective, bounds=(-decades, decades), method="bounded", options={"xatol": GAIN_SEARCH_XATOL})
    if not result.success or result.fun >= reference.sdr_objective * (1.0 - GAIN_SEARCH_RTOL):
        return reference, 1.0
    gain = float(10.0**result.x)
    try:
        candidate = solve_bf_ps(np.sqrt(gain) * relay, channels, cfg, robust, settings, rng, lmi_scale=1.0 / gain)
    except ConicSolverError as e:
        logging.debug(f"Relay gain {gain:.4g} failed on re-solve: {e}")
        return reference, 1.0
    if candidate.power >= reference.power:
        return reference, 1.0
    logging.debug(f"Relay gain {gain:.4g} after {result.nfev} evaluations: {reference.power:.5f} -> {candidate.power:.5f} mW")
    return candidate, gain


def relay_selectors(beamformers, channels: ChannelSet):
    """C_j = (G f_j)^T kron I, so that C_j vec(W) = W G f_j."""
    nr = channels.first_phase.shape[0]
    return [np.kron((channels.first_phase @ f)[None, :], np.eye(nr)) for f in beamformers]


def block_diagonal_sum(lifted: AffineExpr, nr: int) -> AffineExpr:
    """Sum of the Nr x Nr diagonal blocks of vec(W) vec(W)^H, i.e. W W^H."""
    total = lifted[0:nr, 0:nr]
    for j in range(1, nr):
        total = total + lifted[j * nr : (j + 1) * nr, j * nr : (j + 1) * nr]
    return total


def assemble_relay(beamformers, ps_ratios, channels: ChannelSet, cfg: SystemConfig, robust: bool) -> SdrAssembly:
    k_users, nr = cfg.num_users, cfg.num_rs_antennas
    builder = ProgramBuilder()
    lifted = builder.hermitian("W~", nr * nr)
    builder.psd(lifted, "W~ psd")
    selectors = relay_selectors(beamformers, channels)
    relayed = [C @ lifted @ C.conj().T for C in selectors]
    noise_gram = block_diagonal_sum(lifted, nr) * cfg.relay_noise
    asm = SdrAssembly(builder, [lifted])

    if robust:
        asm.lambdas = builder.real("lambda", k_users)
        asm.mus = builder.real("mu", k_users)
        builder.nonneg(asm.lambdas, "lambda >= 0")
        builder.nonneg(asm.mus, "mu >= 0")

    total_relayed = sum_exprs(relayed)
    for k in range(k_users):
        rho = float(ps_ratios[k])
        h_hat = channels.second_phase_estimated[k]
        eh_floor = cfg.eh_target[k] / cfg.eh_efficiency[k]
        if eh_floor > 0 and rho >= 1.0:
            raise InfeasibleProgram(f"User {k} sends all power to decoding but needs {cfg.eh_target[k]:.3g} mW harvested")
        if rho <= 0.0:
            raise InfeasibleProgram(f"User {k} sends no power to decoding")
        sinr_const = -cfg.antenna_noise[k] - cfg.circuit_noise[k] / rho
        eh_const = cfg.antenna_noise[k] - (eh_floor / (1.0 - rho) if eh_floor > 0 else 0.0)
        if robust:
            sinr_core = relayed[k] * (1.0 / cfg.sinr_target[k] + 1.0) - total_relayed - noise_gram
            eh_core = total_relayed + noise_gram
            radius = channels.error_radius[k]
            asm.sinr_blocks.append(_robust_lmi(builder, sinr_core, h_hat, sinr_const, asm.lambdas[k], radius, 1.0, f"sinr[{k}]"))
            asm.eh_blocks.append(_robust_lmi(builder, eh_core, h_hat, eh_const, asm.mus[k], radius, 1.0, f"eh[{k}]"))
        else:
            links = [(h_hat.conj() @ Wbar @ h_hat).real for Wbar in relayed]
            noise = (h_hat.conj() @ noise_gram @ h_hat).real
            interference = sum_exprs(links) - links[k]
            sinr_row = links[k] / cfg.sinr_target[k] - interference - noise + sinr_const
            eh_row = sum_exprs(links) + noise + eh_const
            asm.sinr_blocks.append(builder.nonneg(sinr_row, f"sinr[{k}]"))
            asm.eh_blocks.append(builder.nonneg(eh_row, f"eh[{k}]"))

    objective = lifted.trace().real * cfg.relay_noise + float(np.sum(np.abs(beamformers) ** 2))
    for Wbar in relayed:
        objective = objective + Wbar.trace().real
    builder.minimize(objective)
    asm.objective = objective
    return asm


def solve_relay(
    beamformers,
    ps_ratios,
    channels: ChannelSet,
    cfg: SystemConfig,
    robust: bool,
    settings: AoSettings = AoSettings(),
    rng: Optional[np.random.Generator] = None,
) -> RelaySolution:
    nr = cfg.num_rs_antennas
    asm = assemble_relay(beamformers, ps_ratios, channels, cfg, robust)
    mode = "robust" if robust else "nominal"
    solution = solve_or_raise(asm.builder.build(), f"{mode} relay SDR", settings.solver_tol)

    lifted = hermitian_part(solution.value(asm.lifted[0]))
    vec, ratio = principal_component(lifted)
    rank_one = ratio <= RANK_ONE_RATIO
    ratios = np.asarray(ps_ratios, dtype=float)
    if rank_one:
        relay, recovered = vec.reshape(nr, nr, order="F"), False
    else:
        context = RecoveryContext(channels, cfg, robust, beamformers=beamformers, sdr_objective=solution.objective)
        design = randomized_recovery(lifted, RecoveryMode.RELAY, context, settings.randomizations, rng)
        relay, ratios, recovered = design.relay, design.ps_ratios, True

    tx = Transceiver(beamformers, FullMatrix(relay), ratios)
    result = RelaySolution(relay, ratios, lifted, solution.objective, total_power(tx, channels, cfg), rank_one, recovered)
    logging.debug(f"{mode} relay step: SDR {solution.objective:.5f} mW, design {result.power:.5f} mW, rank-one={rank_one}")
    return result


def solve_relay_nominal(beamformers, ps_ratios, channels, cfg, settings=AoSettings(), rng=None) -> RelaySolution:
    return solve_relay(beamformers, ps_ratios, channels, cfg, False, settings, rng)


def solve_relay_robust(beamformers, ps_ratios, channels, cfg, settings=AoSettings(), rng=None) -> RelaySolution:
    return solve_relay(beamformers, ps_ratios, channels, cfg, True, settings, rng)


def initial_relay(init: AoInit, channels: ChannelSet, cfg: SystemConfig, robust: bool, rng: np.random.Generator):
    nr = cfg.num_rs_antennas
    if init == AoInit.IDENTITY:
        return np.eye(nr, dtype=complex)
    if init == AoInit.GAUSSIAN:
        return complex_gaussian(rng, (nr, nr))

    # switched relaying imports this module
    from switched_relaying import ENUMERATION_CAP, CodebookMethod, CodebookSettings, SrSettings, build_codebook, design_sr

    size = min(CodebookSettings.size, math.factorial(nr))
    method = CodebookMethod.SUM_MAX if nr <= ENUMERATION_CAP else CodebookMethod.RANDOM
    codebook = build_codebook(channels.first_phase, channels.second_phase_estimated, size, method, rng)
    outcome = design_sr(channels, cfg, codebook, robust=robust, simplified=False, settings=SrSettings(), rng=rng)
    if not outcome.feasible:
        logging.warning("⚠️ Switched-relaying initialization is infeasible, starting from the identity")
        return np.eye(nr, dtype=complex)
    return outcome.transceiver.relay_matrix.astype(complex)


def design_ao(
    channels: ChannelSet,
    cfg: SystemConfig,
    robust: bool,
    settings: AoSettings = AoSettings(),
    rng: Optional[np.random.Generator] = None,
    initial: Optional[np.ndarray] = None,
) -> DesignOutcome:
    started_at = time.perf_counter()
    rng = rng if rng is not None else np.random.default_rng(0)
    if not check_feasibility_rank(channels):
        logging.warning("⚠️ Effective channel H G is rank deficient; SINR targets may be unreachable")
    relay = initial if initial is not None else initial_relay(settings.init, channels, cfg, robust, rng)

    current: Optional[Transceiver] = None
    trace: List[float] = []
    bounds: List[float] = []
    reason = TerminationReason.ITERATION_CAP
    iterations = 0
    for iteration in range(1, settings.max_iterations + 1):
        iterations = iteration
        try:
            bf = solve_bf_ps(relay, channels, cfg, robust, settings, rng)
        except ConicSolverError as e:
            logging.info(f"Beamformer step {iteration} failed: {e}")
            if current is None:
                return DesignOutcome.infeasible(started_at, iteration)
            reason = TerminationReason.INFEASIBLE_SUBPROBLEM
            break
        if settings.gain_search:
            bf, gain = search_relay_gain(relay, channels, cfg, robust, settings, rng, bf)
            relay = np.sqrt(gain) * relay
        step_bf = Transceiver(bf.beamformers, FullMatrix(relay), bf.ps_ratios)
        if trace and bf.power > trace[-1] * (1.0 + INCREASE_TOLERANCE):
            reason = TerminationReason.POWER_INCREASE
            break

        try:
            rs = solve_relay(bf.beamformers, bf.ps_ratios, channels, cfg, robust, settings, rng)
        except ConicSolverError as e:
            logging.info(f"Relay step {iteration} failed: {e}")
            current = step_bf
            trace.append(bf.power)
            bounds.append(bf.sdr_objective)
            reason = TerminationReason.INFEASIBLE_SUBPROBLEM
            break
        if rs.power > bf.power * (1.0 + INCREASE_TOLERANCE):
            current = step_bf
            trace.append(bf.power)
            bounds.append(bf.sdr_objective)
            reason = TerminationReason.POWER_INCREASE
            break

        relay = rs.relay
        current = Transceiver(bf.beamformers, FullMatrix(relay), rs.ps_ratios)
        trace.append(rs.power)
        bounds.extend([bf.sdr_objective, rs.sdr_objective])
        logging.info(f"AO iteration {iteration}: beamformer step {bf.power:.5f} mW, relay step {rs.power:.5f} mW")
        if len(trace) >= 2 and abs(trace[-2] - trace[-1]) < settings.tolerance:
            reason = TerminationReason.TOLERANCE
            break

    outcome = DesignOutcome(
        transceiver=current,
        total_power=trace[-1] if trace else total_power(current, channels, cfg),
        power_trace=trace if trace else [total_power(current, channels, cfg)],
        iterations=iterations,
        converged=reason == TerminationReason.TOLERANCE,
        termination_reason=reason,
        wall_time=time.perf_counter() - started_at,
        sdr_bounds=bounds,
    )
    logging.info(f"{'Robust' if robust else 'Nominal'} AO: {outcome}")
    return outcome


def design_ao_nominal(channels, cfg, settings: AoSettings = AoSettings(), rng=None, initial=None) -> DesignOutcome:
    return design_ao(channels, cfg, False, settings, rng, initial)


def design_ao_robust(channels, cfg, settings: AoSettings = AoSettings(), rng=None, initial=None) -> DesignOutcome:
    return design_ao(channels, cfg, True, settings, rng, initial)
