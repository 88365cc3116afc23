"""
System model of the SWIPT multiuser MISO relay link.

A base station (BS) with Nt antennas serves K single-antenna users through an
amplify-and-forward relay station (RS) with Nr antennas. Every user splits its
received power: a fraction rho goes to information decoding, the rest to the
energy harvester. All powers are in milliwatts and all ratios are linear.
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, fields
from enum import Enum
from typing import List, Optional, Tuple, Union

import numpy as np

RANK_THRESHOLD = 1e-8
VERIFY_TOLERANCE = 1e-4


class ConfigurationError(ValueError):
    pass


class ChannelEstimate(Enum):
    TRUE = "True"
    ESTIMATED = "Estimated"


class VerificationMode(Enum):
    NOMINAL = "Nominal"
    SAMPLED_WORST_CASE = "SampledWorstCase"


def dbm_to_mw(dbm):
    return np.power(10.0, np.asarray(dbm, dtype=float) / 10.0)


def mw_to_dbm(mw):
    return 10.0 * np.log10(np.asarray(mw, dtype=float))


def db_to_linear(db):
    return np.power(10.0, np.asarray(db, dtype=float) / 10.0)


PerUser = Union[float, List[float]]


@dataclass(frozen=True)
class RawConfig:
    """System parameters as written in an experiment file (dBm / dB units)."""

    nt: int = 4
    nr: int = 4
    k: int = 3
    sigma_r_dbm: float = -30.0
    sigma_dbm: PerUser = -30.0
    omega_dbm: PerUser = -20.0
    xi: PerUser = 1.0
    gamma_db: PerUser = 10.0
    psi_dbm: PerUser = 0.0
    eta: PerUser = 0.1
    seed: int = 0

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigurationError(f"Unknown configuration keys: {sorted(unknown)}")
        try:
            return cls(**values)
        except TypeError as e:
            raise ConfigurationError(f"Malformed configuration: {e}") from e

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_dict(self):
        return asdict(self)

    def per_user(self, name):
        value = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
        if value.size == 1:
            return np.full(self.k, float(value[0]))
        if value.size != self.k:
            raise ConfigurationError(
                f"{name} has {value.size} entries but there are {self.k} users"
            )
        return value

    def error_radii(self):
        radii = self.per_user("eta")
        if np.any(radii < 0):
            raise ConfigurationError(f"Error radii must be nonnegative, got {radii}")
        return radii


@dataclass(frozen=True, eq=False)
class SystemConfig:
    num_bs_antennas: int
    num_rs_antennas: int
    num_users: int
    relay_noise: float
    antenna_noise: np.ndarray
    circuit_noise: np.ndarray
    eh_efficiency: np.ndarray
    sinr_target: np.ndarray
    eh_target: np.ndarray
    power_weight: float = 1.0

    def __post_init__(self):
        for name in ("num_bs_antennas", "num_rs_antennas", "num_users"):
            if int(getattr(self, name)) <= 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.num_users > min(self.num_bs_antennas, self.num_rs_antennas):
            raise ConfigurationError(
                f"K={self.num_users} users need K <= min(Nt, Nr) = "
                f"{min(self.num_bs_antennas, self.num_rs_antennas)}"
            )
        for name in ("antenna_noise", "circuit_noise", "eh_efficiency", "sinr_target", "eh_target"):
            value = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (self.num_users,)).copy()
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        if self.relay_noise < 0 or np.any(self.antenna_noise < 0) or np.any(self.circuit_noise < 0):
            raise ConfigurationError("Noise powers must be nonnegative")
        if np.any(self.eh_target < 0):
            raise ConfigurationError("EH targets must be nonnegative")
        if np.any(self.eh_efficiency <= 0) or np.any(self.eh_efficiency > 1):
            raise ConfigurationError(f"EH efficiency must lie in (0, 1], got {self.eh_efficiency}")
        if np.any(self.sinr_target <= 0):
            raise ConfigurationError(f"SINR targets must be positive, got {self.sinr_target}")
        if self.power_weight != 1.0:
            raise ConfigurationError("Only power_weight = 1 is supported")

    def __str__(self):
        return (
            f"SystemConfig(Nt={self.num_bs_antennas}, Nr={self.num_rs_antennas}, K={self.num_users}, "
            f"sigma_r^2={self.relay_noise:.3g} mW, gamma={np.round(self.sinr_target, 4)}, "
            f"psi={np.round(self.eh_target, 4)} mW)"
        )


def to_linear_config(raw: RawConfig) -> SystemConfig:
    if min(raw.nt, raw.nr, raw.k) <= 0:
        raise ConfigurationError(f"Antenna and user counts must be positive: {raw}")
    return SystemConfig(
        num_bs_antennas=int(raw.nt),
        num_rs_antennas=int(raw.nr),
        num_users=int(raw.k),
        relay_noise=float(dbm_to_mw(raw.sigma_r_dbm)),
        antenna_noise=dbm_to_mw(raw.per_user("sigma_dbm")),
        circuit_noise=dbm_to_mw(raw.per_user("omega_dbm")),
        eh_efficiency=raw.per_user("xi"),
        sinr_target=db_to_linear(raw.per_user("gamma_db")),
        eh_target=dbm_to_mw(raw.per_user("psi_dbm")),
    )


@dataclass(frozen=True, eq=False)
class ChannelSet:
    """First-phase channel G and per-user second-phase channels stored as rows."""

    first_phase: np.ndarray
    second_phase_true: np.ndarray
    second_phase_estimated: np.ndarray
    error_radius: np.ndarray

    def __post_init__(self):
        nr = self.first_phase.shape[0]
        if self.second_phase_true.shape != self.second_phase_estimated.shape:
            raise ConfigurationError("True and estimated channels differ in shape")
        if self.second_phase_true.shape[1] != nr:
            raise ConfigurationError(f"Second-phase channels must have {nr} entries")
        if self.error_radius.shape != (self.second_phase_true.shape[0],):
            raise ConfigurationError("One error radius per user is required")

    @property
    def num_users(self):
        return self.second_phase_true.shape[0]

    def second_phase(self, which_h: ChannelEstimate):
        if which_h == ChannelEstimate.TRUE:
            return self.second_phase_true
        return self.second_phase_estimated

    def with_radius(self, error_radius):
        return ChannelSet(
            self.first_phase,
            self.second_phase_true,
            self.second_phase_estimated,
            np.broadcast_to(np.asarray(error_radius, dtype=float), self.error_radius.shape).copy(),
        )

    def digest(self):
        sha = hashlib.sha256()
        for array in (self.first_phase, self.second_phase_true, self.second_phase_estimated):
            sha.update(np.ascontiguousarray(array).tobytes())
        return sha.hexdigest()[:16]


def permutation_matrix(permutation):
    n = len(permutation)
    matrix = np.zeros((n, n))
    matrix[np.arange(n), list(permutation)] = 1.0
    return matrix


@dataclass(frozen=True, eq=False)
class FullMatrix:
    matrix: np.ndarray

    def resolve(self):
        return self.matrix


@dataclass(frozen=True)
class ScaledPermutation:
    """Relay weight sqrt(beta) * T for the permutation T in one-line notation."""

    codebook_index: int
    permutation: Tuple[int, ...]
    power_scale: float

    def __post_init__(self):
        if sorted(self.permutation) != list(range(len(self.permutation))):
            raise ConfigurationError(f"Not a permutation: {self.permutation}")
        if self.power_scale < 0:
            raise ConfigurationError(f"Relay power scale must be >= 0, got {self.power_scale}")

    def resolve(self):
        return np.sqrt(self.power_scale) * permutation_matrix(self.permutation)


RelayWeight = Union[FullMatrix, ScaledPermutation]


@dataclass(frozen=True, eq=False)
class Transceiver:
    beamformers: np.ndarray  # row k holds f_k
    relay_weight: RelayWeight
    ps_ratios: np.ndarray

    @property
    def relay_matrix(self):
        return self.relay_weight.resolve()

    def __str__(self):
        relay = self.relay_weight
        if isinstance(relay, ScaledPermutation):
            relay_str = f"T_{relay.codebook_index}={list(relay.permutation)}, beta={relay.power_scale:.4g}"
        else:
            relay_str = f"||W||_F^2={np.linalg.norm(relay.matrix) ** 2:.4g}"
        return (
            f"Transceiver(||f||^2={np.round(np.sum(np.abs(self.beamformers) ** 2, axis=1), 4)}, "
            f"{relay_str}, rho={np.round(self.ps_ratios, 4)})"
        )


def bs_power(tx: Transceiver) -> float:
    return float(np.sum(np.abs(tx.beamformers) ** 2))


def rs_power(tx: Transceiver, channels: ChannelSet, cfg: SystemConfig) -> float:
    relay = tx.relay_matrix
    if relay.shape != (cfg.num_rs_antennas, cfg.num_rs_antennas):
        raise ConfigurationError(f"Relay matrix has shape {relay.shape}")
    forwarded = relay @ channels.first_phase @ tx.beamformers.T
    return float(np.sum(np.abs(forwarded) ** 2) + cfg.relay_noise * np.linalg.norm(relay) ** 2)


def total_power(tx: Transceiver, channels: ChannelSet, cfg: SystemConfig) -> float:
    return bs_power(tx) + rs_power(tx, channels, cfg)


def link_gains(h, relay, first_phase, beamformers):
    """|h^H W G f_j|^2 for every j and the relay-noise gain ||h^H W||^2."""
    row = h.conj() @ relay
    return np.abs(row @ first_phase @ beamformers.T) ** 2, float(np.linalg.norm(row) ** 2)


def _check_ratio(rho):
    if not 0.0 <= rho <= 1.0:
        raise ConfigurationError(f"Power-splitting ratio {rho} is outside [0, 1]")


def _sinr_at(k, h, tx, channels, cfg):
    rho = float(tx.ps_ratios[k])
    _check_ratio(rho)
    if rho == 0.0:
        return 0.0
    gains, noise_gain = link_gains(h, tx.relay_matrix, channels.first_phase, tx.beamformers)
    interference = np.sum(gains) - gains[k]
    denominator = rho * (interference + cfg.relay_noise * noise_gain + cfg.antenna_noise[k]) + cfg.circuit_noise[k]
    return float(rho * gains[k] / denominator)


def _harvested_at(k, h, tx, channels, cfg):
    rho = float(tx.ps_ratios[k])
    _check_ratio(rho)
    gains, noise_gain = link_gains(h, tx.relay_matrix, channels.first_phase, tx.beamformers)
    received = np.sum(gains) + cfg.relay_noise * noise_gain + cfg.antenna_noise[k]
    return float(cfg.eh_efficiency[k] * (1.0 - rho) * received)


def sinr(k, tx, channels, cfg, which_h=ChannelEstimate.ESTIMATED) -> float:
    return _sinr_at(k, channels.second_phase(which_h)[k], tx, channels, cfg)


def harvested_power(k, tx, channels, cfg, which_h=ChannelEstimate.ESTIMATED) -> float:
    return _harvested_at(k, channels.second_phase(which_h)[k], tx, channels, cfg)


def check_feasibility_rank(channels: ChannelSet, which_h=ChannelEstimate.ESTIMATED) -> bool:
    effective = channels.second_phase(which_h).conj() @ channels.first_phase
    singular_values = np.linalg.svd(effective, compute_uv=False)
    k = channels.num_users
    if len(singular_values) < k or singular_values[0] == 0:
        return False
    return bool(singular_values[k - 1] / singular_values[0] > RANK_THRESHOLD)


def complex_gaussian(rng, shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def sample_ball(radius, dim, num_samples, rng, on_surface=False):
    """Points uniform inside (or on the surface of) a complex ball of the given radius."""
    directions = complex_gaussian(rng, (num_samples, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    if on_surface:
        return radius * directions
    # the ball has 2*dim real dimensions
    scale = radius * (1.0 - rng.random(num_samples)) ** (1.0 / (2 * dim))
    return scale[:, None] * directions


def sample_channels(cfg: SystemConfig, eta, rng: np.random.Generator) -> ChannelSet:
    radii = np.broadcast_to(np.asarray(eta, dtype=float), (cfg.num_users,)).copy()
    first_phase = complex_gaussian(rng, (cfg.num_rs_antennas, cfg.num_bs_antennas))
    second_phase = complex_gaussian(rng, (cfg.num_users, cfg.num_rs_antennas))
    errors = np.vstack(
        [sample_ball(radii[k], cfg.num_rs_antennas, 1, rng) for k in range(cfg.num_users)]
    )
    return ChannelSet(first_phase, second_phase, second_phase - errors, radii)


@dataclass(eq=False)
class VerificationReport:
    sinr: np.ndarray
    harvested_power: np.ndarray
    bs_power: float
    rs_power: float
    total_power: float
    all_constraints_met: bool
    worst_violation: float
    mode: VerificationMode = VerificationMode.NOMINAL
    num_points: int = 1

    def __str__(self):
        status = "✅ met" if self.all_constraints_met else "❌ violated"
        return (
            f"{self.mode.value} verification over {self.num_points} point(s): constraints {status}, "
            f"worst violation {self.worst_violation:+.3e}, P_B={self.bs_power:.4f} mW, "
            f"P_R={self.rs_power:.4f} mW, total={self.total_power:.4f} mW"
        )


def constraint_violation(sinr_values, harvested, cfg):
    """Largest relative shortfall over all users; negative when every constraint has slack."""
    shortfalls = 1.0 - sinr_values / cfg.sinr_target
    eh_shortfalls = np.full(cfg.num_users, -np.inf)
    active = cfg.eh_target > 0
    eh_shortfalls[active] = 1.0 - harvested[active] / cfg.eh_target[active]
    return float(max(np.max(shortfalls), np.max(eh_shortfalls)))


def verify_design(
    tx: Transceiver,
    channels: ChannelSet,
    cfg: SystemConfig,
    mode: VerificationMode = VerificationMode.NOMINAL,
    n_samples: int = 1000,
    rng: Optional[np.random.Generator] = None,
    tol: float = VERIFY_TOLERANCE,
) -> VerificationReport:
    sinr_values = np.empty(cfg.num_users)
    harvested = np.empty(cfg.num_users)
    num_points = 1
    for k in range(cfg.num_users):
        h_hat = channels.second_phase_estimated[k]
        points = [h_hat]
        if mode == VerificationMode.SAMPLED_WORST_CASE:
            rng = rng if rng is not None else np.random.default_rng(0)
            n_surface = n_samples // 2
            radius = channels.error_radius[k]
            nr = h_hat.shape[0]
            errors = np.vstack(
                [
                    sample_ball(radius, nr, n_surface, rng, on_surface=True),
                    sample_ball(radius, nr, n_samples - n_surface, rng),
                ]
            )
            points = np.vstack([h_hat[None, :], h_hat[None, :] + errors])
            num_points = len(points)
        sinr_values[k] = min(_sinr_at(k, h, tx, channels, cfg) for h in points)
        harvested[k] = min(_harvested_at(k, h, tx, channels, cfg) for h in points)

    worst = constraint_violation(sinr_values, harvested, cfg)
    p_b = bs_power(tx)
    p_r = rs_power(tx, channels, cfg)
    report = VerificationReport(
        sinr=sinr_values,
        harvested_power=harvested,
        bs_power=p_b,
        rs_power=p_r,
        total_power=p_b + p_r,
        all_constraints_met=worst <= tol,
        worst_violation=worst,
        mode=mode,
        num_points=num_points,
    )
    logging.debug(str(report))
    return report
