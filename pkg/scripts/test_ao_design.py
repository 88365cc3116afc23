import math
import unittest

import numpy as np

from ao_design import (
    AoInit,
    AoSettings,
    DesignOutcome,
    TerminationReason,
    assemble_relay,
    block_diagonal_sum,
    design_ao_nominal,
    design_ao_robust,
    initial_relay,
    relaxed_power,
    relay_selectors,
    search_relay_gain,
    solve_bf_ps_nominal,
    solve_bf_ps_robust,
    solve_relay_nominal,
    solve_relay_robust,
)
from conic import AffineExpr, InfeasibleProgram
from swipt_model import (
    ChannelSet,
    FullMatrix,
    RawConfig,
    Transceiver,
    VerificationMode,
    complex_gaussian,
    sample_channels,
    to_linear_config,
    total_power,
    verify_design,
)

FAST = AoSettings(randomizations=10)


def small_instance(seed, eta=0.02, **overrides):
    values = dict(nt=2, nr=2, k=2, psi_dbm=-10.0, gamma_db=3.0, eta=eta)
    values.update(overrides)
    raw = RawConfig(**values)
    cfg = to_linear_config(raw)
    return cfg, sample_channels(cfg, raw.error_radii(), np.random.default_rng(seed))


class TestRelayLifting(unittest.TestCase):
    def test_selectors_apply_the_relay_to_each_stream(self):
        rng = np.random.default_rng(0)
        cfg, channels = small_instance(1)
        beamformers = complex_gaussian(rng, (2, 2))
        W = complex_gaussian(rng, (2, 2))
        for C, f in zip(relay_selectors(beamformers, channels), beamformers):
            np.testing.assert_allclose(C @ W.reshape(-1, order="F"), W @ channels.first_phase @ f)

    def test_block_diagonal_sum_recovers_relay_gram(self):
        W = complex_gaussian(np.random.default_rng(2), (3, 3))
        vec = W.reshape(-1, order="F")
        lifted = AffineExpr.constant(np.outer(vec, vec.conj()))
        np.testing.assert_allclose(block_diagonal_sum(lifted, 3).value(np.zeros(0)), W @ W.conj().T)

    def test_relay_step_rejects_ratio_without_harvesting_share(self):
        cfg, channels = small_instance(1)
        beamformers = complex_gaussian(np.random.default_rng(0), (2, 2))
        with self.assertRaises(InfeasibleProgram):
            assemble_relay(beamformers, np.array([1.0, 0.5]), channels, cfg, robust=False)


class TestSubproblems(unittest.TestCase):
    def setUp(self):
        self.cfg, self.channels = small_instance(3)
        self.relay = np.eye(2, dtype=complex)

    def test_nominal_beamformer_step_is_tight(self):
        bf = solve_bf_ps_nominal(self.relay, self.channels, self.cfg, FAST, np.random.default_rng(0))
        self.assertGreaterEqual(bf.power, bf.sdr_objective * (1 - 1e-5))
        if bf.rank_one:
            self.assertAlmostEqual(bf.power, bf.sdr_objective, delta=1e-4 * bf.sdr_objective)
        self.assertEqual(bf.sinr_duals.shape, (2,))
        self.assertTrue(np.all(bf.sinr_duals >= -1e-9))

    def test_robust_step_costs_more_than_nominal_and_converges_to_it(self):
        nominal = solve_bf_ps_nominal(self.relay, self.channels, self.cfg, FAST)
        robust = solve_bf_ps_robust(self.relay, self.channels, self.cfg, FAST, np.random.default_rng(0))
        self.assertGreaterEqual(robust.sdr_objective, nominal.sdr_objective * (1 - 1e-5))

        tiny = self.channels.with_radius(1e-3)
        close = solve_bf_ps_robust(self.relay, tiny, self.cfg, FAST, np.random.default_rng(0))
        self.assertGreaterEqual(close.sdr_objective, nominal.sdr_objective * (1 - 1e-5))
        self.assertLessEqual(close.sdr_objective, robust.sdr_objective * (1 + 1e-5))

    def test_relay_step_is_feasible_and_above_its_relaxation(self):
        bf = solve_bf_ps_nominal(self.relay, self.channels, self.cfg, FAST)
        rs = solve_relay_nominal(bf.beamformers, bf.ps_ratios, self.channels, self.cfg, FAST, np.random.default_rng(0))
        self.assertEqual(rs.relay.shape, (2, 2))
        self.assertGreaterEqual(rs.power, rs.sdr_objective * (1 - 1e-5))
        tx = Transceiver(bf.beamformers, FullMatrix(rs.relay), rs.ps_ratios)
        report = verify_design(tx, self.channels, self.cfg)
        self.assertLessEqual(report.worst_violation, 1e-4, str(report))

    def test_robust_relay_step_at_zero_radius_matches_nominal(self):
        channels = self.channels.with_radius(0.0)
        bf = solve_bf_ps_nominal(self.relay, channels, self.cfg, FAST)
        nominal = solve_relay_nominal(bf.beamformers, bf.ps_ratios, channels, self.cfg, FAST, np.random.default_rng(0))
        robust = solve_relay_robust(bf.beamformers, bf.ps_ratios, channels, self.cfg, FAST, np.random.default_rng(0))
        self.assertAlmostEqual(robust.sdr_objective, nominal.sdr_objective, delta=1e-4 * nominal.sdr_objective)


class TestRelayGainSearch(unittest.TestCase):
    def test_search_never_raises_power(self):
        for seed in range(3):
            cfg, channels = small_instance(seed)
            relay = np.eye(2, dtype=complex)
            reference = solve_bf_ps_nominal(relay, channels, cfg, FAST, np.random.default_rng(0))
            bf, gain = search_relay_gain(relay, channels, cfg, False, FAST, np.random.default_rng(0), reference)
            with self.subTest(seed=seed):
                self.assertGreater(gain, 0.0)
                self.assertLessEqual(bf.power, reference.power)
                tx = Transceiver(bf.beamformers, FullMatrix(np.sqrt(gain) * relay), bf.ps_ratios)
                self.assertAlmostEqual(total_power(tx, channels, cfg), bf.power, delta=1e-6 * bf.power)
                report = verify_design(tx, channels, cfg)
                self.assertLessEqual(report.worst_violation, 1e-4, str(report))

    def test_relaxed_power_of_a_blocked_relay_is_infinite(self):
        cfg, channels = small_instance(5)
        self.assertEqual(relaxed_power(np.zeros((2, 2), dtype=complex), channels, cfg, robust=False), math.inf)

    def test_scalar_alternation_moves_off_the_identity(self):
        # with one antenna everywhere neither block alone can rescale the relay
        for seed in range(3):
            cfg, channels = small_instance(seed, eta=0.0, nt=1, nr=1, k=1)
            locked = design_ao_nominal(channels, cfg, AoSettings(gain_search=False), np.random.default_rng(seed))
            searched = design_ao_nominal(channels, cfg, AoSettings(), np.random.default_rng(seed))
            with self.subTest(seed=seed):
                self.assertTrue(searched.feasible)
                self.assertLessEqual(searched.total_power, locked.total_power * (1 + 1e-6))


class TestAlternatingOptimization(unittest.TestCase):
    def test_nominal_design_is_feasible_and_monotone(self):
        for seed in range(3):
            cfg, channels = small_instance(seed)
            outcome = design_ao_nominal(channels, cfg, FAST, np.random.default_rng(seed))
            self.assertTrue(outcome.feasible)
            self.assertLessEqual(outcome.iterations, FAST.max_iterations)
            trace = np.array(outcome.power_trace)
            self.assertTrue(np.all(np.diff(trace) <= 1e-6 * trace[:-1]), f"trace {trace} increases")
            self.assertAlmostEqual(outcome.total_power, total_power(outcome.transceiver, channels, cfg), delta=1e-9)
            report = verify_design(outcome.transceiver, channels, cfg)
            self.assertLessEqual(report.worst_violation, 1e-4, str(report))

    def test_robust_design_survives_sampled_errors(self):
        cfg, channels = small_instance(4, eta=0.05)
        outcome = design_ao_robust(channels, cfg, FAST, np.random.default_rng(0))
        self.assertTrue(outcome.feasible)
        report = verify_design(
            outcome.transceiver, channels, cfg, VerificationMode.SAMPLED_WORST_CASE, 1000, np.random.default_rng(1)
        )
        self.assertLessEqual(report.worst_violation, 1e-3, str(report))

    def test_unreachable_users_give_an_infeasible_outcome(self):
        cfg, channels = small_instance(5)
        blocked = ChannelSet(
            np.zeros((2, 2), dtype=complex),
            channels.second_phase_true,
            channels.second_phase_estimated,
            channels.error_radius,
        )
        outcome = design_ao_nominal(blocked, cfg, FAST)
        self.assertFalse(outcome.feasible)
        self.assertIsNone(outcome.transceiver)
        self.assertEqual(outcome.termination_reason, TerminationReason.INFEASIBLE_SUBPROBLEM)

    def test_initial_relays(self):
        cfg, channels = small_instance(6)
        rng = np.random.default_rng(0)
        np.testing.assert_array_equal(initial_relay(AoInit.IDENTITY, channels, cfg, False, rng), np.eye(2))
        self.assertEqual(initial_relay(AoInit.GAUSSIAN, channels, cfg, False, rng).shape, (2, 2))

    def test_switched_initial_relay_is_a_scaled_permutation(self):
        cfg, channels = small_instance(6)
        relay = initial_relay(AoInit.SWITCHED, channels, cfg, False, np.random.default_rng(0))
        self.assertEqual(relay.shape, (2, 2))
        # one nonzero entry per row
        self.assertTrue(np.all(np.count_nonzero(np.abs(relay) > 1e-12, axis=1) == 1))

    def test_infeasible_outcome_string(self):
        outcome = DesignOutcome.infeasible(0.0, iterations=2)
        self.assertIn("infeasible after 2", str(outcome))


if __name__ == "__main__":
    unittest.main()
