import importlib.util
import io
import json
import math
import os
import tempfile
import unittest
from contextlib import redirect_stdout
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from ao_design import DesignOutcome, TerminationReason
from relay_experiments import (
    RECORD_COLUMNS,
    AlgorithmSpec,
    ExperimentSpec,
    ResultsDatabase,
    TrialRecord,
    make_record,
    check_paired_trial,
    emit,
    read_records,
    run_experiment,
    summarize,
    trial_seed,
)
from swipt_model import ConfigurationError, FullMatrix, Transceiver
from switched_relaying import CodebookMethod


def load_cli():
    path = Path(__file__).with_name("swipt-relay-sim.py")
    spec = importlib.util.spec_from_file_location("swipt_relay_sim", path)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def record(trial, power_mw, algorithm="ao_nominal", sweep=0.0, feasible=True, **extra):
    power_dbm = None
    if feasible:
        power_dbm = 10.0 * math.log10(power_mw)
    return TrialRecord(
        trial=trial,
        seed=trial_seed(0, trial),
        sweep=sweep,
        algorithm=algorithm,
        power_mw=power_mw if feasible else None,
        power_dbm=power_dbm,
        feasible=feasible,
        iterations=3,
        wall_ms=12.5,
        **extra,
    )


SMALL_SPEC = {
    "name": "small",
    "base": {"nt": 2, "nr": 2, "k": 2, "psi_dbm": -10.0, "gamma_db": 3.0, "eta": 0.02},
    "sweep": {"variable": "psi_dbm", "values": [-10.0]},
    "algorithms": [
        {"tag": "ao_nominal", "options": {"randomizations": 10, "max_iterations": 5}},
        {"tag": "sr_cccp", "options": {"randomizations": 10, "codebook_size": 2}},
    ],
    "num_trials": 2,
    "seed": 7,
}


class TestSeeds(unittest.TestCase):
    def test_trial_seeds_are_deterministic_and_distinct(self):
        self.assertEqual(trial_seed(7, 3), trial_seed(7, 3))
        self.assertNotEqual(trial_seed(7, 3), trial_seed(7, 4))
        self.assertNotEqual(trial_seed(7, 3), trial_seed(8, 3))
        self.assertLess(trial_seed(123, 0), 2**63)


class TestExperimentSpec(unittest.TestCase):
    def test_parses_tags_and_option_overlays(self):
        spec = ExperimentSpec.from_dict(SMALL_SPEC)
        self.assertEqual([a.tag for a in spec.algorithms], ["ao_nominal", "sr_cccp"])
        self.assertEqual(spec.algorithms[0].ao_settings().max_iterations, 5)
        settings, codebook = spec.algorithms[1].sr_settings()
        self.assertEqual(settings.randomizations, 10)
        self.assertEqual(codebook.size, 2)
        self.assertEqual(codebook.method, CodebookMethod.SUM_MAX)

    def test_plain_tag_strings(self):
        spec = ExperimentSpec.from_dict({**SMALL_SPEC, "algorithms": ["ao_robust", "sr_simplified_nominal"]})
        self.assertTrue(spec.algorithms[0].kind.robust)
        self.assertTrue(spec.algorithms[1].kind.simplified)

    def test_invalid_specs(self):
        cases = [
            {**SMALL_SPEC, "algorithms": ["ao_fancy"]},
            {**SMALL_SPEC, "algorithms": [{"tag": "ao_nominal", "options": {"step": 1}}]},
            {**SMALL_SPEC, "sweep": {"variable": "nt", "values": [2]}},
            {**SMALL_SPEC, "sweep": {"variable": "eta", "values": []}},
            {**SMALL_SPEC, "num_trials": 0},
            {**SMALL_SPEC, "algorithms": ["ao_nominal", "ao_nominal"]},
            {**SMALL_SPEC, "trials": 3},
            {key: value for key, value in SMALL_SPEC.items() if key != "sweep"},
        ]
        for values in cases:
            with self.subTest(values=values):
                with self.assertRaises(ConfigurationError):
                    ExperimentSpec.from_dict(values)

    def test_key_is_stable(self):
        a = ExperimentSpec.from_dict(SMALL_SPEC)
        b = ExperimentSpec.from_dict(json.loads(json.dumps(SMALL_SPEC)))
        self.assertEqual(a.key(), b.key())
        self.assertNotEqual(a.key(), replace(a, seed=8).key())

    def test_sweep_overrides_the_base_config(self):
        spec = ExperimentSpec.from_dict({**SMALL_SPEC, "sweep": {"variable": "eta", "values": [0.01, 0.05]}})
        self.assertEqual(spec.config_at(0.05).eta, 0.05)
        self.assertEqual(spec.config_at(0.05).nt, 2)
        codebook_sweep = ExperimentSpec.from_dict({**SMALL_SPEC, "sweep": {"variable": "codebook_size", "values": [1, 2]}})
        self.assertEqual(codebook_sweep.config_at(2), codebook_sweep.base)

    def test_algorithm_spec_rejects_bad_codebook_method(self):
        with self.assertRaises(ConfigurationError):
            AlgorithmSpec("sr_cccp", {"codebook_method": "greedy"})

    def test_labels_let_one_tag_run_with_two_option_sets(self):
        algorithms = [
            {"tag": "sr_cccp", "options": {"codebook_size": 1}, "label": "sr_cccp_b1"},
            {"tag": "sr_cccp", "options": {"codebook_size": 2}, "label": "sr_cccp_b2"},
        ]
        spec = ExperimentSpec.from_dict({**SMALL_SPEC, "algorithms": algorithms})
        self.assertEqual([a.name for a in spec.algorithms], ["sr_cccp_b1", "sr_cccp_b2"])
        self.assertEqual(ExperimentSpec.from_dict(spec.to_dict()), spec)
        self.assertEqual(AlgorithmSpec("ao_nominal").name, "ao_nominal")
        with self.assertRaises(ConfigurationError):
            ExperimentSpec.from_dict({**SMALL_SPEC, "algorithms": [algorithms[0], {**algorithms[1], "label": "sr_cccp_b1"}]})

    def test_base_config_seed_is_the_default_master_seed(self):
        values = {key: value for key, value in SMALL_SPEC.items() if key != "seed"}
        values["base"] = {**SMALL_SPEC["base"], "seed": 42}
        self.assertEqual(ExperimentSpec.from_dict(values).seed, 42)
        self.assertEqual(ExperimentSpec.from_dict({**values, "seed": 3}).seed, 3)
        self.assertEqual(ExperimentSpec.from_dict({key: value for key, value in SMALL_SPEC.items() if key != "seed"}).seed, 0)


class TestSummaries(unittest.TestCase):
    def test_all_at_one_milliwatt(self):
        (summary,) = summarize([record(t, 1.0) for t in range(10)])
        self.assertEqual(summary.num_trials, 10)
        self.assertEqual(summary.feasibility_rate, 1.0)
        self.assertAlmostEqual(summary.mean_power_dbm, 0.0)
        self.assertAlmostEqual(summary.mean_power_mw, 1.0)
        self.assertAlmostEqual(summary.ci_half_width_db, 0.0)

    def test_infeasible_trials_only_lower_the_rate(self):
        records = [record(t, 10.0) for t in range(9)] + [record(9, 0.0, feasible=False)]
        (summary,) = summarize(records)
        self.assertAlmostEqual(summary.feasibility_rate, 0.9)
        self.assertEqual(summary.num_feasible, 9)
        self.assertAlmostEqual(summary.mean_power_dbm, 10.0)

    def test_no_feasible_trial(self):
        (summary,) = summarize([record(t, 0.0, feasible=False) for t in range(3)])
        self.assertIsNone(summary.mean_power_dbm)
        self.assertIsNone(summary.ci_half_width_db)
        self.assertEqual(summary.feasibility_rate, 0.0)

    def test_single_feasible_trial_has_no_interval(self):
        (summary,) = summarize([record(0, 2.0)])
        self.assertIsNone(summary.ci_half_width_db)

    def test_curves_are_split_by_sweep_and_algorithm(self):
        records = [record(0, 1.0, sweep=-10.0), record(0, 2.0, sweep=0.0), record(0, 3.0, algorithm="sr_cccp", sweep=0.0)]
        summaries = summarize(records)
        self.assertEqual([(s.sweep, s.algorithm) for s in summaries], [(-10.0, "ao_nominal"), (0.0, "ao_nominal"), (0.0, "sr_cccp")])

    def test_empty_record_list(self):
        with self.assertRaises(ValueError):
            summarize([])

    def test_robust_below_nominal_is_flagged(self):
        records = [record(0, 2.0), record(0, 1.0, algorithm="ao_robust")]
        with self.assertLogs(level="WARNING"):
            self.assertEqual(check_paired_trial(records), [("ao_robust", "ao_nominal")])
        self.assertEqual(check_paired_trial([record(0, 1.0), record(0, 2.0, algorithm="ao_robust")]), [])

    def test_labelled_pairs_are_matched_by_tag(self):
        records = [record(0, 2.0, algorithm="nominal_a"), record(0, 1.0, algorithm="robust_a")]
        tags = {"nominal_a": "ao_nominal", "robust_a": "ao_robust"}
        with self.assertLogs(level="WARNING"):
            self.assertEqual(check_paired_trial(records, tags), [("robust_a", "nominal_a")])
        self.assertEqual(check_paired_trial(records), [])


class TestOutputFiles(unittest.TestCase):
    def test_empty_run_writes_a_header_only_csv(self):
        with tempfile.TemporaryDirectory() as tmp:
            emit([], [], tmp, tags=["ao_nominal"])
            self.assertEqual(Path(tmp, "records.csv").read_text().strip(), ",".join(RECORD_COLUMNS))
            self.assertEqual(json.loads(Path(tmp, "summary.json").read_text()), {"ao_nominal": []})
            self.assertEqual(read_records(tmp), [])

    def test_records_survive_a_csv_round_trip(self):
        records = [
            record(0, 1.2345678901234567, l_opt=1, beta=0.731),
            record(1, 0.0, feasible=False),
            record(0, 3.3, algorithm="sr_cccp", l_opt=0, beta=2.5),
        ]
        with tempfile.TemporaryDirectory() as tmp:
            emit(records, summarize(records), tmp, codebooks=[{"trial": 0, "permutations": [[0, 1]]}])
            self.assertEqual(read_records(tmp), records)
            summary = json.loads(Path(tmp, "summary.json").read_text())
            self.assertEqual(set(summary), {"ao_nominal", "sr_cccp"})
            power = pd.read_csv(Path(tmp, "series", "ao_nominal_power.csv"))
            self.assertEqual(list(power.columns), ["sweep", "mean_power_dbm"])
            self.assertTrue(Path(tmp, "codebooks.json").exists())


class TestResultsDatabase(unittest.TestCase):
    def test_store_and_reload(self):
        spec = ExperimentSpec.from_dict(SMALL_SPEC)
        records = [record(0, 1.5, l_opt=1, beta=0.5), record(1, 0.0, feasible=False)]
        with tempfile.TemporaryDirectory() as tmp:
            db_path = os.path.join(tmp, "results.db")
            with ResultsDatabase(db_path, spec.name, spec.key()) as db:
                db.setup_tables()
                db.record_experiment_run(spec)
                db.insert_records(records)
                self.assertEqual(db.load_records(), records)
                self.assertEqual(db.run_count(), 1)
                # a rerun of the same spec replaces its records
                db.setup_tables()
                self.assertEqual(db.load_records(), [])


class TestRunExperiment(unittest.TestCase):
    def test_runs_are_reproducible_and_paired(self):
        spec = ExperimentSpec.from_dict(SMALL_SPEC)
        first, codebooks = run_experiment(spec)
        second, _ = run_experiment(spec)
        self.assertEqual(len(first), 4)
        self.assertEqual([replace(r, wall_ms=0.0) for r in first], [replace(r, wall_ms=0.0) for r in second])
        # both algorithms of a trial see the same channel draw
        self.assertEqual(first[0].seed, first[1].seed)
        self.assertEqual(first[0].seed, trial_seed(7, 0))
        self.assertEqual([r.algorithm for r in first], ["ao_nominal", "sr_cccp", "ao_nominal", "sr_cccp"])
        self.assertEqual(len(codebooks), 2)
        for r in first:
            if r.feasible and r.algorithm == "sr_cccp":
                self.assertIn(r.l_opt, (0, 1))
                self.assertGreater(r.beta, 0.0)

    def test_sampled_verification_only_judges_robust_designs(self):
        spec = ExperimentSpec.from_dict(
            {
                **SMALL_SPEC,
                "base": {**SMALL_SPEC["base"], "eta": 0.3},
                "algorithms": [
                    {"tag": "ao_nominal", "options": {"randomizations": 10, "max_iterations": 5}},
                    {"tag": "ao_robust", "options": {"randomizations": 10, "max_iterations": 5}, "label": "robust"},
                ],
                "num_trials": 1,
                "verify_samples": 200,
            }
        )
        records, _ = run_experiment(spec)
        by_name = {r.algorithm: r for r in records}
        self.assertEqual(set(by_name), {"ao_nominal", "robust"})
        nominal = by_name["ao_nominal"]
        # a nominal design at this radius breaks under errors but keeps its power
        self.assertTrue(nominal.feasible)
        self.assertIsNotNone(nominal.power_mw)
        self.assertIsNotNone(nominal.power_dbm)

    def test_rejected_design_keeps_its_power(self):
        tx = Transceiver(np.ones((2, 2), dtype=complex), FullMatrix(np.eye(2, dtype=complex)), np.full(2, 0.5))
        outcome = DesignOutcome(tx, 2.0, [2.0], 3, True, TerminationReason.TOLERANCE, 0.1)
        rejected = make_record(0, 11, -10.0, "ao_robust", outcome, False, 5.0)
        self.assertFalse(rejected.feasible)
        self.assertEqual(rejected.power_mw, 2.0)
        self.assertAlmostEqual(rejected.power_dbm, 10.0 * math.log10(2.0))
        self.assertEqual(rejected.iterations, 3)
        missing = make_record(0, 11, -10.0, "ao_robust", DesignOutcome.infeasible(0.0, 2), False, 5.0)
        self.assertIsNone(missing.power_mw)
        self.assertEqual(missing.iterations, 2)


class TestCommandLine(unittest.TestCase):
    def setUp(self):
        self.cli = load_cli()

    def test_bad_experiment_file_exits_with_configuration_code(self):
        with tempfile.TemporaryDirectory() as tmp:
            spec_path = Path(tmp, "bad.json")
            spec_path.write_text(json.dumps({**SMALL_SPEC, "algorithms": ["ao_fancy"]}))
            args = self.cli.parse_args(["run", "--spec", str(spec_path), "--out", tmp])
            with redirect_stdout(io.StringIO()):
                self.assertEqual(self.cli.main(args), self.cli.EXIT_CONFIGURATION)

    def test_codebook_command(self):
        args = self.cli.parse_args(["codebook", "--nt", "3", "--nr", "3", "--k", "2", "--b", "2"])
        out = io.StringIO()
        with redirect_stdout(out):
            self.assertEqual(self.cli.main(args), self.cli.EXIT_OK)
        self.assertIn("T_0", out.getvalue())
        self.assertIn("T_1", out.getvalue())

    def test_codebook_too_large_to_enumerate(self):
        args = self.cli.parse_args(["codebook", "--nt", "9", "--nr", "9", "--k", "2"])
        self.assertEqual(self.cli.main(args), self.cli.EXIT_CONFIGURATION)


if __name__ == "__main__":
    unittest.main()
