"""
Monte-Carlo experiment runner for the relay transceiver designs.

An experiment sweeps one parameter, draws one channel realization per trial
(shared by every algorithm of that trial so comparisons are paired), runs the
listed algorithms and aggregates the results into per-curve summaries.
"""

import hashlib
import json
import logging
import math
import sqlite3
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from ao_design import AoInit, AoSettings, DesignOutcome, design_ao
from conic import ConicSolverError
from logger import init_worker_logging
from swipt_model import (
    ChannelSet,
    ConfigurationError,
    RawConfig,
    ScaledPermutation,
    VerificationMode,
    mw_to_dbm,
    sample_channels,
    to_linear_config,
    verify_design,
)
from switched_relaying import CodebookMethod, CodebookSettings, SrSettings, design_sr

RECORD_COLUMNS = [
    "trial",
    "seed",
    "sweep",
    "algorithm",
    "power_mw",
    "power_dbm",
    "feasible",
    "iterations",
    "wall_ms",
    "l_opt",
    "beta",
]
SWEEP_VARIABLES = ("psi_dbm", "gamma_db", "eta", "codebook_size")
CONFIDENCE_Z = 1.959963984540054


@dataclass(frozen=True)
class AlgorithmKind:
    family: str
    robust: bool
    simplified: bool = False


ALGORITHMS: Dict[str, AlgorithmKind] = {
    "ao_nominal": AlgorithmKind("ao", robust=False),
    "ao_robust": AlgorithmKind("ao", robust=True),
    "sr_cccp": AlgorithmKind("sr", robust=False),
    "sr_subgradient": AlgorithmKind("sr", robust=True),
    "sr_simplified_nominal": AlgorithmKind("sr", robust=False, simplified=True),
    "sr_simplified_robust": AlgorithmKind("sr", robust=True, simplified=True),
}

# robust tag -> nominal tag run on the same channels
PAIRED_NOMINAL = {
    "ao_robust": "ao_nominal",
    "sr_subgradient": "sr_cccp",
    "sr_simplified_robust": "sr_simplified_nominal",
}


def _overlay(settings, options, tag):
    known = {f.name for f in fields(settings)}
    unknown = set(options) - known
    if unknown:
        raise ConfigurationError(f"Unknown options for {tag}: {sorted(unknown)}")
    return replace(settings, **options)


@dataclass(frozen=True)
class AlgorithmSpec:
    tag: str
    options: Dict = field(default_factory=dict)
    label: Optional[str] = None

    def __post_init__(self):
        if self.tag not in ALGORITHMS:
            raise ConfigurationError(f"Unknown algorithm tag '{self.tag}', expected one of {sorted(ALGORITHMS)}")
        # surface bad option keys before any trial runs
        if self.kind.family == "ao":
            self.ao_settings()
        else:
            self.sr_settings()

    @property
    def name(self) -> str:
        """Record and curve name; the label lets one tag run with several option sets."""
        return self.label or self.tag

    @property
    def kind(self) -> AlgorithmKind:
        return ALGORITHMS[self.tag]

    def ao_settings(self) -> AoSettings:
        options = dict(self.options)
        if "init" in options:
            try:
                options["init"] = AoInit(options["init"])
            except ValueError as e:
                raise ConfigurationError(f"Unknown AO init '{options['init']}'") from e
        return _overlay(AoSettings(), options, self.tag)

    def sr_settings(self) -> Tuple[SrSettings, CodebookSettings]:
        options = dict(self.options)
        codebook = CodebookSettings()
        if "codebook_size" in options:
            codebook = replace(codebook, size=int(options.pop("codebook_size")))
        if "codebook_method" in options:
            try:
                codebook = replace(codebook, method=CodebookMethod(options.pop("codebook_method")))
            except ValueError as e:
                raise ConfigurationError(f"Unknown codebook method in {self.tag}") from e
        if "fallback_betas" in options:
            options["fallback_betas"] = tuple(options["fallback_betas"])
        return _overlay(SrSettings(), options, self.tag), codebook


@dataclass(frozen=True)
class ExperimentSpec:
    base: RawConfig
    sweep_variable: str
    sweep_values: Tuple[float, ...]
    algorithms: Tuple[AlgorithmSpec, ...]
    num_trials: int = 1
    seed: int = 0
    output: Optional[str] = None
    verify_samples: int = 0
    name: str = "experiment"

    def __post_init__(self):
        if self.sweep_variable not in SWEEP_VARIABLES:
            raise ConfigurationError(f"Cannot sweep '{self.sweep_variable}', expected one of {SWEEP_VARIABLES}")
        if not self.sweep_values:
            raise ConfigurationError("Sweep value list is empty")
        if not self.algorithms:
            raise ConfigurationError("Algorithm list is empty")
        if self.num_trials < 1:
            raise ConfigurationError(f"num_trials must be >= 1, got {self.num_trials}")
        if self.verify_samples < 0:
            raise ConfigurationError("verify_samples must be >= 0")
        names = [a.name for a in self.algorithms]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"Duplicate algorithm names in {names}; give repeated tags a label")

    @classmethod
    def from_dict(cls, values):
        values = dict(values)
        allowed = {"name", "base", "sweep", "algorithms", "num_trials", "seed", "output", "verify_samples"}
        unknown = set(values) - allowed
        if unknown:
            raise ConfigurationError(f"Unknown experiment keys: {sorted(unknown)}")
        try:
            sweep = values["sweep"]
            algorithms = tuple(
                AlgorithmSpec(a) if isinstance(a, str) else AlgorithmSpec(a["tag"], dict(a.get("options", {})), a.get("label"))
                for a in values["algorithms"]
            )
            base = RawConfig.from_dict(values.get("base", {}))
            return cls(
                base=base,
                sweep_variable=sweep["variable"],
                sweep_values=tuple(float(v) for v in sweep["values"]),
                algorithms=algorithms,
                num_trials=int(values.get("num_trials", 1)),
                seed=int(values.get("seed", base.seed)),
                output=values.get("output"),
                verify_samples=int(values.get("verify_samples", 0)),
                name=values.get("name", "experiment"),
            )
        except (KeyError, TypeError) as e:
            raise ConfigurationError(f"Malformed experiment spec: {e!r}") from e

    @classmethod
    def from_json(cls, path):
        try:
            with open(path) as f:
                return cls.from_dict(json.load(f))
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path} is not valid JSON: {e}") from e

    def to_dict(self):
        return {
            "name": self.name,
            "base": self.base.to_dict(),
            "sweep": {"variable": self.sweep_variable, "values": list(self.sweep_values)},
            "algorithms": [{"tag": a.tag, "options": a.options, "label": a.label} for a in self.algorithms],
            "num_trials": self.num_trials,
            "seed": self.seed,
            "output": self.output,
            "verify_samples": self.verify_samples,
        }

    def key(self):
        """Stable tag for result tables; identical specs share it."""
        payload = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()[:12]

    def config_at(self, sweep_value) -> RawConfig:
        if self.sweep_variable == "codebook_size":
            return self.base
        return replace(self.base, **{self.sweep_variable: sweep_value})


@dataclass(frozen=True)
class TrialRecord:
    trial: int
    seed: int
    sweep: float
    algorithm: str
    power_mw: Optional[float]
    power_dbm: Optional[float]
    feasible: bool
    iterations: int
    wall_ms: float
    l_opt: Optional[int] = None
    beta: Optional[float] = None


@dataclass(frozen=True)
class CurveSummary:
    sweep: float
    algorithm: str
    num_trials: int
    num_feasible: int
    feasibility_rate: float
    mean_power_dbm: Optional[float]
    mean_power_mw: Optional[float]
    ci_half_width_db: Optional[float]


@dataclass
class TrialResult:
    records: List[TrialRecord]
    codebooks: List[Dict]
    channel_digest: str


def trial_seed(master_seed: int, trial: int) -> int:
    """63-bit seed mixed from (master, trial), independent of execution order."""
    state = np.random.SeedSequence([int(master_seed), int(trial)]).generate_state(1, np.uint64)[0]
    return int(state >> np.uint64(1))


def trial_channels(raw: RawConfig, trial_seed_value: int) -> ChannelSet:
    cfg = to_linear_config(raw)
    return sample_channels(cfg, raw.error_radii(), np.random.default_rng(trial_seed_value))


def _algorithm_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence([int(seed), 1 + index]))


def _run_algorithm(algorithm: AlgorithmSpec, channels, cfg, sweep_variable, sweep_value, rng):
    kind = algorithm.kind
    if kind.family == "ao":
        return design_ao(channels, cfg, kind.robust, algorithm.ao_settings(), rng), None
    settings, codebook_settings = algorithm.sr_settings()
    if sweep_variable == "codebook_size":
        codebook_settings = replace(codebook_settings, size=int(sweep_value))
    codebook = codebook_settings.build(channels, rng)
    return design_sr(channels, cfg, codebook, kind.robust, kind.simplified, settings, rng), codebook


def make_record(trial, seed, sweep_value, name, outcome: Optional[DesignOutcome], feasible, wall_ms) -> TrialRecord:
    """Power is kept whenever a design exists; feasible also reflects sampled verification."""
    if outcome is None or not outcome.feasible:
        return TrialRecord(trial, seed, float(sweep_value), name, None, None, False, outcome.iterations if outcome else 0, wall_ms)
    relay = outcome.transceiver.relay_weight
    beta = relay.power_scale if isinstance(relay, ScaledPermutation) else None
    return TrialRecord(
        trial=trial,
        seed=seed,
        sweep=float(sweep_value),
        algorithm=name,
        power_mw=float(outcome.total_power),
        power_dbm=float(mw_to_dbm(outcome.total_power)),
        feasible=feasible,
        iterations=outcome.iterations,
        wall_ms=wall_ms,
        l_opt=outcome.codebook_index,
        beta=beta,
    )


def check_paired_trial(records: List[TrialRecord], tags: Optional[Dict[str, str]] = None):
    """Flags robust designs cheaper than their nominal counterpart on the same channels; tags maps record names to tags."""
    tags = tags or {}
    by_tag: Dict[str, List[TrialRecord]] = {}
    for r in records:
        if r.feasible:
            by_tag.setdefault(tags.get(r.algorithm, r.algorithm), []).append(r)
    anomalies = []
    for robust_tag, nominal_tag in PAIRED_NOMINAL.items():
        for robust in by_tag.get(robust_tag, []):
            for nominal in by_tag.get(nominal_tag, []):
                if robust.power_mw < nominal.power_mw * (1.0 - 1e-6):
                    logging.warning(
                        f"⚠️ Trial {robust.trial} at sweep={robust.sweep:g}: {robust.algorithm} {robust.power_mw:.5f} mW "
                        f"is below {nominal.algorithm} {nominal.power_mw:.5f} mW"
                    )
                    anomalies.append((robust.algorithm, nominal.algorithm))
    return anomalies


def run_trial(spec: ExperimentSpec, sweep_value: float, trial: int) -> TrialResult:
    seed = trial_seed(spec.seed, trial)
    raw = spec.config_at(sweep_value)
    cfg = to_linear_config(raw)
    channels = trial_channels(raw, seed)
    digest = channels.digest()
    logging.debug(f"Trial {trial} at {spec.sweep_variable}={sweep_value:g}: seed={seed}, channels {digest}")

    records, codebooks = [], []
    for index, algorithm in enumerate(spec.algorithms):
        rng = _algorithm_rng(seed, index)
        started_at = time.perf_counter()
        outcome, codebook = None, None
        try:
            outcome, codebook = _run_algorithm(algorithm, channels, cfg, spec.sweep_variable, sweep_value, rng)
            feasible = outcome.feasible
        except ConicSolverError as e:
            logging.info(f"Trial {trial}, {algorithm.name}: solver failure {e}")
            feasible = False
        # nominal designs are not meant to hold over the error ball
        if feasible and algorithm.kind.robust and spec.verify_samples > 0:
            report = verify_design(
                outcome.transceiver, channels, cfg, VerificationMode.SAMPLED_WORST_CASE, spec.verify_samples, rng
            )
            feasible = report.all_constraints_met
            if not feasible:
                logging.warning(f"⚠️ Trial {trial}, {algorithm.name}: robust design fails sampled verification: {report}")
        wall_ms = (time.perf_counter() - started_at) * 1e3
        records.append(make_record(trial, seed, sweep_value, algorithm.name, outcome, feasible, wall_ms))
        if codebook is not None:
            codebooks.append(
                {
                    "trial": trial,
                    "sweep": float(sweep_value),
                    "algorithm": algorithm.name,
                    "method": codebook.method.value,
                    "permutations": codebook.to_notation(),
                }
            )

    check_paired_trial(records, {a.name: a.tag for a in spec.algorithms})
    return TrialResult(records, codebooks, digest)


def _run_trial_task(task):
    return run_trial(*task)


def run_experiment(spec: ExperimentSpec, workers: int = 1) -> Tuple[List[TrialRecord], List[Dict]]:
    """Runs every (sweep value, trial) pair; output order is (sweep index, trial, algorithm) regardless of workers."""
    tasks = [(spec, value, trial) for value in spec.sweep_values for trial in range(spec.num_trials)]
    logging.info(f"Running {len(tasks)} trial(s) of {[a.name for a in spec.algorithms]} over {spec.sweep_variable}")
    if workers > 1:
        level = logging.getLogger().getEffectiveLevel()
        with ProcessPoolExecutor(max_workers=workers, initializer=init_worker_logging, initargs=(level,)) as pool:
            results = list(pool.map(_run_trial_task, tasks))
    else:
        results = [_run_trial_task(task) for task in tasks]

    records = [record for result in results for record in result.records]
    codebooks = [entry for result in results for entry in result.codebooks]
    feasible = sum(r.feasible for r in records)
    logging.info(f"Finished {len(records)} run(s), {feasible} feasible")
    return records, codebooks


def records_frame(records: List[TrialRecord]) -> pd.DataFrame:
    df = pd.DataFrame([asdict(r) for r in records], columns=RECORD_COLUMNS)
    return df.astype({"l_opt": "Int64"})


def summarize(records: List[TrialRecord]) -> List[CurveSummary]:
    if not records:
        raise ValueError("Cannot summarize an empty record list")
    df = records_frame(records)
    summaries = []
    for (sweep, algorithm), group in df.groupby(["sweep", "algorithm"], sort=True):
        powers_dbm = group.loc[group["feasible"].astype(bool), "power_dbm"].astype(float)
        powers_mw = group.loc[group["feasible"].astype(bool), "power_mw"].astype(float)
        n = len(powers_dbm)
        half_width = None
        if n >= 2:
            half_width = float(CONFIDENCE_Z * powers_dbm.std(ddof=1) / math.sqrt(n))
        summaries.append(
            CurveSummary(
                sweep=float(sweep),
                algorithm=str(algorithm),
                num_trials=len(group),
                num_feasible=n,
                feasibility_rate=n / len(group),
                mean_power_dbm=float(powers_dbm.mean()) if n else None,
                mean_power_mw=float(powers_mw.mean()) if n else None,
                ci_half_width_db=half_width,
            )
        )
    return summaries


def summary_document(summaries: List[CurveSummary], tags: Optional[List[str]] = None) -> Dict[str, List[Dict]]:
    tags = tags if tags is not None else sorted({s.algorithm for s in summaries})
    document = {tag: [] for tag in tags}
    for summary in summaries:
        entry = asdict(summary)
        document.setdefault(entry.pop("algorithm"), []).append(entry)
    return document


def emit(records: List[TrialRecord], summaries: List[CurveSummary], path, codebooks=None, tags=None):
    out = Path(path)
    (out / "series").mkdir(parents=True, exist_ok=True)
    records_frame(records).to_csv(out / "records.csv", index=False)

    document = summary_document(summaries, tags)
    with open(out / "summary.json", "w") as f:
        json.dump(document, f, indent=2)

    for tag, rows in document.items():
        curve = pd.DataFrame(rows, columns=["sweep", "mean_power_dbm", "feasibility_rate"])
        curve[["sweep", "mean_power_dbm"]].to_csv(out / "series" / f"{tag}_power.csv", index=False)
        curve[["sweep", "feasibility_rate"]].to_csv(out / "series" / f"{tag}_feasibility.csv", index=False)

    if codebooks:
        with open(out / "codebooks.json", "w") as f:
            json.dump(codebooks, f, indent=2)
    logging.info(f"Wrote {len(records)} record(s) and {len(document)} curve(s) to {out}")


def _optional(value, cast):
    return None if pd.isna(value) else cast(value)


def read_records(path) -> List[TrialRecord]:
    path = Path(path)
    if path.is_dir():
        path = path / "records.csv"
    df = pd.read_csv(path, float_precision="round_trip", dtype={"algorithm": str})
    return [
        TrialRecord(
            trial=int(row["trial"]),
            seed=int(row["seed"]),
            sweep=float(row["sweep"]),
            algorithm=row["algorithm"],
            power_mw=_optional(row["power_mw"], float),
            power_dbm=_optional(row["power_dbm"], float),
            feasible=str(row["feasible"]).lower() == "true",
            iterations=int(row["iterations"]),
            wall_ms=float(row["wall_ms"]),
            l_opt=_optional(row["l_opt"], int),
            beta=_optional(row["beta"], float),
        )
        for _, row in df.iterrows()
    ]


class ResultsDatabase:
    def __init__(self, db_path, spec_name, table_name_key=None):
        self.db_path = db_path
        self.spec_name = spec_name
        self.conn = None
        self.cursor = None
        self.table_tag = table_name_key or datetime.now().strftime("%Y%m%d%H%M%S")
        self.records_table = f"trial_records_{self.table_tag}"

    def __enter__(self) -> "ResultsDatabase":
        self.connect()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.disconnect()

    def connect(self):
        logging.info(f"Connecting to database: {self.db_path}")
        self.conn = sqlite3.connect(self.db_path)
        self.cursor = self.conn.cursor()

    def disconnect(self):
        if self.conn:
            logging.info("Closing database connection")
            self.conn.close()
            self.conn = None

    def setup_tables(self):
        """Drop and recreate this run's records table; the run log is kept."""
        self.cursor.execute(f"DROP TABLE IF EXISTS {self.records_table}")
        self.cursor.execute(
            f"""
            CREATE TABLE {self.records_table} (
                RecordId INTEGER PRIMARY KEY,
                Trial INTEGER,
                Seed INTEGER,
                Sweep REAL,
                Algorithm TEXT,
                PowerMw REAL,
                PowerDbm REAL,
                Feasible INTEGER,
                Iterations INTEGER,
                WallMs REAL,
                LOpt INTEGER,
                Beta REAL
            )
            """
        )
        self.cursor.execute(
            """
            CREATE TABLE IF NOT EXISTS experiment_runs (
                RunId INTEGER PRIMARY KEY,
                DateTime TEXT NOT NULL,
                SpecName TEXT NOT NULL,
                RawParams TEXT,
                RecordsTable TEXT
            )
            """
        )
        self.conn.commit()

    def record_experiment_run(self, spec: ExperimentSpec):
        self.cursor.execute(
            "INSERT INTO experiment_runs (DateTime, SpecName, RawParams, RecordsTable) VALUES (?, ?, ?, ?)",
            (
                datetime.now().strftime("%Y-%m-%d %H:%M:%S"),
                self.spec_name,
                json.dumps(spec.to_dict(), sort_keys=True, default=str),
                self.records_table,
            ),
        )
        self.conn.commit()

    def insert_records(self, records: List[TrialRecord]):
        rows = [
            (r.trial, r.seed, r.sweep, r.algorithm, r.power_mw, r.power_dbm, int(r.feasible), r.iterations, r.wall_ms, r.l_opt, r.beta)
            for r in records
        ]
        self.cursor.executemany(
            f"""
            INSERT INTO {self.records_table} (
                Trial, Seed, Sweep, Algorithm, PowerMw, PowerDbm, Feasible, Iterations, WallMs, LOpt, Beta
            ) VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
            """,
            rows,
        )
        self.conn.commit()
        logging.info(f"Stored {len(rows)} record(s) in {self.records_table}")

    def load_records(self) -> List[TrialRecord]:
        self.cursor.execute(
            f"""
            SELECT Trial, Seed, Sweep, Algorithm, PowerMw, PowerDbm, Feasible, Iterations, WallMs, LOpt, Beta
            FROM {self.records_table} ORDER BY RecordId
            """
        )
        return [
            TrialRecord(trial, seed, sweep, algorithm, power_mw, power_dbm, bool(feasible), iterations, wall_ms, l_opt, beta)
            for trial, seed, sweep, algorithm, power_mw, power_dbm, feasible, iterations, wall_ms, l_opt, beta in self.cursor.fetchall()
        ]

    def run_count(self):
        self.cursor.execute("SELECT COUNT(*) FROM experiment_runs WHERE RecordsTable = ?", (self.records_table,))
        return self.cursor.fetchone()[0]
