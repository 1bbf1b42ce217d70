"""Round, scenario and grid execution.

Each period runs: (re)formation if due, the team decision, recording, and
individual learning at the end of the period. A random initial solution
serves as the residual context of the first period; coordinated teams adopt
their first candidate in that period since no utility has been achieved yet.
The period loop is compiled; set-up of a round (matrix, landscape,
population, initial solution) happens in Python on the same random
generator, so a round is fully determined by ``(config, round_index)``.
"""
from __future__ import annotations

import concurrent.futures as cf
import dataclasses
import enum
import hashlib
import itertools
import json
import logging
import multiprocessing
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, Optional, Sequence

import numba
import numpy as np

from .exceptions import ContractError, ManifestMismatchError, ParameterError, RoundFailures
from .landscape import Landscape, Pattern, build_matrix, generate_landscape
from .population import Agent, NoiseSpec, _best_in_mask, _discover, _forget, init_population
from .team import CompositionRegime, _autonomous, _coordinated, _form, format_tau, parse_tau

log = logging.getLogger(__name__)

PARALLELISM_ENV = "NKTEAMS_PARALLELISM"

CSV_HEADER_BASE = ["k", "pattern", "tau", "learn_prob", "coordination", "round", "t",
                   "raw_perf", "norm_perf", "reformed"]


class Coordination(str, enum.Enum):
    AUTONOMOUS = "autonomous"
    COORDINATED = "coordinated"

    def __str__(self) -> str:
        return self.value


class LearningScope(str, enum.Enum):
    ALL = "all"
    MEMBERS = "members"

    def __str__(self) -> str:
        return self.value


def csv_header(n_subtasks: int = 3) -> list[str]:
    return CSV_HEADER_BASE + [f"member_{i + 1}" for i in range(n_subtasks)]


@dataclass(frozen=True)
class ScenarioConfig:
    """One cell of the experiment grid plus the run settings shared by all cells."""

    k: int = 3
    pattern: Pattern = Pattern.DECOMPOSABLE
    tau: CompositionRegime = None
    learn_prob: float = 0.0
    coordination: Coordination = Coordination.AUTONOMOUS
    periods: int = 200
    rounds: int = 1500
    master_seed: int = 0
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    learning_scope: LearningScope = LearningScope.ALL
    n_decisions: int = 12
    n_subtasks: int = 3
    pop_size: int = 30

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "pattern", Pattern(self.pattern))
        set_(self, "coordination", Coordination(self.coordination))
        set_(self, "learning_scope", LearningScope(self.learning_scope))
        set_(self, "tau", parse_tau(self.tau))
        set_(self, "learn_prob", float(self.learn_prob))
        if not 0.0 <= self.learn_prob <= 1.0:
            raise ParameterError(f"learn_prob must lie in [0, 1], got {self.learn_prob}")
        if self.periods < 1 or self.rounds < 1:
            raise ParameterError("periods and rounds must be >= 1")
        if self.master_seed < 0:
            raise ParameterError("master_seed must be non-negative")
        if self.n_subtasks < 2 or self.n_decisions % self.n_subtasks:
            raise ParameterError(f"need >= 2 subtasks dividing N={self.n_decisions}")
        if self.pop_size % self.n_subtasks:
            raise ParameterError(f"pop_size {self.pop_size} not divisible by {self.n_subtasks} subtasks")
        if self.subtask_size > 6:
            raise ParameterError("subtasks wider than 6 decisions are not supported")
        if not 0 <= self.k < self.n_decisions:
            raise ParameterError(f"k must satisfy 0 <= k < N, got {self.k}")

    @property
    def subtask_size(self) -> int:
        return self.n_decisions // self.n_subtasks

    def to_dict(self) -> dict:
        return {
            "k": self.k, "pattern": self.pattern.value, "tau": format_tau(self.tau),
            "learn_prob": self.learn_prob, "coordination": self.coordination.value,
            "periods": self.periods, "rounds": self.rounds, "master_seed": self.master_seed,
            "sigma": self.noise.sigma, "learning_scope": self.learning_scope.value,
            "N": self.n_decisions, "M": self.n_subtasks, "P": self.pop_size,
        }

    def scenario_id(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class PeriodRecord:
    k: int
    pattern: str
    tau: str
    learn_prob: float
    coordination: str
    round: int
    t: int
    raw_performance: float
    normalized_performance: float
    reformed: bool
    member_ids: tuple[int, ...]


@dataclass
class RoundResult:
    """Per-period trajectories of one round, stored column-wise."""

    config: ScenarioConfig
    round_index: int
    landscape_global_max: float
    raw_performance: np.ndarray
    reformed: np.ndarray
    members: np.ndarray

    @property
    def normalized_performance(self) -> np.ndarray:
        return self.raw_performance / self.landscape_global_max

    @property
    def records(self) -> list[PeriodRecord]:
        c = self.config
        norm = self.normalized_performance
        return [
            PeriodRecord(c.k, c.pattern.value, format_tau(c.tau), c.learn_prob, c.coordination.value,
                         self.round_index, t + 1, float(self.raw_performance[t]), float(norm[t]),
                         bool(self.reformed[t]), tuple(int(x) for x in self.members[t]))
            for t in range(len(self.raw_performance))
        ]

    def csv_lines(self) -> Iterator[str]:
        c = self.config
        prefix = f"{c.k},{c.pattern.value},{format_tau(c.tau)},{c.learn_prob:.6f},{c.coordination.value},{self.round_index}"
        norm = self.normalized_performance
        for t in range(len(self.raw_performance)):
            members = ",".join(str(int(x)) for x in self.members[t])
            yield (f"{prefix},{t + 1},{self.raw_performance[t]:.6f},{norm[t]:.6f},"
                   f"{int(self.reformed[t])},{members}\n")


def normalize_performance(raw: float, global_max: float) -> float:
    if not 0.0 < global_max <= 1.0:
        raise ContractError(f"global maximum must lie in (0, 1], got {global_max}")
    if not 0.0 <= raw <= global_max:
        raise ContractError(f"performance {raw} exceeds the global maximum {global_max}")
    return raw / global_max


def round_generator(config: ScenarioConfig, round_index: int) -> np.random.Generator:
    """Philox stream for one round.

    The key holds the landscape-defining fields only, so scenarios differing in
    coordination mode, learning probability or team composition face the same
    landscape, initial population and initial solution in a given round.
    """
    pattern_id = list(Pattern).index(config.pattern)
    key = (round_index, config.k, pattern_id, config.n_decisions, config.n_subtasks, config.pop_size)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(config.master_seed, spawn_key=key)))


@dataclass
class RoundSetup:
    rng: np.random.Generator
    landscape: Landscape
    agents: list[Agent]
    initial_solution: int


def setup_round(config: ScenarioConfig, round_index: int) -> RoundSetup:
    rng = round_generator(config, round_index)
    matrix = build_matrix(config.pattern, config.n_decisions, config.k, config.subtask_size, rng)
    landscape = generate_landscape(matrix, rng)
    agents = init_population(config.pop_size, config.n_subtasks, rng, config.subtask_size)
    d0 = int(rng.integers(0, 1 << config.n_decisions))
    return RoundSetup(rng, landscape, agents, d0)


@numba.njit(cache=True)
def _run_periods(U, perf, masks, subtasks, d0, T, tau, prob, sigma, coordinated, learn_all, S, M, rng,
                 raw, reformed, members_out):
    members = np.zeros(M, dtype=np.int64)
    P = masks.shape[0]
    previous = d0
    for t in range(1, T + 1):
        if t == 1 or (tau > 0 and (t - 1) % tau == 0):
            _form(masks, subtasks, U, previous, S, M, sigma, rng, members)
            reformed[t - 1] = True
        if coordinated:
            d = _coordinated(members, masks, U, previous, previous if t > 1 else -1, S, M, sigma, rng)
        else:
            d = _autonomous(members, masks, U, previous, S, M, sigma, rng)
        raw[t - 1] = perf[d]
        members_out[t - 1, :] = members
        for a in range(P):
            m = subtasks[a]
            if not learn_all and members[m] != a:
                continue
            mask = _discover(masks[a], prob, S, rng)
            masks[a] = _forget(mask, prob, _best_in_mask(mask, U, m, d, S, M), rng)
        previous = d


def run_round(config: ScenarioConfig, round_index: int) -> RoundResult:
    """Simulate one round of ``config.periods`` periods."""
    setup = setup_round(config, round_index)
    land, T, M = setup.landscape, config.periods, config.n_subtasks
    agents = sorted(setup.agents, key=lambda a: a.id)
    masks = np.array([a.mask for a in agents], dtype=np.int64)
    subtasks = np.array([a.subtask for a in agents], dtype=np.int64)
    raw = np.empty(T)
    reformed = np.zeros(T, dtype=np.bool_)
    members = np.empty((T, M), dtype=np.int64)
    _run_periods(land.utility_table, land.performance_table, masks, subtasks, setup.initial_solution, T,
                 0 if config.tau is None else config.tau, config.learn_prob, config.noise.sigma,
                 config.coordination is Coordination.COORDINATED,
                 config.learning_scope is LearningScope.ALL,
                 config.subtask_size, M, setup.rng, raw, reformed, members)
    if raw.max() > land.global_max:
        raise ContractError(f"round {round_index}: performance above the global maximum")
    return RoundResult(config, round_index, land.global_max, raw, reformed, members)


def _round_task(args):
    config, index = args
    try:
        return index, run_round(config, index), None
    except Exception as exc:  # reported per round; siblings keep running
        return index, None, f"{type(exc).__name__}: {exc}"


def resolve_parallelism(parallelism: Optional[int] = None) -> int:
    env = os.environ.get(PARALLELISM_ENV)
    if env:
        parallelism = int(env)
    if parallelism is None:
        parallelism = os.cpu_count() or 1
    if parallelism < 1:
        raise ParameterError(f"parallelism must be >= 1, got {parallelism}")
    return parallelism


def _make_executor(parallelism: int) -> cf.ProcessPoolExecutor:
    return cf.ProcessPoolExecutor(max_workers=parallelism, mp_context=multiprocessing.get_context("fork"))


def run_scenario(
    config: ScenarioConfig,
    parallelism: int = 1,
    round_indices: Optional[Iterable[int]] = None,
    executor: Optional[cf.Executor] = None,
) -> list[RoundResult]:
    """Run the rounds of one scenario, returned in round order.

    Results do not depend on ``parallelism``. If any round raises, the
    others still complete and :class:`RoundFailures` carries both.
    """
    indices = list(range(config.rounds)) if round_indices is None else list(round_indices)
    tasks = [(config, i) for i in indices]
    if executor is None and parallelism > 1:
        with _make_executor(parallelism) as pool:
            return run_scenario(config, parallelism, indices, pool)
    if executor is None:
        outcomes = [_round_task(t) for t in tasks]
    else:
        workers = getattr(executor, "_max_workers", parallelism) or 1
        chunk = max(1, len(tasks) // (4 * workers))
        outcomes = list(executor.map(_round_task, tasks, chunksize=chunk))
    results = [res for _, res, err in outcomes if err is None]
    failed = {i: err for i, _, err in outcomes if err is not None}
    if failed:
        raise RoundFailures(failed, results)
    return results


GRID_FACTORS = ("k", "pattern", "tau", "learn_prob", "coordination")


def expand_grid(base: ScenarioConfig, factors: Mapping[str, Sequence]) -> list[ScenarioConfig]:
    """Cartesian product of factor levels, nested in ``GRID_FACTORS`` order."""
    unknown = set(factors) - set(GRID_FACTORS)
    if unknown:
        raise ParameterError(f"unknown grid factors: {sorted(unknown)}")
    levels = []
    for name in GRID_FACTORS:
        values = list(factors.get(name, [getattr(base, name)]))
        if not values:
            raise ParameterError(f"factor {name!r} has no levels")
        levels.append(values)
    return [base.replace(**dict(zip(GRID_FACTORS, combo))) for combo in itertools.product(*levels)]


def grid_hash(scenarios: Sequence[ScenarioConfig]) -> str:
    h = hashlib.sha256()
    for s in scenarios:
        h.update(s.scenario_id().encode())
    return h.hexdigest()


def manifest_path(output_path) -> str:
    return f"{os.fspath(output_path)}.manifest.json"


@dataclass
class GridReport:
    scenarios: int
    ran: int = 0
    skipped: int = 0
    rows_written: int = 0
    failed: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failed


ProgressCallback = Callable[[int, int, ScenarioConfig, str], None]


def _write_manifest(path: str, payload: dict) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh)
    os.replace(tmp, path)


def run_grid(
    scenarios: Sequence[ScenarioConfig],
    output_path,
    parallelism: int = 1,
    progress: Optional[ProgressCallback] = None,
) -> GridReport:
    """Run every scenario, appending CSV rows and checkpointing after each one.

    A ``<output>.manifest.json`` sidecar lists the completed
    ``(scenario_id, round)`` pairs and the CSV length covered by them, so an
    interrupted run resumes where it stopped: the CSV is truncated back to
    the last checkpoint and only missing rounds are simulated.
    """
    if not scenarios:
        raise ParameterError("the grid is empty")
    n_sub = {s.n_subtasks for s in scenarios}
    if len(n_sub) != 1:
        raise ParameterError("all scenarios must share the number of subtasks")
    output_path = os.fspath(output_path)
    mpath = manifest_path(output_path)
    ghash = grid_hash(scenarios)
    header = ",".join(csv_header(n_sub.pop())) + "\n"

    if os.path.exists(mpath) and os.path.exists(output_path):
        with open(mpath) as fh:
            manifest = json.load(fh)
        if manifest.get("grid_hash") != ghash:
            raise ManifestMismatchError(f"{mpath} was written for a different grid")
        with open(output_path, "r+b") as fh:
            fh.truncate(manifest["csv_bytes"])
    else:
        manifest = {"grid_hash": ghash, "completed": [], "failed": {}, "csv_bytes": 0}
        with open(output_path, "w") as fh:
            fh.write(header)
            manifest["csv_bytes"] = fh.tell()
        _write_manifest(mpath, manifest)

    done = {(sid, r) for sid, r in manifest["completed"]}
    report = GridReport(len(scenarios))
    executor = _make_executor(parallelism) if parallelism > 1 else None
    try:
        with open(output_path, "a") as out:
            for pos, scenario in enumerate(scenarios):
                sid = scenario.scenario_id()
                todo = [r for r in range(scenario.rounds) if (sid, r) not in done]
                if not todo:
                    report.skipped += 1
                    if progress:
                        progress(pos, len(scenarios), scenario, "skipped")
                    continue
                failed = {}
                try:
                    results = run_scenario(scenario, parallelism, todo, executor)
                except RoundFailures as exc:
                    results, failed = exc.results, exc.failed
                for res in results:
                    out.writelines(res.csv_lines())
                    report.rows_written += len(res.raw_performance)
                out.flush()
                os.fsync(out.fileno())
                manifest["completed"].extend([sid, res.round_index] for res in results)
                if failed:
                    manifest["failed"][sid] = {str(i): msg for i, msg in failed.items()}
                    report.failed[sid] = failed
                else:
                    manifest["failed"].pop(sid, None)
                manifest["csv_bytes"] = out.tell()
                _write_manifest(mpath, manifest)
                done.update((sid, res.round_index) for res in results)
                report.ran += 1
                if progress:
                    progress(pos, len(scenarios), scenario, "failed" if failed else "done")
    finally:
        if executor is not None:
            executor.shutdown()
    return report
