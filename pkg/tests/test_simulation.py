import json
import os

import numpy as np
import pytest

from nkteams.exceptions import ContractError, ManifestMismatchError, ParameterError
from nkteams.population import NoiseSpec, ResidualContext, best_known, learn_step
from nkteams.simulation import (
    Coordination,
    LearningScope,
    ScenarioConfig,
    csv_header,
    expand_grid,
    manifest_path,
    normalize_performance,
    run_grid,
    run_round,
    run_scenario,
    setup_round,
)
from nkteams.team import autonomous_decision, coordinated_decision, form_team, should_reform

SMALL = dict(periods=30, rounds=6, master_seed=7)


def reference_round(config, round_index):
    """The period loop written against the public per-step API."""
    setup = setup_round(config, round_index)
    land, rng = setup.landscape, setup.rng
    agents = sorted(setup.agents, key=lambda a: a.id)
    previous, team = setup.initial_solution, None
    raw, members = [], []
    for t in range(1, config.periods + 1):
        ctx = ResidualContext(previous, t - 1)
        if should_reform(t, config.tau):
            team = form_team(agents, land, ctx, config.noise, rng)
        if config.coordination is Coordination.COORDINATED:
            d = coordinated_decision(team, agents, land, ctx, previous if t > 1 else None, config.noise, rng)
        else:
            d = autonomous_decision(team, agents, land, ctx, config.noise, rng)
        raw.append(land.performance_table[d])
        members.append(team.member_ids())
        after = ResidualContext(d, t)
        for agent in agents:
            if config.learning_scope is LearningScope.MEMBERS and team.members[agent.subtask] != agent.id:
                continue
            learn_step(agent, config.learn_prob, lambda a: best_known(a, land, after), rng, config.subtask_size)
        previous = d
    return np.array(raw), np.array(members)


@pytest.mark.parametrize("coordination", list(Coordination))
@pytest.mark.parametrize("pattern,k,tau,prob,scope", [
    ("decomposable", 3, None, 0.3, "all"),
    ("structured", 5, 10, 0.5, "all"),
    ("unstructured", 3, 1, 1.0, "all"),
    ("unstructured", 5, 1, 0.2, "members"),
])
def test_kernel_matches_reference(coordination, pattern, k, tau, prob, scope):
    config = ScenarioConfig(k=k, pattern=pattern, tau=tau, learn_prob=prob, coordination=coordination,
                            learning_scope=scope, **SMALL)
    for r in range(3):
        result = run_round(config, r)
        raw, members = reference_round(config, r)
        np.testing.assert_array_equal(result.raw_performance, raw)
        np.testing.assert_array_equal(result.members, members)


class TestRound:
    @pytest.mark.parametrize("coordination", list(Coordination))
    def test_no_learning_is_constant(self, coordination):
        config = ScenarioConfig(learn_prob=0.0, tau=None, coordination=coordination, noise=NoiseSpec(0.0),
                                pattern="unstructured", **SMALL)
        for r in range(6):
            raw = run_round(config, r).raw_performance
            assert (raw == raw[0]).all()

    def test_rerun_is_identical(self):
        config = ScenarioConfig(k=5, pattern="unstructured", tau=10, learn_prob=0.4, **SMALL)
        a, b = run_round(config, 3), run_round(config, 3)
        assert list(a.csv_lines()) == list(b.csv_lines())

    def test_veto_keeps_decomposable_runs_monotone(self):
        config = ScenarioConfig(k=3, pattern="decomposable", learn_prob=0.5, tau=10,
                                coordination="coordinated", noise=NoiseSpec(0.0), periods=60, rounds=100)
        for result in run_scenario(config):
            assert (np.diff(result.normalized_performance) >= 0).all()

    def test_record_shape(self):
        config = ScenarioConfig(tau=1, learn_prob=0.2, **SMALL)
        result = run_round(config, 0)
        assert len(result.records) == config.periods
        assert result.reformed.all()
        norm = result.normalized_performance
        assert ((norm > 0) & (norm <= 1)).all()
        assert result.records[0].t == 1

    def test_long_term_team_is_fixed(self):
        result = run_round(ScenarioConfig(tau=None, learn_prob=0.5, **SMALL), 1)
        assert (result.members == result.members[0]).all()
        assert result.reformed.tolist() == [True] + [False] * (SMALL["periods"] - 1)

    def test_medium_term_reforms_every_ten(self):
        result = run_round(ScenarioConfig(tau=10, **SMALL), 0)
        assert np.flatnonzero(result.reformed).tolist() == [0, 10, 20]

    def test_paired_design(self):
        base = ScenarioConfig(k=5, pattern="unstructured", **SMALL)
        a = setup_round(base, 2)
        for other in (base.replace(coordination="coordinated"), base.replace(learn_prob=0.7, tau=1)):
            b = setup_round(other, 2)
            np.testing.assert_array_equal(a.landscape.tables, b.landscape.tables)
            assert [x.repertoire for x in a.agents] == [x.repertoire for x in b.agents]
            assert a.initial_solution == b.initial_solution
        c = setup_round(base, 3)
        assert not np.array_equal(a.landscape.tables, c.landscape.tables)

    def test_seed_variation_is_sampling_noise(self):
        config = ScenarioConfig(k=3, pattern="decomposable", learn_prob=0.3, coordination="coordinated",
                                periods=200, rounds=100)
        finals = [np.mean([r.normalized_performance[-1] for r in run_scenario(config.replace(master_seed=s))])
                  for s in (0, 1)]
        assert abs(finals[0] - finals[1]) < 0.02

    def test_raw_never_exceeds_optimum(self):
        for pattern in ("decomposable", "structured", "unstructured"):
            config = ScenarioConfig(k=5 if pattern != "decomposable" else 3, pattern=pattern, tau=1,
                                    learn_prob=0.6, periods=50, rounds=20)
            for res in run_scenario(config):
                assert res.raw_performance.max() <= res.landscape_global_max


def test_normalize_performance():
    assert normalize_performance(0.5, 0.5) == 1.0
    assert normalize_performance(0.25, 0.5) == 0.5
    with pytest.raises(ContractError):
        normalize_performance(0.6, 0.5)


def test_config_validation():
    with pytest.raises(ParameterError):
        ScenarioConfig(learn_prob=1.5)
    with pytest.raises(ParameterError):
        ScenarioConfig(pop_size=31)


def test_parallel_runs_are_identical():
    config = ScenarioConfig(k=5, pattern="structured", tau=1, learn_prob=0.5, coordination="coordinated",
                            periods=20, rounds=16)
    serial = [line for res in run_scenario(config, parallelism=1) for line in res.csv_lines()]
    parallel = [line for res in run_scenario(config, parallelism=8) for line in res.csv_lines()]
    assert serial == parallel


class TestGrid:
    def test_counts(self):
        base = ScenarioConfig()
        full = expand_grid(base, {"k": [3, 5], "pattern": ["decomposable", "structured", "unstructured"],
                                  "tau": [None, 10, 1], "learn_prob": [i / 10 for i in range(11)],
                                  "coordination": list(Coordination)})
        assert len(full) == 396
        assert len({s.scenario_id() for s in full}) == 396
        assert len(expand_grid(base, {})) == 1

    def test_row_count(self, tmp_path):
        grid = expand_grid(ScenarioConfig(periods=10, rounds=3), {"learn_prob": [0.0, 1.0]})
        out = tmp_path / "grid.csv"
        report = run_grid(grid, out)
        lines = out.read_text().splitlines()
        assert lines[0] == ",".join(csv_header(3))
        assert len(lines) - 1 == report.rows_written == 2 * 3 * 10

    def _grid(self):
        return expand_grid(ScenarioConfig(periods=8, rounds=3), {"learn_prob": [0.0, 0.5, 1.0], "tau": [None, 1]})

    def test_resume_after_interrupt(self, tmp_path):
        grid = self._grid()
        clean = tmp_path / "clean.csv"
        run_grid(grid, clean)

        class Stop(Exception):
            pass

        def interrupt(pos, total, scenario, status):
            if pos == 2:
                raise Stop

        out = tmp_path / "resumed.csv"
        with pytest.raises(Stop):
            run_grid(grid, out, progress=interrupt)
        assert len(json.loads(open(manifest_path(out)).read())["completed"]) == 3 * 3
        with open(out, "a") as fh:
            fh.write("3,decomposable,partial")  # torn write past the checkpoint
        seen = []
        report = run_grid(grid, out, progress=lambda pos, total, s, status: seen.append(status))
        assert seen == ["skipped"] * 3 + ["done"] * 3
        assert report.rows_written == 3 * 3 * 8
        assert out.read_bytes() == clean.read_bytes()

        again = run_grid(grid, out)
        assert again.ran == 0 and again.skipped == 6 and again.rows_written == 0
        assert out.read_bytes() == clean.read_bytes()

    def test_changed_grid_is_rejected(self, tmp_path):
        out = tmp_path / "grid.csv"
        run_grid(self._grid()[:2], out)
        with pytest.raises(ManifestMismatchError):
            run_grid(self._grid(), out)

    def test_parallel_grid_is_byte_identical(self, tmp_path):
        grid = self._grid()
        run_grid(grid, tmp_path / "a.csv", parallelism=1)
        run_grid(grid, tmp_path / "b.csv", parallelism=3)
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert os.path.exists(manifest_path(tmp_path / "b.csv"))
