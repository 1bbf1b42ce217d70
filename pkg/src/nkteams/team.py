"""Team formation and per-period decision making.

Random draws are consumed in a fixed order so that a round is reproducible:
formation walks subtasks ascending, then agent ids ascending, then each
repertoire in ascending code order; decisions walk members by subtask.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numba
import numpy as np

from .exceptions import ContractError, ParameterError
from .landscape import Landscape
from .population import (
    Agent,
    NoiseSpec,
    ResidualContext,
    _noisy,
    splice,
)

# None means the team is formed once and never changes (long-term composition).
CompositionRegime = Optional[int]
LONG_TERM: CompositionRegime = None
MEDIUM_TERM: CompositionRegime = 10
SHORT_TERM: CompositionRegime = 1


def parse_tau(value) -> CompositionRegime:
    if value is None or (isinstance(value, str) and value.strip().lower() in ("none", "null", "∅", "")):
        return None
    tau = int(value)
    if tau < 1:
        raise ParameterError(f"tau must be >= 1 or none, got {value!r}")
    return tau


def format_tau(tau: CompositionRegime) -> str:
    return "none" if tau is None else str(tau)


@dataclass(frozen=True)
class Team:
    members: dict[int, int]
    formed_at: int = 1

    def member_ids(self) -> tuple[int, ...]:
        return tuple(self.members[m] for m in sorted(self.members))


@dataclass(frozen=True)
class CandidateSolution:
    rank: int
    solution: int


def should_reform(t: int, tau: CompositionRegime) -> bool:
    """True in the first period and then every ``tau`` periods."""
    if t < 1:
        raise ParameterError(f"periods are counted from 1, got {t}")
    return t == 1 or (tau is not None and (t - 1) % tau == 0)


# -- compiled kernels --------------------------------------------------------

@numba.njit(cache=True)
def _form(masks, subtasks, U, context, S, M, sigma, rng, out):
    ties = np.empty(masks.shape[0], dtype=np.int64)
    for m in range(M):
        best = -np.inf
        n_ties = 0
        for a in range(masks.shape[0]):
            if subtasks[a] != m:
                continue
            signal = -np.inf
            for p in range(1 << S):
                if masks[a] >> p & 1:
                    eu = _noisy(U[splice(context, m, p, S, M), m], sigma, rng)
                    if eu > signal:
                        signal = eu
            if signal > best:
                best = signal
                ties[0] = a
                n_ties = 1
            elif signal == best:
                ties[n_ties] = a
                n_ties += 1
        if n_ties == 0:
            return False
        out[m] = ties[0] if n_ties == 1 else ties[rng.integers(0, n_ties)]
    return True


@numba.njit(cache=True)
def _top_two(mask, U, m, context, S, M, sigma, rng):
    first, second = -1, -1
    u1, u2 = -np.inf, -np.inf
    for p in range(1 << S):
        if mask >> p & 1:
            eu = _noisy(U[splice(context, m, p, S, M), m], sigma, rng)
            if eu > u1:
                second, u2 = first, u1
                first, u1 = p, eu
            elif eu > u2:
                second, u2 = p, eu
    if second < 0:
        second = first
    return first, second


@numba.njit(cache=True)
def _autonomous(members, masks, U, context, S, M, sigma, rng):
    solution = 0
    for m in range(M):
        first, _ = _top_two(masks[members[m]], U, m, context, S, M, sigma, rng)
        solution = splice(solution, m, first, S, M)
    return solution


@numba.njit(cache=True)
def _accepted(candidate, previous, U, M, sigma, rng):
    # every member evaluates, so draw consumption does not depend on vetoes
    ok = True
    for m in range(M):
        if not _noisy(U[candidate, m], sigma, rng) > U[previous, m]:
            ok = False
    return ok


@numba.njit(cache=True)
def _coordinated(members, masks, U, context, previous, S, M, sigma, rng):
    cand1, cand2 = 0, 0
    for m in range(M):
        first, second = _top_two(masks[members[m]], U, m, context, S, M, sigma, rng)
        cand1 = splice(cand1, m, first, S, M)
        cand2 = splice(cand2, m, second, S, M)
    if previous < 0:
        # no solution has been achieved yet, so there is nothing to veto against
        return cand1
    if _accepted(cand1, previous, U, M, sigma, rng):
        return cand1
    if _accepted(cand2, previous, U, M, sigma, rng):
        return cand2
    return previous


# -- public operations -------------------------------------------------------

def _as_arrays(agents: Sequence[Agent]):
    ids = np.array([a.id for a in agents], dtype=np.int64)
    masks = np.array([a.mask for a in agents], dtype=np.int64)
    subtasks = np.array([a.subtask for a in agents], dtype=np.int64)
    order = np.argsort(ids, kind="stable")
    return ids[order], masks[order], subtasks[order]


def _member_arrays(team: Team, agents: Sequence[Agent], M: int):
    ids, masks, _ = _as_arrays(agents)
    index = {int(i): pos for pos, i in enumerate(ids)}
    if sorted(team.members) != list(range(M)):
        raise ContractError(f"team must have one member per subtask, got {team.members}")
    return np.array([index[team.members[m]] for m in range(M)], dtype=np.int64), masks


def form_team(
    population: Sequence[Agent],
    landscape: Landscape,
    context: ResidualContext,
    noise: NoiseSpec,
    rng: np.random.Generator,
) -> Team:
    """Pick, per subtask, the agent signaling the highest estimated utility.

    Each agent signals the best noisy estimate over its repertoire (fresh
    error per element). Ties between agents are broken uniformly at random.
    """
    M = landscape.n_subtasks
    ids, masks, subtasks = _as_arrays(population)
    out = np.empty(M, dtype=np.int64)
    if not _form(masks, subtasks, landscape.utility_table, context.full_solution,
                 landscape.subtask_size, M, noise.sigma, rng, out):
        raise ContractError("some subtask has no agents")
    return Team({m: int(ids[out[m]]) for m in range(M)}, formed_at=context.period + 1)


def autonomous_decision(
    team: Team,
    agents: Sequence[Agent],
    landscape: Landscape,
    context: ResidualContext,
    noise: NoiseSpec,
    rng: np.random.Generator,
) -> int:
    """Concatenate each member's independently chosen partial solution."""
    M = landscape.n_subtasks
    members, masks = _member_arrays(team, agents, M)
    return int(_autonomous(members, masks, landscape.utility_table, context.full_solution,
                           landscape.subtask_size, M, noise.sigma, rng))


def coordinated_decision(
    team: Team,
    agents: Sequence[Agent],
    landscape: Landscape,
    context: ResidualContext,
    previous: Optional[int],
    noise: NoiseSpec,
    rng: np.random.Generator,
) -> int:
    """Liaison coordination with two ranked candidates and unanimous acceptance.

    Candidate ``j`` concatenates every member's ``j``-th ranked partial
    solution (a singleton repertoire fills both ranks). A member accepts a
    candidate when its noisy estimated utility strictly exceeds the true
    utility of ``previous``; one veto rejects the candidate. If both are
    rejected the team keeps ``previous``. With ``previous=None`` (the first
    period) the first candidate is adopted as is.
    """
    M = landscape.n_subtasks
    members, masks = _member_arrays(team, agents, M)
    status_quo = -1 if previous is None else int(previous)
    return int(_coordinated(members, masks, landscape.utility_table, context.full_solution, status_quo,
                            landscape.subtask_size, M, noise.sigma, rng))


def candidate_solutions(
    team: Team,
    agents: Sequence[Agent],
    landscape: Landscape,
    context: ResidualContext,
    noise: NoiseSpec,
    rng: np.random.Generator,
) -> list[CandidateSolution]:
    """The two candidates a coordination session would consider, in order."""
    M, S = landscape.n_subtasks, landscape.subtask_size
    members, masks = _member_arrays(team, agents, M)
    cands = [0, 0]
    for m in range(M):
        first, second = _top_two(masks[members[m]], landscape.utility_table, m, context.full_solution,
                                 S, M, noise.sigma, rng)
        cands[0] = splice(cands[0], m, first, S, M)
        cands[1] = splice(cands[1], m, second, S, M)
    return [CandidateSolution(1, int(cands[0])), CandidateSolution(2, int(cands[1]))]
