"""Agents, their utilities, and the discover/forget learning step.

A repertoire of partial solutions is stored as a bitmask over the ``2**S``
partial-solution codes (bit ``p`` set means partial solution ``p`` is known),
which is the representation the compiled kernels work on. The :class:`Agent`
dataclass exposes it as a plain ``set`` for callers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Union

import numba
import numpy as np

from .exceptions import ContractError, ParameterError
from .landscape import Landscape, Solution, as_code


@dataclass(frozen=True)
class NoiseSpec:
    """Standard deviation of the error added to every utility estimate."""

    sigma: float = 0.01

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ParameterError(f"sigma must be >= 0, got {self.sigma}")

    @classmethod
    def from_error_term(cls, value: float, is_variance: bool = False) -> "NoiseSpec":
        """Read the second parameter of ``N(0, value)`` as a std or a variance."""
        if value < 0:
            raise ParameterError(f"error term must be >= 0, got {value}")
        return cls(math.sqrt(value) if is_variance else float(value))


@dataclass(frozen=True)
class ResidualContext:
    """Team solution of the previous period, used to fill in other subtasks."""

    full_solution: int
    period: int = 0


@dataclass
class Agent:
    id: int
    subtask: int
    repertoire: set[int] = field(default_factory=set)

    @property
    def mask(self) -> int:
        return repertoire_mask(self.repertoire)


def repertoire_mask(repertoire) -> int:
    mask = 0
    for p in repertoire:
        mask |= 1 << int(p)
    return mask


def mask_members(mask: int) -> set[int]:
    return {p for p in range(mask.bit_length()) if mask >> p & 1}


# -- compiled primitives shared with the simulation kernel -------------------

@numba.njit(cache=True)
def splice(code, m, partial, S, M):
    """Replace the bits of subtask ``m`` in ``code`` with ``partial``."""
    shift = S * (M - 1 - m)
    block = (1 << S) - 1
    return (code & ~(block << shift)) | (partial << shift)


@numba.njit(cache=True)
def partial_of(code, m, S, M):
    return (code >> (S * (M - 1 - m))) & ((1 << S) - 1)


@numba.njit(cache=True)
def _noisy(value, sigma, rng):
    if sigma > 0.0:
        return value + rng.normal(0.0, sigma)
    return value


@numba.njit(cache=True)
def _popcount(mask):
    c = 0
    while mask:
        mask &= mask - 1
        c += 1
    return c


@numba.njit(cache=True)
def _nth_member(mask, j):
    # j-th set bit, counting from the least significant
    p = 0
    while True:
        if mask >> p & 1:
            if j == 0:
                return p
            j -= 1
        p += 1


@numba.njit(cache=True)
def _best_in_mask(mask, U, m, context, S, M):
    best = -1
    best_u = -np.inf
    for p in range(1 << S):
        if mask >> p & 1:
            u = U[splice(context, m, p, S, M), m]
            if u > best_u:
                best, best_u = p, u
    return best


@numba.njit(cache=True)
def _discover(mask, prob, S, rng):
    if rng.random() < prob:
        base = _nth_member(mask, rng.integers(0, _popcount(mask)))
        mask |= 1 << (base ^ (1 << rng.integers(0, S)))
    return mask


@numba.njit(cache=True)
def _forget(mask, prob, protected, rng):
    if rng.random() < prob:
        removable = mask & ~(1 << protected)
        if removable:
            mask &= ~(1 << _nth_member(removable, rng.integers(0, _popcount(removable))))
    return mask


# -- public operations -------------------------------------------------------

def init_population(pop_size: int, m_subtasks: int, rng: np.random.Generator, subtask_size: int = 4) -> list[Agent]:
    """Equal split of agents over subtasks, each knowing one random partial solution.

    Agent ``i`` works on subtask ``i // (pop_size // m_subtasks)``.
    """
    if pop_size < 1 or m_subtasks < 1 or pop_size % m_subtasks:
        raise ParameterError(f"pop_size {pop_size} must be a positive multiple of {m_subtasks}")
    per = pop_size // m_subtasks
    return [Agent(i, i // per, {int(rng.integers(0, 1 << subtask_size))}) for i in range(pop_size)]


def utility(landscape: Landscape, m: int, full_solution: Solution) -> float:
    """Half own-subtask performance, half the mean performance of the other subtasks."""
    if not 0 <= m < landscape.n_subtasks:
        raise IndexError(f"subtask index {m} out of range")
    return float(landscape.utility_table[as_code(full_solution, landscape.n_decisions), m])


def estimated_utility(
    landscape: Landscape,
    m: int,
    candidate: int,
    context: ResidualContext,
    noise: NoiseSpec,
    rng: np.random.Generator,
) -> float:
    """Utility of ``candidate`` spliced into the context, plus fresh Gaussian error."""
    S, M = landscape.subtask_size, landscape.n_subtasks
    if not 0 <= candidate < 1 << S:
        raise ParameterError(f"partial solution {candidate} out of range for S={S}")
    code = splice(context.full_solution, m, candidate, S, M)
    return float(_noisy(landscape.utility_table[code, m], noise.sigma, rng))


def best_known(agent: Agent, landscape: Landscape, context: ResidualContext) -> int:
    """Noise-free argmax over the repertoire; ties go to the smallest code."""
    if not agent.repertoire:
        raise ContractError(f"agent {agent.id} has an empty repertoire")
    return int(_best_in_mask(agent.mask, landscape.utility_table, agent.subtask,
                             context.full_solution, landscape.subtask_size, landscape.n_subtasks))


Protected = Union[int, Callable[[Agent], int]]


def learn_step(agent: Agent, prob: float, protected: Protected, rng: np.random.Generator, subtask_size: int = 4) -> Agent:
    """Discover then forget, each with probability ``prob``. Mutates ``agent``.

    Discovery flips one random bit of a random known partial solution and
    adds the result if it is new. Forgetting drops one random entry other
    than ``protected``. ``protected`` may be a callable, which is then
    resolved on the agent *after* discovery; the simulation passes
    ``lambda a: best_known(a, landscape, context)`` so that a freshly
    discovered improvement is the one kept.
    """
    if not 0.0 <= prob <= 1.0:
        raise ParameterError(f"learning probability must lie in [0, 1], got {prob}")
    if not agent.repertoire:
        raise ContractError(f"agent {agent.id} has an empty repertoire")
    if not callable(protected) and protected not in agent.repertoire:
        raise ContractError(f"protected solution {protected} is not known to agent {agent.id}")
    mask = int(_discover(agent.mask, prob, subtask_size, rng))
    agent.repertoire = mask_members(mask)
    keep = protected(agent) if callable(protected) else protected
    agent.repertoire = mask_members(int(_forget(mask, prob, keep, rng)))
    return agent
