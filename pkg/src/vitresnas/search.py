"""Analytic cost model and MAC-constrained evolutionary search.

MAC conventions: linear = tokens * d_in * d_out; conv = H' * W' * k^2 *
C_in * C_out; attention = 2 * h * T^2 * d_head per block (scores plus
weighted sum) with T the full sequence length including cls.  Norms,
softmax, activations, pooling and additions are not counted.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import ArchConfig
from .errors import ContractError, InfeasibleConstraintError
from .space import SearchSpaceDef, decode

Gene = tuple
Evaluator = Callable[[Gene], float]


# --- cost model ---------------------------------------------------------------


def estimate_macs(config: ArchConfig, resolution: int | None = None) -> int:
    if resolution is not None and resolution != config.input_resolution:
        config = config.with_resolution(resolution)
    c = config.stem_channels
    s = config.input_resolution // 2
    macs = s * s * 9 * 3 * c + 2 * s * s * 9 * c * c
    g = config.grids[0]
    macs += g * g * 49 * c * config.stages[0].embed_dim
    prev = None
    for stage, g, t in zip(config.stages, config.grids, config.seq_lengths):
        d = stage.embed_dim
        if prev is not None:
            macs += g * g * 9 * prev * d + prev * d
        for b in stage.blocks:
            a = b.attn_dim
            macs += 4 * t * d * a + 2 * b.heads * t * t * b.head_dim + 2 * t * d * b.hidden
        prev = d
    macs += prev * config.num_classes + config.num_token_labels * prev * config.num_classes
    return macs


def count_params(config: ArchConfig) -> int:
    c = config.stem_channels
    d1 = config.stages[0].embed_dim
    n = 27 * c + c + 2 * (9 * c * c + c)
    n += 49 * c * d1 + d1 + d1  # patch embedding and cls token
    prev = None
    for stage, t in zip(config.stages, config.seq_lengths):
        d = stage.embed_dim
        if prev is not None:
            n += 4 * prev + 9 * prev * d + d + prev * d + d
        n += t * d
        for b in stage.blocks:
            a, f = b.attn_dim, b.hidden
            n += 4 * d + 3 * (d * a + a) + a * d + d + d * f + f + f * d + d
        prev = d
    n += 2 * prev + 2 * (prev * config.num_classes + config.num_classes)
    return n


def gene_macs(gene: Gene, space: SearchSpaceDef) -> int:
    return estimate_macs(decode(gene, space).to_arch(space))


# --- variation operators --------------------------------------------------------


def random_gene(space: SearchSpaceDef, rng: np.random.Generator) -> Gene:
    return tuple(int(rng.integers(len(o))) for o in space.gene_options())


def mutate(gene: Gene, space: SearchSpaceDef, p_mutate: float, rng: np.random.Generator) -> Gene:
    """Resample each position uniformly from its list with probability ``p_mutate``."""
    out = []
    for g, o in zip(gene, space.gene_options()):
        out.append(int(rng.integers(len(o))) if rng.random() < p_mutate else int(g))
    return tuple(out)


def crossover(a: Gene, b: Gene, rng: np.random.Generator) -> Gene:
    if len(a) != len(b):
        raise ContractError("crossover parents have different gene lengths")
    pick = rng.random(len(a)) < 0.5
    return tuple(int(x) if p else int(y) for x, y, p in zip(a, b, pick))


# --- evolutionary search ----------------------------------------------------------


@dataclass
class EvoConfig:
    population_size: int = 500
    num_parents: int = 75
    num_children: int = 150
    iterations: int = 20
    p_mutate: float = 0.3
    max_draws: int = 10**6
    workers: int = 1

    def __post_init__(self):
        if min(self.population_size, self.num_parents, self.num_children) < 1 or self.iterations < 0:
            raise ContractError("population sizes must be positive and iterations nonnegative")
        if self.num_parents > self.population_size:
            raise ContractError("num_parents cannot exceed the initial population")
        if self.num_children % 2:
            raise ContractError("num_children must be even (half mutation, half crossover)")
        if not 0.0 <= self.p_mutate <= 1.0:
            raise ContractError("p_mutate must be a probability")


@dataclass
class Candidate:
    gene: Gene
    fitness: float
    macs: int

    def rank_key(self):
        return (-self.fitness, self.macs, self.gene)


@dataclass
class Population:
    members: list = field(default_factory=list)
    iteration: int = 0
    best_history: list = field(default_factory=list)

    def best(self) -> Candidate:
        return min(self.members, key=Candidate.rank_key)

    def top(self, n: int) -> list:
        return sorted(self.members, key=Candidate.rank_key)[:n]

    def __len__(self) -> int:
        return len(self.members)

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "best_history": list(self.best_history),
            "members": [{"gene": list(c.gene), "fitness": c.fitness, "macs": c.macs} for c in self.members],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Population":
        members = [Candidate(tuple(int(g) for g in m["gene"]), float(m["fitness"]), int(m["macs"])) for m in d["members"]]
        return cls(members, int(d["iteration"]), [float(v) for v in d.get("best_history", [])])


class _MacCache:
    def __init__(self, space: SearchSpaceDef):
        self.space = space
        self._cache: dict = {}

    def __call__(self, gene: Gene) -> int:
        if gene not in self._cache:
            self._cache[gene] = gene_macs(gene, self.space)
        return self._cache[gene]


def _evaluate(genes: Sequence[Gene], evaluator: Evaluator, workers: int) -> list:
    if workers <= 1 or len(genes) < 2:
        return [float(evaluator(g)) for g in genes]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return [float(v) for v in pool.map(evaluator, genes)]


def init_population(
    space: SearchSpaceDef, evaluator: Evaluator, evo: EvoConfig, rng: np.random.Generator, macs_of=None
) -> Population:
    macs_of = macs_of or _MacCache(space)
    genes, macs, draws = [], [], 0
    while len(genes) < evo.population_size:
        if draws >= evo.max_draws:
            raise InfeasibleConstraintError(
                f"only {len(genes)} of {evo.population_size} genes met max_macs={space.max_macs} in {draws} draws"
            )
        draws += 1
        g = random_gene(space, rng)
        m = macs_of(g)
        if m <= space.max_macs:
            genes.append(g)
            macs.append(m)
    fit = _evaluate(genes, evaluator, evo.workers)
    pop = Population([Candidate(g, f, m) for g, f, m in zip(genes, fit, macs)])
    pop.best_history.append(pop.best().fitness)
    return pop


def _feasible_child(make: Callable[[], Gene], space, macs_of, cap: int) -> tuple[Gene, int]:
    for _ in range(cap):
        g = make()
        m = macs_of(g)
        if m <= space.max_macs:
            return g, m
    raise InfeasibleConstraintError(f"no feasible child after {cap} redraws")


def evolve_step(
    pop: Population, space: SearchSpaceDef, evaluator: Evaluator, evo: EvoConfig, rng: np.random.Generator, macs_of=None
) -> Population:
    """Select the top parents, breed ``num_children`` feasible children
    (half mutation, half crossover), evaluate them and append them."""
    if len(pop) < evo.num_parents:
        raise ContractError(f"population of {len(pop)} is smaller than num_parents={evo.num_parents}")
    macs_of = macs_of or _MacCache(space)
    parents = [c.gene for c in pop.top(evo.num_parents)]
    n_par = len(parents)

    def by_mutation() -> Gene:
        return mutate(parents[int(rng.integers(n_par))], space, evo.p_mutate, rng)

    def by_crossover() -> Gene:
        if n_par == 1:
            return crossover(parents[0], parents[0], rng)
        i, j = rng.choice(n_par, size=2, replace=False)
        return crossover(parents[int(i)], parents[int(j)], rng)

    children = []
    for make in [by_mutation] * (evo.num_children // 2) + [by_crossover] * (evo.num_children // 2):
        children.append(_feasible_child(make, space, macs_of, evo.max_draws))
    fit = _evaluate([g for g, _ in children], evaluator, evo.workers)
    pop.members.extend(Candidate(g, f, m) for (g, m), f in zip(children, fit))
    pop.iteration += 1
    pop.best_history.append(pop.best().fitness)
    return pop


def run_search(
    space: SearchSpaceDef,
    evaluator: Evaluator,
    evo: EvoConfig,
    rng: np.random.Generator,
    population: Population | None = None,
    on_iteration: Callable[[Population], None] | None = None,
) -> Candidate:
    """Initial population then ``evo.iterations`` evolve steps; returns the best
    member (higher fitness, then fewer MACs, then smaller gene)."""
    macs_of = _MacCache(space)
    if population is None:
        population = init_population(space, evaluator, evo, rng, macs_of)
        if on_iteration:
            on_iteration(population)
    while population.iteration < evo.iterations:
        evolve_step(population, space, evaluator, evo, rng, macs_of)
        if on_iteration:
            on_iteration(population)
    return population.best()


def search_state(population: Population, space: SearchSpaceDef, evo: EvoConfig, rng: np.random.Generator, seed: int) -> dict:
    """JSON-able snapshot for resuming a search."""
    return {
        "seed": seed,
        "rng_state": rng.bit_generator.state,
        "space": space.to_dict(),
        "evo": asdict(evo),
        "population": population.to_dict(),
    }


def restore_search(state: dict) -> tuple[Population, SearchSpaceDef, EvoConfig, np.random.Generator]:
    rng = np.random.default_rng()
    rng.bit_generator.state = state["rng_state"]
    return (
        Population.from_dict(state["population"]),
        SearchSpaceDef.from_dict(state["space"]),
        EvoConfig(**state["evo"]),
        rng,
    )


# --- synthetic landscape -------------------------------------------------------------


class SeparableFitness:
    """Sum of per-position scores; larger options score higher so the MAC
    constraint binds.  Used as an oracle landscape for the search loop."""

    def __init__(self, space: SearchSpaceDef, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.tables = [np.sort(rng.random(len(o)))[::-1].copy() for o in space.gene_options()]

    def __call__(self, gene: Gene) -> float:
        return float(sum(t[g] for t, g in zip(self.tables, gene)))


def brute_force_optimum(space: SearchSpaceDef, evaluator: Evaluator, max_genes: int = 1 << 16) -> Candidate:
    """Exhaustively enumerate a small space; same tie-breaking as the search."""
    if space.size > max_genes:
        raise ContractError(f"space has {space.size} genes, more than {max_genes}")
    best = None
    for gene in np.ndindex(*[len(o) for o in space.gene_options()]):
        gene = tuple(int(g) for g in gene)
        m = gene_macs(gene, space)
        if m > space.max_macs:
            continue
        c = Candidate(gene, float(evaluator(gene)), m)
        if best is None or c.rank_key() < best.rank_key():
            best = c
    if best is None:
        raise InfeasibleConstraintError("no gene satisfies the constraint")
    return best
