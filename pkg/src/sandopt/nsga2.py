"""NSGA-II: elitist multi-objective search over box-bounded continuous genes.

Binary tournament on (rank, crowding), simulated binary crossover, polynomial
mutation, (mu + lambda) survival by non-dominated sorting with crowding
truncation. Objectives are minimized. Deterministic under a fixed seed; the
protocol runs several independent seeds and merges their final fronts.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class Individual:
    genes: np.ndarray
    objectives: np.ndarray
    rank: int = -1
    crowding: float = 0.0
    invalid: bool = False  # NaN objectives; always ranked last


@dataclass
class NSGAConfig:
    population: int = 120
    generations: int = 100
    runs: int = 2
    seed: int = 0
    crossover_prob: float = 0.9
    crossover_eta: float = 15.0
    mutation_prob: float | None = None  # default 1 / n_vars
    mutation_eta: float = 20.0


@dataclass
class ParetoArchive:
    """Mutually non-dominated designs, sorted by the first objective."""

    members: list
    provenance: list = field(default_factory=list)

    def __len__(self):
        return len(self.members)

    def objectives(self) -> np.ndarray:
        return np.array([m.objectives for m in self.members]).reshape(len(self.members), -1)

    def genes(self) -> np.ndarray:
        return np.array([m.genes for m in self.members])


def dominates(a, b) -> bool:
    a, b = np.asarray(a), np.asarray(b)
    return bool(np.all(a <= b) and np.any(a < b))


def non_dominated_sort(objectives: np.ndarray) -> list[np.ndarray]:
    """Fronts F1, F2, ... as index arrays; NaN rows form a final worst front."""
    F = np.asarray(objectives, dtype=float)
    if F.ndim != 2:
        raise ValueError("objectives must be a (n, m) array")
    n = F.shape[0]
    valid = ~np.isnan(F).any(axis=1)
    idx = np.flatnonzero(valid)
    fronts: list[np.ndarray] = []
    if idx.size:
        G = F[idx]
        le = (G[:, None, :] <= G[None, :, :]).all(axis=2)
        lt = (G[:, None, :] < G[None, :, :]).any(axis=2)
        dom = le & lt  # dom[i, j]: i dominates j
        alive = np.ones(idx.size, dtype=bool)
        while alive.any():
            dominated = (dom & alive[:, None]).any(axis=0)
            front = alive & ~dominated
            if not front.any():  # cannot happen with a strict partial order
                front = alive.copy()
            fronts.append(idx[np.flatnonzero(front)])
            alive &= ~front
    bad = np.flatnonzero(~valid)
    if bad.size:
        fronts.append(bad)
    if not fronts:
        fronts = [np.array([], dtype=np.int64)]
    return fronts


def crowding_distance(objectives: np.ndarray) -> np.ndarray:
    """Crowding of one front; boundary points per objective are infinite."""
    F = np.asarray(objectives, dtype=float).reshape(len(objectives), -1)
    n, m = F.shape
    d = np.zeros(n)
    if n <= 2:
        return np.full(n, np.inf)
    for k in range(m):
        order = np.argsort(F[:, k], kind="stable")
        lo, hi = F[order[0], k], F[order[-1], k]
        d[order[0]] = d[order[-1]] = np.inf
        span = hi - lo
        if span <= 0.0:
            continue  # degenerate objective contributes nothing
        d[order[1:-1]] += (F[order[2:], k] - F[order[:-2], k]) / span
    return d


def _rank_population(pop: list[Individual]):
    objs = np.array([ind.objectives for ind in pop])
    fronts = non_dominated_sort(objs)
    for r, front in enumerate(fronts):
        dist = crowding_distance(objs[front])
        for i, e in enumerate(front):
            pop[e].rank = r
            pop[e].crowding = float(dist[i])
    return fronts


def _tournament(rng, pop: list[Individual]) -> Individual:
    i, j = rng.integers(0, len(pop), size=2)
    a, b = pop[i], pop[j]
    if a.rank != b.rank:
        return a if a.rank < b.rank else b
    if a.crowding != b.crowding:
        return a if a.crowding > b.crowding else b
    return a


def _sbx(rng, p1, p2, lower, upper, eta, prob):
    c1, c2 = p1.copy(), p2.copy()
    if rng.random() <= prob:
        u = rng.random(p1.size)
        cross = rng.random(p1.size) <= 0.5
        beta = np.where(
            u <= 0.5,
            (2.0 * u) ** (1.0 / (eta + 1.0)),
            (1.0 / (2.0 * (1.0 - u))) ** (1.0 / (eta + 1.0)),
        )
        b1 = 0.5 * ((1.0 + beta) * p1 + (1.0 - beta) * p2)
        b2 = 0.5 * ((1.0 - beta) * p1 + (1.0 + beta) * p2)
        c1 = np.where(cross, b1, p1)
        c2 = np.where(cross, b2, p2)
    return np.clip(c1, lower, upper), np.clip(c2, lower, upper)


def _poly_mutation(rng, x, lower, upper, eta, prob):
    y = x.copy()
    span = upper - lower
    do = rng.random(x.size) <= prob
    u = rng.random(x.size)
    d1 = (x - lower) / span
    d2 = (upper - x) / span
    dq = np.where(
        u < 0.5,
        (2.0 * u + (1.0 - 2.0 * u) * (1.0 - d1) ** (eta + 1.0)) ** (1.0 / (eta + 1.0)) - 1.0,
        1.0 - (2.0 * (1.0 - u) + 2.0 * (u - 0.5) * (1.0 - d2) ** (eta + 1.0)) ** (1.0 / (eta + 1.0)),
    )
    y[do] = x[do] + dq[do] * span[do]
    return np.clip(y, lower, upper)


def _evaluate_genes(evaluator, rng, genes, lower, upper, repair):
    for attempt in range(1, 21):
        try:
            obj = np.asarray(evaluator(genes), dtype=float)
            ind = Individual(genes=genes, objectives=obj, invalid=bool(np.isnan(obj).any()))
            return ind, attempt
        except Exception as exc:  # noqa: BLE001 - regenerate and retry
            log.warning("evaluator failed (%s); regenerating individual", exc)
            genes = lower + rng.random(lower.size) * (upper - lower)
            if repair is not None:
                genes = repair(genes)
    raise RuntimeError("evaluator kept failing after 20 regenerated individuals")


def _evaluate_batch(evaluator, rng, batch, lower, upper, repair, counter, jobs):
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(
                pool.map(
                    lambda g: _evaluate_genes(evaluator, rng, g, lower, upper, repair),
                    batch,
                )
            )
    else:
        results = [_evaluate_genes(evaluator, rng, g, lower, upper, repair) for g in batch]
    counter[0] += sum(att for _, att in results)
    return [ind for ind, _ in results]


def _survivors(pop: list[Individual], size: int) -> list[Individual]:
    fronts = _rank_population(pop)
    chosen: list[Individual] = []
    for front in fronts:
        if len(chosen) + front.size <= size:
            chosen.extend(pop[i] for i in front)
            continue
        crowd = np.array([pop[i].crowding for i in front])
        order = np.argsort(-crowd, kind="stable")
        chosen.extend(pop[front[i]] for i in order[: size - len(chosen)])
        break
    return chosen


def evolve(
    evaluator,
    lower,
    upper,
    config: NSGAConfig,
    repair=None,
    on_generation=None,
    jobs: int = 1,
) -> ParetoArchive:
    """Run the full protocol and return the merged non-dominated archive.

    ``evaluator(genes) -> objectives`` must be pure (it is called concurrently
    when ``jobs > 1``). ``repair`` maps raw genes back into the feasible set.
    Each run performs exactly population * generations evaluations (the
    initial population counts as the first generation); ``config.runs``
    independent runs are amalgamated and re-filtered.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if lower.shape != upper.shape or (lower > upper).any():
        raise ValueError("inconsistent bounds")
    pm = config.mutation_prob if config.mutation_prob is not None else 1.0 / lower.size

    all_members: list[Individual] = []
    provenance: list[str] = []
    for run in range(config.runs):
        rng = np.random.default_rng(config.seed + run)
        counter = [0]
        genes0 = lower + rng.random((config.population, lower.size)) * (upper - lower)
        if repair is not None:
            genes0 = np.array([repair(g) for g in genes0])
        pop = _evaluate_batch(evaluator, rng, list(genes0), lower, upper, repair, counter, jobs)
        _rank_population(pop)
        if on_generation is not None:
            on_generation(run, 1, counter[0], pop)
        for gen in range(2, config.generations + 1):
            offspring_genes = []
            while len(offspring_genes) < config.population:
                p1, p2 = _tournament(rng, pop), _tournament(rng, pop)
                c1, c2 = _sbx(rng, p1.genes, p2.genes, lower, upper, config.crossover_eta, config.crossover_prob)
                for c in (c1, c2):
                    c = _poly_mutation(rng, c, lower, upper, config.mutation_eta, pm)
                    if repair is not None:
                        c = repair(c)
                    offspring_genes.append(c)
            offspring_genes = offspring_genes[: config.population]
            offspring = _evaluate_batch(
                evaluator, rng, offspring_genes, lower, upper, repair, counter, jobs
            )
            pop = _survivors(pop + offspring, config.population)
            if on_generation is not None:
                on_generation(run, gen, counter[0], pop)
        fronts = _rank_population(pop)
        first = [pop[i] for i in fronts[0] if not pop[i].invalid]
        all_members.extend(first)
        provenance.extend([f"run{run}"] * len(first))

    # amalgamate the runs and re-filter to the streamlined front
    objs = np.array([m.objectives for m in all_members]).reshape(len(all_members), -1)
    keep = non_dominated_sort(objs)[0]
    members = [all_members[i] for i in keep]
    prov = [provenance[i] for i in keep]
    order = sorted(
        range(len(members)),
        key=lambda i: tuple(members[i].objectives) + tuple(members[i].genes),
    )
    return ParetoArchive(members=[members[i] for i in order], provenance=[prov[i] for i in order])
