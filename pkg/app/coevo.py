# app/coevo.py
"""
(μ+λ) elitist competitive co-evolution of a generator population and a
discriminator population.

One generation:
  select λ generators and λ discriminators by tournament (clones)
  → pair them at random → train each couple n_t epochs (the mutation)
  → insert offspring (μ+λ) → re-evaluate all μ+λ members on fresh shared
    batches against the μ adversaries the generation started with
  → keep the best μ of each population

The run performs ι = ⌊T_B / (n_t·λ)⌋ generations. Every random decision
draws from a sub-stream keyed by (seed, purpose, generation[, couple]), so
results do not depend on how many workers train the couples.
"""
from __future__ import annotations

import itertools
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Callable, Collection, Iterator, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.data import SslDataset
from app.linalg import RngStream
from app.metrics import W1_MAX_POINTS, classification_accuracy, generator_w1
from app.neuralnet import AdamConfig, ArchConfig, DiscriminatorNet, GeneratorNet, Network
from app.sslgan import TrainBudget, check_pair, draw_eval_batches, evaluate_pair_on_batches, train_pair
from core.exceptions import ArgumentError, ArgumentModel, ContractError, TrainingDivergenceError
from core.logging import get_logger

logger = get_logger(__name__)

WORST_FITNESS = float("inf")


class CoevoConfig(ArgumentModel):
    """μ, λ, τ, n_t, n_e and the total training-epoch budget T_B."""
    model_config = ConfigDict(frozen=True)

    mu: int = Field(default=5, ge=1)
    lam: int = Field(default=2, ge=1)
    tau: int = Field(default=2, ge=1)
    n_t: int = Field(default=10, ge=1)
    n_e: int = Field(default=4, ge=1)
    budget: int = Field(default=600, ge=1)

    @model_validator(mode="after")
    def _check_sizes(self) -> "CoevoConfig":
        if self.lam > self.mu:
            raise ValueError(f"lambda ({self.lam}) must not exceed mu ({self.mu})")
        if self.tau > self.mu:
            raise ValueError(f"tau ({self.tau}) must not exceed mu ({self.mu})")
        if self.budget < self.n_t * self.lam:
            raise ValueError(f"budget ({self.budget}) must cover at least one generation (n_t*lambda = {self.n_t * self.lam})")
        return self

    @property
    def generations(self) -> int:
        return self.budget // (self.n_t * self.lam)

    @property
    def epochs_used(self) -> int:
        return self.generations * self.n_t * self.lam


# ─── Populations ─────────────────────────────────────────────────────────────

@dataclass
class Individual:
    uid: int
    born: int
    net: Network
    diverged: bool = False


@dataclass
class Population:
    kind: Literal["generator", "discriminator"]
    members: list[Individual]
    ids: Iterator[int] = field(default_factory=itertools.count, repr=False)

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self) -> Iterator[Individual]:
        return iter(self.members)

    @property
    def uids(self) -> list[int]:
        return [m.uid for m in self.members]

    def spawn(self, net: Network, born: int) -> Individual:
        return Individual(uid=next(self.ids), born=born, net=net)

    def offspring_of(self, parent: Individual, born: int) -> Individual:
        """Deep clone of ``parent`` with a fresh id; the parent stays in place."""
        return self.spawn(parent.net.clone(), born)

    def with_members(self, members: list[Individual]) -> "Population":
        return Population(kind=self.kind, members=members, ids=self.ids)


@dataclass(frozen=True)
class FitnessTable:
    """
    Aggregated adversarial losses (lower is better) computed at ``generation``.

    pair_l_g[i, j] / pair_l_d[i, j] hold the loss of generator i against
    discriminator j, in the member order of the evaluated populations.
    """
    generation: int
    generator: dict[int, float]
    discriminator: dict[int, float]
    pair_l_g: np.ndarray
    pair_l_d: np.ndarray

    def for_kind(self, kind: str) -> dict[int, float]:
        return self.generator if kind == "generator" else self.discriminator

    def require(self, pop: Population, generation: int | None = None) -> dict[int, float]:
        if generation is not None and self.generation != generation:
            raise ContractError("stale fitness table", table_generation=self.generation,
                                expected_generation=generation)
        table = self.for_kind(pop.kind)
        missing = [uid for uid in pop.uids if uid not in table]
        if missing:
            raise ContractError("fitness missing for population members", kind=pop.kind, uids=missing)
        return table


def _rank_key(member: Individual, fitness: dict[int, float]) -> tuple[float, int, int]:
    return fitness[member.uid], member.born, member.uid


def _mean_over_alive(values: np.ndarray, alive: np.ndarray) -> float:
    picked = values[alive]
    if picked.size == 0 or not np.all(np.isfinite(picked)):
        return WORST_FITNESS
    return float(picked.mean())


def _judge_mask(pop: Population, judges: Collection[int] | None) -> np.ndarray:
    return np.array([not m.diverged and (judges is None or m.uid in judges) for m in pop], dtype=bool)


def evaluate_populations(gens: Population, discs: Population, data: SslDataset, n_e: int,
                         rng: RngStream, generation: int = 0, batch_size: int = 100,
                         generator_judges: Collection[int] | None = None,
                         discriminator_judges: Collection[int] | None = None) -> FitnessTable:
    """
    All-vs-all evaluation on one set of n_e shared batches.

    fitness(g) = mean over discriminators of L_G(g, d);
    fitness(d) = mean over generators of L_D(g, d).
    ``generator_judges`` (discriminator uids) and ``discriminator_judges``
    (generator uids) restrict which adversaries enter each mean; None means
    every adversary. Diverged individuals get WORST_FITNESS and never judge.
    """
    if len(gens) == 0 or len(discs) == 0:
        raise ArgumentError("both populations must be non-empty")
    latent_dim = gens.members[0].net.latent_dim
    batches = draw_eval_batches(data, n_e, batch_size, latent_dim, rng)

    n_g, n_d = len(gens), len(discs)
    pair_l_g = np.full((n_g, n_d), np.nan)
    pair_l_d = np.full((n_g, n_d), np.nan)
    for i, g in enumerate(gens):
        if g.diverged:
            continue
        for j, d in enumerate(discs):
            if d.diverged:
                continue
            report = evaluate_pair_on_batches(g.net, d.net, batches)
            pair_l_g[i, j] = report.l_g
            pair_l_d[i, j] = report.l_d_total

    g_judges = _judge_mask(gens, discriminator_judges)
    d_judges = _judge_mask(discs, generator_judges)
    gen_fit = {
        m.uid: WORST_FITNESS if m.diverged else _mean_over_alive(pair_l_g[i], d_judges)
        for i, m in enumerate(gens)
    }
    disc_fit = {
        m.uid: WORST_FITNESS if m.diverged else _mean_over_alive(pair_l_d[:, j], g_judges)
        for j, m in enumerate(discs)
    }
    return FitnessTable(generation=generation, generator=gen_fit, discriminator=disc_fit,
                        pair_l_g=pair_l_g, pair_l_d=pair_l_d)


def tournament_select(pop: Population, fitness: FitnessTable, lam: int, tau: int, rng: RngStream,
                      generation: int | None = None, born: int = 0,
                      with_replacement: bool = False) -> list[Individual]:
    """
    λ independent tournaments; each draws τ members (distinct unless
    ``with_replacement``) and clones the one with the lowest fitness.
    A parent may win several tournaments.
    """
    if not 1 <= tau <= len(pop):
        raise ArgumentError("tournament size must be in [1, mu]", tau=tau, mu=len(pop))
    if lam < 1:
        raise ArgumentError("lambda must be >= 1", lam=lam)
    table = fitness.require(pop, generation)
    offspring = []
    for _ in range(lam):
        picks = rng.choice(len(pop), size=tau, replace=with_replacement)
        winner = min((pop.members[i] for i in picks), key=lambda m: _rank_key(m, table))
        offspring.append(pop.offspring_of(winner, born))
    return offspring


def pair_offspring(gen_offspring: list[Individual], disc_offspring: list[Individual],
                   rng: RngStream) -> list[tuple[Individual, Individual]]:
    """Uniformly random perfect matching: every discriminator used exactly once."""
    if len(gen_offspring) != len(disc_offspring):
        raise ArgumentError("offspring lists differ in length",
                            generators=len(gen_offspring), discriminators=len(disc_offspring))
    order = rng.permutation(len(disc_offspring))
    return [(g, disc_offspring[k]) for g, k in zip(gen_offspring, order)]


def elitist_replacement(pop: Population, fitness: FitnessTable, mu: int) -> Population:
    """Keep the μ lowest-fitness members; ties go to the older, then the lower id."""
    table = fitness.require(pop)
    if mu < 1 or mu > len(pop):
        raise ArgumentError("survivor count out of range", mu=mu, size=len(pop))
    ranked = sorted(pop.members, key=lambda m: _rank_key(m, table))
    return pop.with_members(ranked[:mu])


# ─── Mutation ────────────────────────────────────────────────────────────────

@dataclass
class CoupleOutcome:
    generator: GeneratorNet
    discriminator: DiscriminatorNet
    diverged: bool = False
    error: str | None = None


def train_offspring_couple(g: GeneratorNet, d: DiscriminatorNet, data: SslDataset, budget: TrainBudget,
                           adam: AdamConfig, rng: RngStream, generation: int = 0,
                           couple: int = 0) -> CoupleOutcome:
    """Mutation operator; runs in a worker process when an executor is used."""
    try:
        train_pair(g, d, data, budget, adam, rng)
    except TrainingDivergenceError as exc:
        error = exc.with_context(generation=generation, couple=couple)
        return CoupleOutcome(generator=g, discriminator=d, diverged=True, error=str(error))
    return CoupleOutcome(generator=g, discriminator=d)


# ─── Main loop ───────────────────────────────────────────────────────────────

class GenerationRecord(BaseModel):
    generation: int
    epochs: int
    epochs_per_offspring: int
    best_g_fitness: float
    median_g_fitness: float
    best_d_fitness: float
    median_d_fitness: float
    accuracy: float
    w1: float
    diverged: int


@dataclass
class CoevoResult:
    generator: GeneratorNet
    discriminator: DiscriminatorNet
    trace: list[GenerationRecord]
    epochs_consumed: int
    generations: int
    best_g_fitness: float
    best_d_fitness: float


GenerationCallback = Callable[[GenerationRecord], None]


def _best(pop: Population, table: FitnessTable) -> Individual:
    fit = table.require(pop)
    return min(pop.members, key=lambda m: _rank_key(m, fit))


def _median_fitness(pop: Population, table: FitnessTable) -> float:
    fit = table.for_kind(pop.kind)
    return float(np.median([fit[uid] for uid in pop.uids]))


def run_cesslgan(config: CoevoConfig, data: SslDataset, adam: AdamConfig, seed: int,
                 arch: ArchConfig | None = None, batch_size: int = 100,
                 executor: Executor | None = None, w1_points: int = W1_MAX_POINTS,
                 on_generation: GenerationCallback | None = None) -> CoevoResult:
    """
    Run ι generations and return the fitness-best generator and
    discriminator of the final table together with the per-generation trace.
    """
    arch = arch or ArchConfig(data_dim=data.sample_dim)
    root = RngStream(seed, "cesslgan")
    ids = itertools.count()
    gens = Population("generator", [], ids)
    discs = Population("discriminator", [], ids)
    for i in range(config.mu):
        gens.members.append(gens.spawn(GeneratorNet.initialize(arch, root.child("init-g", i)), 0))
        discs.members.append(discs.spawn(DiscriminatorNet.initialize(arch, data.num_classes,
                                                                     root.child("init-d", i)), 0))
    check_pair(gens.members[0].net, discs.members[0].net, data)

    budget = TrainBudget(epochs=config.n_t, batch_size=batch_size)
    table = evaluate_populations(gens, discs, data, config.n_e, root.child("eval", 0), 0, batch_size)
    trace: list[GenerationRecord] = []
    epochs = 0
    logger.info("CE-SSLGAN started", extra={
        **config.model_dump(), "generations": config.generations, "seed": seed,
        "generator_parameters": gens.members[0].net.params.num_parameters,
        "discriminator_parameters": discs.members[0].net.params.num_parameters,
    })

    for generation in range(1, config.generations + 1):
        if len(gens) != config.mu or len(discs) != config.mu:
            raise ContractError("population size must be mu at the top of a generation",
                                generators=len(gens), discriminators=len(discs))
        g_off = tournament_select(gens, table, config.lam, config.tau, root.child("select-g", generation),
                                  generation=generation - 1, born=generation)
        d_off = tournament_select(discs, table, config.lam, config.tau, root.child("select-d", generation),
                                  generation=generation - 1, born=generation)
        couples = pair_offspring(g_off, d_off, root.child("pair", generation))

        jobs = [(g.net, d.net, data, budget, adam, root.child("train", generation, c), generation, c)
                for c, (g, d) in enumerate(couples)]
        if executor is None:
            outcomes = [train_offspring_couple(*job) for job in jobs]
        else:
            futures = [executor.submit(train_offspring_couple, *job) for job in jobs]
            outcomes = [f.result() for f in futures]
        epochs += config.n_t * len(couples)

        diverged = 0
        for c, ((g, d), outcome) in enumerate(zip(couples, outcomes)):
            g.net, d.net = outcome.generator, outcome.discriminator
            if outcome.diverged:
                g.diverged = d.diverged = True
                diverged += 1
                logger.warning("Offspring couple diverged",
                               extra={"generation": generation, "couple": c, "error": outcome.error})

        # parents and offspring alike are scored against the adversaries of the previous generation
        g_parents, d_parents = set(gens.uids), set(discs.uids)
        gens.members.extend(g_off)
        discs.members.extend(d_off)
        if len(gens) != config.mu + config.lam or len(discs) != config.mu + config.lam:
            raise ContractError("population size must be mu+lambda after insertion",
                                generators=len(gens), discriminators=len(discs))

        table = evaluate_populations(gens, discs, data, config.n_e, root.child("eval", generation),
                                     generation, batch_size, generator_judges=d_parents,
                                     discriminator_judges=g_parents)
        gens = elitist_replacement(gens, table, config.mu)
        discs = elitist_replacement(discs, table, config.mu)

        best_g, best_d = _best(gens, table), _best(discs, table)
        metrics_rng = root.child("metrics", generation)
        record = GenerationRecord(
            generation=generation,
            epochs=epochs,
            epochs_per_offspring=generation * config.n_t,
            best_g_fitness=table.generator[best_g.uid],
            median_g_fitness=_median_fitness(gens, table),
            best_d_fitness=table.discriminator[best_d.uid],
            median_d_fitness=_median_fitness(discs, table),
            accuracy=classification_accuracy(best_d.net, data.test_x, data.test_y),
            w1=generator_w1(best_g.net, data.test_x, metrics_rng, w1_points),
            diverged=diverged,
        )
        trace.append(record)
        logger.debug("Generation finished", extra=record.model_dump())
        if on_generation is not None:
            on_generation(record)

    best_g, best_d = _best(gens, table), _best(discs, table)
    logger.info("CE-SSLGAN finished", extra={"epochs": epochs, "generations": config.generations,
                                             "best_g_fitness": table.generator[best_g.uid],
                                             "best_d_fitness": table.discriminator[best_d.uid]})
    return CoevoResult(
        generator=best_g.net, discriminator=best_d.net, trace=trace,
        epochs_consumed=epochs, generations=config.generations,
        best_g_fitness=table.generator[best_g.uid], best_d_fitness=table.discriminator[best_d.uid],
    )
