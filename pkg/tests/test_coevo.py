# tests/test_coevo.py
import itertools
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import pytest

import app.coevo as coevo
from app.coevo import (
    WORST_FITNESS,
    CoevoConfig,
    FitnessTable,
    Individual,
    Population,
    elitist_replacement,
    evaluate_populations,
    pair_offspring,
    run_cesslgan,
    tournament_select,
    train_offspring_couple,
)
from app.linalg import RngStream
from app.neuralnet import DiscriminatorNet, GeneratorNet
from app.sslgan import TrainBudget, draw_eval_batches, evaluate_pair, evaluate_pair_on_batches
from core.exceptions import ArgumentError, ContractError, TrainingDivergenceError


@dataclass
class Tag:
    """Stand-in network: only identity matters for selection tests."""
    name: str

    def clone(self) -> "Tag":
        return Tag(self.name)


def tagged_population(fitness: list[float], born: list[int] | None = None,
                      kind: str = "generator") -> tuple[Population, FitnessTable]:
    pop = Population(kind, [])
    born = born or [0] * len(fitness)
    for i, b in enumerate(born):
        pop.members.append(pop.spawn(Tag(f"p{i}"), b))
    values = {m.uid: f for m, f in zip(pop.members, fitness)}
    empty = np.empty((0, 0))
    table = FitnessTable(generation=0, generator=values if kind == "generator" else {},
                         discriminator=values if kind == "discriminator" else {},
                         pair_l_g=empty, pair_l_d=empty)
    return pop, table


class TestCoevoConfig:
    def test_generation_count(self):
        config = CoevoConfig(mu=5, lam=2, n_t=10, budget=600)
        assert config.generations == 30
        assert config.epochs_used == 600

    def test_budget_floor(self):
        config = CoevoConfig(mu=3, lam=2, n_t=1, budget=5)
        assert config.generations == 2
        assert config.epochs_used == 4

    @pytest.mark.parametrize("kwargs", [
        {"mu": 2, "lam": 3},
        {"mu": 2, "tau": 3},
        {"lam": 2, "n_t": 10, "budget": 19},
        {"mu": 0},
        {"n_e": 0},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ArgumentError, match="invalid CoevoConfig"):
            CoevoConfig(**kwargs)


class TestTournament:
    MU = 5
    DRAWS = 100_000

    def _win_frequencies(self, tau: int, with_replacement: bool = False) -> np.ndarray:
        # fitness rank k sits at a shuffled position so order in the list cannot matter
        fitness = [3.0, 0.5, 4.0, 1.0, 2.0]
        pop, table = tagged_population(fitness)
        rank_of = {f"p{i}": rank for rank, i in enumerate(np.argsort(fitness))}
        winners = tournament_select(pop, table, self.DRAWS, tau, RngStream(0, "tournament"),
                                    with_replacement=with_replacement)
        counts = Counter(rank_of[w.net.name] for w in winners)
        return np.array([counts[k] for k in range(self.MU)]) / self.DRAWS

    def test_full_tournament_always_picks_best(self):
        freq = self._win_frequencies(tau=self.MU)
        assert freq[0] == 1.0

    def test_unit_tournament_is_uniform(self):
        freq = self._win_frequencies(tau=1)
        np.testing.assert_allclose(freq, 1.0 / self.MU, atol=0.01)

    def test_binary_tournament_distinct_draws(self):
        mu = self.MU
        expected = [2 * (mu - 1 - k) / (mu * (mu - 1)) for k in range(mu)]
        np.testing.assert_allclose(self._win_frequencies(tau=2), expected, atol=0.01)

    def test_binary_tournament_with_replacement(self):
        mu = self.MU
        expected = [(2 * (mu - k) - 1) / mu ** 2 for k in range(mu)]
        np.testing.assert_allclose(self._win_frequencies(tau=2, with_replacement=True), expected, atol=0.01)

    def test_offspring_are_fresh_clones(self):
        pop, table = tagged_population([1.0, 2.0, 3.0])
        offspring = tournament_select(pop, table, 2, 3, RngStream(1), born=4)
        assert len(pop) == 3
        for child in offspring:
            assert child.uid not in pop.uids
            assert child.born == 4
            assert child.net.name == "p0"
            assert child.net is not pop.members[0].net

    def test_ties_favour_older_then_lower_id(self):
        pop, table = tagged_population([1.0, 1.0, 1.0], born=[2, 1, 1])
        winners = tournament_select(pop, table, 5, 3, RngStream(2))
        assert {w.net.name for w in winners} == {"p1"}

    def test_stale_table_rejected(self):
        pop, table = tagged_population([1.0, 2.0])
        with pytest.raises(ContractError):
            tournament_select(pop, table, 1, 2, RngStream(0), generation=3)

    def test_missing_entry_rejected(self):
        pop, table = tagged_population([1.0, 2.0])
        pop.members.append(pop.spawn(Tag("late"), 1))
        with pytest.raises(ContractError):
            tournament_select(pop, table, 1, 2, RngStream(0))

    def test_tau_out_of_range(self):
        pop, table = tagged_population([1.0, 2.0])
        with pytest.raises(ArgumentError):
            tournament_select(pop, table, 1, 3, RngStream(0))


class TestPairing:
    def _individuals(self, prefix: str, n: int) -> list[Individual]:
        return [Individual(uid=i, born=1, net=Tag(f"{prefix}{i}")) for i in range(n)]

    def test_each_discriminator_used_once(self):
        gens, discs = self._individuals("g", 4), self._individuals("d", 4)
        couples = pair_offspring(gens, discs, RngStream(3))
        assert [g for g, _ in couples] == gens
        assert sorted(d.uid for _, d in couples) == [0, 1, 2, 3]

    def test_matchings_are_uniform(self):
        gens, discs = self._individuals("g", 3), self._individuals("d", 3)
        counts = Counter(
            tuple(d.uid for _, d in pair_offspring(gens, discs, RngStream(s, "pair")))
            for s in range(6_000)
        )
        assert set(counts) == set(itertools.permutations(range(3)))
        for n in counts.values():
            assert n / 6_000 == pytest.approx(1 / 6, abs=0.02)

    def test_length_mismatch(self):
        with pytest.raises(ArgumentError):
            pair_offspring(self._individuals("g", 2), self._individuals("d", 3), RngStream(0))


class TestElitistReplacement:
    def test_matches_sorted_order(self):
        rng = np.random.default_rng(7)
        for _ in range(1_000):
            size = int(rng.integers(2, 9))
            mu = int(rng.integers(1, size + 1))
            fitness = list(np.round(rng.random(size), 1))
            born = list(rng.integers(0, 3, size))
            pop, table = tagged_population(fitness, born)
            expected = sorted(pop.members, key=lambda m: (table.generator[m.uid], m.born, m.uid))[:mu]
            assert elitist_replacement(pop, table, mu).uids == [m.uid for m in expected]

    def test_worse_offspring_leave_population_unchanged(self):
        pop, table = tagged_population([1.0, 2.0, 3.0, 9.0, 8.0], born=[0, 0, 0, 1, 1])
        assert elitist_replacement(pop, table, 3).uids == pop.uids[:3]

    def test_better_offspring_replace_worst_parents(self):
        pop, table = tagged_population([1.0, 2.0, 3.0, 0.1, 0.2], born=[0, 0, 0, 1, 1])
        assert elitist_replacement(pop, table, 3).uids == [pop.uids[3], pop.uids[4], pop.uids[0]]

    def test_tie_keeps_parent(self):
        pop, table = tagged_population([1.0, 2.0, 2.0], born=[0, 0, 1])
        assert elitist_replacement(pop, table, 2).uids == pop.uids[:2]

    def test_survivors_share_id_counter(self):
        pop, table = tagged_population([1.0, 2.0])
        survivors = elitist_replacement(pop, table, 1)
        assert survivors.spawn(Tag("x"), 1).uid == 2

    def test_mu_out_of_range(self):
        pop, table = tagged_population([1.0, 2.0])
        with pytest.raises(ArgumentError):
            elitist_replacement(pop, table, 3)


# ─── Evaluation ──────────────────────────────────────────────────────────────

def _populations(arch, data, n_g, n_d, seed=0):
    ids = itertools.count()
    gens, discs = Population("generator", [], ids), Population("discriminator", [], ids)
    root = RngStream(seed, "pops")
    for i in range(n_g):
        gens.members.append(gens.spawn(GeneratorNet.initialize(arch, root.child("g", i)), 0))
    for j in range(n_d):
        discs.members.append(discs.spawn(DiscriminatorNet.initialize(arch, data.num_classes, root.child("d", j)), 0))
    return gens, discs


class TestEvaluatePopulations:
    def test_single_pair_equals_pair_evaluation(self, arch, ring_data):
        gens, discs = _populations(arch, ring_data, 1, 1)
        table = evaluate_populations(gens, discs, ring_data, 3, RngStream(9, "eval"))
        report = evaluate_pair(gens.members[0].net, discs.members[0].net, ring_data, 3, RngStream(9, "eval"))
        assert table.generator[gens.uids[0]] == report.l_g
        assert table.discriminator[discs.uids[0]] == report.l_d_total

    def test_matches_pairwise_oracle(self, arch, ring_data):
        gens, discs = _populations(arch, ring_data, 3, 3)
        table = evaluate_populations(gens, discs, ring_data, 2, RngStream(4, "eval"), generation=5)
        batches = draw_eval_batches(ring_data, 2, 100, arch.latent_dim, RngStream(4, "eval"))
        l_g = np.zeros((3, 3))
        l_d = np.zeros((3, 3))
        for i, g in enumerate(gens):
            for j, d in enumerate(discs):
                report = evaluate_pair_on_batches(g.net, d.net, batches)
                l_g[i, j], l_d[i, j] = report.l_g, report.l_d_total
        assert table.generation == 5
        np.testing.assert_array_equal(table.pair_l_g, l_g)
        for i, uid in enumerate(gens.uids):
            assert table.generator[uid] == pytest.approx(l_g[i].mean(), rel=1e-12)
        for j, uid in enumerate(discs.uids):
            assert table.discriminator[uid] == pytest.approx(l_d[:, j].mean(), rel=1e-12)

    def test_identical_members_get_identical_fitness(self, arch, ring_data):
        gens, discs = _populations(arch, ring_data, 2, 2)
        gens.members.append(gens.offspring_of(gens.members[0], 1))
        table = evaluate_populations(gens, discs, ring_data, 2, RngStream(1))
        assert table.generator[gens.uids[0]] == table.generator[gens.uids[2]]

    def test_diverged_members_are_worst_and_ignored(self, arch, ring_data):
        gens, discs = _populations(arch, ring_data, 3, 2)
        gens.members[1].diverged = True
        table = evaluate_populations(gens, discs, ring_data, 2, RngStream(1))
        assert table.generator[gens.uids[1]] == WORST_FITNESS
        alive = table.pair_l_d[[0, 2]]
        for j, uid in enumerate(discs.uids):
            assert table.discriminator[uid] == pytest.approx(alive[:, j].mean(), rel=1e-12)

    def test_empty_population(self, arch, ring_data):
        gens, discs = _populations(arch, ring_data, 0, 2)
        with pytest.raises(ArgumentError):
            evaluate_populations(gens, discs, ring_data, 1, RngStream(0))

    def test_judges_restrict_the_means(self, arch, ring_data):
        gens, discs = _populations(arch, ring_data, 3, 3)
        table = evaluate_populations(gens, discs, ring_data, 2, RngStream(4, "eval"),
                                     generator_judges={discs.uids[0], discs.uids[2]},
                                     discriminator_judges={gens.uids[1]})
        assert np.all(np.isfinite(table.pair_l_g)) and np.all(np.isfinite(table.pair_l_d))
        for i, uid in enumerate(gens.uids):
            assert table.generator[uid] == pytest.approx(table.pair_l_g[i, [0, 2]].mean(), rel=1e-12)
        for j, uid in enumerate(discs.uids):
            assert table.discriminator[uid] == pytest.approx(table.pair_l_d[1, j], rel=1e-12)

    def test_single_judge_gives_its_pairwise_loss(self, arch, ring_data):
        gens, discs = _populations(arch, ring_data, 2, 2)
        full = evaluate_populations(gens, discs, ring_data, 2, RngStream(6))
        panel = evaluate_populations(gens, discs, ring_data, 2, RngStream(6), generator_judges={discs.uids[0]})
        np.testing.assert_array_equal(full.pair_l_g, panel.pair_l_g)
        assert panel.generator[gens.uids[1]] == full.pair_l_g[1, 0]
        assert panel.discriminator == full.discriminator


# ─── Main loop ───────────────────────────────────────────────────────────────

RUN_KW = dict(batch_size=100, w1_points=32)


class TestRunCesslgan:
    def test_single_individual_trains_one_couple(self, arch, adam, ring_data, monkeypatch):
        calls = []
        real_train_pair = coevo.train_pair

        def spy(*args, **kwargs):
            calls.append(args[3].epochs)
            return real_train_pair(*args, **kwargs)

        monkeypatch.setattr(coevo, "train_pair", spy)
        config = CoevoConfig(mu=1, lam=1, tau=1, n_t=2, n_e=1, budget=2)
        result = run_cesslgan(config, ring_data, adam, seed=0, arch=arch, **RUN_KW)
        assert calls == [2]
        assert result.generations == 1
        assert result.epochs_consumed == 2

    def test_budget_accounting(self, arch, adam, ring_data):
        config = CoevoConfig(mu=3, lam=2, tau=2, n_t=1, n_e=1, budget=5)
        seen = []
        result = run_cesslgan(config, ring_data, adam, seed=1, arch=arch, on_generation=seen.append, **RUN_KW)
        assert [r.epochs for r in result.trace] == [2, 4]
        assert [r.epochs_per_offspring for r in result.trace] == [1, 2]
        assert seen == result.trace
        assert result.epochs_consumed == 4
        for record in result.trace:
            assert record.best_g_fitness <= record.median_g_fitness
            assert record.best_d_fitness <= record.median_d_fitness
            assert 0.0 <= record.accuracy <= 1.0
            assert record.w1 >= 0.0

    @pytest.mark.parametrize("budget, n_t, lam", [(20, 1, 1), (20, 3, 2), (30, 10, 2), (12, 5, 1), (9, 2, 3)])
    def test_generation_arithmetic(self, arch, adam, ring_data, monkeypatch, budget, n_t, lam):
        calls = []
        monkeypatch.setattr(coevo, "train_pair", lambda *args, **kwargs: calls.append(args[3].epochs))
        config = CoevoConfig(mu=3, lam=lam, tau=2, n_t=n_t, n_e=1, budget=budget)
        result = run_cesslgan(config, ring_data, adam, seed=0, arch=arch, **RUN_KW)
        generations = budget // (n_t * lam)
        assert result.generations == len(result.trace) == generations
        assert result.epochs_consumed == generations * n_t * lam == sum(calls)
        assert [r.epochs for r in result.trace] == [(i + 1) * n_t * lam for i in range(generations)]

    def test_reproducible_with_and_without_executor(self, arch, adam, ring_data):
        config = CoevoConfig(mu=3, lam=2, tau=2, n_t=1, n_e=1, budget=4)

        def fingerprint(result):
            return ([r.model_dump() for r in result.trace],
                    result.generator.params.fingerprint(), result.discriminator.params.fingerprint())

        serial = fingerprint(run_cesslgan(config, ring_data, adam, seed=2, arch=arch, **RUN_KW))
        again = fingerprint(run_cesslgan(config, ring_data, adam, seed=2, arch=arch, **RUN_KW))
        with ThreadPoolExecutor(max_workers=2) as pool:
            threaded = fingerprint(run_cesslgan(config, ring_data, adam, seed=2, arch=arch,
                                                executor=pool, **RUN_KW))
        assert serial == again == threaded

    def test_seed_changes_run(self, arch, adam, ring_data):
        config = CoevoConfig(mu=2, lam=1, tau=1, n_t=1, n_e=1, budget=1)
        a = run_cesslgan(config, ring_data, adam, seed=0, arch=arch, **RUN_KW)
        b = run_cesslgan(config, ring_data, adam, seed=1, arch=arch, **RUN_KW)
        assert a.generator.params.fingerprint() != b.generator.params.fingerprint()

    def test_members_are_scored_by_the_previous_generation(self, arch, adam, ring_data, monkeypatch):
        panels = []
        real_evaluate = coevo.evaluate_populations

        def spy(gens, discs, *args, **kwargs):
            panels.append((gens.uids, discs.uids, kwargs.get("generator_judges"), kwargs.get("discriminator_judges")))
            return real_evaluate(gens, discs, *args, **kwargs)

        monkeypatch.setattr(coevo, "evaluate_populations", spy)
        monkeypatch.setattr(coevo, "train_pair", lambda *args, **kwargs: None)
        config = CoevoConfig(mu=3, lam=2, tau=2, n_t=1, n_e=1, budget=6)
        run_cesslgan(config, ring_data, adam, seed=4, arch=arch, **RUN_KW)
        assert len(panels) == 4
        assert panels[0][2:] == (None, None)
        for g_uids, d_uids, g_judges, d_judges in panels[1:]:
            assert len(g_uids) == len(d_uids) == 5
            assert g_judges == set(d_uids[:3])
            assert d_judges == set(g_uids[:3])

    def test_divergence_names_generation_and_couple(self, arch, adam, ring_data, monkeypatch):
        def explode(*args, **kwargs):
            raise TrainingDivergenceError("non-finite loss", epoch=1, batch=0)

        monkeypatch.setattr(coevo, "train_pair", explode)
        gens, discs = _populations(arch, ring_data, 1, 1)
        outcome = train_offspring_couple(gens.members[0].net, discs.members[0].net, ring_data,
                                         TrainBudget(epochs=1), adam, RngStream(0), generation=7, couple=1)
        assert outcome.diverged
        assert outcome.error == "non-finite loss (epoch=1, batch=0, generation=7, couple=1)"

    def test_diverged_offspring_are_eliminated(self, arch, adam, ring_data, monkeypatch):
        def explode(*args, **kwargs):
            raise TrainingDivergenceError("non-finite loss", epoch=1, batch=0)

        monkeypatch.setattr(coevo, "train_pair", explode)
        config = CoevoConfig(mu=3, lam=2, tau=2, n_t=1, n_e=1, budget=4)
        result = run_cesslgan(config, ring_data, adam, seed=3, arch=arch, **RUN_KW)
        assert [r.diverged for r in result.trace] == [2, 2]
        assert all(np.isfinite(r.best_g_fitness) for r in result.trace)
        # only untrained founders can survive
        assert result.generator.params.step == 0
        assert result.discriminator.params.step == 0
