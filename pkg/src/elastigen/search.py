"""Evolutionary search over sub-network configurations under a MAC budget.

Fitness is the mean consistency metric against the full generator over a
fixed shared evaluation batch (lower is better), so every candidate is
scored on identical latents and noise. Each generation keeps the elite,
refills with crossover and mutation offspring, and ranks elite + offspring
together before truncating back to the population size.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from elastigen.generator import (
    ALLOWED_RATIOS, ArchDescriptor, ConfigError, GeneratorWeights, SubnetConfig,
    count_macs, full_config, make_config, mapping_batch, synthesize_styles,
)
from elastigen.perceptual import consistency_metric
from elastigen.tensor import Tensor, no_grad


class BudgetError(ValueError):
    pass


@dataclass
class SearchParams:
    population: int = 50
    iterations: int = 20
    elite: int = 10
    crossover: int = 25
    mutation: int = 25
    mutation_prob: float = 0.1
    eval_samples: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.elite > self.population:
            raise ConfigError("elite must not exceed population")
        if self.elite + self.crossover + self.mutation < self.population:
            raise ConfigError("elite + offspring must be able to refill the population")


@dataclass
class Candidate:
    config: SubnetConfig
    fitness: float
    macs: int


@dataclass
class SearchResult:
    best: Candidate
    history: list[float] = field(default_factory=list)  # best fitness per generation
    budget: int = 0
    evaluations: int = 0


class FitnessEvaluator:
    """Scores configs against cached full-generator outputs on a shared batch."""

    def __init__(self, weights: GeneratorWeights, eval_samples: int, seed: int,
                 psi: float = 1.0, batch: int = 16):
        self.weights = weights
        self.desc = weights.desc
        self.batch = batch
        rng = np.random.default_rng([seed, 0xE7A1])
        self.z = rng.standard_normal((eval_samples, self.desc.z_dim)).astype(np.float32)
        self.noise_seed = seed
        self.psi = psi
        self._styles: list[Tensor] = []
        self._full: list[Tensor] = []
        with no_grad():
            for i in range(0, eval_samples, batch):
                w = mapping_batch(self.z[i:i + batch], weights, psi=psi)
                styles = [w] * self.desc.num_style_rows
                full_out, _ = synthesize_styles(styles, full_config(self.desc), weights,
                                                noise_seed=self.noise_seed,
                                                intermediates=False)
                self._styles.append(w)
                self._full.append(full_out)
        self._cache: dict[SubnetConfig, float] = {}
        self.evaluations = 0

    def fitness(self, config: SubnetConfig) -> float:
        """Mean consistency vs. the full generator; deterministic and cached."""
        if config in self._cache:
            return self._cache[config]
        if config.is_full(self.desc):
            self._cache[config] = 0.0
            return 0.0
        total = 0.0
        count = 0
        with no_grad():
            for w, full_out in zip(self._styles, self._full):
                styles = [w] * self.desc.num_style_rows
                sub_out, _ = synthesize_styles(styles, config, self.weights,
                                               noise_seed=self.noise_seed,
                                               intermediates=False)
                total += float(consistency_metric(sub_out, full_out).numpy()) * w.shape[0]
                count += w.shape[0]
        value = total / count
        self._cache[config] = value
        self.evaluations += 1
        return value


def fitness(config: SubnetConfig, weights: GeneratorWeights, z_batch: np.ndarray,
            psi: float = 1.0, noise_seed: int = 0) -> float:
    """One-off fitness over an explicit latent batch (shared across calls)."""
    ev = FitnessEvaluator.__new__(FitnessEvaluator)
    ev.weights = weights
    ev.desc = weights.desc
    ev.noise_seed = noise_seed
    ev.psi = psi
    ev._styles = []
    ev._full = []
    with no_grad():
        for i in range(0, len(z_batch), 16):
            w = mapping_batch(z_batch[i:i + 16], weights, psi=psi)
            full_out, _ = synthesize_styles([w] * ev.desc.num_style_rows,
                                            full_config(ev.desc), weights,
                                            noise_seed=noise_seed, intermediates=False)
            ev._styles.append(w)
            ev._full.append(full_out)
    ev._cache = {}
    ev.evaluations = 0
    return ev.fitness(config)


# ---------------------------------------------------------------------------
# genome operations

def _random_feasible(rng: np.random.Generator, desc: ArchDescriptor,
                     budget: int) -> SubnetConfig:
    for _ in range(50):
        k = int(rng.choice(desc.supported_blocks))
        ratios = tuple(float(rng.choice(ALLOWED_RATIOS)) for _ in range(desc.num_mod_layers))
        cfg = make_config(k, ratios, desc)
        if count_macs(desc, cfg) <= budget:
            return cfg
    return _repair(make_config(min(desc.supported_blocks),
                               (0.25,) * desc.num_mod_layers, desc), desc, budget)


def _repair(cfg: SubnetConfig, desc: ArchDescriptor, budget: int) -> SubnetConfig:
    """Greedy downward ratio clamping until the budget holds."""
    ratios = list(cfg.ratios)
    k = cfg.res_block
    while count_macs(desc, make_config(k, ratios, desc)) > budget:
        # lower the most expensive reducible layer by one notch
        best_layer, best_gain = None, 0
        current = count_macs(desc, make_config(k, ratios, desc))
        for layer in range(2 * k):
            idx = ALLOWED_RATIOS.index(ratios[layer])
            if idx == 0:
                continue
            trial = list(ratios)
            trial[layer] = ALLOWED_RATIOS[idx - 1]
            gain = current - count_macs(desc, make_config(k, trial, desc))
            if gain > best_gain:
                best_layer, best_gain = layer, gain
        if best_layer is None:
            if k > min(desc.supported_blocks):
                k -= 1
                continue
            raise BudgetError(
                f"budget {budget} below the smallest configuration's cost "
                f"({count_macs(desc, make_config(k, ratios, desc))} MACs)")
        ratios[best_layer] = ALLOWED_RATIOS[ALLOWED_RATIOS.index(ratios[best_layer]) - 1]
    return make_config(k, ratios, desc)


def _check_budget_feasible(desc: ArchDescriptor, budget: int) -> None:
    smallest = make_config(min(desc.supported_blocks),
                           (0.25,) * desc.num_mod_layers, desc)
    if count_macs(desc, smallest) > budget:
        raise BudgetError(
            f"budget {budget} below the smallest configuration's cost "
            f"({count_macs(desc, smallest)} MACs)")


def mutate(config: SubnetConfig, prob: float, rng: np.random.Generator,
           budget: int, desc: ArchDescriptor, retries: int = 10) -> SubnetConfig:
    """Resample each gene with probability `prob`; repair to the budget."""
    _check_budget_feasible(desc, budget)
    for _ in range(retries):
        k = config.res_block
        if rng.random() < prob:
            k = int(rng.choice(desc.supported_blocks))
        ratios = list(config.ratios)
        for layer in range(desc.num_mod_layers):
            if rng.random() < prob:
                ratios[layer] = float(rng.choice(ALLOWED_RATIOS))
        cand = make_config(k, ratios, desc)
        if count_macs(desc, cand) <= budget:
            return cand
    return _repair(cand, desc, budget)


def crossover(a: SubnetConfig, b: SubnetConfig, rng: np.random.Generator,
              budget: int, desc: ArchDescriptor, retries: int = 10) -> SubnetConfig:
    """Per-gene uniform choice between the parents; repair to the budget."""
    _check_budget_feasible(desc, budget)
    for _ in range(retries):
        k = a.res_block if rng.random() < 0.5 else b.res_block
        ratios = [a.ratios[i] if rng.random() < 0.5 else b.ratios[i]
                  for i in range(desc.num_mod_layers)]
        cand = make_config(k, ratios, desc)
        if count_macs(desc, cand) <= budget:
            return cand
    return _repair(cand, desc, budget)


# ---------------------------------------------------------------------------
# evolution loop

def evolve(weights: GeneratorWeights, budget: int, params: SearchParams,
           evaluator: FitnessEvaluator | None = None) -> SearchResult:
    """Evolutionary minimization of the sub-vs-full output difference.

    Deterministic given the seed; candidates are always budget-feasible and
    the best-ever fitness is non-increasing across generations by elitism.
    """
    desc = weights.desc
    _check_budget_feasible(desc, budget)
    rng = np.random.default_rng(params.seed)
    ev = evaluator or FitnessEvaluator(weights, params.eval_samples, params.seed)

    def to_candidate(cfg: SubnetConfig) -> Candidate:
        return Candidate(cfg, ev.fitness(cfg), count_macs(desc, cfg))

    population = []
    if count_macs(desc, full_config(desc)) <= budget:
        # the optimum under an unconstrained budget; seed it as the anchor
        population.append(to_candidate(full_config(desc)))
    while len(population) < params.population:
        population.append(to_candidate(_random_feasible(rng, desc, budget)))
    population.sort(key=lambda c: c.fitness)
    best = population[0]
    history = [best.fitness]
    for _ in range(params.iterations):
        elite = population[:params.elite]
        children: list[Candidate] = []
        for _ in range(params.crossover):
            pa, pb = rng.choice(len(elite), size=2, replace=True)
            children.append(to_candidate(
                crossover(elite[int(pa)].config, elite[int(pb)].config, rng, budget, desc)))
        for _ in range(params.mutation):
            pm = int(rng.choice(len(elite)))
            children.append(to_candidate(
                mutate(elite[pm].config, params.mutation_prob, rng, budget, desc)))
        merged = elite + children
        merged.sort(key=lambda c: c.fitness)
        population = merged[:params.population]
        if population[0].fitness < best.fitness:
            best = population[0]
        history.append(best.fitness)
    return SearchResult(best=best, history=history, budget=budget,
                        evaluations=ev.evaluations)


def random_search(weights: GeneratorWeights, budget: int, evaluations: int,
                  seed: int, evaluator: FitnessEvaluator | None = None,
                  eval_samples: int = 256) -> Candidate:
    """Evaluation-matched uniform baseline used to validate the evolution."""
    desc = weights.desc
    _check_budget_feasible(desc, budget)
    rng = np.random.default_rng(seed)
    ev = evaluator or FitnessEvaluator(weights, eval_samples, seed)
    best: Candidate | None = None
    for _ in range(evaluations):
        cfg = _random_feasible(rng, desc, budget)
        cand = Candidate(cfg, ev.fitness(cfg), count_macs(desc, cfg))
        if best is None or cand.fitness < best.fitness:
            best = cand
    return best


# ---------------------------------------------------------------------------
# result document

def result_to_document(result: SearchResult, desc: ArchDescriptor) -> dict:
    return {
        "budget_macs": result.budget,
        "best": {
            "res_block": result.best.config.res_block,
            "ratios": list(result.best.config.ratios),
            "fitness": result.best.fitness,
            "macs": result.best.macs,
        },
        "history": result.history,
        "evaluations": result.evaluations,
        "full_macs": count_macs(desc, full_config(desc)),
    }


def save_result(result: SearchResult, desc: ArchDescriptor, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(result_to_document(result, desc), f, indent=1, sort_keys=True)
        f.write("\n")


def load_result(path: str) -> dict:
    with open(path, encoding="utf-8") as f:
        return json.load(f)
