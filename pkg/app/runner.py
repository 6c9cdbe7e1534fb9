# app/runner.py
"""
Experiment orchestration.

  load_run_config     preset < INI file < CLI overrides → validated RunConfig
  run_experiment      repetitions of one method, result tree per storage.py
  run_sweep           μ × λ × n_t × n_s grid plus SSL-GAN baselines
  evaluate_checkpoint checkpoint pair + dataset → MetricRecord
  generate_dataset    dataset config → train.csv / test.csv
"""
from __future__ import annotations

import configparser
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from slugify import slugify

from app.coevo import CoevoConfig
from app.data import DatasetConfig, bayes_accuracy, build_pool, export_csv, load_dataset
from app.linalg import RngStream, derive_seed
from app.metrics import (
    SUMMARY_COLUMNS,
    W1_MAX_POINTS,
    MetricRecord,
    classification_accuracy,
    frechet_from_samples,
    generator_w1,
    mann_whitney,
    summarize,
)
from app.neuralnet import AdamConfig, ArchConfig, DiscriminatorNet, GeneratorNet, load_checkpoint
from app.sslgan import TrainBudget, train_supervised_reference
from app.storage import ResultStore
from app.worker import RepOutcome, run_repetition
from core.config import settings
from core.exceptions import ArgumentError, CoevoBaseError, ConfigurationError, ResultsIOError
from core.logging import get_logger, setup_logging
from core.tracking import tracked_run

logger = get_logger(__name__)

SIGNIFICANCE_LEVEL = 0.05
SUMMARY_METRICS = ("accuracy", "w1", "fid", "epochs_to_peak")
REPS_COLUMNS = ("rep", "seed", "status", "epochs", "generations", "accuracy", "w1", "fid", "epochs_to_peak")
CEILING_COLUMNS = ("kind", "num_classes", "bayes_accuracy", "supervised_accuracy", "supervised_epochs")


# ─── Configuration tree ──────────────────────────────────────────────────────

class TrainSection(BaseModel):
    model_config = ConfigDict(frozen=True)

    batch_size: int = Field(default=100, ge=1)
    # per-offspring budget: T_B = budget_per_offspring · λ; SSL-GAN runs T = budget_per_offspring
    budget_per_offspring: int = Field(default=100, ge=1)
    epochs: int | None = Field(default=None, ge=1)


class CoevoSection(BaseModel):
    model_config = ConfigDict(frozen=True)

    mu: int = Field(default=5, ge=1)
    lam: int = Field(default=2, ge=1)
    tau: int = Field(default=2, ge=1)
    n_t: int = Field(default=10, ge=1)
    n_e: int = Field(default=4, ge=1)
    budget: int | None = Field(default=None, ge=1)


class EvalSection(BaseModel):
    model_config = ConfigDict(frozen=True)

    w1_points: int = Field(default=W1_MAX_POINTS, ge=1)
    supervised_epochs: int = Field(default=20, ge=0)
    fid: bool = True


class RunSection(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str = "experiment"
    method: Literal["sslgan", "cesslgan"] = "cesslgan"
    preset: Literal["paper", "desk"] = Field(default_factory=lambda: settings.DEFAULT_PRESET)
    reps: int = Field(default=5, ge=1)
    seed: int = Field(default=0, ge=0)
    out: str = Field(default_factory=lambda: settings.RESULTS_DIR)
    workers: int = Field(default_factory=lambda: settings.WORKERS, ge=1)


class RunConfig(BaseModel):
    """Everything needed to re-run an experiment bit-identically."""
    model_config = ConfigDict(frozen=True)

    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    arch: ArchConfig = Field(default_factory=ArchConfig)
    adam: AdamConfig = Field(default_factory=AdamConfig)
    train: TrainSection = Field(default_factory=TrainSection)
    coevo: CoevoSection = Field(default_factory=CoevoSection)
    eval: EvalSection = Field(default_factory=EvalSection)  # noqa: A003
    run: RunSection = Field(default_factory=RunSection)

    @model_validator(mode="after")
    def _coevo_is_consistent(self) -> "RunConfig":
        if self.run.method == "cesslgan":
            try:
                self.coevo_config()
            except ArgumentError as exc:
                raise ValueError(exc.detail) from exc
        return self

    def coevo_budget(self) -> int:
        return self.coevo.budget or self.train.budget_per_offspring * self.coevo.lam

    def coevo_config(self) -> CoevoConfig:
        budget = self.coevo_budget()
        return CoevoConfig(mu=self.coevo.mu, lam=self.coevo.lam, tau=self.coevo.tau,
                           n_t=self.coevo.n_t, n_e=self.coevo.n_e, budget=budget)

    def sslgan_budget(self) -> TrainBudget:
        return TrainBudget(epochs=self.train.epochs or self.train.budget_per_offspring,
                           batch_size=self.train.batch_size)

    def resolved(self) -> "RunConfig":
        """Materialise every derived default so the echo is self-sufficient."""
        return self.model_copy(update={
            "dataset": self.dataset.resolved(),
            "train": self.train.model_copy(update={"epochs": self.sslgan_budget().epochs}),
            "coevo": self.coevo.model_copy(update={"budget": self.coevo_budget()}),
        })


SECTIONS: dict[str, type[BaseModel]] = {
    "dataset": DatasetConfig, "arch": ArchConfig, "adam": AdamConfig, "train": TrainSection,
    "coevo": CoevoSection, "eval": EvalSection, "run": RunSection,
}
IGNORED_SECTIONS = frozenset({"sweep"})

PRESETS: dict[str, dict[str, dict[str, Any]]] = {
    "paper": {"run": {"reps": 30}, "train": {"budget_per_offspring": 300}},
    "desk": {"run": {"reps": 5}, "train": {"budget_per_offspring": 100}},
}


def _read_ini(path: str | Path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as handle:
            parser.read_file(handle)
    except (OSError, configparser.Error) as exc:
        raise ConfigurationError(f"cannot read config file: {exc}", path=str(path)) from exc
    return parser


def _ini_sections(parser: configparser.ConfigParser, path: str | Path) -> dict[str, dict[str, str]]:
    values: dict[str, dict[str, str]] = {}
    for section in parser.sections():
        if section in IGNORED_SECTIONS:
            continue
        if section not in SECTIONS:
            raise ConfigurationError("unknown config section", section=section, path=str(path))
        known = SECTIONS[section].model_fields
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigurationError("unknown config key", section=section, key=key, path=str(path))
            if raw.strip() != "":
                values.setdefault(section, {})[key] = raw.strip()
    return values


def _merge(*layers: dict[str, dict[str, Any]]) -> dict[str, dict[str, Any]]:
    merged: dict[str, dict[str, Any]] = {}
    for layer in layers:
        for section, values in layer.items():
            merged.setdefault(section, {}).update({k: v for k, v in values.items() if v is not None})
    return merged


def build_run_config(values: dict[str, dict[str, Any]]) -> RunConfig:
    try:
        return RunConfig.model_validate(values)
    except ValidationError as exc:
        raise ConfigurationError(f"invalid run configuration: {exc}") from exc


def load_run_config(path: str | Path | None = None, preset: str | None = None,
                    overrides: dict[str, dict[str, Any]] | None = None) -> RunConfig:
    """Precedence: preset < config file < ``overrides`` (CLI flags)."""
    file_values = _ini_sections(_read_ini(path), path) if path else {}
    overrides = overrides or {}
    preset = preset or file_values.get("run", {}).get("preset") or settings.DEFAULT_PRESET
    if preset not in PRESETS:
        raise ConfigurationError("unknown preset", preset=preset)
    config = build_run_config(_merge(PRESETS[preset], file_values, overrides, {"run": {"preset": preset}}))
    logger.debug("Run configuration loaded", extra={"path": str(path) if path else None, "preset": preset})
    return config


def render_run_config(config: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for section, values in config.resolved().model_dump(mode="json").items():
        parser[section] = {key: "" if value is None else str(value) for key, value in values.items()}
    buffer = io.StringIO()
    parser.write(buffer)
    return buffer.getvalue()


def write_run_config(config: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    return ResultStore(path.parent).write_text(path.name, render_run_config(config))


# ─── Experiments ─────────────────────────────────────────────────────────────

@dataclass
class ExperimentResult:
    out_dir: Path
    config: RunConfig
    outcomes: list[RepOutcome]
    summary: dict[str, dict[str, float]] = field(default_factory=dict)

    def finished(self) -> list[RepOutcome]:
        return [o for o in self.outcomes if o.status == "ok"]

    def values(self, metric: str) -> list[float]:
        return [getattr(o, metric) for o in self.finished() if getattr(o, metric) is not None]


def repetition_seeds(master_seed: int, reps: int) -> list[int]:
    return [derive_seed(master_seed, r) for r in range(reps)]


def write_ceilings(config: RunConfig, store: ResultStore) -> dict[str, Any]:
    """Bayes-optimal and fully supervised accuracy ceilings of the dataset."""
    dataset = config.dataset.resolved()
    pool = build_pool(dataset)
    row: dict[str, Any] = {
        "kind": dataset.kind,
        "num_classes": pool.num_classes,
        "bayes_accuracy": bayes_accuracy(pool.spec, pool.test_x, pool.test_y) if pool.spec else None,
        "supervised_accuracy": None,
        "supervised_epochs": config.eval.supervised_epochs,
    }
    if config.eval.supervised_epochs > 0:
        arch = config.arch.model_copy(update={"data_dim": pool.train_x.shape[1]})
        _, row["supervised_accuracy"] = train_supervised_reference(
            pool, arch, config.adam, config.eval.supervised_epochs, config.train.batch_size,
            RngStream(config.run.seed, "ceiling"),
        )
    store.write_csv("ceiling.csv", CEILING_COLUMNS, [row])
    return row


def summarize_outcomes(outcomes: list[RepOutcome]) -> dict[str, dict[str, float]]:
    summary = {}
    for metric in SUMMARY_METRICS:
        values = [getattr(o, metric) for o in outcomes if o.status == "ok" and getattr(o, metric) is not None]
        if values:
            summary[metric] = {"n": len(values), **summarize(values)}
    return summary


def _run_repetitions(config: RunConfig, out_dir: Path) -> list[RepOutcome]:
    seeds = repetition_seeds(config.run.seed, config.run.reps)
    workers = config.run.workers
    if config.run.reps == 1 or workers == 1:
        # a single repetition spends the workers on its couple trainings
        couple_workers = workers if config.run.reps == 1 else 1
        return [run_repetition(config, r, seed, str(out_dir), couple_workers) for r, seed in enumerate(seeds)]
    with ProcessPoolExecutor(max_workers=min(workers, config.run.reps), initializer=setup_logging) as pool:
        futures = [pool.submit(run_repetition, config, r, seed, str(out_dir), 1) for r, seed in enumerate(seeds)]
        return [f.result() for f in futures]


def run_experiment(config: RunConfig, out_dir: str | Path | None = None) -> ExperimentResult:
    """
    Run ``config.run.reps`` repetitions and write the result tree.

    The output directory is checked before any training; a diverged
    repetition is recorded in reps.csv and left out of the summary.
    """
    config = config.resolved()
    out = Path(out_dir or config.run.out)
    store = ResultStore(out)
    store.ensure_writable()

    with tracked_run(config.run.name, method=config.run.method, reps=config.run.reps, out=str(out)):
        write_run_config(config, out / "config.ini")
        write_ceilings(config, store)
        outcomes = _run_repetitions(config, out)
        store.write_csv("reps.csv", REPS_COLUMNS, [o.model_dump() for o in outcomes])
        summary = summarize_outcomes(outcomes)
        store.write_csv("summary.csv", ("metric", "n", *SUMMARY_COLUMNS),
                        [{"metric": metric, **stats} for metric, stats in summary.items()])
        diverged = sum(o.status != "ok" for o in outcomes)
        if diverged:
            logger.warning("Repetitions diverged", extra={"diverged": diverged, "reps": len(outcomes)})
    return ExperimentResult(out_dir=out, config=config, outcomes=outcomes, summary=summary)


# ─── Sweeps ──────────────────────────────────────────────────────────────────

class SweepCombo(BaseModel):
    model_config = ConfigDict(frozen=True)

    method: Literal["sslgan", "cesslgan"]
    n_s: int
    mu: int | None = None
    lam: int | None = None
    n_t: int | None = None

    @property
    def slug(self) -> str:
        if self.method == "sslgan":
            return slugify(f"sslgan ns{self.n_s}")
        return slugify(f"cesslgan mu{self.mu} lam{self.lam} nt{self.n_t} ns{self.n_s}")


class SweepSpec(BaseModel):
    """
    Value lists to cross. ``lam=None`` means every λ allowed by the rule
    λ ≤ ⌈μ/2⌉; explicit λ values above that bound are skipped.
    """
    model_config = ConfigDict(frozen=True)

    mu: list[int]
    lam: list[int] | None = None
    n_t: list[int]
    n_s: list[int]
    baseline: bool = True

    @field_validator("mu", "n_t", "n_s", "lam")
    @classmethod
    def _positive(cls, values: list[int] | None) -> list[int] | None:
        if values is not None and any(v < 1 for v in values):
            raise ValueError("sweep values must be >= 1")
        return values

    def check(self) -> None:
        for name in ("mu", "n_t", "n_s"):
            if not getattr(self, name):
                raise ArgumentError("sweep list is empty", parameter=name)
        if self.lam is not None and not self.lam:
            raise ArgumentError("sweep list is empty", parameter="lam")

    def combos(self) -> list[SweepCombo]:
        self.check()
        combos = []
        for n_s in self.n_s:
            if self.baseline:
                combos.append(SweepCombo(method="sslgan", n_s=n_s))
            for mu in self.mu:
                bound = math.ceil(mu / 2)
                lams = self.lam if self.lam is not None else range(1, bound + 1)
                for lam in lams:
                    if lam > bound:
                        logger.info("Sweep combination skipped",
                                    extra={"mu": mu, "lam": lam, "reason": "lambda exceeds ceil(mu/2)"})
                        continue
                    for n_t in self.n_t:
                        combos.append(SweepCombo(method="cesslgan", n_s=n_s, mu=mu, lam=lam, n_t=n_t))
        return combos


def _int_list(raw: str) -> list[int]:
    return [int(part) for part in raw.replace(";", ",").split(",") if part.strip()]


def load_sweep_spec(path: str | Path) -> SweepSpec:
    parser = _read_ini(path)
    if not parser.has_section("sweep"):
        raise ConfigurationError("sweep file needs a [sweep] section", path=str(path))
    section = parser["sweep"]
    try:
        values: dict[str, Any] = {key: _int_list(section.get(key, "")) for key in ("mu", "n_t", "n_s")}
        lam = section.get("lam", "").strip()
        values["lam"] = _int_list(lam) if lam else None
        values["baseline"] = section.getboolean("baseline", fallback=True)
        return SweepSpec.model_validate(values)
    except (ValueError, ValidationError) as exc:
        raise ConfigurationError(f"invalid sweep spec: {exc}", path=str(path)) from exc


def combo_config(base: RunConfig, combo: SweepCombo, out_dir: Path) -> RunConfig:
    values = base.model_dump()
    values["dataset"]["n_s"] = combo.n_s
    values["run"].update(method=combo.method, name=combo.slug, out=str(out_dir))
    if combo.method == "cesslgan":
        values["coevo"].update(mu=combo.mu, lam=combo.lam, n_t=combo.n_t, budget=None)
        values["coevo"]["tau"] = min(values["coevo"]["tau"], combo.mu)
    values["train"]["epochs"] = None
    return build_run_config(values)


@dataclass
class SweepResult:
    out_dir: Path
    index: list[dict[str, Any]]
    comparison: list[dict[str, Any]]


INDEX_COLUMNS = ("combo", "method", "mu", "lam", "n_t", "n_s", "generations", "epochs", "status", "directory")
COMPARISON_COLUMNS = ("combo", "method", "n_s", "reps", "accuracy_median", "accuracy_iqr", "w1_median",
                      "w1_iqr", "p_accuracy", "p_w1", "significant")


def _comparison_row(combo: SweepCombo, result: ExperimentResult,
                    baseline: ExperimentResult | None) -> dict[str, Any]:
    acc, w1 = result.values("accuracy"), result.values("w1")
    row: dict[str, Any] = {"combo": combo.slug, "method": combo.method, "n_s": combo.n_s, "reps": len(acc)}
    if acc:
        stats = summarize(acc)
        row.update(accuracy_median=stats["Median"], accuracy_iqr=stats["IQR"])
    if w1:
        stats = summarize(w1)
        row.update(w1_median=stats["Median"], w1_iqr=stats["IQR"])
    if baseline is not None and combo.method == "cesslgan":
        row["p_accuracy"] = mann_whitney(acc, baseline.values("accuracy"))
        row["p_w1"] = mann_whitney(w1, baseline.values("w1"))
        row["significant"] = min(row["p_accuracy"], row["p_w1"]) < SIGNIFICANCE_LEVEL
    return row


def run_sweep(sweep: SweepSpec, base: RunConfig, out_dir: str | Path | None = None) -> SweepResult:
    """
    One run_experiment per legal combination. A failing combination is
    logged and marked in index.csv; the others still run.
    """
    combos = sweep.combos()
    root = Path(out_dir or base.run.out)
    store = ResultStore(root)
    store.ensure_writable()
    write_run_config(base, root / "base.ini")

    index: list[dict[str, Any]] = []
    comparison: list[dict[str, Any]] = []
    baselines: dict[int, ExperimentResult] = {}
    with tracked_run(f"sweep:{base.run.name}", combos=len(combos), out=str(root)):
        for combo in combos:
            directory = root / combo.slug
            row: dict[str, Any] = {**combo.model_dump(), "combo": combo.slug, "directory": combo.slug}
            try:
                config = combo_config(base, combo, directory)
                if combo.method == "cesslgan":
                    coevo = config.coevo_config()
                    row.update(generations=coevo.generations, epochs=coevo.epochs_used)
                else:
                    row.update(epochs=config.sslgan_budget().epochs)
                result = run_experiment(config, directory)
            except CoevoBaseError as exc:
                logger.error("Sweep combination failed",
                             extra={"combo": combo.slug, "error": str(exc), "exception_type": type(exc).__name__})
                row["status"] = "failed"
                index.append(row)
                continue
            row["status"] = "ok"
            index.append(row)
            if combo.method == "sslgan":
                baselines[combo.n_s] = result
            comparison.append(_comparison_row(combo, result, baselines.get(combo.n_s)))

        store.write_csv("index.csv", INDEX_COLUMNS, index)
        store.write_csv("comparison.csv", COMPARISON_COLUMNS, comparison)
    return SweepResult(out_dir=root, index=index, comparison=comparison)


# ─── Single-shot commands ────────────────────────────────────────────────────

def evaluate_checkpoint(generator_path: str | Path, discriminator_path: str | Path,
                        dataset: DatasetConfig, seed: int = 0,
                        w1_points: int = W1_MAX_POINTS, with_fid: bool = True) -> MetricRecord:
    g = load_checkpoint(generator_path)
    d = load_checkpoint(discriminator_path)
    if not isinstance(g, GeneratorNet) or not isinstance(d, DiscriminatorNet):
        raise ResultsIOError("expected a generator and a discriminator checkpoint",
                             generator=g.kind, discriminator=d.kind)
    data = load_dataset(dataset.resolved(), derive_seed(seed, "split"))
    rng = RngStream(seed, "eval")
    fid = None
    if with_fid:
        fake, _ = g.forward(rng.child("fid").standard_normal(data.test_x.shape[0], g.latent_dim))
        fid = frechet_from_samples(fake, data.test_x)
    return MetricRecord(
        epoch=0,
        accuracy=classification_accuracy(d, data.test_x, data.test_y),
        w1=generator_w1(g, data.test_x, rng.child("w1"), w1_points),
        fid=fid,
    )


def generate_dataset(dataset: DatasetConfig, out_dir: str | Path, seed: int = 0) -> Path:
    """Write the resolved dataset, split with ``seed``, as train.csv / test.csv."""
    if dataset.kind == "csv":
        raise ArgumentError("gen-data needs a synthetic dataset kind (ring or blob)")
    data = load_dataset(dataset.resolved(), derive_seed(seed, "split"))
    path = export_csv(data, out_dir)
    logger.info("Dataset written", extra={"path": str(path), "kind": dataset.kind,
                                          "labeled": data.num_labeled, "unlabeled": data.num_unlabeled})
    return path
