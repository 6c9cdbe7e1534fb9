# app/worker.py
"""
Process-pool job: one repetition of an experiment.

run_repetition takes and returns picklable values only. It writes its own
rep_XXX/ directory, so parallel repetitions never touch the same file.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import TYPE_CHECKING, Any, Literal

from pydantic import BaseModel

from app.coevo import GenerationRecord, run_cesslgan
from app.data import SslDataset, load_dataset
from app.linalg import RngStream, derive_seed, sample_standard_normal
from app.losses import LossReport
from app.metrics import classification_accuracy, epochs_to_peak, frechet_from_samples, generator_w1
from app.neuralnet import DiscriminatorNet, GeneratorNet, save_checkpoint
from app.sslgan import train_pair
from app.storage import ResultStore, rounded
from core.exceptions import TrainingDivergenceError
from core.logging import get_logger, setup_logging
from core.tracking import tracked_run

if TYPE_CHECKING:
    from app.runner import RunConfig

logger = get_logger(__name__)

SSLGAN_COLUMNS = ("epoch", "epochs", "epochs_per_offspring", "accuracy", "w1",
                  "l_g", "l_d_sup", "l_d_unsup", "l_d_total")
COEVO_COLUMNS = ("generation", "epochs", "epochs_per_offspring", "accuracy", "w1",
                 "best_g_fitness", "median_g_fitness", "best_d_fitness", "median_d_fitness", "diverged")


class RepOutcome(BaseModel):
    rep: int
    seed: int
    status: Literal["ok", "diverged"]
    epochs: int = 0
    generations: int | None = None
    accuracy: float | None = None
    w1: float | None = None
    fid: float | None = None
    epochs_to_peak: int | None = None
    elapsed_ms: float = 0.0
    error: str | None = None


def _final_fid(g: GeneratorNet, data: SslDataset, rng: RngStream) -> float:
    fake, _ = g.forward(sample_standard_normal(rng, data.test_x.shape[0], g.latent_dim))
    return frechet_from_samples(fake, data.test_x)


def _train_sslgan(config: "RunConfig", data: SslDataset, seed: int,
                  rows: list[dict[str, Any]]) -> tuple[GeneratorNet, DiscriminatorNet]:
    arch = config.arch.model_copy(update={"data_dim": data.sample_dim})
    root = RngStream(seed, "sslgan")
    g = GeneratorNet.initialize(arch, root.child("init-g"))
    d = DiscriminatorNet.initialize(arch, data.num_classes, root.child("init-d"))

    def record(epoch: int, g: GeneratorNet, d: DiscriminatorNet, report: LossReport) -> None:
        rows.append({
            "epoch": epoch, "epochs": epoch, "epochs_per_offspring": epoch,
            "accuracy": classification_accuracy(d, data.test_x, data.test_y),
            "w1": generator_w1(g, data.test_x, root.child("metrics", epoch), config.eval.w1_points),
            **report.model_dump(),
        })

    train_pair(g, d, data, config.sslgan_budget(), config.adam, root.child("train"), on_epoch=record)
    return g, d


def _train_cesslgan(config: "RunConfig", data: SslDataset, seed: int, rows: list[dict[str, Any]],
                    couple_workers: int) -> tuple[GeneratorNet, DiscriminatorNet]:
    arch = config.arch.model_copy(update={"data_dim": data.sample_dim})

    def record(gen: GenerationRecord) -> None:
        rows.append(gen.model_dump())

    kwargs = dict(arch=arch, batch_size=config.train.batch_size, w1_points=config.eval.w1_points,
                  on_generation=record)
    if couple_workers > 1:
        with ProcessPoolExecutor(max_workers=couple_workers, initializer=setup_logging) as pool:
            result = run_cesslgan(config.coevo_config(), data, config.adam, seed, executor=pool, **kwargs)
    else:
        result = run_cesslgan(config.coevo_config(), data, config.adam, seed, **kwargs)
    return result.generator, result.discriminator


def run_repetition(config: "RunConfig", rep: int, seed: int, out_dir: str,
                   couple_workers: int = 1) -> RepOutcome:
    """
    Train one repetition with ``seed`` and write rep_XXX/.

    Divergence of a baseline run (or of the whole co-evolution) is recorded
    in the outcome; the rows produced before it are still written.
    """
    store = ResultStore(out_dir)
    rep_dir = store.rep_dir(rep).name
    method = config.run.method
    columns = SSLGAN_COLUMNS if method == "sslgan" else COEVO_COLUMNS
    rows: list[dict[str, Any]] = []
    outcome: dict[str, Any] = {"rep": rep, "seed": seed, "status": "ok"}

    with tracked_run(f"{config.run.name}/rep_{rep:03d}", method=method, seed=seed) as timer:
        data = load_dataset(config.dataset, derive_seed(seed, "split"))
        try:
            if method == "sslgan":
                g, d = _train_sslgan(config, data, seed, rows)
            else:
                g, d = _train_cesslgan(config, data, seed, rows, couple_workers)
        except TrainingDivergenceError as exc:
            logger.warning("Repetition diverged", extra={"rep": rep, "error": str(exc)})
            outcome.update(status="diverged", error=str(exc))
            g = d = None

        store.write_csv(Path(rep_dir) / "metrics.csv", columns, rows)
        if rows:
            last = rows[-1]
            outcome.update(
                epochs=last["epochs"],
                generations=last.get("generation"),
                accuracy=rounded(last["accuracy"]),
                w1=rounded(last["w1"]),
                epochs_to_peak=epochs_to_peak([r["epochs"] for r in rows],
                                              [rounded(r["accuracy"]) for r in rows]),
            )
        if g is not None and d is not None:
            save_checkpoint(g, store.path(rep_dir, "generator.json"), rng_seed=seed)
            save_checkpoint(d, store.path(rep_dir, "discriminator.json"), rng_seed=seed)
            if config.eval.fid:
                outcome["fid"] = rounded(_final_fid(g, data, RngStream(seed, "final-fid")))
        outcome["elapsed_ms"] = timer.elapsed_ms
        store.write_json(Path(rep_dir) / "run.json", {**outcome, "method": method, "name": config.run.name})
    return RepOutcome(**outcome)
