"""
Command implementations: prior-fit, evaluate, finetune, circles sweep,
report and generate. Each command writes its outputs atomically under
``io.output_dir``, then a manifest listing every file with its sha256, and
registers the run in the runs database.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sqlalchemy.exc import SQLAlchemyError

from artifacts import RunManifest, file_sha256, write_csv, write_json
from config import TOOL_VERSION, ExperimentConfig, settings
from database import DatabaseManager, get_db_manager
from datagen import derive_seed, gen_circles, generate_from_spec, split_dataset
from datasets import Dataset, model_constraint_violation, write_dataset_csv
from errors import ConfigError, ContractViolation, DataError, LocalICLError
from evaluation import (
    EvalReport,
    ScoreTable,
    all_metrics,
    complexity_bins,
    knn_baseline_predict,
    score_auc,
    size_bins,
)
from model import (
    FeatureStats,
    ModelParams,
    embed_rows,
    fit_feature_stats,
    load_checkpoint,
    pad_rows,
    predict,
    predict_chunked,
    predict_ensemble,
    predict_local,
    save_checkpoint,
)
from retrieval import RetrievalIndex, build_index, k_rule
from run_registry import RunRegistry
from training import FinetuneData, TrainingLog, evaluate_prior, finetune, mode_probs, prior_fit

logger = logging.getLogger(__name__)

METHODS = ("icl_full", "icl_knn", "icl_ensemble", "icl_chunked", "knn_baseline")
SWEEP_COLUMNS = ["pairs", "k", "seed", "auc"]
TIMING_COLUMNS = ["dataset", "fold", "method", "wallclock_ms"]
SUMMARY_COLUMNS = ["dataset", "n_rows", "n_features", "n_classes"]


@dataclass
class Fold:
    """One seeded 80:10:10 split, embedded with training-split statistics."""

    dataset: str
    fold: int
    stats: FeatureStats
    index: RetrievalIndex
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    n_classes: int

    @property
    def n_train(self) -> int:
        return self.train_x.shape[0]

    def finetune_data(self) -> FinetuneData:
        return FinetuneData(self.stats, self.train_x, self.train_y, self.val_x, self.val_y, self.n_classes, self.index)


class ExperimentRunner:
    def __init__(self, config: ExperimentConfig, output_dir: Optional[Union[str, Path]] = None,
                 db_manager: Optional[DatabaseManager] = None):
        self.config = config
        self.output_dir = Path(output_dir or config.io.output_dir)
        self._db_manager = db_manager

    # ------------------------------------------------------------------
    # plumbing
    # ------------------------------------------------------------------

    def _manifest(self, command: str) -> RunManifest:
        return RunManifest(command=command, tool_version=TOOL_VERSION, config=self.config.snapshot())

    @contextmanager
    def _phase(self, manifest: RunManifest, name: str) -> Iterator[None]:
        started = time.perf_counter()
        try:
            yield
        finally:
            manifest.wallclock_ms[name] = round((time.perf_counter() - started) * 1000.0, 3)

    def _finish(self, manifest: RunManifest) -> Path:
        path = manifest.write(self.output_dir / "manifest.json")
        self._register(manifest)
        return path

    def _register(self, manifest: RunManifest, status: str = "completed", error: Optional[str] = None) -> None:
        if not self.config.io.register_runs:
            return
        manager = self._db_manager or get_db_manager()
        session = manager.get_session()
        try:
            RunRegistry(session).add_run(manifest, status=status, output_dir=str(self.output_dir), error=error)
        except SQLAlchemyError as e:
            logger.warning(f"Could not register {manifest.command} run: {e}")
        finally:
            manager.close_session(session)

    def _run(self, command: str, body: Callable[[RunManifest], None]) -> RunManifest:
        manifest = self._manifest(command)
        logger.info(f"Running {command} into {self.output_dir}")
        try:
            with self._phase(manifest, "total"):
                body(manifest)
        except LocalICLError as e:
            logger.error(f"❌ {command} failed: {e}")
            self._register(manifest, status="failed", error=str(e))
            raise
        self._finish(manifest)
        logger.info(f"✅ {command} completed in {manifest.wallclock_ms['total'] / 1000.0:.1f}s")
        return manifest

    def _seed(self, *keys) -> int:
        return derive_seed(self.config.seed, *keys)

    # ------------------------------------------------------------------
    # folds and methods
    # ------------------------------------------------------------------

    def prepare_fold(self, ds: Dataset, fold: int) -> Fold:
        train, val, test = split_dataset(ds, seed=self._seed("split", ds.name, fold))
        retrieval = self.config.retrieval
        stats = fit_feature_stats(train.features, train.cat_mask, retrieval.embedding == "one_hot",
                                  retrieval.one_hot_max_width)
        train_x = embed_rows(train.features, stats)
        return Fold(
            dataset=ds.name,
            fold=fold,
            stats=stats,
            index=build_index(train_x, "one_hot" if stats.one_hot else "raw"),
            train_x=train_x,
            train_y=train.labels,
            val_x=embed_rows(val.features, stats),
            val_y=val.labels,
            test_x=embed_rows(test.features, stats),
            test_y=test.labels,
            n_classes=ds.n_classes,
        )

    def _full_context(self, fold: Fold, d_max: int) -> Tuple[np.ndarray, np.ndarray]:
        """Training rows used as a single context, subsampled above eval.full_context_max."""
        ids = np.arange(fold.n_train)
        cap = self.config.eval.full_context_max
        if fold.n_train > cap:
            rng = np.random.default_rng(self._seed("full", fold.dataset, fold.fold))
            ids = np.sort(rng.choice(fold.n_train, cap, replace=False))
        return pad_rows(fold.train_x[ids], d_max), fold.train_y[ids]

    def method_probs(self, params: ModelParams, fold: Fold, method: str) -> np.ndarray:
        ev = self.config.eval
        d_max = params.config.d_max
        queries = pad_rows(fold.test_x, d_max)
        if method == "icl_full":
            ctx_x, ctx_y = self._full_context(fold, d_max)
            return predict(params, ctx_x, ctx_y, queries, fold.n_classes, ev.batch_size)
        if method == "icl_knn" or method.startswith("icl_knn@kmax="):
            k_max = self.config.retrieval.k_max if method == "icl_knn" else int(method.split("=", 1)[1])
            k = k_rule(fold.n_train, k_max)
            return predict_local(params, fold.index, fold.train_y, fold.test_x, k, fold.n_classes, ev.batch_size)
        if method == "icl_ensemble":
            ctx_x, ctx_y = self._full_context(fold, d_max)
            return predict_ensemble(params, ctx_x, ctx_y, queries, fold.n_classes, ev.ensemble_members,
                                    self._seed("ensemble", fold.dataset, fold.fold), ev.batch_size)
        if method == "icl_chunked":
            return predict_chunked(params, pad_rows(fold.train_x, d_max), fold.train_y, queries, fold.n_classes,
                                   ev.chunk_size, self._seed("chunks", fold.dataset, fold.fold), ev.batch_size)
        if method == "knn_baseline":
            k = min(ev.knn_baseline_k, fold.n_train)
            return knn_baseline_predict(fold.index, fold.train_y, fold.test_x, k, fold.n_classes)
        raise ConfigError(f"unknown method {method!r}; expected one of {self.expand_methods(METHODS)}")

    def expand_methods(self, methods: Sequence[str]) -> List[str]:
        """Requested methods plus one icl_knn variant per configured k_max sweep value."""
        expanded = list(dict.fromkeys(methods))
        if "icl_knn" in expanded:
            expanded += [f"icl_knn@kmax={k}" for k in self.config.eval.k_max_sweep]
        return expanded

    def _evaluate_dataset(self, params: ModelParams, ds: Dataset,
                          methods: List[str]) -> Tuple[List[tuple], List[Dict[str, object]]]:
        results, timings = [], []
        for fold_id in range(self.config.eval.folds):
            fold = self.prepare_fold(ds, fold_id)
            for method in methods:
                started = time.perf_counter()
                probs = self.method_probs(params, fold, method)
                elapsed = (time.perf_counter() - started) * 1000.0
                results.append((ds.name, fold_id, method, all_metrics(probs, fold.test_y)))
                timings.append({"dataset": ds.name, "fold": fold_id, "method": method,
                                "wallclock_ms": round(elapsed, 3)})
            logger.info(f"{ds.name} fold {fold_id}: "
                        + ", ".join(f"{m}={r[3]['auc']:.4f}" for m, r in zip(methods, results[-len(methods):])))
        return results, timings

    # ------------------------------------------------------------------
    # commands
    # ------------------------------------------------------------------

    def priorfit(self) -> RunManifest:
        cfg = self.config

        def body(manifest: RunManifest) -> None:
            log = TrainingLog(self.output_dir / "priorfit_log.csv")
            with self._phase(manifest, "prior_fit"):
                result = prior_fit(cfg.model, cfg.prior, cfg.prior_fit, log, seed=self._seed("prior_fit"))
            checkpoint = self.output_dir / "model.lcpf"
            save_checkpoint(result.params, checkpoint)
            manifest.add_file(checkpoint, "checkpoint")
            if log.path.exists():
                manifest.add_file(log.path, "log")
            manifest.notes["final_smoothed_loss"] = result.smoothed_loss(cfg.prior_fit.loss_window)
            if cfg.eval.prior_probe_tasks:
                with self._phase(manifest, "prior_probe"):
                    manifest.notes["prior_probe"] = evaluate_prior(
                        result.params, cfg.prior, cfg.eval.prior_probe_tasks, self._seed("probe"), cfg.eval.batch_size)

        return self._run("priorfit", body)

    def evaluate(self, checkpoint: Union[str, Path], datasets: Sequence[Dataset],
                 methods: Sequence[str] = METHODS) -> RunManifest:
        cfg = self.config
        methods = self.expand_methods(methods)
        for method in methods:
            if method not in METHODS and not method.startswith("icl_knn@kmax="):
                raise ConfigError(f"unknown method {method!r}; expected a subset of {list(METHODS)}")

        def body(manifest: RunManifest) -> None:
            params = load_checkpoint(checkpoint)
            manifest.notes["checkpoint"] = {"path": str(checkpoint), "sha256": file_sha256(checkpoint)}
            accepted, skipped = [], {}
            for ds in datasets:
                reason = model_constraint_violation(ds, params.config, cfg.retrieval.embedding == "one_hot",
                                                    cfg.retrieval.one_hot_max_width)
                if reason is None and np.min(ds.class_counts()[ds.class_counts() > 0]) < 3:
                    reason = "a class has fewer than 3 rows, so some split would miss it"
                if reason:
                    logger.warning(f"Skipping dataset {ds.name}: {reason}")
                    skipped[ds.name] = reason
                else:
                    accepted.append(ds)
            manifest.notes["skipped"] = skipped

            with self._phase(manifest, "evaluate"):
                outcomes = self._map_datasets(lambda ds: self._evaluate_dataset(params, ds, methods), accepted)

            report = EvalReport()
            timings: List[Dict[str, object]] = []
            for results, dataset_timings in outcomes:
                for name, fold, method, metrics in results:
                    report.extend(name, fold, method, metrics)
                timings.extend(dataset_timings)

            summary = pd.DataFrame([{"dataset": ds.name, "n_rows": ds.n_rows, "n_features": ds.n_features,
                                     "n_classes": ds.n_classes} for ds in accepted], columns=SUMMARY_COLUMNS)
            manifest.add_file(report.write_records(self.output_dir / "records.csv"), "records")
            manifest.add_file(write_csv(self.output_dir / "timings.csv", pd.DataFrame(timings, columns=TIMING_COLUMNS)),
                              "timings")
            manifest.add_file(write_csv(self.output_dir / "datasets.csv", summary), "datasets")
            if report.records:
                with self._phase(manifest, "aggregate"):
                    path = report.write_aggregates(self.output_dir / "aggregates.json", cfg.eval.bootstrap_resamples,
                                                   cfg.eval.alpha, self._seed("bootstrap"))
                manifest.add_file(path, "aggregates")

        return self._run("evaluate", body)

    def _map_datasets(self, fn: Callable[[Dataset], tuple], datasets: List[Dataset]) -> List[tuple]:
        """Datasets are independent; results come back in input order."""
        workers = min(settings.worker_count, len(datasets))
        if workers <= 1:
            return [fn(ds) for ds in datasets]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, datasets))

    def finetune(self, checkpoint: Union[str, Path], ds: Dataset, mode: Optional[str] = None,
                 fold: int = 0) -> RunManifest:
        cfg = self.config
        train_config = cfg.train if mode is None else cfg.train.model_copy(update={"mode": mode})
        mode = train_config.mode
        if mode == "prior_fit":
            raise ContractViolation("finetune mode must be one of finetune_local, finetune_random, finetune_exact")

        def body(manifest: RunManifest) -> None:
            params = load_checkpoint(checkpoint)
            manifest.notes["checkpoint"] = {"path": str(checkpoint), "sha256": file_sha256(checkpoint)}
            reason = model_constraint_violation(ds, params.config, cfg.retrieval.embedding == "one_hot",
                                                cfg.retrieval.one_hot_max_width)
            if reason:
                raise DataError(f"dataset {ds.name} cannot be fine-tuned on: {reason}")
            with self._phase(manifest, "prepare"):
                prepared = self.prepare_fold(ds, fold)
            report = EvalReport()
            with self._phase(manifest, "before"):
                report.extend(ds.name, fold, "icl_knn", all_metrics(self.method_probs(params, prepared, "icl_knn"),
                                                                    prepared.test_y))

            log = TrainingLog(self.output_dir / "finetune_log.csv")
            with self._phase(manifest, "finetune"):
                result = finetune(params, prepared.finetune_data(), train_config, cfg.retrieval.k_max, log,
                                  cfg.eval.batch_size, cfg.eval.full_context_max)
            with self._phase(manifest, "after"):
                k = k_rule(prepared.n_train, cfg.retrieval.k_max)
                probs = mode_probs(result.params, prepared.finetune_data(), mode, k, prepared.test_x,
                                   cfg.eval.batch_size, cfg.eval.full_context_max, self._seed("full", ds.name, fold))
                report.extend(ds.name, fold, mode, all_metrics(probs, prepared.test_y))
                if mode == "finetune_random":
                    # random-context fine-tuning followed by local-context prediction
                    report.extend(ds.name, fold, f"{mode}+knn",
                                  all_metrics(self.method_probs(result.params, prepared, "icl_knn"), prepared.test_y))

            out = self.output_dir / "finetuned.lcpf"
            save_checkpoint(result.params, out)
            manifest.add_file(out, "checkpoint")
            if log.path.exists():
                manifest.add_file(log.path, "log")
            manifest.add_file(report.write_records(self.output_dir / "finetune_metrics.csv"), "records")
            manifest.notes.update({
                "mode": mode,
                "initial_val_auc": result.initial_val_auc,
                "best_val_auc": result.best_val_auc,
                "steps": result.steps,
                "stopped_early": result.stopped_early,
            })

        return self._run("finetune", body)

    def circles_sweep(self, checkpoint: Union[str, Path], pairs: Sequence[int], ks: Sequence[int],
                      seeds: int = 25, n: int = 1000, noise_std: float = 0.01) -> RunManifest:
        """Test AUC of local contexts of each size k against the full context, per ring count."""

        def body(manifest: RunManifest) -> None:
            params = load_checkpoint(checkpoint)
            d_max = params.config.d_max
            batch_size = self.config.eval.batch_size
            rows = []
            with self._phase(manifest, "sweep"):
                for p in pairs:
                    for s in range(seeds):
                        ds = gen_circles(n, p, noise_std, self._seed("circles", p, s))
                        fold = self.prepare_fold(ds, s)
                        for k in ks:
                            probs = predict_local(params, fold.index, fold.train_y, fold.test_x,
                                                  min(k, fold.n_train), 2, batch_size)
                            rows.append({"pairs": p, "k": str(k), "seed": s, "auc": score_auc(probs, fold.test_y)})
                        ctx_x, ctx_y = self._full_context(fold, d_max)
                        probs = predict(params, ctx_x, ctx_y, pad_rows(fold.test_x, d_max), 2, batch_size)
                        rows.append({"pairs": p, "k": "full", "seed": s, "auc": score_auc(probs, fold.test_y)})
                    cell = [r["auc"] for r in rows if r["pairs"] == p and r["k"] == "full"]
                    logger.info(f"pairs={p}: mean full-context auc {np.mean(cell):.4f}")
            path = write_csv(self.output_dir / "sweep.csv", pd.DataFrame(rows, columns=SWEEP_COLUMNS))
            manifest.add_file(path, "sweep")

        return self._run("circles", body)

    def report(self, records_path: Union[str, Path], datasets_path: Optional[Union[str, Path]] = None,
               methods: Optional[Sequence[str]] = None) -> RunManifest:
        ev = self.config.eval

        def body(manifest: RunManifest) -> None:
            report = EvalReport.read_records(records_path)
            if not report.records:
                raise DataError(f"{records_path} holds no records")
            with self._phase(manifest, "aggregate"):
                manifest.add_file(report.write_aggregates(self.output_dir / "aggregates.json", ev.bootstrap_resamples,
                                                          ev.alpha, self._seed("bootstrap")), "aggregates")
            if datasets_path is None:
                return
            summary = pd.read_csv(datasets_path, dtype={"dataset": str})
            if list(summary.columns) != SUMMARY_COLUMNS:
                raise DataError(f"{datasets_path}: expected columns {SUMMARY_COLUMNS}")
            table = ScoreTable.from_report(report, dict(zip(summary["dataset"], summary["n_rows"])), methods)
            reference = ev.reference_method
            if reference not in table.methods:
                reference = table.methods[0]
                logger.warning(f"Reference method {ev.reference_method!r} has no scores; using {reference!r}")
            bins: Dict[str, object] = {"reference": reference,
                                       "size": size_bins(table, ev.size_edges, reference)}
            if len(table.auc) >= ev.complexity_bins:
                bins["complexity"] = complexity_bins(table, ev.complexity_bins, reference)
            else:
                logger.warning(f"{len(table.auc)} datasets are too few for {ev.complexity_bins} complexity bins")
                bins["complexity"] = None
            manifest.add_file(write_json(self.output_dir / "bins.json", bins), "bins")

        return self._run("report", body)

    def generate(self, spec: str, path: Optional[Union[str, Path]] = None) -> RunManifest:
        def body(manifest: RunManifest) -> None:
            ds = generate_from_spec(spec, self.config.prior, self.config.seed)
            out = Path(path) if path is not None else self.output_dir / f"{ds.name}.csv"
            manifest.add_file(write_dataset_csv(ds, out), "dataset")
            manifest.notes["generated"] = {"provenance": ds.provenance, "rows": ds.n_rows, "classes": ds.n_classes}

        return self._run("generate", body)
