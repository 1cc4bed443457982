"""Experiment runners behind the CLI verbs, plus result-file writers.

Deterministic outputs (epochs.csv, report.json, pareto.csv, table.csv,
likelihood.csv) never contain timestamps or host information; wall-clock data
goes to the run_meta.json sidecar (timing.csv is the one product whose values
are wall-clock by definition).
"""

from __future__ import annotations

import csv
import json
import os
import platform
import time
from dataclasses import dataclass

import numpy as np

from .config import ConfigError, ExperimentConfig, LossSection
from .dataio import InteractionLog, SplitBundle, compute_signals, inject_noise, load_ratings, split_clean_test, split_implicit
from .evaluation import (
    DiagnosticsRow,
    aplt_at_k,
    likelihood_probe,
    ndcg_at_k,
    rank_topk,
    recall_at_k,
)
from .learning import TrainingDivergedError, TrainResult, load_checkpoint, save_checkpoint, train

SCHEMA_VERSION = 1

#: Pareto sweep protocol: exposure direction steps (positive side lambda1 up
#: 0..1 by 0.2 while lambda2 goes 1..0) paired with suppression steps
#: (negative side lambda1 up 0..0.5 by 0.1 while lambda2 goes 0.5..0,
#: hardness fixed at 0.5), and prior-strength levels c = 2..10 by 2.
SWEEP_DIRECTION_STEPS = 6
SWEEP_STRENGTHS = (2.0, 4.0, 6.0, 8.0, 10.0)
ROBUSTNESS_RATES = (0.05, 0.10)
SCALE_BAG_SIZES = (2, 4, 8, 16)

_LOG_CACHE: dict[tuple[str, str], InteractionLog] = {}


@dataclass
class RunReport:
    config: dict
    rows: list[DiagnosticsRow]
    final: dict
    epoch_seconds: list[float]


def derived_seed(seed: int, tag: int) -> int:
    """Stable child seed for a named sub-stream (split, noise, ...)."""
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


def load_log(cfg: ExperimentConfig) -> InteractionLog:
    key = (os.path.abspath(cfg.dataset.path), cfg.dataset.format)
    if key not in _LOG_CACHE:
        _LOG_CACHE[key] = load_ratings(cfg.dataset.path, cfg.dataset.format)
    return _LOG_CACHE[key]


def prepare_data(cfg: ExperimentConfig):
    """Load, split, optionally poison, and summarize the configured dataset."""
    log = load_log(cfg)
    seed = cfg.model.seed
    if cfg.dataset.split == "clean_test":
        bundle = split_clean_test(log, seed=derived_seed(seed, 1))
    else:
        bundle = split_implicit(log, cfg.dataset.test_fraction, seed=derived_seed(seed, 1))
    if cfg.noise.rate > 0.0:
        bundle = inject_noise(bundle, cfg.noise.rate, seed=derived_seed(seed, 2))
    signals = compute_signals(bundle, log)
    return log, bundle, signals


def _final_metrics(rows: list[DiagnosticsRow]) -> dict:
    if not rows:
        return {}
    last = rows[-1]
    return {
        "epoch": last.epoch,
        "loss": last.loss,
        "recall_k": last.recall_k,
        "ndcg_k": last.ndcg_k,
        "aplt_k": last.aplt_k,
        "likelihood": last.likelihood,
        "best_recall_k": max(r.recall_k for r in rows),
        "best_ndcg_k": max(r.ndcg_k for r in rows),
        "best_epoch_ndcg": max(rows, key=lambda r: r.ndcg_k).epoch,
    }


def run_train(cfg: ExperimentConfig) -> tuple[RunReport, TrainResult, SplitBundle]:
    """Train per config and return the report (files are written separately)."""
    _, bundle, signals = prepare_data(cfg)
    result = train(cfg.to_train_config(), bundle, signals, cfg.to_eval_settings())
    report = RunReport(
        config=cfg.to_dict(),
        rows=result.rows,
        final=_final_metrics(result.rows),
        epoch_seconds=result.epoch_seconds,
    )
    return report, result, bundle


# ---------------------------------------------------------------------------
# Writers


def _write_csv(path, header: list[str], rows: list[list[str]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def write_epochs_csv(path, rows: list[DiagnosticsRow]) -> None:
    _write_csv(path, DiagnosticsRow.csv_header(), [r.to_csv() for r in rows])


def write_report_json(path, report: RunReport) -> None:
    payload = {
        "schema_version": SCHEMA_VERSION,
        "config": report.config,
        "final": report.final,
        "rows": [dict(zip(DiagnosticsRow.csv_header(), r.to_csv())) for r in report.rows],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_sidecar(path, report: RunReport) -> None:
    meta = {
        "written_at_unix": time.time(),
        "hostname": platform.node(),
        "platform": platform.platform(),
        "epoch_seconds": report.epoch_seconds,
        "total_seconds": float(sum(report.epoch_seconds)),
    }
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _ensure_outdir(cfg: ExperimentConfig) -> str:
    out = cfg.output.directory
    os.makedirs(out, exist_ok=True)
    return out


def cmd_train(cfg: ExperimentConfig) -> str:
    """`train` verb: writes epochs.csv, report.json, checkpoint.bin, run_meta.json."""
    out = _ensure_outdir(cfg)
    report, result, _ = run_train(cfg)
    write_epochs_csv(os.path.join(out, "epochs.csv"), report.rows)
    write_report_json(os.path.join(out, "report.json"), report)
    save_checkpoint(os.path.join(out, "checkpoint.bin"), result.model, cfg.to_dict())
    write_sidecar(os.path.join(out, "run_meta.json"), report)
    return out


def cmd_evaluate(cfg: ExperimentConfig, checkpoint_path: str) -> str:
    """`evaluate` verb: metrics of a stored checkpoint on the configured split."""
    out = _ensure_outdir(cfg)
    model, _ = load_checkpoint(checkpoint_path)
    _, bundle, signals = prepare_data(cfg)
    if model.num_users != bundle.user_count or model.num_items != bundle.item_count:
        raise ValueError(
            f"checkpoint shape ({model.num_users} users, {model.num_items} items) "
            f"does not match dataset ({bundle.user_count}, {bundle.item_count})"
        )
    settings = cfg.to_eval_settings()
    lists = rank_topk(model, bundle, settings.k)
    rng = np.random.default_rng(derived_seed(cfg.model.seed, 3))
    like = likelihood_probe(model, bundle, settings.likelihood_samples, rng)
    final = {
        "recall_k": recall_at_k(lists, bundle.test_positives),
        "ndcg_k": ndcg_at_k(lists, bundle.test_positives),
        "aplt_k": aplt_at_k(lists, signals),
        "likelihood": like.mean,
        "log_likelihood": like.log_mean,
    }
    report = RunReport(config=cfg.to_dict(), rows=[], final=final, epoch_seconds=[])
    write_report_json(os.path.join(out, "report.json"), report)
    write_sidecar(os.path.join(out, "run_meta.json"), report)
    return out


# ---------------------------------------------------------------------------
# Sweep


def sweep_lambdas(step: int) -> tuple[tuple[float, float], tuple[float, float]]:
    """Direction step -> ((lambda1+, lambda2+), (lambda1-, lambda2-))."""
    if not 0 <= step < SWEEP_DIRECTION_STEPS:
        raise ValueError(f"direction step must be in [0, {SWEEP_DIRECTION_STEPS})")
    t = step / (SWEEP_DIRECTION_STEPS - 1)
    return (round(t, 10), round(1.0 - t, 10)), (round(0.5 * t, 10), round(0.5 - 0.5 * t, 10))


PARETO_HEADER = [
    "pos_direction",
    "neg_direction",
    "strength",
    "lambda1_pos",
    "lambda2_pos",
    "lambda3_pos",
    "lambda1_neg",
    "lambda2_neg",
    "lambda3_neg",
    "recall_k",
    "ndcg_k",
    "aplt_k",
    "status",
]


def run_sweep(cfg: ExperimentConfig, direction_grid: bool = False) -> list[dict]:
    """Direction-strength sweep; one row per cell, failures marked not fatal."""
    base_loss = cfg.loss
    if direction_grid:
        directions = [(p, q) for p in range(SWEEP_DIRECTION_STEPS) for q in range(SWEEP_DIRECTION_STEPS)]
    else:
        directions = [(t, t) for t in range(SWEEP_DIRECTION_STEPS)]
    rows = []
    for pos_step, neg_step in directions:
        (l1p, l2p), _ = sweep_lambdas(pos_step)
        _, (l1n, l2n) = sweep_lambdas(neg_step)
        for strength in SWEEP_STRENGTHS:
            loss = LossSection(
                kind="varbpr",
                m=base_loss.m,
                n=base_loss.n,
                c_pos=strength,
                c_neg=strength,
                tau=base_loss.tau,
                lambda_pos=(l1p, l2p, base_loss.lambda_pos[2]),
                lambda_neg=(l1n, l2n, 0.5),
            )
            cell = cfg.replace(loss=loss)
            record = {
                "pos_direction": pos_step,
                "neg_direction": neg_step,
                "strength": strength,
                "lambda1_pos": l1p,
                "lambda2_pos": l2p,
                "lambda3_pos": base_loss.lambda_pos[2],
                "lambda1_neg": l1n,
                "lambda2_neg": l2n,
                "lambda3_neg": 0.5,
            }
            try:
                report, _, _ = run_train(cell)
                record.update(
                    recall_k=report.final.get("recall_k", float("nan")),
                    ndcg_k=report.final.get("ndcg_k", float("nan")),
                    aplt_k=report.final.get("aplt_k", float("nan")),
                    status="ok",
                )
            except TrainingDivergedError as exc:
                record.update(recall_k=float("nan"), ndcg_k=float("nan"), aplt_k=float("nan"), status=f"failed: {exc}")
            rows.append(record)
    return rows


def cmd_sweep(cfg: ExperimentConfig, direction_grid: bool = False) -> str:
    out = _ensure_outdir(cfg)
    rows = run_sweep(cfg, direction_grid=direction_grid)
    csv_rows = [[repr(r[h]) if isinstance(r[h], float) else str(r[h]) for h in PARETO_HEADER] for r in rows]
    _write_csv(os.path.join(out, "pareto.csv"), PARETO_HEADER, csv_rows)
    return out


# ---------------------------------------------------------------------------
# Ablation


ABLATION_VARIANTS = ("full", "no_prior", "no_vi", "no_plugin")
TABLE_HEADER = ["variant", "recall_k", "ndcg_k", "aplt_k"]


def run_ablate(cfg: ExperimentConfig) -> list[dict]:
    """Full model plus the uniform-prior, uniform-posterior, and double-sum variants."""
    rows = []
    for variant in ABLATION_VARIANTS:
        cell = cfg
        uniform_posteriors = False
        if variant == "no_prior":
            loss = LossSection(**{**cfg.loss.__dict__, "lambda_pos": (0.0, 0.0, 0.0), "lambda_neg": (0.0, 0.0, 0.0)})
            cell = cfg.replace(loss=loss)
        elif variant == "no_vi":
            uniform_posteriors = True
        elif variant == "no_plugin":
            loss = LossSection(**{**cfg.loss.__dict__, "kind": "varbpr_elbo"})
            cell = cfg.replace(loss=loss)
        _, bundle, signals = prepare_data(cell)
        tc = cell.to_train_config()
        tc.uniform_posteriors = uniform_posteriors
        result = train(tc, bundle, signals, cell.to_eval_settings())
        final = _final_metrics(result.rows)
        rows.append(
            {
                "variant": variant,
                "recall_k": final.get("recall_k", float("nan")),
                "ndcg_k": final.get("ndcg_k", float("nan")),
                "aplt_k": final.get("aplt_k", float("nan")),
            }
        )
    return rows


def cmd_ablate(cfg: ExperimentConfig) -> str:
    out = _ensure_outdir(cfg)
    rows = run_ablate(cfg)
    csv_rows = [[r["variant"], repr(r["recall_k"]), repr(r["ndcg_k"]), repr(r["aplt_k"])] for r in rows]
    _write_csv(os.path.join(out, "table.csv"), TABLE_HEADER, csv_rows)
    return out


# ---------------------------------------------------------------------------
# Robustness


LIKELIHOOD_HEADER = ["loss", "rate", "epoch", "likelihood"]


def run_robustness(cfg: ExperimentConfig, rates: tuple[float, ...] = ROBUSTNESS_RATES) -> list[dict]:
    """Likelihood trajectories for bpr and varbpr at each noise rate."""
    rows = []
    for rate in rates:
        for kind in ("bpr", "varbpr"):
            loss = LossSection(**{**cfg.loss.__dict__, "kind": kind})
            if kind == "bpr":
                loss.m = loss.n = 1
            cell = cfg.replace(loss=loss, noise=type(cfg.noise)(rate=rate))
            report, _, _ = run_train(cell)
            for row in report.rows:
                rows.append({"loss": kind, "rate": rate, "epoch": row.epoch, "likelihood": row.likelihood})
    return rows


def cmd_robustness(cfg: ExperimentConfig, rates: tuple[float, ...] = ROBUSTNESS_RATES) -> str:
    if cfg.dataset.split != "clean_test":
        raise ConfigError("robustness requires the clean_test split (rating dataset)")
    out = _ensure_outdir(cfg)
    rows = run_robustness(cfg, rates)
    csv_rows = [[r["loss"], repr(float(r["rate"])), str(r["epoch"]), repr(float(r["likelihood"]))] for r in rows]
    _write_csv(os.path.join(out, "likelihood.csv"), LIKELIHOOD_HEADER, csv_rows)
    return out


# ---------------------------------------------------------------------------
# Scaling


TIMING_HEADER = ["loss", "m", "n", "m_plus_n", "epochs_timed", "mean_seconds_per_epoch"]


def run_scale(cfg: ExperimentConfig, bag_sizes: tuple[int, ...] = SCALE_BAG_SIZES) -> list[dict]:
    """Wall-clock per epoch for each bag size, plus a pure-bpr reference row."""
    _, bundle, signals = prepare_data(cfg)
    rows = []

    def _timed(kind: str, m: int, n: int) -> dict:
        tc = cfg.to_train_config()
        tc.loss = kind
        tc.m, tc.n = m, n
        result = train(tc, bundle, signals, eval_settings=None)
        return {
            "loss": kind,
            "m": m,
            "n": n,
            "m_plus_n": m + n,
            "epochs_timed": len(result.epoch_seconds),
            "mean_seconds_per_epoch": float(np.mean(result.epoch_seconds)),
        }

    rows.append(_timed("bpr", 1, 1))
    for size in bag_sizes:
        m = size // 2 + size % 2
        n = size // 2
        rows.append(_timed("varbpr", m, n))
    return rows


def cmd_scale(cfg: ExperimentConfig, bag_sizes: tuple[int, ...] = SCALE_BAG_SIZES) -> str:
    out = _ensure_outdir(cfg)
    rows = run_scale(cfg, bag_sizes)
    csv_rows = [
        [r["loss"], str(r["m"]), str(r["n"]), str(r["m_plus_n"]), str(r["epochs_timed"]), repr(r["mean_seconds_per_epoch"])]
        for r in rows
    ]
    _write_csv(os.path.join(out, "timing.csv"), TIMING_HEADER, csv_rows)
    return out
