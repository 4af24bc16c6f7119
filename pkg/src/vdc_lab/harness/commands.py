"""The five harness commands. Each writes only under its output directory and
finishes by writing ``manifest.json`` with the sha256 of every artifact."""

from __future__ import annotations

import csv
import io as _io
import itertools
import json
import logging
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .. import io
from ..calibration import load_calibration
from ..generator import ConditionStack, dump_conditions
from ..optimize import new_stack
from .config import SWEEP_AXES, RunConfig, cell_config, validate_document
from .experiment import (
    build_env,
    evaluate,
    example_pairs,
    heldout_set,
    load_denoiser,
    loss_ratio,
    optimize,
    train_denoiser,
)
from .metrics import MetricsReport

log = logging.getLogger(__name__)

SWEEP_COLUMNS = (
    "cell",
    "seed",
    *SWEEP_AXES,
    "edit_pixel_mse",
    "baseline_pixel_mse",
    "edit_latent_mse",
    "edit_psnr",
    "win_rate",
    "variation",
    "distance_to_input",
    "nfe_per_edit",
    "final_loss",
    "n_params",
)
AXIS_TABLE_COLUMNS = ("value", "n_runs", "edit_pixel_mse", "edit_psnr", "variation", "distance_to_input", "win_rate", "best")
TRAIN_LOSS_COLUMNS = ("step", "loss")


class CalibrationFailure(RuntimeError):
    """The trained denoiser misses the oracle-agreement ceiling."""


class SweepError(RuntimeError):
    def __init__(self, failures: dict[str, str]):
        self.failures = failures
        super().__init__(f"{len(failures)} sweep unit(s) failed: {', '.join(sorted(failures))}")


def write_manifest(out: Path) -> Path:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p != out / "manifest.json")
    entries = {p.relative_to(out).as_posix(): io.sha256_file(p) for p in files}
    return io.write_json(out / "manifest.json", {"files": entries})


def _prepare(out: str | os.PathLike | None, cfg: RunConfig) -> Path:
    out = out or cfg.doc["out"]
    if out is None:
        raise ValueError("no output directory: pass --out or set 'out' in the config")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(out / "config.json", cfg.to_dict())
    return out


def _csv(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


# train-toy ---------------------------------------------------------------


def cmd_train_toy(cfg: RunConfig, out=None) -> dict:
    """Train the toy denoiser, score it against the oracle, write bundle and calibration record."""
    out = _prepare(out, cfg)
    tau = load_calibration()["tau_model"]
    t0 = time.perf_counter()
    net, history, scores = train_denoiser(cfg)
    elapsed = time.perf_counter() - t0
    passed = max(scores["uncond"], scores["cond"]) <= tau
    record = {
        "denoiser_seed": cfg.doc["denoiser"]["seed"],
        "oracle_mse": scores,
        "tau_model": tau,
        "passed": passed,
        "n_eval": cfg.doc["denoiser"]["n_eval"],
    }
    net.save(out / "denoiser", {"oracle_mse": scores, "tau_model": tau, "class_seed": cfg.doc["denoiser"]["class_seed"]})
    io.write_json(out / "calibration_record.json", record)
    (out / "train_loss.csv").write_text(_csv(TRAIN_LOSS_COLUMNS, [(i, _num(v)) for i, v in enumerate(history)]))
    io.write_json(out / "timings.json", {"train_seconds": elapsed})
    write_manifest(out)
    if not passed:
        raise CalibrationFailure(f"oracle MSE {scores} exceeds the calibrated ceiling tau_model={tau}")
    return record


# optimize ----------------------------------------------------------------


def cmd_optimize(cfg: RunConfig, denoiser_path, out=None) -> dict[int, Path]:
    """Run the condition optimization for every seed in the config."""
    net = load_denoiser(denoiser_path)
    env = build_env(cfg, net)
    # fail on unsupported setups before any compute
    new_stack(net, env.sched, cfg.optimizer_config(cfg.seeds[0]))
    out = _prepare(out, cfg)
    written, timings = {}, {}
    for seed in cfg.seeds:
        d = out / f"seed_{seed}"
        pairs = example_pairs(cfg, env, seed)
        t0 = time.perf_counter()
        stack, train_log = optimize(cfg, env, seed, pairs)
        timings[str(seed)] = time.perf_counter() - t0
        stack.save(d / "stack")
        (d / "loss.csv").write_text(train_log.to_csv())
        io.save_bundle(
            d / "examples",
            {"before": np.stack([p.R_B for p in pairs]), "after": np.stack([p.R_A for p in pairs])},
            {"kind": "example-pairs", "task": cfg.doc["task"], "seed": seed},
        )
        dump_conditions(stack, d / "conditions")
        io.write_json(d / "summary.json", {"seed": seed, "n_examples": len(pairs), "loss_ratio": loss_ratio(train_log), "n_params": stack.n_params})
        written[seed] = d
    io.write_json(out / "timings.json", {"optimize_seconds": timings})
    write_manifest(out)
    return written


# edit --------------------------------------------------------------------


def _load_inputs(path, env) -> tuple[np.ndarray, np.ndarray]:
    tensors, _ = io.load_bundle(path)
    if "before" not in tensors or "after" not in tensors:
        raise ValueError(f"input bundle {path} needs 'before' and 'after' tensors")
    before = tensors["before"].reshape(-1, env.codec.d_x)
    after = tensors["after"].reshape(-1, env.codec.d_x)
    return before, after


def cmd_edit(cfg: RunConfig, denoiser_path, stack_path=None, inputs_path=None, out=None, baseline: bool = False) -> dict[str, MetricsReport]:
    """Apply a stack (zero stack when ``stack_path`` is None) to an input set and report metrics.

    With ``baseline`` the zero-stack reconstruction is reported alongside.
    Inputs default to the config's held-out set.
    """
    net = load_denoiser(denoiser_path)
    env = build_env(cfg, net)
    opt = cfg.optimizer_config(cfg.seeds[0])
    correction = cfg.correction_config()
    stack = ConditionStack.load(stack_path) if stack_path is not None else None
    before, after = _load_inputs(inputs_path, env) if inputs_path is not None else heldout_set(cfg, env)
    out = _prepare(out, cfg)
    reports = {}
    runs = [("edit", stack)] + ([("baseline", None)] if baseline and stack is not None else [])
    for label, st in runs:
        outcome = evaluate(st, before, after, env, opt, correction, label=label)
        paths = outcome.report.write(out)
        validate_document(json.loads(paths["report"].read_text()), "metrics_report.schema.json")
        io.write_tensor(out / f"{label}_outputs.vdct", outcome.output)
        reports[label] = outcome.report
    write_manifest(out)
    return reports


# sweep -------------------------------------------------------------------


def sweep_cells(cfg: RunConfig) -> list[dict[str, Any]]:
    axes = cfg.sweep_axes
    if not axes:
        raise ValueError("sweep needs at least one axis under 'sweep'")
    names = list(axes)
    return [dict(zip(names, combo)) for combo in itertools.product(*(axes[n] for n in names))]


def _unit_dir(out: Path, cell: int, seed: int) -> Path:
    return out / "cells" / f"cell_{cell:03d}_seed_{seed}"


def run_sweep_unit(doc: dict, cell_index: int, cell: dict, seed: int, denoiser_path: str, out: str) -> dict:
    """One (cell, seed) run; writes its own directory and returns the table row."""
    cfg = cell_config(RunConfig.from_dict(doc), cell)
    env = build_env(cfg, load_denoiser(denoiser_path))
    opt = cfg.optimizer_config(seed)
    t0 = time.perf_counter()
    stack, train_log = optimize(cfg, env, seed)
    before, after = heldout_set(cfg, env)
    edited = evaluate(stack, before, after, env, opt)
    base = evaluate(None, before, after, env, opt, label="baseline")
    e, b = edited.report.column("pixel_mse"), base.report.column("pixel_mse")
    row = {
        "cell": cell_index,
        "seed": seed,
        "p_fraction": opt.p_fraction,
        "s": opt.steering.s,
        "K": env.sched.K,
        "n_examples": cfg.doc["data"]["n_examples"],
        "cg_setup": opt.setup,
        "edit_pixel_mse": float(e.mean()) if e.size else float("nan"),
        "baseline_pixel_mse": float(b.mean()) if b.size else float("nan"),
        "edit_latent_mse": edited.report.aggregate()["latent_mse"]["mean"],
        "edit_psnr": edited.report.aggregate()["psnr"]["mean"],
        "win_rate": float((e < b).mean()) if e.size else float("nan"),
        "variation": float(np.linalg.norm(edited.output - base.output, axis=-1).mean()) if e.size else float("nan"),
        "distance_to_input": float(np.linalg.norm(edited.output - before, axis=-1).mean()) if e.size else float("nan"),
        "nfe_per_edit": edited.report.nfe_per_edit,
        "final_loss": float(train_log.totals[-1]) if train_log.rows else float("nan"),
        "n_params": stack.n_params,
    }
    d = _unit_dir(Path(out), cell_index, seed)
    d.mkdir(parents=True, exist_ok=True)
    (d / "loss.csv").write_text(train_log.to_csv())
    io.write_json(d / "timings.json", {"seconds": time.perf_counter() - t0})
    io.write_json(d / "row.json", _finite_or_null(row))
    return row


def _finite_or_null(obj):
    if isinstance(obj, dict):
        return {k: _finite_or_null(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite_or_null(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def _row_from_json(path: Path) -> dict:
    rec = json.loads(path.read_text())
    return {k: (float("nan") if v is None else v) for k, v in rec.items()}


def summarize(rows: list[dict], axes: dict[str, list]) -> tuple[dict, dict[str, str]]:
    """Per-axis trend tables (means over seeds and other axes) and the best cell."""
    summary: dict[str, Any] = {"axes": {}, "best_cell": None}
    tables = {}
    for axis, values in axes.items():
        entries = []
        for v in values:
            sel = [r for r in rows if r[axis] == v]
            if not sel:
                continue
            mean = lambda key: float(np.mean([r[key] for r in sel]))  # noqa: E731
            entries.append(
                {
                    "value": v,
                    "n_runs": len(sel),
                    "edit_pixel_mse": mean("edit_pixel_mse"),
                    "edit_psnr": mean("edit_psnr"),
                    "variation": mean("variation"),
                    "distance_to_input": mean("distance_to_input"),
                    "win_rate": mean("win_rate"),
                }
            )
        finite = [e for e in entries if np.isfinite(e["edit_pixel_mse"])]
        best = min(finite, key=lambda e: e["edit_pixel_mse"])["value"] if finite else None
        for e in entries:
            e["best"] = e["value"] == best
        summary["axes"][axis] = {"fidelity_optimal": best, "rows": entries}
        tables[axis] = _csv(AXIS_TABLE_COLUMNS, [[_num(e[c]) for c in AXIS_TABLE_COLUMNS] for e in entries])
    by_cell: dict[int, list[dict]] = {}
    for r in rows:
        by_cell.setdefault(r["cell"], []).append(r)
    scored = [(float(np.mean([r["edit_pixel_mse"] for r in rs])), c) for c, rs in sorted(by_cell.items())]
    scored = [s for s in scored if np.isfinite(s[0])]
    if scored:
        score, c = min(scored)
        first = by_cell[c][0]
        summary["best_cell"] = {"cell": c, "edit_pixel_mse": score, **{a: first[a] for a in SWEEP_AXES}}
    return summary, tables


def cmd_sweep(cfg: RunConfig, denoiser_path, out=None, threads: int | None = None) -> dict:
    """Cartesian product of the configured axes times seeds, one table row per unit."""
    cells = sweep_cells(cfg)
    denoiser_path = str(Path(denoiser_path).resolve())
    net = load_denoiser(denoiser_path)
    build_env(cfg, net)
    for cell in cells:  # reject bad cells (e.g. unsupported setups) before any compute
        cc = cell_config(cfg, cell)
        new_stack(net, cc.schedule(), cc.optimizer_config(0))
    out = _prepare(out, cfg)
    threads = threads if threads is not None else worker_count()
    units = [(i, cell, seed) for i, cell in enumerate(cells) for seed in cfg.seeds]
    failures: dict[str, str] = {}
    t0 = time.perf_counter()

    def record_failure(i, seed, exc):
        d = _unit_dir(out, i, seed)
        d.mkdir(parents=True, exist_ok=True)
        msg = "".join(traceback.format_exception_only(type(exc), exc)).strip()
        io.write_json(d / "error.json", {"cell": i, "seed": seed, "error": msg})
        failures[d.name] = msg

    if threads <= 1:
        for i, cell, seed in units:
            try:
                run_sweep_unit(cfg.doc, i, cell, seed, denoiser_path, str(out))
            except Exception as exc:  # isolate the cell, keep going
                record_failure(i, seed, exc)
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = [(i, seed, pool.submit(run_sweep_unit, cfg.doc, i, cell, seed, denoiser_path, str(out))) for i, cell, seed in units]
            for i, seed, fut in futures:
                try:
                    fut.result()
                except Exception as exc:
                    record_failure(i, seed, exc)

    # deterministic merge in unit order, from what each unit flushed to disk
    rows = [_row_from_json(_unit_dir(out, i, s) / "row.json") for i, _, s in units if (_unit_dir(out, i, s) / "row.json").is_file()]
    table = _csv(SWEEP_COLUMNS, [[_num(r[c]) for c in SWEEP_COLUMNS] for r in rows])
    (out / "sweep.csv").write_text(table)
    summary, tables = summarize(rows, cfg.sweep_axes)
    summary["n_units"] = len(units)
    summary["n_failed"] = len(failures)
    summary = _finite_or_null(summary)
    io.write_json(out / "sweep_summary.json", summary)
    validate_document(summary, "sweep_summary.schema.json")
    (out / "tables").mkdir(exist_ok=True)
    for axis, text in tables.items():
        (out / "tables" / f"{axis}.csv").write_text(text)
    io.write_json(out / "timings.json", {"sweep_seconds": time.perf_counter() - t0, "workers": threads})
    write_manifest(out)
    if failures:
        raise SweepError(failures)
    return summary


def worker_count() -> int:
    raw = os.environ.get("VDC_LAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"VDC_LAB_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"VDC_LAB_THREADS must be a positive integer, got {raw!r}")
    return n


# dump-conditions ---------------------------------------------------------


def cmd_dump_conditions(stack_path, out) -> list[Path]:
    if out is None:
        raise ValueError("dump-conditions needs --out")
    stack = ConditionStack.load(stack_path)
    out = Path(out)
    paths = dump_conditions(stack, out)
    write_manifest(out)
    return paths
