"""Calibrated thresholds shipped with the package, and the run that produces them.

``python -m vdc_lab.calibration`` retrains the toy denoiser for the three
fixed seeds and rewrites ``calibration.json``:

* ``tau_model``: ceiling on the denoiser's per-coordinate eps MSE against the
  analytic oracle, 1.5x the worst of the three runs (conditional or not).
* ``correction_factor``: bound on corrected / naive reconstruction MSE, one
  decade above ten times the 95th percentile measured over 100 probes,
  capped at 0.5.
* ``one_shot_loss_ratio``: bound on final / initial training loss of the
  one-shot shift task, 1.25x the worst of the three seeds.
"""

from __future__ import annotations

import argparse
import json
import math
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path

import numpy as np

CALIBRATION_SEEDS = (17, 23, 42)
CORRECTION_PROBE_SEED = 2024
N_CORRECTION_PROBES = 100


def load_calibration() -> dict:
    text = resources.files("vdc_lab").joinpath("calibration.json").read_text()
    return json.loads(text)


def _round_up(x: float, digits: int = 2) -> float:
    if x <= 0:
        return x
    mag = 10 ** (math.floor(math.log10(x)) - digits + 1)
    return math.ceil(x / mag) * mag


def _train(seed: int, out_dir: str) -> dict:
    from .harness.config import RunConfig
    from .harness.experiment import train_denoiser

    cfg = RunConfig.from_dict({"denoiser": {"seed": seed}})
    net, _, scores = train_denoiser(cfg)
    net.save(Path(out_dir) / f"denoiser_{seed}")
    return scores


def correction_ratios(net, cfg) -> np.ndarray:
    """Corrected / naive reconstruction MSE for the fixed probe set at default settings."""
    from .correction import CorrectionConfig, correct_inversion

    sched = cfg.schedule()
    probes, _ = cfg.world().sample(N_CORRECTION_PROBES, np.random.default_rng(CORRECTION_PROBE_SEED))
    p = sched.path_index(cfg.doc["optimizer"]["p_fraction"])
    c = cfg.doc["correction"]
    res = correct_inversion(probes, p, net, net.null_condition(), sched, CorrectionConfig(c["iterations"], c["lr"], keep_best=True))
    return res.final_mse / res.initial_mse


def one_shot_ratios(net, cfg, task: str = "shift") -> dict[int, float]:
    from .harness.experiment import build_env, loss_ratio, optimize

    cfg = cfg.with_overrides(task=task)
    env = build_env(cfg, net)
    return {seed: loss_ratio(optimize(cfg, env, seed)[1]) for seed in CALIBRATION_SEEDS}


def run_calibration(work_dir: str | Path, workers: int = 3) -> dict:
    from .harness.config import RunConfig
    from .harness.experiment import load_denoiser

    work_dir = Path(work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)
    with ProcessPoolExecutor(max_workers=max(1, workers)) as pool:
        scores = dict(zip(CALIBRATION_SEEDS, pool.map(_train, CALIBRATION_SEEDS, [str(work_dir)] * 3)))
    worst = max(max(s["uncond"], s["cond"]) for s in scores.values())

    cfg = RunConfig.from_dict({})
    net = load_denoiser(work_dir / f"denoiser_{cfg.doc['denoiser']['seed']}")
    ratios = correction_ratios(net, cfg)
    q95 = float(np.quantile(ratios, 0.95))
    factor = min(0.5, 10.0 ** math.ceil(math.log10(10 * q95))) if q95 > 0 else 0.5

    shot = one_shot_ratios(net, cfg)
    return {
        "tau_model": _round_up(1.5 * worst),
        "correction_factor": factor,
        "one_shot_loss_ratio": _round_up(1.25 * max(shot.values())),
        "measurements": {
            "oracle_mse": {str(k): v for k, v in scores.items()},
            "correction_ratio_quantiles": {
                q: float(np.quantile(ratios, float(q))) for q in ("0.0", "0.5", "0.95", "1.0")
            },
            "one_shot_loss_ratio": {str(k): v for k, v in shot.items()},
        },
    }


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Recompute the calibrated thresholds.")
    parser.add_argument("--work-dir", default="calibration_runs", help="where the trained denoisers go")
    parser.add_argument("--out", default=None, help="calibration JSON to write (default: the packaged file)")
    parser.add_argument("--workers", type=int, default=3)
    args = parser.parse_args(argv)
    result = run_calibration(args.work_dir, args.workers)
    out = Path(args.out) if args.out else Path(__file__).with_name("calibration.json")
    out.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
