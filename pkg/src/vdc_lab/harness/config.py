"""Run configuration: one JSON document, validated against a checked-in schema.

Unknown keys are rejected by the schema. Everything not given falls back to
``DEFAULTS``, and ``RunConfig.to_dict`` always returns the fully resolved
document, so a run is reproducible from (resolved config, seed) alone.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import math
import os
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import jsonschema
import numpy as np

from ..correction import CorrectionConfig
from ..diffusion import NoiseSchedule, make_schedule
from ..generator import SETUPS
from ..optimize import AugmentationPolicy, OptimizerConfig, default_policy
from ..steering import SteeringConfig
from ..toy.codec import ToyCodec, make_codec
from ..toy.denoiser import DenoiserConfig
from ..toy.tasks import EditTask, TASK_KINDS, make_class_conditions, make_task, make_world, training_world
from ..toy.world import GaussianMixtureWorld

SWEEP_AXES = ("p_fraction", "s", "K", "n_examples", "cg_setup")

DEFAULTS: dict[str, Any] = {
    "task": "shift",
    "task_magnitude": None,
    "world": {
        "weights": [0.25, 0.25, 0.25, 0.25],
        "n_detail": 3,
        "sigma": 0.3,
        "mean_scale": 1.5,
        "detail_scale": 1.5,
        "seed": 0,
        "detail_sigma": 0.05,
        "pixel_range": [-4.0, 4.0],
    },
    "codec": {"d_x": 16, "d_z": 8, "seed": 0},
    "schedule": {"T_train": 1000, "beta_start": 1e-4, "beta_end": 2e-2, "K": 100},
    "denoiser": {
        "N": 8,
        "d_c": 8,
        "hidden": 128,
        "depth": 3,
        "time_dim": 16,
        "d_pool": 16,
        "steps": 20000,
        "batch_size": 256,
        "lr": 1e-3,
        "cond_dropout": 0.5,
        "t_low_fraction": 0.5,
        "t_low_max": 200,
        "seed": 17,
        "class_seed": 0,
        "n_eval": 10000,
    },
    "optimizer": {
        "iterations": 200,
        "batch_size": 4,
        "lr_max": 5e-3,
        "lr_min": 1e-3,
        "p_fraction": 0.10,
        "s": 7.0,
        "direction": "remove",
        "augmentation": "default",
        "use_augmentation": True,
        "use_pixel_loss": True,
        "use_steering": True,
        "use_generator": True,
        "setup": "per-step-independent",
        "generator_hidden": 32,
        "n_freq": 6,
        "latent_weight": 1.0,
        "pixel_weight": 1.0,
    },
    "correction": {"enabled": False, "iterations": 200, "lr": 1e-2, "keep_best": True},
    "data": {"n_examples": 1, "n_heldout": 100, "example_seed_offset": 0, "heldout_seed": 999},
    "sweep": {},
    "seeds": [17, 23, 42],
    "out": None,
}


class ConfigError(ValueError):
    """The run config is malformed or internally inconsistent."""


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    return json.loads(resources.files("vdc_lab.schemas").joinpath(name).read_text())


def validate_document(doc: Any, schema_name: str) -> None:
    """Raise ``ConfigError`` listing every schema violation in ``doc``."""
    validator = jsonschema.Draft202012Validator(load_schema(schema_name))
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        lines = [f"{'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}" for e in errors]
        raise ConfigError(f"{schema_name} validation failed:\n  " + "\n  ".join(lines))


_CSV_PARSERS = {
    "int": int,
    "float": float,
    "str": str,
    "bool": lambda v: {"true": True, "false": False}[v],
}


def validate_csv(text: str, table: str) -> int:
    """Check header and cell types of a CSV output against ``csv_tables.json``; returns the row count."""
    spec = load_schema("csv_tables.json")[table]
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != spec["columns"]:
        raise ConfigError(f"{table}: header {rows[0] if rows else None} != {spec['columns']}")
    for n, row in enumerate(rows[1:], start=2):
        if len(row) != len(spec["columns"]):
            raise ConfigError(f"{table} line {n}: {len(row)} cells, expected {len(spec['columns'])}")
        for value, kind, col in zip(row, spec["types"], spec["columns"]):
            try:
                _CSV_PARSERS[kind](value)
            except (ValueError, KeyError):
                raise ConfigError(f"{table} line {n}: column {col} value {value!r} is not {kind}") from None
    return len(rows) - 1


def _merge(base: dict, override: Mapping) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict) and key != "sweep":
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass(frozen=True)
class RunConfig:
    doc: dict

    @classmethod
    def from_dict(cls, raw: Mapping | None = None) -> "RunConfig":
        raw = dict(raw or {})
        validate_document(raw, "run_config.schema.json")
        doc = _merge(DEFAULTS, raw)
        validate_document(doc, "run_config.schema.json")
        cfg = cls(doc)
        cfg._check()
        return cfg

    @classmethod
    def load(cls, path: str | os.PathLike | None) -> "RunConfig":
        if path is None:
            return cls.from_dict({})
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(raw)

    def _check(self) -> None:
        d = self.doc
        w = d["world"]
        if abs(math.fsum(w["weights"]) - 1.0) > 1e-12:
            raise ConfigError(f"world.weights must sum to 1, got {math.fsum(w['weights'])!r}")
        lo, hi = w["pixel_range"]
        if not hi > lo:
            raise ConfigError("world.pixel_range must be increasing")
        c = d["codec"]
        if c["d_x"] % 2 or c["d_z"] > c["d_x"]:
            raise ConfigError("codec needs an even d_x and d_z <= d_x")
        if not 0 <= w["n_detail"] <= min(c["d_z"], c["d_x"] // 2) or c["d_z"] - w["n_detail"] > c["d_x"] // 2:
            raise ConfigError("world.n_detail does not fit the codec dimensions")
        s = d["schedule"]
        if s["beta_start"] > s["beta_end"]:
            raise ConfigError("schedule.beta_start must not exceed beta_end")
        for K in [s["K"], *d["sweep"].get("K", [])]:
            if K > s["T_train"]:
                raise ConfigError(f"K={K} exceeds T_train={s['T_train']}")
        o = d["optimizer"]
        if o["lr_min"] > o["lr_max"]:
            raise ConfigError("optimizer.lr_min must not exceed lr_max")
        for setup in d["sweep"].get("cg_setup", []):
            if setup not in SETUPS:
                raise ConfigError(f"sweep.cg_setup: unknown setup {setup!r}")
        if d["task"] not in TASK_KINDS:
            raise ConfigError(f"unknown task {d['task']!r}")

    def to_dict(self) -> dict:
        return copy.deepcopy(self.doc)

    def with_overrides(self, **sections: Mapping) -> "RunConfig":
        """New config with the given sections merged in (``task=...`` for scalars)."""
        return RunConfig.from_dict(_merge(self.doc, sections))

    # builders -----------------------------------------------------------

    @property
    def seeds(self) -> list[int]:
        return list(self.doc["seeds"])

    @property
    def sweep_axes(self) -> dict[str, list]:
        return {k: list(self.doc["sweep"][k]) for k in SWEEP_AXES if k in self.doc["sweep"]}

    def schedule(self) -> NoiseSchedule:
        s = self.doc["schedule"]
        return make_schedule(s["T_train"], s["beta_start"], s["beta_end"], s["K"])

    def codec(self) -> ToyCodec:
        c = self.doc["codec"]
        return make_codec(c["d_x"], c["d_z"], self.doc["world"]["n_detail"], c["seed"])

    def world(self) -> GaussianMixtureWorld:
        w = self.doc["world"]
        return make_world(
            w["weights"], self.doc["codec"]["d_z"], w["n_detail"], w["sigma"], w["mean_scale"], w["detail_scale"], w["seed"]
        )

    def training_world(self) -> GaussianMixtureWorld:
        return training_world(self.world(), self.codec())

    def class_conditions(self) -> np.ndarray:
        dn = self.doc["denoiser"]
        n_content = len(self.doc["world"]["weights"])
        return make_class_conditions(n_content, dn["N"], dn["d_c"], dn["class_seed"], n_kinds=len(TASK_KINDS))

    def denoiser_config(self) -> DenoiserConfig:
        dn = {k: v for k, v in self.doc["denoiser"].items() if k not in ("class_seed", "n_eval")}
        return DenoiserConfig(d_z=self.doc["codec"]["d_z"], **dn)

    def task(self) -> EditTask:
        return make_task(self.doc["task"], self.doc["codec"]["d_x"], self.doc["task_magnitude"])

    def optimizer_config(self, seed: int) -> OptimizerConfig:
        o = self.doc["optimizer"]
        if o["augmentation"] == "default":
            policy = default_policy(self.task())
        else:
            policy = AugmentationPolicy(tuple(o["augmentation"]))
        return OptimizerConfig(
            iterations=o["iterations"],
            batch_size=o["batch_size"],
            lr_max=o["lr_max"],
            lr_min=o["lr_min"],
            p_fraction=o["p_fraction"],
            steering=SteeringConfig(o["s"], o["direction"]),
            augmentation=policy,
            use_augmentation=o["use_augmentation"],
            use_pixel_loss=o["use_pixel_loss"],
            use_steering=o["use_steering"],
            use_generator=o["use_generator"],
            setup=o["setup"],
            generator_hidden=o["generator_hidden"],
            n_freq=o["n_freq"],
            latent_weight=o["latent_weight"],
            pixel_weight=o["pixel_weight"],
            seed=seed,
        )

    def correction_config(self) -> CorrectionConfig | None:
        c = self.doc["correction"]
        if not c["enabled"]:
            return None
        return CorrectionConfig(iterations=c["iterations"], lr=c["lr"], keep_best=c["keep_best"])

    @property
    def pixel_peak(self) -> float:
        lo, hi = self.doc["world"]["pixel_range"]
        return float(hi - lo)


def cell_config(cfg: RunConfig, cell: Mapping[str, Any]) -> RunConfig:
    """Apply one sweep cell's axis values to a config."""
    opt, sched, data = {}, {}, {}
    for axis, value in cell.items():
        if axis == "p_fraction":
            opt["p_fraction"] = value
        elif axis == "s":
            opt["s"] = value
        elif axis == "cg_setup":
            opt["setup"] = value
        elif axis == "K":
            sched["K"] = value
        elif axis == "n_examples":
            data["n_examples"] = value
        else:
            raise ConfigError(f"unknown sweep axis {axis!r}")
    doc = _merge(cfg.doc, {"optimizer": opt, "schedule": sched, "data": data, "sweep": {}})
    return RunConfig.from_dict(doc)


__all__ = ["ConfigError", "DEFAULTS", "RunConfig", "SWEEP_AXES", "cell_config", "load_schema", "validate_csv", "validate_document"]
