"""Per-sample edit metrics and their aggregates."""

from __future__ import annotations

import csv
import io as _io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import io

SAMPLE_COLUMNS = ("index", "latent_mse", "pixel_mse", "psnr", "nfe")
AGGREGATED = ("latent_mse", "pixel_mse", "psnr")


def psnr(mse: float, peak: float) -> float:
    """10 log10(peak^2 / mse); infinite for a perfect match."""
    if mse < 0 or peak <= 0:
        raise ValueError("psnr needs mse >= 0 and peak > 0")
    return math.inf if mse == 0 else 10.0 * math.log10(peak * peak / mse)


def _fmt(x: float) -> str:
    return repr(float(x))


def _json_float(x: float):
    return float(x) if math.isfinite(x) else None


@dataclass
class MetricsReport:
    """Per-sample fidelity of an edit against ground-truth clean inputs.

    Wall-clock time is kept on the object but written to a separate timings
    file, so the CSV and JSON outputs stay byte-identical across reruns.
    """

    peak: float
    rows: list[dict] = field(default_factory=list)
    nfe_per_edit: int = 0
    label: str = "edit"
    wall_clock: float = 0.0
    loss_curve: list[float] = field(default_factory=list)

    @classmethod
    def from_arrays(cls, output, target, z_out, z_target, nfe_per_edit: int, peak: float, label: str = "edit") -> "MetricsReport":
        pix = ((np.asarray(output) - np.asarray(target)) ** 2).mean(axis=-1) if len(output) else np.zeros(0)
        lat = ((np.asarray(z_out) - np.asarray(z_target)) ** 2).mean(axis=-1) if len(z_out) else np.zeros(0)
        rows = [
            {"index": i, "latent_mse": float(lat[i]), "pixel_mse": float(pix[i]), "psnr": psnr(float(pix[i]), peak), "nfe": nfe_per_edit}
            for i in range(len(pix))
        ]
        return cls(peak, rows, nfe_per_edit, label)

    @property
    def n(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def aggregate(self) -> dict[str, dict[str, float | None]]:
        """Mean and population std of each metric, recomputed from the rows.

        PSNR aggregates skip infinite entries; empty reports give nulls.
        """
        out = {}
        for name in AGGREGATED:
            col = self.column(name)
            col = col[np.isfinite(col)]
            if col.size == 0:
                out[name] = {"mean": None, "std": None}
            else:
                out[name] = {"mean": float(col.mean()), "std": float(col.std())}
        return out

    def to_csv(self) -> str:
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SAMPLE_COLUMNS)
        for r in self.rows:
            w.writerow((r["index"], _fmt(r["latent_mse"]), _fmt(r["pixel_mse"]), _fmt(r["psnr"]), r["nfe"]))
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "label": self.label,
            "n": self.n,
            "peak": self.peak,
            "nfe_per_edit": self.nfe_per_edit,
            "nfe_total": self.nfe_per_edit * self.n,
            "aggregate": self.aggregate(),
            "loss_curve": [float(v) for v in self.loss_curve],
        }

    def write(self, directory: str | Path) -> dict[str, Path]:
        """``<label>_samples.csv``, ``<label>_report.json`` and ``<label>_timings.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {
            "samples": directory / f"{self.label}_samples.csv",
            "report": directory / f"{self.label}_report.json",
            "timings": directory / f"{self.label}_timings.json",
        }
        paths["samples"].write_text(self.to_csv())
        io.write_json(paths["report"], self.to_json())
        io.write_json(paths["timings"], {"wall_clock_seconds": self.wall_clock})
        return paths


def report_from_csv(text: str, peak: float, label: str = "edit") -> MetricsReport:
    """Rebuild a report from its per-sample CSV (used to check aggregates)."""
    rows = []
    for rec in csv.DictReader(_io.StringIO(text)):
        rows.append(
            {
                "index": int(rec["index"]),
                "latent_mse": float(rec["latent_mse"]),
                "pixel_mse": float(rec["pixel_mse"]),
                "psnr": float(rec["psnr"]),
                "nfe": int(rec["nfe"]),
            }
        )
    nfe = rows[0]["nfe"] if rows else 0
    return MetricsReport(peak, rows, nfe, label)
