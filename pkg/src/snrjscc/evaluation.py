"""PSNR sweeps, noisy-estimate robustness runs, multi-user broadcast and reports.

Every random draw is keyed by ``(seed, point, realization, image_id, stream)``
so a row depends only on its inputs, not on batch size or evaluation order.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from snrjscc.channel import (
    complex_noise,
    derive_seed,
    estimate_variance_from_pilots,
    make_pilots,
    perturb_snr_estimate,
    snr_to_variance,
    transmit_pilots,
)
from snrjscc.data import batches
from snrjscc.model import JSCC, config_digest, file_digest, load_checkpoint

PSNR_CAP = 100.0
PILOT_MODES = ("oracle", "noisy_oracle", "pilot")

_CHANNEL, _ESTIMATE, _PILOT = 0, 1, 2


class AlignmentError(ValueError):
    pass


def psnr(x: np.ndarray, x_hat: np.ndarray, max_value: float = 1.0) -> np.ndarray:
    """Per-image PSNR in dB; identical images are capped at 100 dB."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    if max_value <= 0:
        raise ValueError("max_value must be positive")
    mse = ((x - x_hat) ** 2).reshape(len(x), -1).mean(axis=1)
    with np.errstate(divide="ignore"):
        out = 10.0 * np.log10(max_value**2 / mse)
    return np.minimum(out, PSNR_CAP)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class EvalRow:
    model_id: str
    bandwidth_ratio: str
    test_snr: float
    estimation_noise_variance: float
    mode: str
    mean_psnr: float
    std_psnr: float
    num_images: int
    seed: int


COLUMNS = [f for f in EvalRow.__dataclass_fields__]


@dataclass
class EvalReport:
    rows: list[EvalRow]
    provenance: dict = field(default_factory=dict)

    def snr_grid(self) -> list[float]:
        return sorted({r.test_snr for r in self.rows})

    def to_tsv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in asdict(r).values()])
        return buf.getvalue()

    def write(self, path: str | Path) -> Path:
        """Write ``path`` (tab-separated table) and ``path.json`` (provenance sidecar)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_tsv())
        sidecar = path.with_name(path.name + ".json")
        sidecar.write_text(json.dumps(self.provenance, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path: str | Path) -> "EvalReport":
        path = Path(path)
        with open(path, newline="") as f:
            reader = csv.DictReader(f, delimiter="\t")
            rows = []
            for d in reader:
                rows.append(
                    EvalRow(
                        d["model_id"],
                        d["bandwidth_ratio"],
                        float(d["test_snr"]),
                        float(d["estimation_noise_variance"]),
                        d["mode"],
                        float(d["mean_psnr"]),
                        float(d["std_psnr"]),
                        int(d["num_images"]),
                        int(d["seed"]),
                    )
                )
        sidecar = path.with_name(path.name + ".json")
        prov = json.loads(sidecar.read_text()) if sidecar.exists() else {}
        return cls(rows, prov)

    def lookup(self, model_id: str | None = None, **match) -> list[EvalRow]:
        out = [r for r in self.rows if model_id is None or r.model_id == model_id]
        for k, v in match.items():
            out = [r for r in out if getattr(r, k) == v]
        return out


# ---------------------------------------------------------------------------
# transmission core
# ---------------------------------------------------------------------------


def _channel_noise(ids: np.ndarray, k: int, variance: float, key: tuple[int, ...]) -> torch.Tensor:
    rows = []
    for i in ids:
        g = torch.Generator().manual_seed(derive_seed(*key, int(i), _CHANNEL))
        rows.append(complex_noise((k,), variance, g))
    return torch.stack(rows)


def _estimated_variances(
    ids: np.ndarray,
    snr_db: float,
    mode: str,
    est_noise_var: float,
    key: tuple[int, ...],
    pilots: torch.Tensor | None,
) -> np.ndarray:
    true_var = snr_to_variance(snr_db)
    if mode == "oracle":
        return np.full(len(ids), true_var)
    out = np.empty(len(ids))
    for j, i in enumerate(ids):
        if mode == "noisy_oracle":
            out[j] = perturb_snr_estimate(snr_db, est_noise_var, [*key, int(i), _ESTIMATE]).derived_variance
        else:
            block = transmit_pilots(pilots, true_var, seed=(*key, int(i), _PILOT))
            out[j] = estimate_variance_from_pilots(block)
    return out


@torch.no_grad()
def _psnr_at_points(
    model: JSCC,
    images: np.ndarray,
    points: Sequence[tuple[float, float]],
    mode: str,
    seed: int,
    batch_size: int = 256,
    noise_realizations: int = 1,
    pilot_length: int = 64,
    channel_off: bool = False,
) -> list[np.ndarray]:
    """Per-image PSNR (averaged over realizations) for each ``(snr_db, est_noise_var)`` point.

    One encoder pass per batch is shared by every point, as in a broadcast.
    """
    if mode not in PILOT_MODES:
        raise ValueError(f"pilot_mode must be one of {PILOT_MODES}, got {mode!r}")
    was_training = model.training
    model.eval()
    pilots = make_pilots(pilot_length, seed=(seed, 3)) if mode == "pilot" else None
    k = model.config.k
    totals = [np.zeros(len(images)) for _ in points]
    try:
        offset = 0
        for batch in batches(images, batch_size, drop_last=False):
            x = torch.from_numpy(batch.pixels)
            y = model.encode(x)
            ids = batch.ids
            for p, (snr_db, est_var) in enumerate(points):
                true_var = snr_to_variance(snr_db)
                for r in range(noise_realizations):
                    key = (seed, p, r)
                    z = y if channel_off else y + _channel_noise(ids, k, true_var, key)
                    v_hat = _estimated_variances(ids, snr_db, mode, est_var, key, pilots)
                    v_hat = np.maximum(v_hat, np.finfo(np.float64).tiny)
                    x_hat = model.decode(z, torch.from_numpy(v_hat))
                    totals[p][offset : offset + len(ids)] += psnr(batch.pixels, x_hat.numpy())
            offset += len(ids)
    finally:
        model.train(was_training)
    return [t / noise_realizations for t in totals]


def _resolve(model: JSCC | str | Path) -> tuple[JSCC, dict]:
    if isinstance(model, (str, Path)):
        m, _ = load_checkpoint(model)
        return m, {"checkpoint": str(model), "checkpoint_sha256": file_digest(model)}
    return model, {}


def _ratio(model: JSCC) -> str:
    r = model.config.bandwidth_ratio
    return f"{r.numerator}/{r.denominator}"


def sweep_snr(
    model: JSCC | str | Path,
    test_images: np.ndarray,
    snr_list: Iterable[float] = (0, 5, 10, 15, 20),
    est_noise_var: float = 0.0,
    seed: int = 0,
    model_id: str | None = None,
    pilot_mode: str = "noisy_oracle",
    batch_size: int = 256,
    noise_realizations: int = 1,
    pilot_length: int = 64,
    channel_off: bool = False,
) -> EvalReport:
    """PSNR-vs-SNR table for one model.

    At each test SNR every image goes through the AWGN channel at the true
    variance while the decoder is handed the variance solved from a noisy
    estimate ``S + E``, ``E ~ N(0, est_noise_var)`` dB (exact when 0).
    ``channel_off`` skips the channel noise but keeps the decoder's SNR input.
    """
    net, prov = _resolve(model)
    model_id = model_id or Path(str(prov.get("checkpoint", "model"))).stem
    snrs = [float(s) for s in snr_list]
    mode = "oracle" if pilot_mode == "noisy_oracle" and est_noise_var == 0 else pilot_mode
    per_point = _psnr_at_points(
        net,
        test_images,
        [(s, est_noise_var) for s in snrs],
        mode,
        seed,
        batch_size,
        noise_realizations,
        pilot_length,
        channel_off,
    )
    rows = [
        EvalRow(model_id, _ratio(net), s, float(est_noise_var), mode, float(v.mean()), float(v.std()), len(v), seed)
        for s, v in zip(snrs, per_point)
    ]
    prov.update(
        {
            "config": net.config.to_dict(),
            "config_sha256": config_digest(net.config),
            "seed": seed,
            "noise_realizations": noise_realizations,
            "pilot_length": pilot_length,
            "num_images": len(test_images),
        }
    )
    return EvalReport(rows, prov)


def multiuser_eval(
    model: JSCC | str | Path,
    test_images: np.ndarray,
    user_snrs: Sequence[float],
    pilot_mode: str = "oracle",
    seed: int = 0,
    est_noise_var: float = 0.0,
    model_id: str | None = None,
    batch_size: int = 256,
    pilot_length: int = 64,
) -> EvalReport:
    """Broadcast one encoding to several users, each with its own channel and SNR estimate."""
    if not user_snrs:
        raise ValueError("need at least one user")
    if pilot_mode not in PILOT_MODES:
        raise ValueError(f"pilot_mode must be one of {PILOT_MODES}, got {pilot_mode!r}")
    net, prov = _resolve(model)
    model_id = model_id or Path(str(prov.get("checkpoint", "model"))).stem
    snrs = [float(s) for s in user_snrs]
    per_user = _psnr_at_points(
        net, test_images, [(s, est_noise_var) for s in snrs], pilot_mode, seed, batch_size, 1, pilot_length
    )
    ev = float(est_noise_var) if pilot_mode == "noisy_oracle" else 0.0
    rows = [
        EvalRow(model_id, _ratio(net), s, ev, pilot_mode, float(v.mean()), float(v.std()), len(v), seed)
        for s, v in zip(snrs, per_user)
    ]
    prov.update(
        {
            "config": net.config.to_dict(),
            "config_sha256": config_digest(net.config),
            "seed": seed,
            "users": snrs,
            "pilot_mode": pilot_mode,
            "pilot_length": pilot_length,
            "num_images": len(test_images),
        }
    )
    return EvalReport(rows, prov)


def mean_test_psnr(model: JSCC, images: np.ndarray, snrs: Sequence[float], seed: int = 0) -> dict[float, float]:
    """Oracle-estimate mean PSNR per SNR; used for model selection during training."""
    vals = _psnr_at_points(model, images, [(float(s), 0.0) for s in snrs], "oracle", seed)
    return {float(s): float(v.mean()) for s, v in zip(snrs, vals)}


# ---------------------------------------------------------------------------
# comparison
# ---------------------------------------------------------------------------


def _curve_label(r: EvalRow) -> str:
    if r.mode == "noisy_oracle":
        return f"{r.model_id} (est. var {r.estimation_noise_variance:g})"
    if r.mode == "pilot":
        return f"{r.model_id} (pilot)"
    return r.model_id


def compare_models(
    reports: Sequence[EvalReport],
    out_dir: str | Path | None = None,
    plot: bool = True,
    title: str | None = None,
) -> tuple[EvalReport, Path | None]:
    """Merge reports into one table and, optionally, draw PSNR-vs-SNR curves.

    All reports must cover the same SNR grid.
    """
    if not reports:
        raise ValueError("nothing to compare")
    grid = reports[0].snr_grid()
    for rep in reports[1:]:
        if rep.snr_grid() != grid:
            raise AlignmentError(f"SNR grids differ: {grid} vs {rep.snr_grid()}")
    merged = EvalReport(
        [r for rep in reports for r in rep.rows],
        {"sources": [rep.provenance for rep in reports]},
    )
    plot_path = None
    if out_dir is not None:
        out = Path(out_dir)
        merged.write(out / "comparison.tsv")
        if plot:
            plot_path = plot_report(merged, out / "comparison.png", title)
    return merged, plot_path


def plot_report(report: EvalReport, path: str | Path, title: str | None = None) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    curves: dict[str, list[EvalRow]] = {}
    for r in report.rows:
        curves.setdefault(_curve_label(r), []).append(r)
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for label, rows in curves.items():
        rows = sorted(rows, key=lambda r: r.test_snr)
        ax.plot([r.test_snr for r in rows], [r.mean_psnr for r in rows], marker="o", label=label)
    ax.set_xlabel("test SNR (dB)")
    ax.set_ylabel("PSNR (dB)")
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def report_digest(report: EvalReport) -> str:
    return hashlib.sha256(report.to_tsv().encode()).hexdigest()


def mean_drop(reference: EvalReport, other: EvalReport) -> float:
    """Average PSNR loss of ``other`` relative to ``reference`` over the shared grid."""
    ref = {r.test_snr: r.mean_psnr for r in reference.rows}
    diffs = [ref[r.test_snr] - r.mean_psnr for r in other.rows if r.test_snr in ref]
    if not diffs:
        raise AlignmentError("no shared SNR points")
    return float(np.mean(diffs))


def is_nondecreasing(values: Sequence[float], slack: float = 0.2) -> bool:
    return all(b >= a - slack for a, b in zip(values, values[1:]))


def finite_positive(report: EvalReport) -> bool:
    return all(math.isfinite(r.mean_psnr) and r.mean_psnr > 0 for r in report.rows)
