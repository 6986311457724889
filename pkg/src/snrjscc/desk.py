"""Reduced-scale reproduction of the adaptivity and robustness trends.

Trains an SNR-adaptive model and a fixed-SNR baseline on a small subset,
then sweeps both over the test grid with exact and noisy SNR estimates.
Checkpoints and reports are cached under a directory keyed by the protocol
hash, so a rerun with the same settings only re-reads them.

    python3 -m snrjscc.desk --dataset patches --cache-dir .desk_cache
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from snrjscc.data import load_cifar10, natural_patches
from snrjscc.evaluation import EvalReport, sweep_snr
from snrjscc.model import ModelConfig
from snrjscc.training import TrainSchedule, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeskProtocol:
    dataset: str = "cifar10"  # cifar10 | patches
    train_n: int = 5000
    test_n: int = 1000
    select_n: int = 500  # held out from the train split, used only for checkpoint selection
    epochs: int = 30
    channels: int = 8
    baseline_snr: float = 20.0
    snrs: tuple[float, ...] = (0.0, 5.0, 10.0, 15.0, 20.0)
    est_noise_vars: tuple[float, ...] = (1.0, 4.0)
    seed: int = 0
    cache_dir: str | None = field(default=None, compare=False)

    def digest(self) -> str:
        d = asdict(self)
        d.pop("cache_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class DeskResult:
    adaptive: EvalReport
    baseline: EvalReport
    robustness: dict[float, EvalReport]
    run_dir: Path
    seconds: float


def desk_data(p: DeskProtocol) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(train, select, test)`` uint8 image arrays; the three sets are disjoint."""
    if p.dataset == "cifar10":
        train_all, test_all = load_cifar10(p.cache_dir)
    elif p.dataset == "patches":
        train_all = natural_patches(p.train_n + p.select_n, "train", p.seed)
        test_all = natural_patches(p.test_n, "test", p.seed)
    else:
        raise ValueError(f"unknown dataset {p.dataset!r}")
    train_set = train_all[: p.train_n]
    select = train_all[p.train_n : p.train_n + p.select_n]
    return train_set, select, test_all[: p.test_n]


def _train_or_load(
    name: str, p: DeskProtocol, cfg: ModelConfig, sch: TrainSchedule, data, run_dir: Path
) -> Path:
    out = run_dir / name
    done = out / "done.json"
    if done.exists():
        return out / "best.ckpt"
    train_set, select, _ = data
    res = train(train_set, select, sch, cfg, out_dir=out, resume=True)
    done.write_text(json.dumps({"best_epoch": res.state.best_epoch, "best_metric": res.state.best_metric}) + "\n")
    return out / "best.ckpt"


def run_desk(p: DeskProtocol, root: str | Path = ".desk_cache") -> DeskResult:
    t0 = time.time()
    run_dir = Path(root) / f"{p.dataset}-{p.digest()}"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "protocol.json").write_text(json.dumps(asdict(p), indent=2, sort_keys=True) + "\n")
    data = desk_data(p)
    _, _, test_set = data
    common = dict(max_epochs=p.epochs, patience=p.epochs, seed=p.seed)

    ada_ckpt = _train_or_load(
        "adaptive", p, ModelConfig(channels=p.channels, seed=p.seed), TrainSchedule(**common), data, run_dir
    )
    base_ckpt = _train_or_load(
        "baseline",
        p,
        ModelConfig(channels=p.channels, kind="baseline", seed=p.seed),
        TrainSchedule(single_snr=p.baseline_snr, **common),
        data,
        run_dir,
    )

    def sweep(ckpt: Path, model_id: str, var: float) -> EvalReport:
        path = run_dir / f"{model_id}_var{var:g}.tsv"
        if path.exists():
            return EvalReport.read(path)
        rep = sweep_snr(ckpt, test_set, p.snrs, var, p.seed, model_id=model_id)
        rep.write(path)
        return rep

    adaptive = sweep(ada_ckpt, "adaptive", 0.0)
    baseline = sweep(base_ckpt, f"baseline@{p.baseline_snr:g}dB", 0.0)
    robust = {v: sweep(ada_ckpt, "adaptive", v) for v in p.est_noise_vars}
    return DeskResult(adaptive, baseline, robust, run_dir, time.time() - t0)


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dataset", default="cifar10", choices=["cifar10", "patches"])
    ap.add_argument("--cache-dir", default=".desk_cache", help="where checkpoints and reports are kept")
    ap.add_argument("--data-dir", help="CIFAR-10 cache directory")
    ap.add_argument("--epochs", type=int, default=30)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    res = run_desk(DeskProtocol(args.dataset, epochs=args.epochs, cache_dir=args.data_dir), args.cache_dir)
    for rep in [res.adaptive, res.baseline, *res.robustness.values()]:
        print(rep.to_tsv(), end="")
    print(f"{res.run_dir} ({res.seconds:.0f} s)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
