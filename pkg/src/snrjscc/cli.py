"""Command line entry point: ``snrjscc {train,sweep,compare,multiuser,fetch-data}``.

Exit codes: 0 success, 1 data unavailable, 2 bad configuration or misaligned reports,
3 training diverged, 4 checkpoint missing or unreadable.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from snrjscc.config import ConfigError, RunConfig, all_keys, load_config
from snrjscc.data import FetchError, IntegrityError, fetch_cifar10, load_dataset
from snrjscc.evaluation import AlignmentError, EvalReport, compare_models, multiuser_eval, plot_report, sweep_snr
from snrjscc.model import CheckpointError
from snrjscc.training import DivergenceError, train

EXIT_DATA, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECKPOINT = 1, 2, 3, 4

log = logging.getLogger("snrjscc")


def _keys_help() -> str:
    lines = ["config keys (file lines `section.key = value`, or --set section.key=value):"]
    for key, tp, default in all_keys():
        name = getattr(tp, "__name__", None) or str(tp).replace("typing.", "")
        lines.append(f"  {key:<28} {name:<14} default: {default!r}")
    return "\n".join(lines)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")


def _load(args: argparse.Namespace, extra: list[str]) -> RunConfig:
    return load_config(args.config, list(args.set) + extra)


def _persist_effective(cfg: RunConfig, out_dir: Path, name: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / name).write_text(cfg.to_text())


def _data(cfg: RunConfig):
    d = cfg.data
    return load_dataset(
        d.dataset, d.cache_dir or None, d.train_subset or None, d.test_subset or None, cfg.seed
    )


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load(args, [])
    out = Path(cfg.paths.out_dir)
    _persist_effective(cfg, out, "effective.cfg")
    train_set, test_set = _data(cfg)
    result = train(train_set, test_set, cfg.schedule, cfg.model, out_dir=out, resume=args.resume)
    print(f"best test PSNR {result.state.best_metric:.3f} dB at epoch {result.state.best_epoch}")
    print(result.checkpoint)
    return 0


def _report_path(cfg: RunConfig, default_name: str) -> Path:
    return Path(cfg.paths.report) if cfg.paths.report else Path(cfg.paths.out_dir) / default_name


def _check_ckpt(cfg: RunConfig) -> Path:
    ckpt = cfg.checkpoint_path
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    return ckpt


def cmd_sweep(args: argparse.Namespace) -> int:
    extra = []
    if args.est_noise_var is not None:
        extra.append(f"eval.est_noise_var={args.est_noise_var}")
    if args.snrs:
        extra.append(f"eval.snrs={args.snrs}")
    if args.checkpoint:
        extra.append(f"paths.checkpoint={args.checkpoint}")
    cfg = _load(args, extra)
    ckpt = _check_ckpt(cfg)
    _, test_set = _data(cfg)
    e = cfg.eval
    report = sweep_snr(
        ckpt,
        test_set,
        e.snrs,
        e.est_noise_var,
        cfg.seed,
        model_id=e.model_id or None,
        pilot_mode=e.pilot_mode,
        batch_size=e.batch_size,
        noise_realizations=e.noise_realizations,
        pilot_length=e.pilot_length,
    )
    path = report.write(_report_path(cfg, f"sweep_var{e.est_noise_var:g}.tsv"))
    _persist_effective(cfg, path.parent, path.stem + ".cfg")
    if e.plot:
        plot_report(report, path.with_suffix(".png"))
    print(report.to_tsv(), end="")
    print(path)
    return 0


def cmd_multiuser(args: argparse.Namespace) -> int:
    extra = []
    if args.snrs:
        extra.append(f"eval.user_snrs={args.snrs}")
    if args.pilot_mode:
        extra.append(f"eval.pilot_mode={args.pilot_mode}")
    if args.checkpoint:
        extra.append(f"paths.checkpoint={args.checkpoint}")
    cfg = _load(args, extra)
    ckpt = _check_ckpt(cfg)
    _, test_set = _data(cfg)
    e = cfg.eval
    report = multiuser_eval(
        ckpt,
        test_set,
        e.user_snrs,
        e.pilot_mode,
        cfg.seed,
        e.est_noise_var,
        model_id=e.model_id or None,
        batch_size=e.batch_size,
        pilot_length=e.pilot_length,
    )
    path = report.write(_report_path(cfg, f"multiuser_{e.pilot_mode}.tsv"))
    _persist_effective(cfg, path.parent, path.stem + ".cfg")
    print(report.to_tsv(), end="")
    print(path)
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    reports = []
    for p in args.reports:
        if not Path(p).exists():
            raise FileNotFoundError(f"report {p} not found")
        reports.append(EvalReport.read(p))
    merged, plot = compare_models(reports, args.out_dir, plot=not args.no_plot, title=args.title)
    print(merged.to_tsv(), end="")
    if args.out_dir:
        print(Path(args.out_dir) / "comparison.tsv")
    if plot:
        print(plot)
    return 0


def cmd_fetch(args: argparse.Namespace) -> int:
    print(fetch_cifar10(args.cache_dir))
    return 0


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="snrjscc", description="SNR-adaptive deep JSCC experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model", epilog=_keys_help(), formatter_class=fmt)
    _add_config_args(p)
    p.add_argument("--resume", action="store_true", help="continue from <out_dir>/last.ckpt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="PSNR over a test SNR grid", epilog=_keys_help(), formatter_class=fmt)
    _add_config_args(p)
    p.add_argument("--checkpoint")
    p.add_argument("--est-noise-var", type=float, help="variance (dB^2) of the decoder's SNR estimate error")
    p.add_argument("--snrs", help="comma-separated test SNRs in dB")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("multiuser", help="broadcast to several users", epilog=_keys_help(), formatter_class=fmt)
    _add_config_args(p)
    p.add_argument("--checkpoint")
    p.add_argument("--snrs", help="comma-separated user SNRs in dB")
    p.add_argument("--pilot-mode", choices=["oracle", "noisy_oracle", "pilot"])
    p.set_defaults(func=cmd_multiuser)

    p = sub.add_parser("compare", help="merge reports and plot PSNR curves")
    p.add_argument("reports", nargs="+", help="report .tsv files")
    p.add_argument("--out-dir")
    p.add_argument("--title")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("fetch-data", help="download and verify CIFAR-10")
    p.add_argument("--cache-dir")
    p.set_defaults(func=cmd_fetch)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except AlignmentError as e:
        print(f"cannot compare: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FileNotFoundError, CheckpointError) as e:
        print(f"missing input: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (FetchError, IntegrityError) as e:
        print(f"data unavailable: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
