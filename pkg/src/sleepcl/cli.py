"""Train, sweep and report sleep-inspired continual learning experiments.

Subcommands: make-desk-data, pretrain, run, sweep, report, grad-check.

Any ``--section.key value`` flag overrides the matching config key.
Exit codes: 0 ok, 1 config error, 2 data error, 3 runtime / numeric error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .autodiff import AutodiffError
from .config import ConfigError, dump_config, parse_overrides, resolve_config
from .data import DataFormatError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


def _config(ns, extra, require_data=True):
    overrides = parse_overrides(extra)
    if ns.profile:
        overrides["profile"] = ns.profile
    return resolve_config(ns.config, overrides, require_data=require_data)


def cmd_make_desk_data(ns, extra) -> int:
    from .data import make_desk_digits

    out = make_desk_digits(ns.out, size=ns.size, seed=ns.seed)
    print(f"wrote IDX files to {out}")
    return EXIT_OK


def cmd_pretrain(ns, extra) -> int:
    from .data import load_cifar
    from .models import save_extractor
    from .pretrain import pretrain_extractor

    cfg = _config(ns, extra, require_data=False)
    if not ns.data:
        raise ConfigError("pretrain needs --data pointing at the CIFAR-10 binary directory")
    train = load_cifar(ns.data, "cifar10", "train")
    test = load_cifar(ns.data, "cifar10", "test", norm=train.norm)
    mc = cfg.model_config()
    ex, acc = pretrain_extractor(train, test, mc.conv_channels, mc.conv_strides, epochs=ns.epochs,
                                 batch_size=ns.batch_size, lr=ns.lr, seed=ns.seed)
    out = Path(ns.out or cfg.model.extractor_path or "extractor.bin")
    save_extractor(out, ex, {"test_accuracy": acc, "epochs": ns.epochs})
    print(f"extractor saved to {out} (test accuracy {acc:.3f})")
    return EXIT_OK


def cmd_run(ns, extra) -> int:
    from .trainer import cell_name, prepare_stream, run_experiment

    cfg = _config(ns, extra)
    stream, extractor = prepare_stream(cfg)
    root = Path(cfg.output.dir) / cfg.fingerprint()
    root.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, root / "config.yaml")
    p = cfg.sweep.p[0] if ns.p is None else ns.p
    rem = cfg.sweep.rem[0] if ns.rem is None else ns.rem == "on"
    seed = cfg.sweep.seeds[0] if ns.seed is None else ns.seed
    out = run_experiment(cfg, p, rem, seed, root / cell_name(p, rem, seed), stream, extractor)
    print(f"cell written to {out}")
    return EXIT_OK


def cmd_sweep(ns, extra) -> int:
    from .sweep import run_sweep

    cfg = _config(ns, extra)
    root = run_sweep(cfg, jobs=ns.jobs, force=ns.force)
    print(f"sweep results in {root}")
    return EXIT_OK


def cmd_report(ns, extra) -> int:
    from .sweep import report

    print(report(ns.results), end="")
    return EXIT_OK


def cmd_grad_check(ns, extra) -> int:
    from .gradcheck import TOLERANCE, run_all

    results = run_all(range(ns.seeds))
    worst = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.max_rel_error)
    for name, err in worst.items():
        print(f"{'PASS' if err < TOLERANCE else 'FAIL'} {name:20s} max rel. error {err:.2e}")
    return EXIT_OK if all(r.ok for r in results) else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sleepcl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", type=Path, help="YAML config file")
        sp.add_argument("--profile", choices=["full", "desk"])
        return sp

    sp = sub.add_parser("make-desk-data", help="write the bundled digits dataset as IDX files")
    sp.add_argument("out", type=Path)
    sp.add_argument("--size", type=int, default=16)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_make_desk_data)

    sp = with_config(sub.add_parser("pretrain", help="pretrain and freeze the conv feature extractor"))
    sp.add_argument("--data", type=Path, help="CIFAR-10 binary directory")
    sp.add_argument("--out", type=Path)
    sp.add_argument("--epochs", type=int, default=10)
    sp.add_argument("--batch-size", type=int, default=128)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_pretrain)

    sp = with_config(sub.add_parser("run", help="train one (p, REM, seed) cell"))
    sp.add_argument("--p", type=float)
    sp.add_argument("--rem", choices=["on", "off"])
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_run)

    sp = with_config(sub.add_parser("sweep", help="run the full (p x REM x seed) grid"))
    sp.add_argument("--jobs", type=int)
    sp.add_argument("--force", action="store_true", help="re-run completed cells")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("report", help="summarise a sweep results directory")
    sp.add_argument("results", type=Path)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("grad-check", help="finite-difference check of all autodiff primitives")
    sp.add_argument("--seeds", type=int, default=10)
    sp.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    ns, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if extra and ns.command in ("make-desk-data", "report", "grad-check"):
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    try:
        return ns.func(ns, extra)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, DataFormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (AutodiffError, FloatingPointError, RuntimeError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
