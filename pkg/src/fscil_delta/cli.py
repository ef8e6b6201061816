"""Command-line entry point: ``fscil-delta {generate,run,sweep,validate-config}``.

Exit codes: 0 success, 2 invalid configuration, 3 capacity shortfall,
4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config
from .data import generate_synthetic_dataset, save_dataset
from .errors import CapacityError, ContractError, InvariantError
from .experiment import SWEEP_AXES, execute, synthetic_params, sweep

EXIT_OK, EXIT_CONFIG, EXIT_CAPACITY, EXIT_INVARIANT = 0, 2, 3, 4


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    return cfg


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    return Path(args.out or cfg.output or "runs")


def cmd_validate(args) -> int:
    cfg = _load(args)
    print(f"{args.config}: ok ({cfg.protocol.sessions} incremental sessions, "
          f"{cfg.encoder_config().adapted_blocks}/{cfg.encoder.depth} adapted blocks)")
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = _load(args)
    if cfg.data.source != "synthetic":
        raise ConfigError("data.source: generate needs a synthetic data section")
    manifest = save_dataset(generate_synthetic_dataset(synthetic_params(cfg)), _out_dir(args, cfg))
    print(manifest)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    doc = execute(cfg, out)
    print(f"{out}/results.json  s_base={doc['s_base']:.4f} s_last={doc['s_last']:.4f} "
          f"s_avg={doc['s_avg']:.4f} pd={doc['pd']:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    rows = sweep(cfg, args.axis, [v.strip() for v in args.values.split(",") if v.strip()], out)
    for r in rows:
        print(f"{args.axis}={r[args.axis]}  s_avg={r['s_avg']:.4f} pd={r['pd']:.4f} delta_params={r['delta_params']}")
    print(out / "comparison.csv")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fscil-delta", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True, seed=True):
        p.add_argument("--config", required=True, help="YAML experiment config")
        if seed:
            p.add_argument("--seed", type=int, default=None, help="override the config seed")
        if out:
            p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("validate-config", help="parse and validate a config file")
    common(p, out=False, seed=False)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("generate", help="write the synthetic dataset (images.bin + manifest.csv)")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("run", help="run one experiment")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="ablation sweep over one encoder axis")
    common(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated values, e.g. 0,3,6")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ContractError) as exc:
        print(f"invalid configuration:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except InvariantError as exc:
        print(f"internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
