"""Command line: ``fedcsr {run,ablate,lodo,gradcheck,datadump}``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure,
4 gradient-check failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4


def _seeds(text: str):
    try:
        return tuple(int(s) for s in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedcsr", description="Federated cued-speech recognition experiments")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        p.add_argument("--config", type=Path, required=needs_config, help="experiment INI file")
        p.add_argument("--out", type=Path, default=None, help="output directory (default: [experiment] output_dir)")
        p.add_argument("--seeds", type=_seeds, default=None, help="comma-separated seeds, overrides the config")
        p.add_argument("--threads", type=int, default=1, help="worker processes for seeds / cells")

    common(sub.add_parser("run", help="train every seed and write metrics.csv + summary.csv"))
    common(sub.add_parser("ablate", help="grid over distillation weights and the shared-embedding flag"))
    common(sub.add_parser("lodo", help="leave-one-cuer-out evaluation"))
    g = sub.add_parser("gradcheck", help="finite-difference check of every op, layer, loss and objective")
    g.add_argument("--tol", type=float, default=1e-4)
    common(sub.add_parser("datadump", help="write each client's synthetic data to text files"), needs_config=False)
    return ap


def _load(args) -> ExperimentConfig:
    cfg = load(args.config) if args.config is not None else ExperimentConfig()
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    return cfg


def _out(args, cfg) -> Path:
    return args.out if args.out is not None else Path(cfg.experiment.output_dir)


def main(argv=None) -> int:
    from .experiment import TrainingDiverged, ablate, build_data, lodo, run_experiment

    args = build_parser().parse_args(argv)
    try:
        if args.command == "gradcheck":
            from .gradcheck import format_report, run_suite

            reports = run_suite(tol=args.tol)
            print(format_report(reports))
            return EXIT_OK if all(r.passed for r in reports) else EXIT_CHECK
        cfg = _load(args)
        out = _out(args, cfg)
        if args.command == "run":
            results = run_experiment(cfg, out, args.seeds, args.threads)
            for r in results:
                print(f"seed {r.seed}: {r.method} CER {r.initial_cer:.4f} -> {r.final_cer:.4f}, "
                      f"WER {r.initial_wer:.4f} -> {r.final_wer:.4f}")
            print(f"wrote {out / 'metrics.csv'}")
        elif args.command == "ablate":
            for row in ablate(cfg, out, args.seeds, args.threads):
                print(f"{row['cell']:<40} seed {row['seed']}: CER {row['final_cer']:.4f} WER {row['final_wer']:.4f}")
            print(f"wrote {out / 'ablation.csv'}")
        elif args.command == "lodo":
            for row in lodo(cfg, out, args.seeds, args.threads):
                print(f"held-out {row['held_out']} seed {row['seed']}: CER {row['cer']:.4f} WER {row['wer']:.4f}")
            print(f"wrote {out / 'lodo.csv'}")
        elif args.command == "datadump":
            from .data import dump_client

            split = build_data(cfg)
            out.mkdir(parents=True, exist_ok=True)
            for cid, samples in split.train.items():
                dump_client(samples, out / f"client{cid}.txt")
            dump_client(split.test, out / "test.txt")
            (out / "corpus.txt").write_text("\n".join(" ".join(map(str, s)) for s in split.corpus) + "\n")
            print(f"wrote {len(split.train)} client files, test.txt and corpus.txt to {out}")
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
