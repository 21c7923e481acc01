"""Command-line driver: ``steerdistill <stage> --config PATH --out DIR``."""

from __future__ import annotations

import argparse
import logging
import sys

from .numeric import NumericError
from .pipeline import ArtifactMismatch, ConfigError, Run, load_config, set_threads, variant

EXIT_OK, EXIT_CONFIG, EXIT_MISMATCH, EXIT_NUMERIC = 0, 2, 3, 4


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run config; omitted fields take defaults")
    common.add_argument("--out", required=True, help="run directory")
    common.add_argument("--seed", type=int, help="distillation seed (overrides eval.seeds)")
    common.add_argument("--overwrite", action="store_true", help="replace outputs produced under a different config")
    common.add_argument("--threads", type=int, help="torch intra-op threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="steerdistill", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)
    sub.add_parser("gen-data", parents=[common], help="sample splits, vocabulary, lexicon and masks")
    sub.add_parser("pretrain", parents=[common], help="pretrain the backbone")
    sub.add_parser("cache-teacher", parents=[common], help="cache teacher top-K logits with demonstrations")
    for name, help_ in (
        ("distill", "train adapters for one variant"),
        ("generate", "query-only decoding with the trained adapters"),
        ("evaluate", "score generations and the EOS profile"),
    ):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.add_argument("--variant", default="eos5", help="ablation config id (default: eos5, the full method)")
    sp = sub.add_parser("ablate", parents=[common], help="run ablation groups and write the tables")
    sp.add_argument("--groups", nargs="+", help="cumulative, objective, path_sweep, eos_sweep")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.eval.seeds = [args.seed]
        set_threads(args.threads)
        run = Run(cfg, args.out, overwrite=args.overwrite)
        seeds = cfg.eval.seeds
        if args.cmd == "gen-data":
            run.gen_data()
        elif args.cmd == "pretrain":
            run.pretrain()
        elif args.cmd == "cache-teacher":
            for s in seeds:
                run.cache_teacher(s)
        elif args.cmd in ("distill", "generate", "evaluate"):
            v = variant(args.variant)
            for s in seeds:
                if args.cmd == "distill":
                    run.distill(v, s)
                elif args.cmd == "generate":
                    run.generate(v, s)
                else:
                    rep = run.evaluate(v, s)
                    print(f"seed {s} {v.id}: BLEU-4 {rep.bleu4:.2f} ROUGE-L {rep.rouge_l:.2f} "
                          f"F1 {rep.finding_f1:.2f} MAE {rep.length.mae:.2f} P% {rep.length.proper:.1f}")
        elif args.cmd == "ablate":
            run.ablate(args.groups)
            print(run.path("ablation_mean.csv").read_text(), end="")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArtifactMismatch, FileNotFoundError) as e:
        print(f"artifact mismatch: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
