"""Command-line entry points: generate, train, eval, ablate, serve."""

from __future__ import annotations

import argparse
import sys

from .harness import (
    ExperimentConfig, build_serve_session_factory, cmd_ablate, cmd_eval,
    cmd_generate, cmd_train,
)


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config \
        else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "variant", None):
        cfg.variant = args.variant
        cfg.__post_init__()  # re-validate
    return cfg


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="flowsteer",
        description="Steerable chunk-policy experiments on a 2-D "
                    "manipulation simulator")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", default=None, help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("generate", help="write a scripted demo dataset")
    common(p)

    p = sub.add_parser("train", help="train the chunk policy on a dataset")
    common(p)
    p.add_argument("--variant", default=None,
                   help="dataset/conditioning variant")

    p = sub.add_parser("eval", help="run the evaluation battery")
    common(p)
    p.add_argument("--policy", required=True,
                   help="checkpoint path, 'scripted[:qN]', or 'random'")

    p = sub.add_parser("ablate", help="train+eval every ablation grid cell")
    common(p)

    p = sub.add_parser("serve", help="start a coaching console server")
    common(p, out_required=False)
    p.add_argument("--policy", required=True)
    p.add_argument("--task", default=None, help="task instance key")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--framing", choices=("ws", "lp"), default="ws")

    args = parser.parse_args(argv)
    cfg = _load_config(args)

    if args.verb == "generate":
        manifest = cmd_generate(cfg, args.out)
        print(manifest)
    elif args.verb == "train":
        ckpt = cmd_train(cfg, args.out)
        print(ckpt)
    elif args.verb == "eval":
        report = cmd_eval(cfg, args.policy, args.out)
        print("\t".join(report.row()))
    elif args.verb == "ablate":
        rows = cmd_ablate(cfg, args.out)
        for row in rows:
            print("\t".join(row))
    elif args.verb == "serve":
        from pathlib import Path

        from .runtime import ConsoleServer
        factory = build_serve_session_factory(cfg, args.policy, args.task)
        out_dir = Path(args.out) if args.out else None
        if out_dir:
            out_dir.mkdir(parents=True, exist_ok=True)
        server = ConsoleServer(factory, out_dir=out_dir, port=args.port,
                               framing=args.framing)
        host, port = server.start()
        print(f"listening on {host}:{port} ({args.framing})", flush=True)
        try:
            while True:
                import time
                time.sleep(1.0)
        except KeyboardInterrupt:
            server.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
