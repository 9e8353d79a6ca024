"""polgrad command line: train, eval, plot and serve."""

import argparse
import json
import os
import sys
from functools import partial

import numpy as np
from dotenv import load_dotenv

import modules.config as config_lib
import modules.curves as curves
import modules.harness as harness
from modules.envlink import serve
from modules.envs import ENV_REGISTRY, make_env
from modules.errors import EXIT_OK, ConfigError, PolgradError, exit_code_for
from modules.logs import setup_logging
from modules.policy import load_checkpoint

DEFAULT_RUNS_DIR = "runs"


def _parse_sets(pairs):
    values = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got '{pair}'")
        values[key.strip()] = value.strip()
    return values


def cmd_train(args, log) -> int:
    if args.resume:
        run_dir = args.resume
        saved = config_lib.load_config(os.path.join(run_dir, harness.CONFIG_FILE))
        if args.steps is not None:
            saved.total_steps = args.steps
        setup_logging(args.log_level, os.path.join(run_dir, "run.log"))
        result = harness.train(saved, run_dir, resume=True)
    else:
        presets = [name for flag, name in ((args.paper, "paper"), (args.bench_shared, "bench-shared")) if flag]
        overrides = {}
        for key in ("algo", "env", "seed", "remote", "workers"):
            value = getattr(args, key)
            if value is not None:
                overrides[key] = value
        if args.steps is not None:
            overrides["total_steps"] = args.steps
        overrides.update(_parse_sets(args.set))
        config = config_lib.resolve_config(presets, args.config, overrides)

        runs_dir = os.environ.get("POLGRAD_RUNS_DIR", DEFAULT_RUNS_DIR)
        if args.bench_shared and args.algo is None:
            root = args.run_dir or runs_dir
            os.makedirs(root, exist_ok=True)
            setup_logging(args.log_level, os.path.join(root, "bench.log"))
            results = harness.train_benchmark(config, root)
            for algo, result in results.items():
                log.info(f"{algo}: {result.updates} update(s), checkpoint at {result.checkpoint}")
            return EXIT_OK

        run_dir = args.run_dir or os.path.join(runs_dir, f"{config.algo}-{config.env}-seed{config.seed}")
        os.makedirs(run_dir, exist_ok=True)
        setup_logging(args.log_level, os.path.join(run_dir, "run.log"))
        result = harness.train(config, run_dir)

    log.info(f"Finished {result.updates} update(s), {result.total_steps} steps; checkpoint at {result.checkpoint}")
    return EXIT_OK


def cmd_eval(args, log) -> int:
    net, metadata, _ = load_checkpoint(args.ckpt)
    config = config_lib.TrainConfig()
    if metadata.get("config"):
        config = config_lib.apply_overrides(config, _config_lines(metadata["config"]), args.ckpt)
    if args.env:
        config.env = args.env
    if args.remote:
        config.remote = args.remote

    env = harness.build_env(config, args.seed)
    try:
        summary = harness.evaluate(net, env, episodes=args.episodes, deterministic=not args.stochastic,
                                   rng=np.random.default_rng(args.seed),
                                   success_threshold=config.success_threshold)
    finally:
        env.close()
    print(json.dumps(summary.as_dict(), indent=2))
    return EXIT_OK


def _config_lines(text):
    values = {}
    for line in text.splitlines():
        key, sep, value = line.partition("=")
        if sep:
            values[key] = value
    return values


def cmd_plot(args, log) -> int:
    paths = curves.export_curves(args.csv, out_dir=args.out_dir, window=args.window)
    if args.compare:
        labels = [os.path.basename(os.path.dirname(os.path.abspath(p))) for p in args.csv]
        paths.append(curves.export_comparison(args.csv, labels, args.compare, window=args.window))
    for path in paths:
        print(path)
    return EXIT_OK


def cmd_serve(args, log) -> int:
    factory = partial(make_env, args.env, max_episode_steps=args.max_episode_steps, seed=args.seed)
    factory()  # fail fast on an unknown environment name
    try:
        serve(factory, args.endpoint)
    except KeyboardInterrupt:
        log.info("Server stopped")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polgrad", description="Policy-gradient training on simulated reacher arms")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR (default from POLGRAD_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a policy and write a run directory")
    train.add_argument("--algo", choices=config_lib.ALGORITHMS)
    train.add_argument("--env", choices=sorted(ENV_REGISTRY))
    train.add_argument("--steps", type=int, help="total environment steps")
    train.add_argument("--seed", type=int)
    train.add_argument("--workers", type=int)
    train.add_argument("--paper", action="store_true", help="apply the long-horizon 6-DoF preset")
    train.add_argument("--bench-shared", action="store_true",
                       help="shared hyperparameters; without --algo, trains trpo, ppo and acktr and overlays them")
    train.add_argument("--remote", help="host:port of an environment server")
    train.add_argument("--config", help="key=value settings file")
    train.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")
    train.add_argument("--run-dir", help=f"output directory (default $POLGRAD_RUNS_DIR or {DEFAULT_RUNS_DIR}/<algo>-<env>-seed<n>)")
    train.add_argument("--resume", metavar="RUN_DIR", help="continue a run from its latest checkpoint")
    train.set_defaults(handler=cmd_train)

    evaluate = sub.add_parser("eval", help="roll out a checkpointed policy")
    evaluate.add_argument("--ckpt", required=True)
    evaluate.add_argument("--episodes", type=int, default=10)
    evaluate.add_argument("--env", choices=sorted(ENV_REGISTRY))
    evaluate.add_argument("--remote")
    evaluate.add_argument("--stochastic", action="store_true", help="sample actions instead of using the mean")
    evaluate.add_argument("--seed", type=int, default=0)
    evaluate.set_defaults(handler=cmd_eval)

    plot = sub.add_parser("plot", help="export reward curves from progress CSVs")
    plot.add_argument("csv", nargs="+")
    plot.add_argument("--out-dir")
    plot.add_argument("--window", type=int, default=curves.DEFAULT_WINDOW)
    plot.add_argument("--compare", metavar="SVG", help="also overlay every CSV in one chart, labelled by run directory")
    plot.set_defaults(handler=cmd_plot)

    server = sub.add_parser("serve", help="serve an environment over TCP")
    server.add_argument("--env", choices=sorted(ENV_REGISTRY), default="Reach2D-v0")
    server.add_argument("--endpoint", default=None, help="host:port (default from POLGRAD_ENV_ENDPOINT)")
    server.add_argument("--max-episode-steps", type=int, default=512)
    server.add_argument("--seed", type=int, default=None)
    server.set_defaults(handler=cmd_serve)
    return parser


def main(argv=None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    log = setup_logging(args.log_level)
    try:
        return args.handler(args, log)
    except PolgradError as e:
        log.error(str(e))
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
