#!/usr/bin/env python
"""Command line interface.

``breachcast gen|train|calibrate|eval|sweep-k|monitor``; ``breachcast-monitor`` is a
shortcut for ``breachcast monitor``. Exit codes: 0 success, 2 usage or configuration
error, 3 data error, 4 model inconsistency.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import breachcast
from breachcast import bundle as bundle_io
from breachcast import pipeline
from breachcast.config import CALIBRATION_STRATEGIES, DELTA_SOURCES, FAIL_COUNT_SCOPES, PipelineConfig, read_config_file
from breachcast.embedding import PRE_POOLED, SUPPORTED_PROVIDERS, TOKEN_LEVEL, get_provider
from breachcast.errors import BreachcastError, DataError
from breachcast.monitor import RiskMonitor
from breachcast.synthetic import GeneratorConfig, generate, write_corpus
from breachcast.trajectory import load_dataset, select, split_dataset

logger = logging.getLogger("breachcast")

LOG_FORMAT = "%(levelname)s %(name)s: %(message)s"

CONFIG_HELP = {
    "stage1_lr": "stage 1 learning rate",
    "stage1_batch": "stage 1 triplets per batch",
    "stage1_epochs": "stage 1 epochs",
    "margin": "triplet margin",
    "random_negative_weight": "probability of a random instead of a hard negative",
    "stage2_lr": "stage 2 learning rate",
    "stage2_batch": "stage 2 pairs per batch",
    "stage2_epochs": "stage 2 epochs",
    "label_smoothing": "stage 2 label smoothing",
    "n_clusters": "number of action prototypes K",
    "top_m": "predicted prototypes kept for the expected risk",
    "score_hidden": "hidden width of the attention scorer",
    "projection_hidden": "hidden width of the projection head",
    "causal_dim": "dimension of the causal space",
    "head_hidden": "hidden width of the proactive head",
    "kmeans_batch": "mini-batch size of K-means",
    "kmeans_max_iters": "iteration cap of K-means",
    "kmeans_tol": "centroid shift tolerance of K-means",
    "epsilon": "failure smoothing prior",
    "beta": "total smoothing prior",
    "fail_counts_scope": "which transitions of a failure count as failure transitions",
    "calibration": "threshold calibration strategy",
    "percentile": "percentile of the percentile strategy",
    "jump": "risk velocity triggering the jump rule",
    "panic_offset": "panic threshold above the base threshold",
    "static_threshold": "alert on the base threshold alone (no jump detection)",
    "train_fraction": "share of trajectories used for training",
    "seed": "random seed",
    "step_index_base": "base of mistake_step in the trajectory files",
    "delta_source": "prompt family of the step states",
    "no_triplet": "skip stage 1 and quantize raw deltas",
    "absolute_states": "feed states instead of deltas to the projection",
    "binary_baseline": "replace the expected risk by a binary breach classifier",
}
CHOICES = {"calibration": CALIBRATION_STRATEGIES, "fail_counts_scope": FAIL_COUNT_SCOPES,
           "delta_source": DELTA_SOURCES}
ALIASES = {"percentile": ["--p"]}
CALIBRATION_FIELDS = ("calibration", "percentile", "jump", "panic_offset", "static_threshold")


class PrintAction(argparse.Action):
    def __init__(self, option_strings, dest, text=None, **kwargs):
        super(PrintAction, self).__init__(option_strings, dest, nargs=0, **kwargs)
        self.text = text

    def __call__(self, parser, namespace, values, option_string=None):
        print(self.text)
        parser.exit()


# ==============================================================================================================
# argument helpers

def add_config_flags(parser, names):
    defaults = PipelineConfig()
    group = parser.add_argument_group("hyper-parameters")
    for field in dataclasses.fields(PipelineConfig):
        if field.name not in names:
            continue
        flags = ["--" + field.name.replace("_", "-")] + ALIASES.get(field.name, [])
        default = getattr(defaults, field.name)
        text = "{} (default: {})".format(CONFIG_HELP[field.name], default)
        if field.type is bool:
            group.add_argument(*flags, dest=field.name, action="store_const", const=True, default=None,
                               help=text)
        else:
            group.add_argument(*flags, dest=field.name, type=field.type, default=None,
                               choices=CHOICES.get(field.name), help=text)


def add_provider_flags(parser):
    group = parser.add_argument_group("embedding provider")
    group.add_argument("--provider", choices=SUPPORTED_PROVIDERS, default=None,
                       help="provider (default: the one recorded in the bundle, else $EMBEDDING_PROVIDER,\n"
                            "else file when <dataset>/states exists, else synthetic)")
    group.add_argument("--states-dir", default=None, help="states of the file provider (default: <dataset>/states)")
    group.add_argument("--provider-mode", choices=[PRE_POOLED, TOKEN_LEVEL], default=None,
                       help="content of the state files (default: {})".format(PRE_POOLED))
    group.add_argument("--embedding-dim", type=int, default=None, help="synthetic token state width (default: 64)")
    group.add_argument("--embedding-seed", type=int, default=None, help="synthetic token state seed (default: 0)")
    group.add_argument("--endpoint", default=None, help="URL of the http provider")
    group.add_argument("--timeout", type=float, default=None, help="http timeout in seconds (default: 30)")
    group.add_argument("--retries", type=int, default=None, help="http retries after a failure (default: 2)")


def _pick(*values):
    for value in values:
        if value is not None:
            return value
    return None


def resolve_provider(args, data_dir=None, recorded=None):
    """Provider from the flags, then the bundle record, then the environment.

    File states come from ``--states-dir``, else ``<dataset>/states``, else the recorded directory.
    """
    recorded = recorded or {}
    name = _pick(args.provider, recorded.get("name"), os.getenv("EMBEDDING_PROVIDER"))
    if name is None:
        name = "file" if data_dir is not None and (Path(data_dir) / "states").is_dir() else "synthetic"

    info = {"name": name}
    if name == "synthetic":
        info["dim"] = _pick(args.embedding_dim, recorded.get("dim"), 64)
        info["seed"] = _pick(args.embedding_seed, recorded.get("seed"), 0)
        provider = get_provider(name, dim=info["dim"], seed=info["seed"])
    elif name == "file":
        info["mode"] = _pick(args.provider_mode, recorded.get("mode"), PRE_POOLED)
        local = Path(data_dir) / "states" if data_dir is not None else None
        directory = _pick(args.states_dir, str(local.resolve()) if local is not None and local.is_dir() else None,
                          recorded.get("directory"))
        info["directory"] = directory
        provider = get_provider(name, directory=directory, mode=info["mode"])
    else:
        info["endpoint"] = _pick(args.endpoint, recorded.get("endpoint"))
        info["timeout"] = _pick(args.timeout, recorded.get("timeout"), 30.0)
        info["retries"] = _pick(args.retries, recorded.get("retries"), 2)
        provider = get_provider(name, endpoint=info["endpoint"], timeout=info["timeout"], retries=info["retries"])
    logger.info("Embedding provider: %s", provider.provider_name())
    return provider, info


def config_from_args(args, base=None, names=None):
    """Defaults (or ``base``), then the ``--config`` file, then the flags."""
    values = base.to_dict() if base is not None else {}
    if args.config:
        values.update((key, value) for key, value in read_config_file(args.config).items()
                      if names is None or key in names)
    for field in dataclasses.fields(PipelineConfig):
        if names is not None and field.name not in names:
            continue
        value = getattr(args, field.name, None)
        if value is not None:
            values[field.name] = value
    return PipelineConfig.from_mapping(values)


# ==============================================================================================================
# commands

def cmd_gen(args):
    config = GeneratorConfig(n_trajectories=args.n, length_range=(args.min_length, args.max_length),
                             n_agents=args.agents, latent_dim=args.dim, n_true_clusters=args.clusters,
                             failure_rate=args.failure_rate, breach_transition=(args.breach_from, args.breach_to),
                             noise_scale=args.noise, seed=args.seed, plan_signal=args.plan_signal,
                             text_mode=args.text_mode,
                             agent_scales=tuple(args.agent_scales) if args.agent_scales else None)
    corpus = generate(config)
    write_corpus(corpus, args.out)
    print("{} trajectories written to {}".format(len(corpus.trajectories), args.out))


def cmd_train(args):
    config = config_from_args(args)
    trajs = load_dataset(args.dataset, config.step_index_base, jobs=args.jobs)
    split = split_dataset(trajs, config.train_fraction, config.seed)
    provider, info = resolve_provider(args, args.dataset)
    bundle = pipeline.train(select(trajs, split.train), provider, config, provider_info=info, jobs=args.jobs)
    bundle_io.save(bundle, args.output)
    print("bundle written to {} (K={}, {} training trajectories)".format(
        args.output, bundle.n_clusters, len(split.train)))


def cmd_calibrate(args):
    bundle = bundle_io.load(args.bundle)
    config = config_from_args(args, base=bundle.config, names=CALIBRATION_FIELDS)
    trajs = load_dataset(args.dataset, bundle.config.step_index_base, jobs=args.jobs)
    if not args.all:
        train_ids = set(bundle.provenance.get("train_ids", []))
        trajs = [traj for traj in trajs if traj.id in train_ids]
        if not trajs:
            raise DataError("none of the bundle's training trajectories is in {} (use --all)".format(args.dataset))
    provider, _ = resolve_provider(args, args.dataset, bundle.provider)
    bundle = pipeline.calibrate(bundle, trajs, provider, strategy=config.calibration, p=config.percentile,
                                jump=config.jump, panic_offset=config.panic_offset,
                                static=config.static_threshold, jobs=args.jobs)
    output = args.output or args.bundle
    bundle_io.save(bundle, output)
    th = bundle.thresholds
    print("tau_base={:.6f} tau_max={:.6f} jump={} ({}, {} risks)".format(
        th.tau_base, th.tau_max, th.delta_jump, th.strategy, th.samples))


def cmd_eval(args):
    bundle = bundle_io.load(args.bundle)
    trajs = load_dataset(args.dataset, bundle.config.step_index_base, jobs=args.jobs)
    if not args.include_train:
        train_ids = set(bundle.provenance.get("train_ids", []))
        trajs = [traj for traj in trajs if traj.id not in train_ids]
    provider, _ = resolve_provider(args, args.dataset, bundle.provider)
    report = pipeline.evaluate(bundle, trajs, provider, jobs=args.jobs, trace_dir=args.trace_dir, prefix=args.prefix)
    if args.report:
        Path(args.report).write_text(report.to_json(), encoding="utf-8")
    print(report.to_json() if args.format == "json" else report.to_table())


def cmd_sweep(args):
    config = config_from_args(args)
    trajs = load_dataset(args.dataset, config.step_index_base, jobs=args.jobs)
    split = split_dataset(trajs, config.train_fraction, config.seed)
    provider, _ = resolve_provider(args, args.dataset)
    rows = pipeline.sweep_k(select(trajs, split.train), select(trajs, split.test), provider, config,
                            ks=args.ks, jobs=args.jobs)
    print(pipeline.format_sweep(rows))


def _emit(message):
    sys.stdout.write(json.dumps(message, sort_keys=True) + "\n")
    sys.stdout.flush()


def cmd_monitor(args):
    bundle = bundle_io.load(args.bundle)
    provider, _ = resolve_provider(args, None, bundle.provider)
    monitor = RiskMonitor(bundle, provider)

    for number, line in enumerate(args.input, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            message = json.loads(line)
            if not isinstance(message, dict):
                raise ValueError("not an object")
        except ValueError as exc:
            _emit({"error": "line {}: invalid message: {}".format(number, exc)})
            return DataError.exit_code

        kind = message.get("type")
        try:
            if kind == "task":
                monitor.reset(message.get("text", ""))
            elif kind == "turn":
                if monitor.task is None:
                    _emit({"error": "line {}: turn received before any task".format(number)})
                    return DataError.exit_code
                record = monitor.assess()
                _emit({"turn": record.t, "risk": record.risk, "velocity": record.velocity, "alert": record.alert,
                       "rule": record.rule, "top_clusters": list(record.top_clusters)})
                if record.alert and args.halt_on_alert:
                    break
                monitor.observe(str(message.get("agent", "")), str(message.get("text", "")))
            else:
                _emit({"error": "line {}: unknown message type {!r}".format(number, kind)})
                return DataError.exit_code
        except BreachcastError as exc:
            _emit({"error": "line {}: {}".format(number, exc)})
            return exc.exit_code
    return 0


# ==============================================================================================================
# parser

def build_parser():
    parser = argparse.ArgumentParser(prog="breachcast", description="breachcast",
                                     formatter_class=argparse.RawTextHelpFormatter)
    parser.add_argument("--version", help="echos version of breachcast", action=PrintAction,
                        text=breachcast.__version__)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    common.add_argument("--config", default=None, help="key = value configuration file")
    common.add_argument("--jobs", type=int, default=1, help="parallel workers (default: 1)")

    commands = parser.add_subparsers(dest="command", metavar="command")
    all_fields = [field.name for field in dataclasses.fields(PipelineConfig)]

    gen = commands.add_parser("gen", parents=[common], formatter_class=argparse.RawTextHelpFormatter,
                              help="write a synthetic corpus")
    defaults = GeneratorConfig()
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--n", type=int, default=defaults.n_trajectories, help="trajectories (default: %(default)s)")
    gen.add_argument("--min-length", type=int, default=defaults.length_range[0], help="(default: %(default)s)")
    gen.add_argument("--max-length", type=int, default=defaults.length_range[1], help="(default: %(default)s)")
    gen.add_argument("--agents", type=int, default=defaults.n_agents, help="(default: %(default)s)")
    gen.add_argument("--dim", type=int, default=defaults.latent_dim, help="latent dimension (default: %(default)s)")
    gen.add_argument("--clusters", type=int, default=defaults.n_true_clusters,
                     help="true clusters (default: %(default)s)")
    gen.add_argument("--failure-rate", type=float, default=defaults.failure_rate, help="(default: %(default)s)")
    gen.add_argument("--breach-from", type=int, default=defaults.breach_transition[0], help="(default: %(default)s)")
    gen.add_argument("--breach-to", type=int, default=defaults.breach_transition[1], help="(default: %(default)s)")
    gen.add_argument("--noise", type=float, default=defaults.noise_scale, help="state noise (default: %(default)s)")
    gen.add_argument("--seed", type=int, default=defaults.seed, help="(default: %(default)s)")
    gen.add_argument("--plan-signal", type=float, default=defaults.plan_signal, help="(default: %(default)s)")
    gen.add_argument("--text-mode", action="store_true", help="emit word contents for the token-level path")
    gen.add_argument("--agent-scales", type=float, nargs="+", default=None,
                     help="per-agent step length factors (default: all 1)")
    gen.set_defaults(handler=cmd_gen)

    train = commands.add_parser("train", parents=[common], formatter_class=argparse.RawTextHelpFormatter,
                                help="train a bundle")
    train.add_argument("dataset", help="directory of trajectory files")
    train.add_argument("-o", "--output", default="bundle.pmbd", help="bundle file (default: %(default)s)")
    add_provider_flags(train)
    add_config_flags(train, all_fields)
    train.set_defaults(handler=cmd_train)

    cal = commands.add_parser("calibrate", parents=[common], formatter_class=argparse.RawTextHelpFormatter,
                              help="re-calibrate the thresholds of a bundle")
    cal.add_argument("bundle", help="bundle file")
    cal.add_argument("dataset", help="directory holding the training trajectories")
    cal.add_argument("-o", "--output", default=None, help="output bundle (default: overwrite the input)")
    cal.add_argument("--all", action="store_true", help="calibrate on every trajectory of the directory")
    add_provider_flags(cal)
    add_config_flags(cal, CALIBRATION_FIELDS)
    cal.set_defaults(handler=cmd_calibrate)

    ev = commands.add_parser("eval", parents=[common], formatter_class=argparse.RawTextHelpFormatter,
                             help="evaluate a bundle")
    ev.add_argument("bundle", help="bundle file")
    ev.add_argument("dataset", help="directory of trajectory files")
    ev.add_argument("--format", choices=["table", "json"], default="table", help="(default: %(default)s)")
    ev.add_argument("--report", default=None, help="also write the JSON report to this file")
    ev.add_argument("--trace-dir", default=None, help="write per-trajectory risk traces as CSV")
    ev.add_argument("--prefix", default=None, help="only report trajectories whose id starts with this")
    ev.add_argument("--include-train", action="store_true", help="keep the bundle's training trajectories")
    add_provider_flags(ev)
    ev.set_defaults(handler=cmd_eval)

    sweep = commands.add_parser("sweep-k", parents=[common], formatter_class=argparse.RawTextHelpFormatter,
                                help="train and evaluate over several cluster counts")
    sweep.add_argument("dataset", help="directory of trajectory files")
    sweep.add_argument("--ks", type=int, nargs="+", default=list(pipeline.DEFAULT_SWEEP),
                       help="cluster counts (default: %(default)s)")
    add_provider_flags(sweep)
    add_config_flags(sweep, [name for name in all_fields if name != "n_clusters"])
    sweep.set_defaults(handler=cmd_sweep)

    mon = commands.add_parser("monitor", parents=[common], formatter_class=argparse.RawTextHelpFormatter,
                              help="score a JSON-lines dialogue stream")
    mon.add_argument("bundle", help="bundle file")
    mon.add_argument("--input", type=argparse.FileType("r", encoding="utf-8"), default="-",
                     help="JSON-lines input (default: standard input)")
    mon.add_argument("--halt-on-alert", action="store_true", help="stop after the first alert")
    add_provider_flags(mon)
    mon.set_defaults(handler=cmd_monitor)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command is None:
        parser.print_help(sys.stderr)
        return 2

    logging.basicConfig(format=LOG_FORMAT, level=logging.DEBUG if args.verbose else logging.INFO)
    try:
        return args.handler(args) or 0
    except BreachcastError as exc:
        logger.error("%s", exc)
        return exc.exit_code


def monitor(argv=None):
    return main(["monitor"] + list(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    sys.exit(main())
