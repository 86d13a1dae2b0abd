"""Command line entry point: clustering, training, bound evaluation, allocation and experiment bundles."""
import sys
import logging
import argparse
from os import path

import pandas as pd

from clusterfl.utility.helper import (load_config, write_json, write_frame, ensure_dir, DEFAULT_CONFIG_FILE,
                                      ConfigError, DivergenceError, InfeasibleError, ProtocolMismatchError)
from clusterfl.utility.helper_plot import emit_plots
from clusterfl.utility.helper_ppo import optimize, random_search, complexity_report, save_checkpoint
from clusterfl.scenarios import (SCENARIOS, run_scenario, rerun_manifest, compare_runs, cluster_report,
                                 bound_for_config, bound_soundness, build_environment, RecipeContext,
                                 allocation_environment, ppo_config, result_summary)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_INFEASIBLE = 4
EXIT_PROTOCOL = 5


def _config(args):
    overrides = dict()
    if args.seed is not None:
        overrides['seed'] = args.seed
    if args.output is not None:
        overrides['output'] = dict(directory=args.output)
    return load_config(args.config, overrides)


def cmd_cluster(args):
    report = cluster_report(_config(args), args.output)
    for cluster in report['clusters']:
        logging.info("Leader %d: members %s", cluster['leader'], cluster['members'])


def cmd_train(args):
    config = _config(args)
    run_scenario(config['scenario']['name'], config, args.output, seeds=args.seeds)


def cmd_bound(args):
    config = _config(args)
    if args.soundness:
        soundness = config['bound'].get('soundness', dict())
        result = bound_soundness(master_seed=config['seed'], **soundness)
        out = ensure_dir(path.join(config['output']['directory'], 'bound'))
        write_frame(pd.DataFrame.from_records(result['rows']), path.join(out, 'soundness.csv'))
        logging.info("Bound soundness: %d/%d scenarios pass, largest violation %.3g", sum(r['passed'] for r in result['rows']),
                     len(result['rows']), result['max_violation'])
        return
    report = bound_for_config(config, args.output)
    logging.info("A = %.6g, lr_max = %.4g, GAP(inf) = %.4g, converges %r", report.a_factor, report.lr_max,
                 report.gap_infinite, report.converges)


def cmd_optimize(args):
    config = _config(args)
    env = build_environment(config, int(config['seed']))
    ctx = RecipeContext(env, config)
    allocation_env, details = allocation_environment(ctx)
    cfg = ppo_config(config)
    result = optimize(allocation_env, cfg, seed=config['seed'])
    search = random_search(allocation_env, samples=int(config['ppo'].get('random_search_samples', 200)),
                           seed=config['seed'])
    out = ensure_dir(path.join(config['output']['directory'], 'optimize'))
    write_json(dict(details, **result.to_dict(), random_search=result_summary(search),
                    complexity=complexity_report(cfg, result.nets.parameter_count, allocation_env.C, result.wall_time_s)),
               path.join(out, 'allocation.json'))
    write_frame(pd.DataFrame(dict(episode=range(1, len(result.reward_curve) + 1), mean_reward=result.reward_curve)),
                path.join(out, 'learning_curve.csv'), header=dict(master_seed=config['seed']))
    save_checkpoint(result.nets, path.join(out, 'policy.bin'))
    logging.info("PPO gap %.4g vs random search %.4g vs baseline %.4g", result.evaluation.gap, search.evaluation.gap,
                 allocation_env.baseline_evaluation.gap)
    if not result.feasible:
        raise InfeasibleError("no allocation satisfies the energy budget of {:.4g} J".format(details['e_total_J']))


def cmd_scenario(args):
    if args.manifest:
        rerun_manifest(args.manifest, args.output)
        return
    if args.name is None:
        raise ConfigError("scenario needs a name or --manifest")
    config = _config(args)
    run_scenario(args.name, config, args.output, seeds=args.seeds, threshold=args.threshold)


def cmd_compare(args):
    table, _ = compare_runs(args.bundles, args.output)
    with pd.option_context('display.width', 160, 'display.max_columns', None):
        print(table.to_string(index=False))


def cmd_plot(args):
    for file_path in emit_plots(args.bundle):
        logging.info("Wrote %s", file_path)


def get_parser():
    parser = argparse.ArgumentParser(description="Cluster-aware wireless federated learning simulator")
    parser.add_argument('-c', '--config', help="Configuration file", default=DEFAULT_CONFIG_FILE)
    parser.add_argument('-s', '--seed', help="Master seed, overrides the configuration", type=int, default=None)
    parser.add_argument('-o', '--output', help="Output directory", default=None)
    parser.add_argument('-v', '--verbose', help="Debug logging", action='store_true')
    subparsers = parser.add_subparsers(dest='command', required=True)

    subparsers.add_parser('cluster', help="Dual segment clustering of the configured devices").set_defaults(func=cmd_cluster)

    train = subparsers.add_parser('train', help="Runs the scenario named in the configuration")
    train.add_argument('--seeds', type=int, default=1, help="Number of paired seeds")
    train.set_defaults(func=cmd_train)

    bound = subparsers.add_parser('bound', help="Convergence bound of the clustered system")
    bound.add_argument('--soundness', action='store_true', help="Runs the bound soundness harness instead")
    bound.set_defaults(func=cmd_bound)

    subparsers.add_parser('optimize', help="PPO power / update allocation").set_defaults(func=cmd_optimize)

    scenario = subparsers.add_parser('scenario', help="Runs a configuration or benchmark recipe")
    scenario.add_argument('name', nargs='?', choices=SCENARIOS, help="Recipe name")
    scenario.add_argument('--seeds', type=int, default=1, help="Number of paired seeds")
    scenario.add_argument('--threshold', type=float, default=None, help="Single CAMU threshold level (config3_camu)")
    scenario.add_argument('--manifest', default=None, help="Regenerates the bundle of a manifest.json")
    scenario.set_defaults(func=cmd_scenario)

    compare = subparsers.add_parser('compare', help="Paired comparison of bundles")
    compare.add_argument('bundles', nargs='+', help="Bundle directories")
    compare.set_defaults(func=cmd_compare)

    plot = subparsers.add_parser('plot', help="Plots of a bundle")
    plot.add_argument('bundle', help="Bundle directory")
    plot.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    args = get_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)
    try:
        args.func(args)
    except ConfigError as exc:
        logging.error("Configuration error: %s", exc)
        return EXIT_CONFIG
    except DivergenceError as exc:
        logging.error("Training diverged: %s", exc)
        return EXIT_DIVERGENCE
    except InfeasibleError as exc:
        logging.error("Infeasible allocation: %s", exc)
        return EXIT_INFEASIBLE
    except ProtocolMismatchError as exc:
        logging.error("Protocol mismatch: %s", exc)
        return EXIT_PROTOCOL
    except Exception:
        logging.exception("Error!")
        return EXIT_UNEXPECTED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
