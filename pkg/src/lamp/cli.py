"""Command-line entry points.

``lamp`` drives the pipeline and service:

* ``lamp run DATASET --out DIR [--config cfg.yaml] [--no-loop-closure]
  [--no-icm] [--survey-priors N]`` — batch pipeline over a recorded dataset.
* ``lamp optimize GRAPH.g2o --out OUT.g2o [--no-icm]`` — optimize a graph
  file, passing loop closures through the consistency filter first.
* ``lamp serve DATASET [--host H] [--port P] [--rounds N] [--ui-dir DIR]``
  — run the full multi-robot flow into a base station and serve it.

``lamp-sim`` generates datasets:

* ``lamp-sim generate --scenario S.yaml --out DIR``

Exit codes: 0 success, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

EXIT_CONFIG = 2
EXIT_DATA = 3


def _load_dataset(path):
    from lamp.sim.scenario import load_dataset

    return load_dataset(path)


def _pipeline_config(args):
    from lamp.config import load_pipeline_config

    overrides = {}
    if getattr(args, "no_loop_closure", False):
        overrides["use_loop_closures"] = False
    if getattr(args, "no_icm", False):
        overrides["use_icm"] = False
    if getattr(args, "survey_priors", None):
        overrides["survey_prior_every"] = args.survey_priors
    return load_pipeline_config(getattr(args, "config", None), overrides)


def _cmd_run(args) -> int:
    from lamp.pipeline import run_pipeline, write_outputs

    config = _pipeline_config(args)
    dataset = _load_dataset(args.dataset)
    result = run_pipeline(dataset, config)
    write_outputs(result, args.out)
    print(json.dumps(result.metrics, indent=2, sort_keys=True))
    return 0


def _cmd_optimize(args) -> int:
    from lamp.icm import Icm
    from lamp.optimizer import SingularSystem, optimize
    from lamp.posegraph import EdgeKind, load_g2o, save_g2o

    graph = load_g2o(args.graph)
    if not args.no_icm:
        icm = Icm()
        for edge in list(graph.edges):
            if edge.kind is EdgeKind.LOOP_CLOSURE and edge.active:
                graph.set_edge_active(edge.index, False)
                result = icm.submit(edge, graph)
                icm.apply_to_graph(result, graph)
    try:
        result = optimize(graph)
    except SingularSystem as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    save_g2o(graph, args.out)
    print(
        json.dumps(
            {
                "status": result.status,
                "iterations": result.iterations,
                "initial_error": result.initial_error,
                "final_error": result.final_error,
                "active_closures": sum(
                    1
                    for e in graph.edges
                    if e.kind is EdgeKind.LOOP_CLOSURE and e.active
                ),
            },
            indent=2,
            sort_keys=True,
        )
    )
    return 0


def _cmd_serve(args) -> int:
    from lamp.basestation import BaseStation, MessageBus
    from lamp.config import load_station_config
    from lamp.pipeline import run_multirobot
    from lamp.service import serve

    station_config = load_station_config(getattr(args, "config", None))
    if args.persist_dir:
        station_config.persist_dir = args.persist_dir
    station = BaseStation(station_config)
    if args.dataset:
        dataset = _load_dataset(args.dataset)
        config = _pipeline_config(args)
        print("running robot front-ends and fusing at the base station...", file=sys.stderr)
        run_multirobot(dataset, config, station, rounds=args.rounds)
        print(f"station ready at revision {station.graph.revision}", file=sys.stderr)
    serve(station, host=args.host, port=args.port, ui_dir=args.ui_dir)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="lamp", description="multi-robot lidar SLAM pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run the batch pipeline over a dataset directory")
    run_p.add_argument("dataset")
    run_p.add_argument("--out", required=True)
    run_p.add_argument("--config")
    run_p.add_argument("--no-loop-closure", action="store_true")
    run_p.add_argument("--no-icm", action="store_true")
    run_p.add_argument("--survey-priors", type=int, default=0,
                       help="add a ground-truth pose prior every N key-scans")
    run_p.set_defaults(func=_cmd_run)

    opt_p = sub.add_parser("optimize", help="optimize a g2o graph file")
    opt_p.add_argument("graph")
    opt_p.add_argument("--out", required=True)
    opt_p.add_argument("--no-icm", action="store_true")
    opt_p.set_defaults(func=_cmd_optimize)

    serve_p = sub.add_parser("serve", help="fuse a dataset at a base station and serve it")
    serve_p.add_argument("dataset", nargs="?")
    serve_p.add_argument("--config")
    serve_p.add_argument("--host", default="127.0.0.1")
    serve_p.add_argument("--port", type=int, default=8800)
    serve_p.add_argument("--rounds", type=int, default=2)
    serve_p.add_argument("--ui-dir")
    serve_p.add_argument("--persist-dir")
    serve_p.add_argument("--no-loop-closure", action="store_true")
    serve_p.add_argument("--no-icm", action="store_true")
    serve_p.set_defaults(func=_cmd_serve)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # config vs data split below
        from lamp.config import ConfigError
        from lamp.posegraph import ParseError
        from lamp.sim.scenario import InvalidSpec

        if isinstance(exc, (ConfigError, InvalidSpec)):
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        if isinstance(exc, (ParseError, ValueError, KeyError)):
            print(f"data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        raise


def sim_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="lamp-sim", description="tunnel-world simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    gen = sub.add_parser("generate", help="generate a dataset from a scenario file")
    gen.add_argument("--scenario", required=True)
    gen.add_argument("--out", required=True)
    args = parser.parse_args(argv)

    from lamp.sim.scenario import InvalidSpec, ScenarioSpec, run_scenario, write_dataset

    try:
        spec = ScenarioSpec.from_yaml(args.scenario)
        dataset = run_scenario(spec)
        write_dataset(dataset, args.out)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InvalidSpec as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    robots = ", ".join(f"robot{r.robot}: {len(r)} scans" for r in dataset.robots)
    print(f"wrote {args.out} ({robots})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
