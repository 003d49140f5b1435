"""Command-line interface: simulate, localize, evaluate, sweep, dump-candidates.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .doa import load_posteriors
from .evaluate import (
    EstimatorConfig,
    ExperimentConfig,
    FusionConfig,
    load_experiment_config,
    localize_scenario,
    run_experiment,
    run_sweep,
    write_records_csv,
)
from .room_sim import (
    ScenarioConfig,
    bandlimited_noise,
    generate_scenario,
    load_scenario,
    render_node_audio,
    rir_for_scenario,
    save_scenario,
)
from .sigproc import write_wav


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _add_estimator_flags(parser):
    parser.add_argument("--estimator", default="oracle",
                        choices=["oracle", "srp_phat", "music", "cnn", "file"],
                        help="per-node DOA estimator")
    parser.add_argument("--weights", help="ADLW weights file (estimator=cnn)")
    parser.add_argument("--posteriors", help="JSON posterior file (estimator=file)")
    parser.add_argument("--grid-classes", type=int, default=37)
    parser.add_argument("--noise-deg", type=float, default=0.0,
                        help="oracle angular noise std dev")
    parser.add_argument("--exact", action="store_true",
                        help="oracle emits continuous bearings instead of grid classes")
    parser.add_argument("--order", type=int, default=6, help="image-source reflection order")
    parser.add_argument("--k", type=int, default=None, help="K-best node selection")
    parser.add_argument("--no-ghosts", action="store_true")
    parser.add_argument("--bandwidth", type=float, default=0.18, help="mean-shift bandwidth")


def _estimator_from_args(args) -> EstimatorConfig:
    name = "oracle" if args.estimator == "file" else args.estimator
    return EstimatorConfig(
        name=name,
        grid_classes=args.grid_classes,
        angular_noise_deg=args.noise_deg,
        quantize=not args.exact,
        reflection_order=args.order,
        weights_path=args.weights,
    )


def _fusion_from_args(args) -> FusionConfig:
    return FusionConfig(include_ghosts=not args.no_ghosts, bandwidth_m=args.bandwidth)


def _localize(args) -> "tuple":
    scenario = load_scenario(args.scenario)
    override = None
    if args.estimator == "file":
        if not args.posteriors:
            raise _UsageError("estimator 'file' needs --posteriors")
        override = load_posteriors(args.posteriors)
    result = localize_scenario(
        scenario,
        _estimator_from_args(args),
        _fusion_from_args(args),
        selection_k=args.k,
        posterior_override=override,
    )
    return scenario, result


def cmd_simulate(args) -> int:
    config = (
        ScenarioConfig.from_dict(json.loads(Path(args.config).read_text()))
        if args.config
        else ScenarioConfig()
    )
    scenario = generate_scenario(config, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_scenario(scenario, out / "scenario.json")
    if not args.skip_audio:
        rir = rir_for_scenario(scenario, args.order)
        n = int(args.duration * 16000)
        sources = [
            bandlimited_noise(n, 16000, np.random.default_rng([scenario.seed, 2, b]))
            for b in range(scenario.speaker_count)
        ]
        for nid, pose in enumerate(scenario.node_poses):
            audio = render_node_audio(
                scenario, pose, sources, rir,
                rng=np.random.default_rng([scenario.seed, 3, nid]),
            )
            write_wav(out / f"node_{nid:02d}.wav", audio)
    print(f"wrote {out / 'scenario.json'}")
    return 0


def cmd_localize(args) -> int:
    _, result = _localize(args)
    for p in result.positions:
        print(f"{p.x:.4f} {p.y:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    config = load_experiment_config(args.config)
    records = run_experiment(config)
    write_records_csv(records, args.out)
    ok = sum(1 for r in records if r.status == "ok")
    print(f"wrote {args.out}: {ok}/{len(records)} trials ok", file=sys.stderr)
    return 0


def _parse_k_values(raw: list[str]) -> list:
    values = []
    for chunk in raw:
        for token in chunk.split(","):
            token = token.strip()
            if not token:
                continue
            values.append(None if token.lower() == "all" else int(token))
    if not values:
        raise _UsageError("--k needs at least one value")
    return values


def cmd_sweep(args) -> int:
    config = load_experiment_config(args.config)
    csv_text = run_sweep(config, _parse_k_values(args.k))
    Path(args.out).write_text(csv_text, newline="\n")
    print(f"wrote {args.out}", file=sys.stderr)
    return 0


def cmd_dump_candidates(args) -> int:
    _, result = _localize(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["x,y,weight,node_a,node_b,ghost_a,ghost_b"]
    for c in result.cloud.points:
        lines.append(
            f"{c.point.x:.6f},{c.point.y:.6f},{c.weight:.6f},"
            f"{c.node_ids[0]},{c.node_ids[1]},{int(c.ghost_flags[0])},{int(c.ghost_flags[1])}"
        )
    (out / "candidates.csv").write_text("\n".join(lines) + "\n", newline="\n")
    lines = ["x,y,mass,member_count"]
    for center, mass, count in zip(
        result.clusters.centers, result.clusters.masses, result.clusters.member_counts
    ):
        lines.append(f"{center.x:.6f},{center.y:.6f},{mass:.6f},{count}")
    (out / "clusters.csv").write_text("\n".join(lines) + "\n", newline="\n")
    print(f"wrote {out / 'candidates.csv'} and {out / 'clusters.csv'}", file=sys.stderr)
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="adhocloc", description="2D speaker localization with ad-hoc arrays")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("simulate", help="generate a scenario and per-node WAVs")
    p.add_argument("--config", help="ScenarioConfig JSON (defaults when omitted)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--duration", type=float, default=1.0, help="source seconds")
    p.add_argument("--order", type=int, default=6)
    p.add_argument("--skip-audio", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("localize", help="run one scenario end to end and print positions")
    p.add_argument("--scenario", required=True)
    _add_estimator_flags(p)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("evaluate", help="run an experiment config and write a CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="K-best ablation with one aggregate row per K")
    p.add_argument("--config", required=True)
    p.add_argument("--k", action="append", required=True,
                   help="comma-separated K values or 'all'; repeatable")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("dump-candidates", help="write the candidate cloud and clusters")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out-dir", required=True)
    _add_estimator_flags(p)
    p.set_defaults(func=cmd_dump_candidates)

    return parser


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help exits through argparse
        return 0 if exc.code in (0, None) else int(exc.code)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))
