"""Command-line entry point: ``expertnav run|ablate|gen-fixtures|record|replay``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .backends import BackendConfigError, BackendError
from .engine import AgentConfig
from .environment import WorldError
from .harness import SuiteConfig, format_table, generate_fixtures, run_ablations, run_suite
from .roster import DECISION_SAMPLING, EXPERT_GROUPS, SamplingProfile

log = logging.getLogger("expertnav")

# config-file keys that may override command-line flags
CONFIG_KEYS = {
    "world", "episodes", "backend", "seed", "n_samples", "max_steps", "ablate", "out", "parallel",
    "retry_limit", "prompts", "remote_profiles", "transcript", "viewpoints", "per_world",
}


def _suite_flags(p: argparse.ArgumentParser, backend: str | None = "oracle") -> None:
    p.add_argument("--world", action="append", help="world file or directory (repeatable)")
    p.add_argument("--episodes", help="episode JSONL file")
    if backend is not None:
        p.add_argument("--backend", default=backend, help="oracle | scripted[:path] | replay:path | remote:profile")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-samples", type=int, default=DECISION_SAMPLING.breadth, help="decision samples per step")
    p.add_argument("--max-steps", type=int, default=15)
    p.add_argument("--ablate", action="append", default=[], choices=sorted(EXPERT_GROUPS), metavar="GROUP",
                   help="disable an expert group (repeatable)")
    p.add_argument("--retry-limit", type=int, default=2)
    p.add_argument("--parallel", type=int, default=1, help="episodes run concurrently")
    p.add_argument("--prompts", help="directory with a replacement prompt pack")
    p.add_argument("--out", default="runs/latest")
    p.add_argument("--config", help="YAML or JSON file; its keys override flags")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="expertnav", description="Multi-expert discussion navigation harness")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    _suite_flags(sub.add_parser("run", help="run an episode suite"))
    _suite_flags(sub.add_parser("ablate", help="run the full pipeline and one suite per disabled expert group"))
    _suite_flags(sub.add_parser("record", help="run a suite and record every exchange to <out>/transcript.jsonl"))
    rp = sub.add_parser("replay", help="run a suite from a recorded transcript")
    _suite_flags(rp, backend=None)
    rp.add_argument("--transcript", help="transcript JSONL (default: <out>/transcript.jsonl)")

    gp = sub.add_parser("gen-fixtures", help="write a generated benchmark")
    gp.add_argument("--out", default="fixtures")
    gp.add_argument("--seed", type=int, default=7)
    gp.add_argument("--episodes", type=int, default=None, help="number of worlds (one episode each by default)")
    gp.add_argument("--per-world", type=int, default=1)
    gp.add_argument("--viewpoints", type=int, default=10)
    gp.add_argument("--config", help="YAML or JSON file; its keys override flags")
    return parser


def apply_config_file(args: argparse.Namespace) -> argparse.Namespace:
    if not getattr(args, "config", None):
        return args
    data = yaml.safe_load(Path(args.config).read_text()) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{args.config}: expected a mapping")
    for key, value in data.items():
        key = key.replace("-", "_")
        if key not in CONFIG_KEYS:
            raise ValueError(f"{args.config}: unknown key {key!r}")
        if key in ("world", "ablate") and isinstance(value, str):
            value = [value]
        setattr(args, key, value)
    return args


def suite_config(args: argparse.Namespace, backend: str) -> SuiteConfig:
    if not args.world or not args.episodes:
        raise ValueError("--world and --episodes are required")
    agent = AgentConfig(
        decision_sampling=SamplingProfile(DECISION_SAMPLING.diversity, int(args.n_samples)),
        max_steps=int(args.max_steps),
        ablation=frozenset(args.ablate or ()),
        retry_limit=int(args.retry_limit),
    )
    return SuiteConfig(
        worlds=[Path(w) for w in args.world],
        episodes=Path(args.episodes),
        backend=backend,
        seed=int(args.seed),
        out=Path(args.out),
        parallel=int(args.parallel),
        agent=agent,
        prompts=Path(args.prompts) if args.prompts else None,
        remote_profiles=getattr(args, "remote_profiles", None) or {},
    )


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = apply_config_file(args)
        if args.command == "gen-fixtures":
            manifest = generate_fixtures(
                args.out, int(args.seed), int(args.episodes or 72), int(args.per_world), int(args.viewpoints)
            )
            print(json.dumps(manifest, sort_keys=True))
            return 0
        if args.command == "replay":
            transcript = args.transcript or str(Path(args.out) / "transcript.jsonl")
            config = suite_config(args, f"replay:{transcript}")
        else:
            config = suite_config(args, args.backend)
        if args.command == "ablate":
            reports = run_ablations(config)
            print(format_table([(r["label"], r["aggregate"]) for r in reports]), end="")
            return 0
        if args.command == "record":
            config.record = config.out / "transcript.jsonl"
        report = run_suite(config)
        print(format_table([(report["label"], report["aggregate"])]), end="")
        return 0
    except (BackendConfigError, FileNotFoundError, ValueError, WorldError) as exc:
        print(f"expertnav: error: {exc}", file=sys.stderr)
        return 2
    except BackendError as exc:
        print(f"expertnav: backend error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
