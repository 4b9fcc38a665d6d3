"""
H-DAGap 命令列入口

子命令:
- run: 單一模式的多次 trial
- ablation: 四種模式 × 各 agent 數量的消融表
- graph: 印出序列模式的 episode 工作流
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv
from pydantic import ValidationError

from src.core.config import load_config
from src.core.errors import ConfigError
from src.harness import ExperimentSpec, dump_json, run_ablation_study, run_experiment
from src.navigation.pipeline import EpisodeRunner, PipelineMode

MODE_CHOICES = [m.value for m in PipelineMode]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hdagap", description="H-DAGap crowd navigation experiments")
    parser.add_argument("--log-level", default=None, help="logging 等級（預設讀取 HDAGAP_LOG_LEVEL，否則 WARNING）")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=Path, default=None, help="KEY=VALUE 配置檔")
        p.add_argument("--trials", type=int, default=1)
        p.add_argument("--seed", type=lambda s: int(s, 0), default=None, help="基底種子（u64）")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--out", type=Path, default=None, help="輸出目錄")
        p.add_argument("--plots", action="store_true", help="輸出每個 trial 的 SVG")
        p.add_argument("--continue-after-collision", action="store_true", help="碰撞後繼續行駛（不在第一次碰撞時停止）")
        p.add_argument("--threaded", action="store_true", help="規劃與控制分開兩個執行緒")

    run = sub.add_parser("run", help="執行單一模式")
    add_common(run)
    run.add_argument("--mode", choices=MODE_CHOICES, default=PipelineMode.FULL.value)
    run.add_argument("--agents", type=int, default=None)

    ablation = sub.add_parser("ablation", help="四種模式的消融實驗")
    add_common(ablation)
    ablation.add_argument("--agents", type=int, nargs="+", default=[20, 50])
    ablation.add_argument("--modes", choices=MODE_CHOICES, nargs="+", default=MODE_CHOICES)

    graph = sub.add_parser("graph", help="印出 episode 工作流")
    graph.add_argument("--config", type=Path, default=None)
    return parser


def _load(args: argparse.Namespace):
    overrides = {}
    if getattr(args, "continue_after_collision", False):
        overrides["stop_on_collision"] = False
    if getattr(args, "threaded", False):
        overrides["threaded"] = True
    if args.command == "run" and args.agents is not None:
        overrides["n_agents"] = args.agents
    return load_config(args.config, **overrides)


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    level = args.log_level or os.getenv("HDAGAP_LOG_LEVEL", "WARNING")
    logging.basicConfig(level=level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        config = _load(args)

        if args.command == "graph":
            builder = EpisodeRunner(config).build_graph()
            print(builder.draw_ascii())
            print("\n".join(builder.describe()))
            return 0

        base_seed = config.scenario.rng_seed if args.seed is None else args.seed
        if args.out is not None:
            dump_json(config.to_dict(), args.out / "config.json")

        if args.command == "run":
            spec = ExperimentSpec(
                config=config,
                mode=PipelineMode(args.mode),
                trials=args.trials,
                workers=args.workers,
                base_seed=base_seed,
                out_dir=args.out,
                emit_plots=args.plots,
            )
            table, _ = run_experiment(spec)
        else:
            table = run_ablation_study(
                config,
                agent_counts=args.agents,
                trials=args.trials,
                base_seed=base_seed,
                workers=args.workers,
                out_dir=args.out,
                modes=[PipelineMode(m) for m in args.modes],
                emit_plots=args.plots,
            )
    except (ConfigError, ValidationError, OSError) as e:
        print(f"錯誤: {e}", file=sys.stderr)
        return 2

    print(table.format())
    return 0


if __name__ == "__main__":
    sys.exit(main())
