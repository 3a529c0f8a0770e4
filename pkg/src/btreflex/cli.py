"""Command-line entry point: ``btreflex run|suite|plot-data|exp|validate-bt``.

Exit codes: 0 success, 1 mission failure or invalid plan, 2 configuration
error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from .bench import (
    MAX_ITERS,
    build_corpus,
    corpus_from_json,
    fixture_gateway,
    inject_and_score,
    run_mission_loop,
    run_suite,
    transcript_path,
)
from .bt import parse_bt
from .capture import AnnotatedStateSequence
from .errors import BTReflexError, PlanParseError
from .experience import ExperienceBase
from .llm import Gateway, HttpProvider, MockProvider
from .scenes import TASK_IDS
from .sim import RATE_HZ

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("btreflex")


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    tasks: list[int]
    provider: str = "mock"
    transcript: Path | None = None
    max_iters: int = MAX_ITERS
    seed: int = 0
    out: Path = Path("runs")
    evaluator_mode: str = "oracle"
    trials: int = 1
    jobs: int = 1
    base_url: str | None = None
    model: str | None = None
    exp_dir: Path | None = None

    def validate(self) -> None:
        if not self.tasks:
            raise ConfigError("no tasks selected")
        bad = [t for t in self.tasks if t not in TASK_IDS]
        if bad:
            raise ConfigError(f"unknown task id(s) {bad}; valid ids are 1..11")
        if not 1 <= self.max_iters <= MAX_ITERS:
            raise ConfigError(f"--max-iters must be in 1..{MAX_ITERS}, got {self.max_iters}")
        if self.provider not in ("mock", "http"):
            raise ConfigError(f"unknown provider {self.provider!r}")
        if self.provider == "http" and not (self.base_url and self.model):
            raise ConfigError("the http provider needs --base-url and --model")
        if self.transcript is not None and not self.transcript.exists():
            raise ConfigError(f"transcript {self.transcript} does not exist")
        if self.trials < 1 or self.jobs < 1:
            raise ConfigError("--trials and --jobs must be >= 1")

    def gateway_factory(self) -> Callable[[int], Gateway]:
        if self.provider == "http":
            provider = HttpProvider(str(self.base_url), str(self.model))
            return lambda _task: Gateway(provider)
        if self.transcript is None:
            return fixture_gateway  # packaged transcripts
        path = self.transcript
        if path.is_dir():
            return lambda task: Gateway(MockProvider.from_file(path / transcript_path(task).name))
        return lambda _task: Gateway(MockProvider.from_file(path))

    def experience_base(self) -> ExperienceBase:
        return ExperienceBase(self.exp_dir or self.out / "experience")


def _tasks(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError:
        raise ConfigError(f"bad task list {text!r}") from None


def _config(args: argparse.Namespace, tasks: list[int]) -> RunConfig:
    cfg = RunConfig(
        tasks=tasks,
        provider=args.provider,
        transcript=Path(args.transcript) if args.transcript else None,
        max_iters=args.max_iters,
        seed=args.seed,
        out=Path(args.out),
        evaluator_mode=args.evaluator,
        trials=getattr(args, "trials", 1),
        jobs=getattr(args, "jobs", 1),
        base_url=args.base_url,
        model=args.model,
        exp_dir=Path(args.exp_dir) if args.exp_dir else None,
    )
    cfg.validate()
    return cfg


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _config(args, [args.task])
    task = cfg.tasks[0]
    gateway = cfg.gateway_factory()(task)
    status, traces = run_mission_loop(
        task, gateway, cfg.experience_base(), cfg.max_iters,
        seed=cfg.seed, evaluator_mode=cfg.evaluator_mode, keep_artifacts=True,
    )
    base = cfg.out / f"task_{task:02d}"
    for tr in traces:
        d = base / f"iter_{tr.iteration}"
        if tr.plan_xml is not None:
            _write(d / "plan.xml", tr.plan_xml)
        if tr.trajectory_jsonl is not None:
            _write(d / "trajectory.jsonl", tr.trajectory_jsonl)
            _write(d / "narrative.txt", (tr.narrative or "") + "\n")
        _write(d / "verdict.json", json.dumps(tr.to_dict(), indent=2) + "\n")
    summary = {"task": task, "seed": cfg.seed, "status": status, "traces": [t.to_dict() for t in traces]}
    _write(base / "traces.json", json.dumps(summary, indent=2) + "\n")
    print(f"task {task}: {status} after {len(traces)} iteration(s); artifacts in {base}")
    return EXIT_OK if status == "Success" else EXIT_FAIL


def cmd_suite(args: argparse.Namespace) -> int:
    tasks = list(TASK_IDS) if args.tasks is None else _tasks(args.tasks)
    cfg = _config(args, tasks)
    corpus = None
    if args.inject:
        if args.inject == "builtin":
            corpus = build_corpus()
        else:
            path = Path(args.inject)
            if not path.exists():
                raise ConfigError(f"corpus {path} does not exist")
            corpus = corpus_from_json(path.read_text(encoding="utf-8"))
    report = run_suite(
        cfg.tasks, cfg.trials, cfg.gateway_factory(), cfg.seed,
        exp_base=cfg.experience_base(), evaluator_mode=cfg.evaluator_mode, max_iters=cfg.max_iters, jobs=cfg.jobs,
    )
    if corpus is not None:
        gateway = cfg.gateway_factory()(cfg.tasks[0]) if cfg.evaluator_mode == "llm" else None
        report.injection = inject_and_score(corpus, cfg.evaluator_mode, gateway).to_dict()
    _write(cfg.out / "report.json", report.to_json() + "\n")
    _write(cfg.out / "report.md", report.to_markdown())
    print(report.to_markdown(), end="")
    return EXIT_OK


def cmd_plot_data(args: argparse.Namespace) -> int:
    try:
        seq = AnnotatedStateSequence.from_jsonl(Path(args.trajectory).read_text(encoding="utf-8"))
    except (OSError, ValueError, KeyError, TypeError, BTReflexError) as exc:
        print(f"error: cannot read trajectory log: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if len(seq) == 0:
        print("error: trajectory log is empty", file=sys.stderr)
        return EXIT_RUNTIME
    out = open(args.output, "w", newline="", encoding="utf-8") if args.output else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["t", "x", "y", "z"])
        for s in seq:
            p = s.pose
            w.writerow([s.data.state.timestamp / RATE_HZ, p.x, p.y, p.z])
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_exp(args: argparse.Namespace) -> int:
    base = ExperienceBase(args.exp_dir)
    if args.exp_cmd == "export":
        text = base.export_jsonl()
        if args.output:
            _write(Path(args.output), text)
        else:
            sys.stdout.write(text)
        return EXIT_OK
    path = Path(args.file)
    if not path.exists():
        raise ConfigError(f"{path} does not exist")
    n = base.import_jsonl(path.read_text(encoding="utf-8"))
    print(f"imported {n} experience(s); base now holds {len(base)}")
    return EXIT_OK


def cmd_validate_bt(args: argparse.Namespace) -> int:
    path = Path(args.plan)
    if not path.exists():
        raise ConfigError(f"{path} does not exist")
    try:
        tree = parse_bt(path.read_text(encoding="utf-8"))
    except PlanParseError as exc:
        print(f"invalid: {type(exc).__name__}: {exc}")
        return EXIT_FAIL
    print(f"valid: {len(tree.nodes)} nodes, {len(tree.leaves())} leaves")
    return EXIT_OK


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--provider", choices=("mock", "http"), default="mock")
    p.add_argument("--transcript", help="mock transcript file (or directory of task_XX.yaml); defaults to the packaged fixtures")
    p.add_argument("--base-url", help="OpenAI-compatible endpoint for --provider http")
    p.add_argument("--model", help="model name for --provider http")
    p.add_argument("--max-iters", type=int, default=MAX_ITERS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs", help="output directory")
    p.add_argument("--evaluator", choices=("oracle", "llm"), default="oracle")
    p.add_argument("--exp-dir", help="experience base directory (default: OUT/experience)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="btreflex", description="Self-refining behavior-tree drone missions.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one task through the closed loop")
    run.add_argument("--task", type=int, required=True)
    _add_common(run)
    run.set_defaults(func=cmd_run)

    suite = sub.add_parser("suite", help="run a task suite and write a metrics report")
    suite.add_argument("--tasks", help="comma-separated task ids (default: all)")
    suite.add_argument("--trials", type=int, default=10)
    suite.add_argument("--jobs", type=int, default=1)
    suite.add_argument("--inject", help="failure corpus JSON, or 'builtin', to score the evaluator")
    _add_common(suite)
    suite.set_defaults(func=cmd_suite)

    plot = sub.add_parser("plot-data", help="trajectory JSONL to (t, x, y, z) CSV")
    plot.add_argument("trajectory")
    plot.add_argument("-o", "--output")
    plot.set_defaults(func=cmd_plot_data)

    exp = sub.add_parser("exp", help="import or export the experience base")
    exp_sub = exp.add_subparsers(dest="exp_cmd", required=True)
    exp_exp = exp_sub.add_parser("export")
    exp_exp.add_argument("--exp-dir", required=True)
    exp_exp.add_argument("-o", "--output")
    exp_imp = exp_sub.add_parser("import")
    exp_imp.add_argument("--exp-dir", required=True)
    exp_imp.add_argument("file")
    exp.set_defaults(func=cmd_exp)

    val = sub.add_parser("validate-bt", help="parse and validate a plan file")
    val.add_argument("plan")
    val.set_defaults(func=cmd_validate_bt)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors are configuration errors
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (BTReflexError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
