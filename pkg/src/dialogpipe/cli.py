"""Command-line entry point: ``dialogpipe <subcommand> ...``.

Exit codes: 0 success, 1 operational failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .ask_engine import CollectionJob, SimulatorMode, SimulatorSpec, read_seeds, run_job, sample_seeds
from .capo import Strategy, build_pairs, write_pairs
from .config import PipelineConfig, load_config
from .conversation import Direction, read_conversations, write_conversations
from .curation import SelectionPolicy, filter_dataset, label_dataset, read_labels, select_ctx_queries, write_labels
from .errors import PipelineError
from .export import DPO_TRAINER_DEFAULTS, SFT_TRAINER_DEFAULTS, ExportConfig, Unit, export_dpo, export_sft
from .gateway import Backend, BackendKind, BackendProfile, CallLog, connect
from .judge_eval import TABLE_HEADERS, EvalReport, aggregate, judge_all, load_bench, run_candidate
from .metrics import TABLE_HEADER, DatasetStats, compute_stats

log = logging.getLogger("dialogpipe")


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(
    out: str | Path, command: str, args: argparse.Namespace, cfg: PipelineConfig | None, inputs: Sequence[str | None]
) -> Path:
    """Write ``<out>.manifest.json`` with config snapshot, input and output digests."""
    out = Path(out)
    params = {k: v for k, v in sorted(vars(args).items()) if k not in {"func", "command"}}
    manifest = {
        "tool": "dialogpipe",
        "version": __version__,
        "command": command,
        "args": json.loads(json.dumps(params, default=str)),
        "config": cfg.snapshot() if cfg else None,
        "inputs": {str(p): sha256_file(p) for p in inputs if p and Path(p).is_file()},
        "output": {str(out): sha256_file(out)},
    }
    path = out.with_name(out.name + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


class Context:
    """Per-invocation state: config, call log and connected backends."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.cfg = load_config(args.config) if args.config else PipelineConfig()
        log_path = args.call_log or self.cfg.paths.get("call_log")
        self.call_log = CallLog(log_path)
        self._backends: dict[str, Backend] = {}

    def backend(self, name: str) -> Backend:
        """Connect a profile by name; ``mock:<script>`` and ``echo`` are built in."""
        if name not in self._backends:
            if name.startswith("mock:"):
                profile = BackendProfile(name, BackendKind.MOCK, script_path=name[5:])
            elif name == "echo":
                profile = BackendProfile(name, BackendKind.MOCK, echo=True)
            else:
                profile = self.cfg.profile(name)
            self._backends[name] = connect(profile, call_log=self.call_log)
        return self._backends[name]

    def setting(self, section: str, key: str, cli_value: Any, default: Any) -> Any:
        if cli_value is not None:
            return cli_value
        return getattr(self.cfg, section).get(key, default)


# --- subcommands -------------------------------------------------------------------


def cmd_collect(ctx: Context, a: argparse.Namespace) -> int:
    seeds = read_seeds(a.seeds)
    sample = ctx.setting("collect", "sample", a.sample, None)
    if sample is not None:
        seeds = sample_seeds(seeds, sample, ctx.setting("collect", "sample_seed", a.sample_seed, 0))
    mode = SimulatorMode(ctx.setting("collect", "simulator_mode", a.simulator_mode, SimulatorMode.ASK_MODEL.value))
    assistant = ctx.backend(a.assistant)
    simulator = SimulatorSpec(mode, ctx.backend(a.simulator))
    checkpoint = Path(a.checkpoint or f"{a.out}.checkpoint.jsonl")
    if not a.resume and checkpoint.exists():
        checkpoint.unlink()
    job = CollectionJob(
        seeds=seeds,
        assistant=assistant,
        simulator=simulator,
        output_path=a.out,
        checkpoint_path=checkpoint,
        target_turns=ctx.setting("collect", "target_turns", a.turns, 10),
        workers=ctx.setting("collect", "workers", a.workers, 1),
    )
    summary = run_job(job)
    write_manifest(a.out, "collect", a, ctx.cfg, [a.seeds])
    print(json.dumps({"completed": summary.completed, "failed": summary.failed, "resumed": summary.resumed}))
    return 0


def cmd_filter(ctx: Context, a: argparse.Namespace) -> int:
    policy = ctx.cfg.filter_policy(
        min_query_chars=a.min_query_chars,
        repetition_threshold=a.repetition_threshold,
        blocklist_path=a.blocklist,
        drop_mode=a.drop_mode,
    )
    kept, removals = [], []
    for conv, outcome in filter_dataset(read_conversations(a.data), policy):
        if outcome.kept is not None:
            kept.append(outcome.kept)
        removals += [
            {"session_id": conv.session_id, "turn_index": r.turn_index, "reason": r.reason} for r in outcome.removals
        ]
    write_conversations(a.out, kept)
    removals_path = Path(f"{a.out}.removals.jsonl")
    removals_path.write_text("".join(json.dumps(r) + "\n" for r in removals), encoding="utf-8")
    write_manifest(a.out, "filter", a, ctx.cfg, [a.data, policy.blocklist_path])
    print(json.dumps({"kept": len(kept), "removals": len(removals)}))
    return 0


def cmd_ctx_label(ctx: Context, a: argparse.Namespace) -> int:
    policy = SelectionPolicy(ctx.setting("ctx", "policy", a.policy, SelectionPolicy.HEURISTIC_ONLY.value))
    judge_name = ctx.setting("ctx", "judge", a.judge, None)
    judge = ctx.backend(judge_name) if judge_name else None
    labels = label_dataset(read_conversations(a.data), policy, judge, workers=ctx.setting("ctx", "workers", a.workers, 1))
    write_labels(a.out, labels)
    write_manifest(a.out, "ctx-label", a, ctx.cfg, [a.data])
    print(json.dumps({"labels": len(labels), "dependent": sum(lb.dependent for lb in labels)}))
    return 0


def cmd_stats(ctx: Context, a: argparse.Namespace) -> int:
    labels = read_labels(a.ctx_labels) if a.ctx_labels else None
    stats = compute_stats(read_conversations(a.data), labels, heuristic_fallback=a.heuristic_fallback or labels is None)
    text = json.dumps(stats.to_dict(), indent=2) if a.format == "json" else f"{TABLE_HEADER}\n{stats.table_row(a.name)}"
    print(text)
    if a.out:
        Path(a.out).write_text(json.dumps(stats.to_dict(), indent=2) + "\n", encoding="utf-8")
        write_manifest(a.out, "stats", a, ctx.cfg, [a.data, a.ctx_labels])
    return 0


def cmd_capo(ctx: Context, a: argparse.Namespace) -> int:
    dataset = read_conversations(a.data)
    limit = ctx.setting("capo", "limit", a.limit, None)
    if a.ctx_labels:
        selection = sorted((r["session_id"], int(r["turn_index"])) for r in read_labels(a.ctx_labels) if r["dependent"])
    else:
        selection = select_ctx_queries(dataset, SelectionPolicy.HEURISTIC_ONLY)
    if limit is not None:
        selection = selection[:limit]
    strategies = a.strategies or ctx.cfg.capo.get("strategies") or [s.value for s in Strategy]
    backend = ctx.backend(ctx.setting("capo", "backend", a.backend, None) or _missing("--backend"))
    result = build_pairs(dataset, selection, strategies, backend, workers=ctx.setting("capo", "workers", a.workers, 1))
    write_pairs(a.out, result.pairs)
    write_manifest(a.out, "capo", a, ctx.cfg, [a.data, a.ctx_labels])
    print(json.dumps({"pairs": len(result.pairs), "drops": len(result.drops), "failures": len(result.failures)}))
    return 0


def _missing(flag: str):
    raise PipelineError(f"{flag} is required (or set it in the config)")


def _export_config(ctx: Context, a: argparse.Namespace, direction: str, defaults: dict) -> ExportConfig:
    return ExportConfig(
        direction=Direction(direction),
        max_units=ctx.setting("export", "max_units", a.max_units, 4096),
        unit=Unit(ctx.setting("export", "unit", a.unit, Unit.APPROX_TOKENS.value)),
        template=ctx.setting("export", "template", a.template, "bracket"),
        trainer_defaults=defaults,
    )


def cmd_export_sft(ctx: Context, a: argparse.Namespace) -> int:
    direction = ctx.setting("export", "direction", a.direction, Direction.CHAT.value)
    cfg = _export_config(ctx, a, direction, SFT_TRAINER_DEFAULTS)
    summary = export_sft(read_conversations(a.data), cfg, a.out)
    write_manifest(a.out, "export-sft", a, ctx.cfg, [a.data])
    print(json.dumps({"written": summary.written, "truncated": summary.truncated, "skipped": summary.skipped}))
    return 0


def cmd_export_dpo(ctx: Context, a: argparse.Namespace) -> int:
    cfg = _export_config(ctx, a, Direction.CHAT.value, DPO_TRAINER_DEFAULTS)
    summary = export_dpo(a.pairs, cfg, a.out)
    write_manifest(a.out, "export-dpo", a, ctx.cfg, [a.pairs])
    print(json.dumps({"written": summary.written, "truncated": summary.truncated, "skipped": summary.skipped}))
    return 0


def cmd_eval(ctx: Context, a: argparse.Namespace) -> int:
    n_turns = ctx.setting("eval", "n_turns", a.n_turns, 8)
    bench = load_bench(a.bench, n_turns=n_turns)
    workers = ctx.setting("eval", "workers", a.workers, 1)
    referenced = False if a.no_reference else ctx.cfg.eval.get("referenced")
    run = run_candidate(bench, ctx.backend(a.candidate), workers=workers)
    judged = judge_all(
        run.transcripts, bench, ctx.backend(a.judge), ctx.setting("eval", "retries", a.retries, 1),
        workers=workers, referenced=referenced,
    )  # fmt: skip
    report = aggregate(judged.verdicts, n_failed=judged.n_failed + len(run.failures) * n_turns)
    out = Path(a.out)
    out.write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    write_conversations(f"{out}.transcripts.jsonl", [run.transcripts[s.session_id] for s in bench if s.session_id in run.transcripts])
    ordered = sorted(judged.verdicts, key=lambda v: (v.session_id, v.turn))
    Path(f"{out}.verdicts.jsonl").write_text("".join(json.dumps(v.to_dict()) + "\n" for v in ordered), encoding="utf-8")
    write_manifest(out, "eval", a, ctx.cfg, [a.bench])
    print("\n".join(report.table_rows(a.name)))
    return 0


def _named(spec: str) -> tuple[str, str]:
    name, sep, path = spec.partition("=")
    return (name, path) if sep else (Path(spec).stem, spec)


def cmd_report(ctx: Context, a: argparse.Namespace) -> int:
    if not a.eval and not a.stats:
        raise PipelineError("report needs at least one --eval or --stats input")
    lines: list[str] = []
    if a.stats:
        lines.append(TABLE_HEADER)
        for spec in a.stats:
            name, path = _named(spec)
            stats = DatasetStats(**json.loads(Path(path).read_text(encoding="utf-8")))
            lines.append(stats.table_row(name))
    if a.eval:
        reports = [(name, EvalReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))) for name, path in map(_named, a.eval)]
        for i, header in enumerate(TABLE_HEADERS):
            if lines:
                lines.append("")
            lines.append(header)
            lines += [rep.table_rows(name)[i] for name, rep in reports]
    text = "\n".join(lines)
    print(text)
    if a.out:
        Path(a.out).write_text(text + "\n", encoding="utf-8")
    return 0


# --- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dialogpipe", description="Multi-turn instruction data pipeline.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", help="pipeline TOML config")
    p.add_argument("--call-log", help="JSONL file receiving every backend call")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    s = sub.add_parser("collect", help="collect multi-turn sessions from seed queries")
    s.add_argument("--seeds", required=True)
    s.add_argument("--turns", type=int, help="target query-response pairs per session (default 10)")
    s.add_argument("--assistant", required=True, help="assistant profile name")
    s.add_argument("--simulator", required=True, help="user-simulator profile name")
    s.add_argument("--simulator-mode", choices=[m.value for m in SimulatorMode])
    s.add_argument("--out", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--workers", type=int)
    s.add_argument("--resume", action="store_true")
    s.add_argument("--sample", type=int, help="uniformly sample this many seeds")
    s.add_argument("--sample-seed", type=int)
    s.set_defaults(func=cmd_collect)

    s = sub.add_parser("filter", help="drop or truncate sessions with short/repetitive/sensitive turns")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--min-query-chars", type=int)
    s.add_argument("--repetition-threshold", type=float)
    s.add_argument("--blocklist")
    s.add_argument("--drop-mode", choices=["drop_session", "truncate_at_violation"])
    s.set_defaults(func=cmd_filter)

    s = sub.add_parser("ctx-label", help="label context-dependent queries")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--policy", choices=[x.value for x in SelectionPolicy])
    s.add_argument("--judge")
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_ctx_label)

    s = sub.add_parser("stats", help="dataset statistics")
    s.add_argument("--data", required=True)
    s.add_argument("--ctx-labels")
    s.add_argument("--format", choices=["table", "json"], default="table")
    s.add_argument("--heuristic-fallback", action="store_true")
    s.add_argument("--name", default="dataset")
    s.add_argument("--out")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("capo", help="build context-aware preference pairs")
    s.add_argument("--data", required=True)
    s.add_argument("--ctx-labels", help="labels file; dependent queries are selected")
    s.add_argument("--backend")
    s.add_argument("--strategies", nargs="+", choices=[x.value for x in Strategy])
    s.add_argument("--limit", type=int)
    s.add_argument("--workers", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_capo)

    for name, func in (("export-sft", cmd_export_sft), ("export-dpo", cmd_export_dpo)):
        s = sub.add_parser(name, help=f"write {name[7:].upper()} training file")
        if name == "export-sft":
            s.add_argument("--data", required=True)
            s.add_argument("--direction", choices=[d.value for d in Direction])
        else:
            s.add_argument("--pairs", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--max-units", type=int)
        s.add_argument("--unit", choices=[u.value for u in Unit])
        s.add_argument("--template", choices=["bracket", "role_prefix"])
        s.set_defaults(func=func)

    s = sub.add_parser("eval", help="run the multi-turn judge benchmark")
    s.add_argument("--bench", required=True)
    s.add_argument("--candidate", required=True)
    s.add_argument("--judge", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--retries", type=int)
    s.add_argument("--workers", type=int)
    s.add_argument("--n-turns", type=int)
    s.add_argument("--no-reference", action="store_true", help="judge without reference answers")
    s.add_argument("--name", default="candidate")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="render summary table rows from stats/eval JSON")
    s.add_argument("--eval", action="append", metavar="NAME=PATH")
    s.add_argument("--stats", action="append", metavar="NAME=PATH")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        ctx = Context(args)
        return args.func(ctx, args)
    except (PipelineError, OSError, ValueError) as exc:
        print(f"dialogpipe {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
