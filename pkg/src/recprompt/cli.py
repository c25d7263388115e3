"""Command-line entry point: ``recprompt <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from recprompt import baselines, corpus, topicscore
from recprompt.config import RunConfig, RunConfigError, load_config
from recprompt.gateway import CacheMissError, ConfigError, Gateway, GatewayError, ResponseCache
from recprompt.metrics import RepeatedReport, format_table
from recprompt.mocks import default_mock_backend
from recprompt.optimizer import OptimizerConfig
from recprompt.prompts import TemplateInstruction, initial_template
from recprompt.recommender import RecommenderConfig
from recprompt.tuner import RunDirectory, RunState, TunerConfig, TunerConfigError, final_test, tune

logger = logging.getLogger("recprompt")


class CommandError(RuntimeError):
    pass


# ---------------------------------------------------------------- helpers

def build_gateway(cfg: RunConfig) -> Gateway:
    if cfg.backend == "replay":
        if not cfg.cache_path.exists():
            raise RunConfigError(f"replay backend needs an existing cache file, {cfg.cache_path} not found")
        return Gateway("replay", cache=ResponseCache(cfg.cache_path))
    cache = ResponseCache(cfg.cache_path)
    if cfg.backend == "mock":
        return Gateway("mock", cache=cache, mock=default_mock_backend(), max_in_flight=cfg.max_in_flight)
    return Gateway.live(
        cfg.base_url,
        cache=cache,
        requests_per_minute=cfg.rate_limit or None,
        max_in_flight=cfg.max_in_flight,
    )


def load_data(cfg: RunConfig) -> tuple[corpus.Catalog, corpus.BehaviorParse]:
    catalog = corpus.load_catalog(cfg.news)
    parsed = corpus.load_behaviors(cfg.behaviors, catalog, min_history=int(cfg.split.get("min_history", 1)))
    return catalog, parsed


def load_split(cfg: RunConfig, impressions, resample: bool = False) -> corpus.EvaluationSplit:
    path = Path(cfg.run_dir) / "split.json"
    if path.exists() and not resample:
        return corpus.split_from_manifest(corpus.read_manifest(path), impressions)
    split = corpus.sample_split(
        impressions, int(cfg.split["seed"]), int(cfg.split["validation"]), int(cfg.split["test"])
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    corpus.write_manifest(split, path)
    return split


def recommender_config(cfg: RunConfig) -> RecommenderConfig:
    return RecommenderConfig(
        model=cfg.models["recommender"],
        temperature=float(cfg.temperatures["recommender"]),
        max_tokens=int(cfg.max_tokens["recommender"]),
        max_history=cfg.max_history,
    )


def tuner_config(cfg: RunConfig) -> TunerConfig:
    return TunerConfig(
        iterations=cfg.iterations,
        weights=dict(cfg.objective_weights),
        exemplar_policy=cfg.exemplar_policy,
        seed=int(cfg.split["seed"]),
        workers=cfg.max_in_flight,
        recommender=recommender_config(cfg),
        optimizer=OptimizerConfig(
            model=cfg.models["optimizer"],
            temperature=float(cfg.temperatures["optimizer"]),
            max_tokens=int(cfg.max_tokens["optimizer"]),
        ),
    )


def write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def resolve_template(cfg: RunConfig, name: str) -> TemplateInstruction:
    store = RunDirectory(cfg.run_dir)
    key = name.lower()
    if key in ("initial-io", "io"):
        return initial_template("IO")
    if key in ("initial-cot", "cot"):
        return initial_template("CoT")
    templates = store.load_templates()
    if key == "best":
        if not store.report_path.exists():
            raise CommandError(f"no tuning report in {cfg.run_dir}; run `recprompt tune` first")
        name = store.load_report()["best_template_id"]
    if name not in templates:
        raise CommandError(f"template {name!r} not found in {store.templates_path}")
    return templates[name]


# ---------------------------------------------------------------- commands

def cmd_ingest(cfg: RunConfig, args) -> int:
    catalog, parsed = load_data(cfg)
    summary = {
        "news": cfg.news,
        "behaviors": cfg.behaviors,
        "articles": len(catalog),
        "duplicate_news_ids": catalog.duplicates,
        "impressions": len(parsed.impressions),
        "excluded_impressions": parsed.excluded,
        "repaired_impressions": parsed.repaired,
        "users": len(corpus.last_impression_per_user(parsed.impressions)),
    }
    write_json(Path(cfg.run_dir) / "ingest.json", summary)
    for key, value in summary.items():
        print(f"{key:22s} {value}")
    return 0


def cmd_sample(cfg: RunConfig, args) -> int:
    _, parsed = load_data(cfg)
    split = load_split(cfg, parsed.impressions, resample=True)
    print(
        f"sampled {len(split.validation_users)} validation and {len(split.test_users)} test users "
        f"(seed {split.seed}) -> {Path(cfg.run_dir) / 'split.json'}"
    )
    return 0


def cmd_tune(cfg: RunConfig, args) -> int:
    catalog, parsed = load_data(cfg)
    split = load_split(cfg, parsed.impressions)
    gateway = build_gateway(cfg)
    write_json(Path(cfg.run_dir) / "run_config.json", cfg.to_dict())
    state = tune(
        split, initial_template(cfg.strategy), gateway, catalog, tuner_config(cfg), run_dir=cfg.run_dir
    )
    rows = []
    for r in state.iterations:
        if r.validation_report is None:
            rows.append((f"iter {r.iteration} (failed)", ["-"] * 4))
        else:
            mark = "*" if r.accepted else " "
            rows.append((f"iter {r.iteration}{mark}", r.validation_report.display_row()))
    print(format_table(rows))
    print(f"\nbest template {state.best_template.id} (iteration {state.best_iteration}), "
          f"objective {state.best_objective:.4f}; artifacts in {cfg.run_dir}")
    return 0


def cmd_evaluate(cfg: RunConfig, args) -> int:
    catalog, parsed = load_data(cfg)
    split = load_split(cfg, parsed.impressions)
    if not split.test_users:
        raise CommandError("test split is empty")
    template = resolve_template(cfg, args.template)
    gateway = build_gateway(cfg)
    state = RunState([], template, float("nan"), cfg.iterations)
    result: RepeatedReport = final_test(
        state, split.test_users, gateway, catalog, args.repeats, recommender_config(cfg), cfg.max_in_flight
    )
    store = RunDirectory(cfg.run_dir)
    payload = {"template_id": template.id, "repeats": args.repeats, **result.to_dict()}
    write_json(store.root / "test_report.json", payload)
    if store.report_path.exists():
        report = store.load_report()
        report["test"] = payload
        store.write_report(report)
    label = f"RecPrompt {template.provenance}" if template.provenance.startswith("optimizer") else template.provenance
    print(format_table([(label, result.display_row())]))
    return 0


def cmd_baseline(cfg: RunConfig, args) -> int:
    catalog, parsed = load_data(cfg)
    split = load_split(cfg, parsed.impressions)
    if not split.test_users:
        raise CommandError("test split is empty")
    test_ids = {imp.user_id for imp in split.test_users}
    train = [imp for imp in parsed.impressions if imp.user_id not in test_ids]
    table = baselines.build_popularity(
        train, catalog, include_history=not args.candidates_only,
        source=f"{len(train)} impressions of non-test users in {cfg.behaviors}",
    )
    out_dir = Path(cfg.run_dir) / "baselines"
    out_dir.mkdir(parents=True, exist_ok=True)
    table.save(out_dir / "popularity.json")

    which = baselines.BASELINES if args.which == "all" else (args.which,)
    rows = []
    seed = int(cfg.split["seed"])
    for name in which:
        repeats = args.repeats if name == "random" else 1
        reports = []
        rankings = []
        for r in range(repeats):
            report, rankings = baselines.evaluate_baseline(name, split.test_users, table, catalog, seed + r)
            reports.append(report)
        result = RepeatedReport(reports)
        write_json(out_dir / f"{name}.json", {
            **result.to_dict(),
            "rankings": [{"user_id": u, "ranking": rk} for u, rk in rankings],
        })
        rows.append(({"random": "Random", "mostpop": "MostPop", "topicpop": "TopicPop"}[name],
                     result.display_row()))
    print(format_table(rows))
    return 0


def _outputs_for_topicscore(cfg: RunConfig, args):
    store = RunDirectory(cfg.run_dir)
    if args.per_user:
        path = Path(args.per_user)
        records = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
        from recprompt.recommender import RecommenderOutput
        return [RecommenderOutput.from_dict(r) for r in records]
    if not store.report_path.exists():
        raise CommandError(f"no tuning run in {cfg.run_dir}; pass --per-user FILE")
    iteration = store.load_report()["best_iteration"] if args.iteration == "best" else int(args.iteration)
    return store.load_outputs(iteration)


def cmd_topicscore(cfg: RunConfig, args) -> int:
    ts_dir = Path(cfg.run_dir) / "topicscore"
    merge_map = topicscore.load_merge_map(args.merge_map) if args.merge_map else None

    if args.action in ("judge", "annotate"):
        catalog, parsed = load_data(cfg)
        outputs = _outputs_for_topicscore(cfg, args)
        impressions = corpus.last_impression_per_user(parsed.impressions).values()
        explanations = topicscore.explanations_from_outputs(outputs, impressions, cfg.max_history)
        labels = [label for rec in explanations for label, _ in rec.topics]
        canonical, mapping = topicscore.consolidate_topics(labels, merge_map)
        ts_dir.mkdir(parents=True, exist_ok=True)
        (ts_dir / "explanations.jsonl").write_text(
            "".join(json.dumps(e.to_dict(), sort_keys=True) + "\n" for e in explanations), encoding="utf-8"
        )
        pairs = topicscore.judgment_pairs(explanations, mapping)
        print(f"{len(explanations)} users, {len(labels)} topic instances, "
              f"{len(canonical)} unique topics, {len(pairs)} (topic, article) pairs")
        if not pairs:
            raise CommandError("no topic explanations to judge; use a CoT template or a topic-producing run")

        if args.action == "judge":
            gateway = build_gateway(cfg)
            judge_cfg = topicscore.JudgeConfig(
                model=cfg.models["evaluator"],
                temperature=float(cfg.temperatures["evaluator"]),
                max_tokens=int(cfg.max_tokens["evaluator"]),
            )
            judged, unjudged = topicscore.judge_pairs(pairs, catalog, gateway, judge_cfg, cfg.max_in_flight)
            path = ts_dir / "judgments" / f"llm-{judge_cfg.model}.jsonl"
            topicscore.write_judgments(judged, path)
            if unjudged:
                write_json(ts_dir / "judgments" / f"llm-{judge_cfg.model}.unjudged.json", [list(p) for p in unjudged])
            print(f"{len(judged)} judgments -> {path}; {len(unjudged)} unjudged")
        else:
            if not args.annotator:
                raise RunConfigError("annotate needs --annotator ID")
            judgments = topicscore.annotation_session(pairs, args.annotator, catalog, ts_dir / "annotations")
            print(f"{len(judgments)} judgments recorded for {args.annotator}")
        return 0

    # report
    exp_path = ts_dir / "explanations.jsonl"
    if not exp_path.exists():
        raise CommandError(f"{exp_path} missing; run `recprompt topicscore judge` first")
    explanations = [
        topicscore.ExplanationRecord.from_dict(json.loads(line))
        for line in exp_path.read_text(encoding="utf-8").splitlines() if line.strip()
    ]
    judges = {
        p.stem: topicscore.read_judgments(p) for p in sorted((ts_dir / "judgments").glob("*.jsonl"))
    }
    annotators = {
        p.stem: topicscore.read_judgments(p) for p in sorted((ts_dir / "annotations").glob("*.jsonl"))
    }
    groups = {"human-average": annotators} if annotators else {}
    if not judges and not groups:
        raise CommandError("no judgments found; run `topicscore judge` or `topicscore annotate` first")
    report = topicscore.topicscore_report(explanations, judges, groups, merge_map)
    write_json(ts_dir / "report.json", report)
    write_json(ts_dir / "plot_data.json", topicscore.plot_data(report))
    width = max(len(n) for n in report)
    print(f"{'judge':{width}s}  correctness  completeness  coverage")
    for name, entry in report.items():
        corr = "-" if entry["correctness"] is None else f"{100 * entry['correctness']:.2f}"
        print(f"{name:{width}s}  {corr:>11s}  {100 * entry['completeness']:12.2f}  {entry['coverage']:8.2f}")
    if args.plot:
        topicscore.plot_report(report, args.plot)
        print(f"plot written to {args.plot}")
    return 0


def cmd_cache(cfg: RunConfig, args) -> int:
    if not cfg.cache_path.exists():
        raise CommandError(f"no cache at {cfg.cache_path}")
    cache = ResponseCache(cfg.cache_path)
    if args.action == "stats":
        for key, value in cache.stats().items():
            print(f"{key:18s} {value}")
        return 0
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for entry in sorted(cache.entries(), key=lambda e: e["key"]):
            fh.write(json.dumps(entry, ensure_ascii=False, sort_keys=True) + "\n")
    print(f"exported {len(cache)} entries to {out}")
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "sample": cmd_sample,
    "tune": cmd_tune,
    "evaluate": cmd_evaluate,
    "baseline": cmd_baseline,
    "topicscore": cmd_topicscore,
    "cache": cmd_cache,
}


# ---------------------------------------------------------------- parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--backend", choices=("live", "mock", "replay"))
    common.add_argument("--base-url", dest="base_url")
    common.add_argument("--run-dir", dest="run_dir")
    common.add_argument("--cache", help="response cache file (default: <run-dir>/cache.jsonl)")
    common.add_argument("--news", help="MIND news.tsv (default: bundled fixture)")
    common.add_argument("--behaviors", help="MIND behaviors.tsv (default: bundled fixture)")
    common.add_argument("--seed", type=int)
    common.add_argument("--n-validation", type=int, dest="n_validation")
    common.add_argument("--n-test", type=int, dest="n_test")
    common.add_argument("--min-history", type=int, dest="min_history")
    common.add_argument("--l", "--iterations", type=int, dest="iterations", help="iteration budget l")
    common.add_argument("--strategy", choices=("IO", "CoT", "io", "cot"))
    common.add_argument("--exemplar-policy", dest="exemplar_policy", choices=("worst", "best", "random"))
    common.add_argument("--max-history", type=int, dest="max_history")
    common.add_argument("--rate-limit", type=float, dest="rate_limit", help="requests per minute (live)")
    common.add_argument("--max-in-flight", type=int, dest="max_in_flight")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="recprompt", description="Self-tuning prompts for LLM news recommendation.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", parents=[common], help="parse the news/behaviors files and summarize them")
    sub.add_parser("sample", parents=[common], help="draw the validation/test user split")
    sub.add_parser("tune", parents=[common], help="run (or resume) the template tuning loop")

    p = sub.add_parser("evaluate", parents=[common], help="evaluate a template on the test users")
    p.add_argument("--template", default="best", help="best, initial-io, initial-cot or a template id")
    p.add_argument("--repeats", type=int, default=3)

    p = sub.add_parser("baseline", parents=[common], help="score Random/MostPop/TopicPop on the test users")
    p.add_argument("--which", choices=("random", "mostpop", "topicpop", "all"), default="all")
    p.add_argument("--repeats", type=int, default=3, help="random-ranker repeats with different seeds")
    p.add_argument("--candidates-only", action="store_true", help="count only clicked candidates")

    p = sub.add_parser("topicscore", parents=[common], help="topic explanation judging and scoring")
    p.add_argument("action", choices=("judge", "annotate", "report"))
    p.add_argument("--iteration", default="best", help="tuning iteration whose outputs to score")
    p.add_argument("--per-user", dest="per_user", help="per-user outputs JSONL to score instead")
    p.add_argument("--annotator", help="annotator id (annotate)")
    p.add_argument("--merge-map", dest="merge_map", help="YAML/JSON raw->canonical topic map")
    p.add_argument("--plot", help="write a bar chart PNG (report; needs matplotlib)")

    p = sub.add_parser("cache", parents=[common], help="inspect or export the response cache")
    p.add_argument("action", choices=("stats", "export"))
    p.add_argument("--out", default="cache-export.jsonl")
    return parser


def config_from_args(args) -> RunConfig:
    split = {
        k: v for k, v in {
            "validation": args.n_validation, "test": args.n_test,
            "seed": args.seed, "min_history": args.min_history,
        }.items() if v is not None
    }
    overrides = {
        "backend": args.backend,
        "base_url": args.base_url,
        "run_dir": args.run_dir,
        "cache": args.cache,
        "news": args.news,
        "behaviors": args.behaviors,
        "iterations": args.iterations,
        "strategy": args.strategy,
        "exemplar_policy": args.exemplar_policy,
        "max_history": args.max_history,
        "rate_limit": args.rate_limit,
        "max_in_flight": args.max_in_flight,
        "split": split or None,
    }
    return load_config(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = config_from_args(args)
        return COMMANDS[args.command](cfg, args)
    except (RunConfigError, ConfigError, TunerConfigError, corpus.CorpusError, corpus.SplitSizeError) as exc:
        print(f"recprompt: configuration error: {exc}", file=sys.stderr)
        return 2
    except CacheMissError as exc:
        print(f"recprompt: replay cache miss: {exc}", file=sys.stderr)
        return 1
    except (CommandError, GatewayError, topicscore.TopicScoreError) as exc:
        print(f"recprompt: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
