"""The monitor and the template tuning loop.

Each iteration asks the optimizer for a new template built from the best one
so far, evaluates it on the validation users, and keeps it only if the scalar
objective strictly improves.
"""

from __future__ import annotations

import json
import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Mapping, Sequence

from recprompt.corpus import Catalog, EvaluationSplit, Impression
from recprompt.gateway import Gateway
from recprompt.metrics import (
    METRIC_NAMES,
    MetricReport,
    RepeatedReport,
    UserScore,
    aggregate,
    rank_of_click,
)
from recprompt.optimizer import OptimizationStepError, OptimizerConfig, optimize_step
from recprompt.prompts import Exemplar, OptimizationContext, TemplateInstruction
from recprompt.recommender import FAILED, RecommenderConfig, RecommenderOutput, build_prompt, recommend

logger = logging.getLogger(__name__)

DEFAULT_WEIGHTS = {"mrr": 1.0, "ndcg5": 1.0}
EXEMPLAR_POLICIES = ("worst", "best", "random")

Evaluator = Callable[[TemplateInstruction, Sequence[Impression]], "tuple[MetricReport, list[RecommenderOutput]]"]


class TunerConfigError(ValueError):
    pass


class EvaluationError(RuntimeError):
    pass


def objective(report: MetricReport, weights: Mapping[str, float] | None = None) -> float:
    """Weighted mean of the report's metrics; defaults to mean(MRR, nDCG@5)."""
    weights = DEFAULT_WEIGHTS if weights is None else weights
    for name, w in weights.items():
        if name not in METRIC_NAMES:
            raise TunerConfigError(f"unknown metric {name!r} in objective weights")
        if w < 0:
            raise TunerConfigError(f"objective weight for {name} is negative")
    total = sum(weights.values())
    if total <= 0:
        raise TunerConfigError("objective weights sum to zero")
    return sum(w * report.get(name) for name, w in weights.items()) / total


@dataclass
class TunerConfig:
    iterations: int = 10
    weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    exemplar_policy: str = "worst"
    seed: int = 0
    workers: int = 8
    recommender: RecommenderConfig = field(default_factory=RecommenderConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        if self.iterations < 0:
            raise TunerConfigError("iteration budget must be >= 0")
        if self.exemplar_policy not in EXEMPLAR_POLICIES:
            raise TunerConfigError(
                f"exemplar policy must be one of {', '.join(EXEMPLAR_POLICIES)}"
            )
        for w in self.weights.values():
            if w < 0:
                raise TunerConfigError("objective weights must be non-negative")

    def snapshot(self) -> dict:
        return asdict(self)


def click_rank(output: RecommenderOutput, impression: Impression) -> int:
    """Rank of the click; failed parses count as the worst possible rank."""
    if output.parse_quality == FAILED:
        return len(impression.candidates)
    return rank_of_click(output.ranking, impression.labels)


def evaluate_template(
    template: TemplateInstruction,
    impressions: Sequence[Impression],
    gateway: Gateway,
    catalog: Catalog,
    config: RecommenderConfig | None = None,
    workers: int = 8,
    salt: str = "",
) -> tuple[MetricReport, list[RecommenderOutput]]:
    if not impressions:
        raise EvaluationError("cannot evaluate a template on zero users")
    config = config or RecommenderConfig()

    def run(imp: Impression) -> RecommenderOutput:
        return recommend(imp, template, gateway, catalog, config, salt=salt)

    # any gateway failure propagates out of map() and discards the partial results
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        outputs = list(pool.map(run, impressions))

    scores = [
        UserScore.from_rank(imp.user_id, click_rank(out, imp), len(imp.candidates))
        for imp, out in zip(impressions, outputs)
    ]
    report = aggregate(scores)
    report.notes = {
        "failed_parses": sum(o.parse_quality == FAILED for o in outputs),
        "repaired_parses": sum(o.parse_quality == "repaired" for o in outputs),
    }
    return report, outputs


@dataclass
class IterationRecord:
    iteration: int
    template_id: str | None
    validation_report: MetricReport | None
    objective: float | None
    accepted: bool
    exemplar_user_id: str | None = None
    note: str | None = None

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "template_id": self.template_id,
            "objective": self.objective,
            "accepted": self.accepted,
            "exemplar_user_id": self.exemplar_user_id,
            "note": self.note,
            "validation_report": self.validation_report.to_dict() if self.validation_report else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "IterationRecord":
        report = data.get("validation_report")
        return cls(
            iteration=data["iteration"],
            template_id=data["template_id"],
            validation_report=MetricReport.from_dict(report) if report else None,
            objective=data["objective"],
            accepted=data["accepted"],
            exemplar_user_id=data.get("exemplar_user_id"),
            note=data.get("note"),
        )


@dataclass
class RunState:
    iterations: list[IterationRecord]
    best_template: TemplateInstruction
    best_objective: float
    iteration_budget: int
    config: dict = field(default_factory=dict)
    templates: dict[str, TemplateInstruction] = field(default_factory=dict)
    best_outputs: list[RecommenderOutput] = field(default_factory=list, repr=False)

    @property
    def best_iteration(self) -> int:
        return max(r.iteration for r in self.iterations if r.accepted)

    def best_objective_trace(self) -> list[float]:
        trace, best = [], float("-inf")
        for r in self.iterations:
            if r.accepted:
                best = r.objective
            trace.append(best)
        return trace

    def report(self) -> dict:
        best_record = next(r for r in self.iterations if r.iteration == self.best_iteration)
        return {
            "best_template_id": self.best_template.id,
            "best_template_provenance": self.best_template.provenance,
            "best_iteration": self.best_iteration,
            "best_objective": self.best_objective,
            "iteration_budget": self.iteration_budget,
            "iterations_completed": len(self.iterations),
            "accepted_iterations": [r.iteration for r in self.iterations if r.accepted],
            "objective_trace": [r.objective for r in self.iterations],
            "validation": best_record.validation_report.to_dict(),
        }


class RunDirectory:
    """On-disk layout of a tuning run.

    ``templates.jsonl`` and ``iterations.jsonl`` are appended as the loop
    advances, ``per_user/<iter>.jsonl`` holds each evaluation's outputs and
    ``report.json`` is rewritten after every iteration.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)

    @property
    def templates_path(self) -> Path:
        return self.root / "templates.jsonl"

    @property
    def iterations_path(self) -> Path:
        return self.root / "iterations.jsonl"

    @property
    def report_path(self) -> Path:
        return self.root / "report.json"

    def per_user_path(self, iteration: int | str) -> Path:
        return self.root / "per_user" / f"{iteration}.jsonl"

    def _append(self, path: Path, line: str) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")

    def write_template(self, template: TemplateInstruction) -> None:
        if template.id not in self.load_templates():
            self._append(self.templates_path, template.to_json())

    def write_iteration(self, record: IterationRecord, outputs: Sequence[RecommenderOutput]) -> None:
        if outputs:
            self.write_outputs(record.iteration, outputs)
        self._append(self.iterations_path, json.dumps(record.to_dict(), sort_keys=True))

    def write_outputs(self, name: int | str, outputs: Sequence[RecommenderOutput]) -> None:
        path = self.per_user_path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            "".join(json.dumps(o.to_dict(), ensure_ascii=False, sort_keys=True) + "\n" for o in outputs),
            encoding="utf-8",
        )

    def write_report(self, report: dict) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        self.report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def load_templates(self) -> dict[str, TemplateInstruction]:
        if not self.templates_path.exists():
            return {}
        out = {}
        for line in self.templates_path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                t = TemplateInstruction.from_dict(json.loads(line))
                out[t.id] = t
        return out

    def load_iterations(self) -> list[IterationRecord]:
        if not self.iterations_path.exists():
            return []
        return [
            IterationRecord.from_dict(json.loads(line))
            for line in self.iterations_path.read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]

    def load_outputs(self, name: int | str) -> list[RecommenderOutput]:
        path = self.per_user_path(name)
        return [
            RecommenderOutput.from_dict(json.loads(line))
            for line in path.read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]

    def load_report(self) -> dict:
        return json.loads(self.report_path.read_text(encoding="utf-8"))

    def load_state(self, budget: int, config: dict | None = None) -> RunState | None:
        """Rebuild the state of an interrupted run, or None if nothing was recorded."""
        records = self.load_iterations()
        if not records:
            return None
        templates = self.load_templates()
        best_record = None
        for r in records:
            if r.accepted:
                best_record = r
        best = templates[best_record.template_id]
        return RunState(
            iterations=records,
            best_template=best,
            best_objective=best_record.objective,
            iteration_budget=budget,
            config=config or {},
            templates=templates,
            best_outputs=self.load_outputs(best_record.iteration),
        )


def select_exemplar(
    outputs: Sequence[RecommenderOutput],
    impressions: Sequence[Impression],
    policy: str = "worst",
    rng: random.Random | None = None,
) -> tuple[RecommenderOutput, Impression]:
    by_user = {imp.user_id: imp for imp in impressions}
    scored = []
    for out in outputs:
        imp = by_user[out.user_id]
        scored.append((1.0 / click_rank(out, imp), out.user_id, out, imp))
    if policy == "worst":
        chosen = min(scored, key=lambda s: (s[0], s[1]))
    elif policy == "best":
        chosen = min(scored, key=lambda s: (-s[0], s[1]))
    elif policy == "random":
        chosen = (rng or random.Random(0)).choice(sorted(scored, key=lambda s: s[1]))
    else:
        raise TunerConfigError(f"unknown exemplar policy {policy!r}")
    return chosen[2], chosen[3]


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def tune(
    split: EvaluationSplit,
    initial: TemplateInstruction,
    gateway: Gateway,
    catalog: Catalog,
    config: TunerConfig | None = None,
    *,
    run_dir: str | Path | None = None,
    evaluate: Evaluator | None = None,
    clock: Callable[[], str] = _utc_now,
) -> RunState:
    """Run the optimize/evaluate/accept loop for ``config.iterations`` rounds.

    Iteration 0 scores ``initial``. With ``run_dir`` set, progress is written
    after every iteration and a rerun resumes after the last recorded one.
    """
    config = config or TunerConfig()
    impressions = list(split.validation_users)
    if not impressions:
        raise EvaluationError("validation split is empty")
    if evaluate is None:
        def evaluate(template, imps):
            return evaluate_template(template, imps, gateway, catalog, config.recommender, config.workers)

    store = RunDirectory(run_dir) if run_dir is not None else None
    state = store.load_state(config.iterations, config.snapshot()) if store else None

    if state is None:
        if initial.created_at:
            template0 = initial
        else:
            template0 = TemplateInstruction(initial.text, initial.provenance, initial.id, clock())
        report, outputs = evaluate(template0, impressions)
        score = objective(report, config.weights)
        record = IterationRecord(0, template0.id, report, score, True)
        state = RunState(
            iterations=[record],
            best_template=template0,
            best_objective=score,
            iteration_budget=config.iterations,
            config=config.snapshot(),
            templates={template0.id: template0},
            best_outputs=outputs,
        )
        if store:
            store.write_template(template0)
            store.write_iteration(record, outputs)
            store.write_report(state.report())
        logger.info("iteration 0: objective %.4f", score)
    else:
        logger.info("resuming run at iteration %d", len(state.iterations))

    for k in range(len(state.iterations), config.iterations + 1):
        record, outputs = _tune_step(k, state, impressions, gateway, catalog, config, evaluate, clock)
        state.iterations.append(record)
        if store:
            if record.template_id:
                store.write_template(state.templates[record.template_id])
            store.write_iteration(record, outputs)
            store.write_report(state.report())
    return state


def _tune_step(k, state, impressions, gateway, catalog, config, evaluate, clock):
    rng = random.Random(f"{config.seed}:{k}")
    out, imp = select_exemplar(state.best_outputs, impressions, config.exemplar_policy, rng)
    best = state.best_template
    exemplar = Exemplar(
        user_id=imp.user_id,
        prompt=build_prompt(imp, best, catalog, config.recommender.max_history),
        answer=out.raw_text,
        clicked_index=imp.clicked_index,
        n_candidates=len(imp.candidates),
    )
    ctx = OptimizationContext(current_template=best, exemplar=exemplar, best_template=best)
    try:
        candidate = optimize_step(ctx, gateway, config.optimizer, iteration=k, created_at=clock())
    except OptimizationStepError as exc:
        logger.warning("iteration %d: %s", k, exc)
        return IterationRecord(k, None, None, None, False, imp.user_id, note=f"optimizer failed: {exc}"), []

    state.templates.setdefault(candidate.id, candidate)
    report, outputs = evaluate(candidate, impressions)
    score = objective(report, config.weights)
    accepted = score > state.best_objective
    if accepted:
        state.best_template = candidate
        state.best_objective = score
        state.best_outputs = outputs
    logger.info("iteration %d: objective %.4f (%s)", k, score, "accepted" if accepted else "rejected")
    return IterationRecord(k, candidate.id, report, score, accepted, imp.user_id), outputs


def final_test(
    state: RunState,
    test_impressions: Sequence[Impression],
    gateway: Gateway,
    catalog: Catalog,
    repeats: int = 3,
    config: RecommenderConfig | None = None,
    workers: int = 8,
) -> RepeatedReport:
    """Evaluate the best template on the test users ``repeats`` times.

    Each repeat carries its own cache salt so cached live runs stay distinct.
    """
    if repeats < 1:
        raise TunerConfigError("repeats must be >= 1")
    runs = []
    for r in range(repeats):
        report, _ = evaluate_template(
            state.best_template, test_impressions, gateway, catalog, config, workers,
            salt=f"test-repeat-{r}" if r else "",
        )
        runs.append(report)
    return RepeatedReport(runs)
