"""Desk-scale evaluation: planner repeatability and retrieval quality.

Both benchmarks are fully seed-deterministic. The planner protocol scores a
candidate task list against a generated ground-truth case: completeness is a
one-to-one description match (token overlap >= 0.6), ordering accepts any
linear extension of the truth dependencies, success requires both. The IR
benchmark builds a synthetic 200-agent corpus whose relevance is known by
construction, runs the two-stage retrieval over it, and reports NDCG/Recall
for stage 1 alone and after re-ranking, plus the gap to an independent
full-sort scorer.
"""
from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from ._util import tokens, write_json_atomic
from .planner import (
    Intent,
    PlanAction,
    PlanningError,
    ProviderAction,
    ReasoningProvider,
    plan,
)
from .protocol import (
    FieldType,
    Mode,
    ResourceKind,
    ResourceManifest,
    SchemaField,
    TaskSpec,
    check_dag,
    from_payload,
    to_payload,
)
from .retrieval import (
    RerankProvider,
    SCORE_DECIMALS,
    SearchIndex,
    embed,
    ndcg_at_k,
    recall_at_k,
    rerank,
    retrieve,
)

MATCH_THRESHOLD = 0.6
STAGE1_K = 5


# --- planner ground truth ----------------------------------------------------------

@dataclass
class GroundTruthCase:
    case_id: str
    intent_text: str
    truth_tasks: list[TaskSpec]

    def reorder_tolerant(self, a: str, b: str) -> bool:
        """True when tasks a and b are unordered by the dependency closure."""
        order = self._closure()
        return (a, b) not in order and (b, a) not in order

    def _closure(self) -> set[tuple[str, str]]:
        edges = {(d, t.task_id) for t in self.truth_tasks for d in t.depends_on}
        ids = [t.task_id for t in self.truth_tasks]
        closed = set(edges)
        changed = True
        while changed:
            changed = False
            for a in ids:
                for b in ids:
                    if (a, b) in closed:
                        for c in ids:
                            if (b, c) in closed and (a, c) not in closed:
                                closed.add((a, c))
                                changed = True
        return closed


_CASE_DOMAINS = [
    ("marketing campaign launch",
     ["draft", "review", "localize", "schedule", "publish", "measure",
      "summarize", "archive", "approve", "refresh"],
     ["creative brief", "ad copy", "landing page", "budget", "audience list",
      "press release", "performance report", "retrospective", "media plan",
      "asset library"]),
    ("device fleet upgrade",
     ["inventory", "qualify", "stage", "deploy", "verify", "rollback",
      "document", "notify", "quarantine", "certify"],
     ["firmware image", "pilot group", "rollout wave", "health dashboard",
      "support runbook", "compliance record", "changelog", "stakeholders",
      "spare pool", "telemetry feed"]),
    ("customer onboarding",
     ["collect", "validate", "provision", "configure", "train", "audit",
      "survey", "handoff", "activate", "archive"],
     ["account details", "credentials", "workspace", "integrations",
      "admin users", "security baseline", "feedback form", "success plan",
      "billing profile", "welcome packet"]),
    ("quarterly financial close",
     ["reconcile", "accrue", "consolidate", "review", "adjust", "approve",
      "file", "brief", "certify", "archive"],
     ["bank statements", "expenses", "subsidiary ledgers", "variance report",
      "journal entries", "balance sheet", "regulatory forms",
      "executive summary", "tax schedules", "audit trail"]),
    ("research paper submission",
     ["outline", "draft", "analyze", "plot", "revise", "format", "submit",
      "announce", "rebut", "archive"],
     ["related work", "methodology", "experiment results", "figures",
      "reviewer response", "camera ready", "preprint", "project page",
      "ablation study", "artifact bundle"]),
]


def generate_cases(seed: int, count: int = 10) -> list[GroundTruthCase]:
    """Deterministic ground-truth cases: 6-10 tasks, chains plus diamonds."""
    rng = random.Random(seed)
    cases = []
    for index in range(count):
        domain, verbs, nouns = _CASE_DOMAINS[index % len(_CASE_DOMAINS)]
        n = rng.randint(6, 10)
        chosen = rng.sample(list(zip(verbs, nouns)), n)
        tasks = []
        for i, (verb, noun) in enumerate(chosen):
            tid = f"t{i + 1}"
            description = (f"{verb.capitalize()} the {noun} for the {domain}. "
                           f"Confirm the {noun} meets the {domain} requirements.")
            deps: list[str] = []
            if i >= 1:
                deps = [f"t{i}"]
            tasks.append(TaskSpec(tid, description, depends_on=deps))
        # carve one diamond into the chain when it fits: t_k+1 and t_k+2
        # both hang off t_k and rejoin at t_k+3
        if n >= 6:
            k = rng.randint(1, n - 3)
            tasks[k].depends_on = [f"t{k}"]       # t_{k+1} -> t_k
            tasks[k + 1].depends_on = [f"t{k}"]   # t_{k+2} -> t_k (parallel branch)
            tasks[k + 2].depends_on = [f"t{k + 1}", f"t{k + 2}"]
        case = GroundTruthCase(
            case_id=f"case-{seed}-{index:02d}",
            intent_text=(f"Run the {domain} end to end as application {index:02d}, "
                         f"covering all {n} stages."),
            truth_tasks=tasks,
        )
        assert check_dag(case.truth_tasks).ok
        cases.append(case)
    return cases


# --- task-list scoring ----------------------------------------------------------------

@dataclass
class TaskListScore:
    complete: bool
    order_ok: bool
    missing: list[str] = field(default_factory=list)
    extra: list[str] = field(default_factory=list)
    order_violations: list[tuple[str, str]] = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.complete and self.order_ok


def _overlap(a: str, b: str) -> float:
    ta, tb = set(tokens(a)), set(tokens(b))
    if not ta or not tb:
        return 0.0
    return len(ta & tb) / len(ta | tb)


def score_task_list(candidate: Sequence[TaskSpec], truth: GroundTruthCase) -> TaskListScore:
    """Description-based matching: ids never matter, only content and order."""
    truth_tasks = truth.truth_tasks
    if not candidate:
        return TaskListScore(False, False, missing=[t.task_id for t in truth_tasks])

    overlap = np.zeros((len(truth_tasks), len(candidate)))
    for i, t in enumerate(truth_tasks):
        for j, c in enumerate(candidate):
            overlap[i, j] = _overlap(t.description, c.description)
    rows, cols = linear_sum_assignment(-overlap)
    match: dict[str, int] = {}
    for i, j in zip(rows, cols):
        if overlap[i, j] >= MATCH_THRESHOLD:
            match[truth_tasks[i].task_id] = j

    missing = [t.task_id for t in truth_tasks if t.task_id not in match]
    matched_candidates = set(match.values())
    extra = [c.task_id for j, c in enumerate(candidate) if j not in matched_candidates]
    complete = not missing and len(candidate) == len(truth_tasks)

    violations: list[tuple[str, str]] = []
    for t in truth_tasks:
        for dep in t.depends_on:
            if dep in match and t.task_id in match:
                if match[dep] >= match[t.task_id]:
                    violations.append((dep, t.task_id))
    order_ok = not violations
    return TaskListScore(complete, order_ok, missing, extra, violations)


# --- planner eval providers --------------------------------------------------------------

class CasePlaybackProvider(ReasoningProvider):
    """Replays the truth task list for whichever case the prompt names.

    ``mutate`` hooks per-trial noise in; it sees (case, tasks, rng) and
    returns the tasks to emit.
    """

    name = "case_playback"
    deterministic = True

    def __init__(self, cases: Sequence[GroundTruthCase], seed: int = 0,
                 mutate: Callable | None = None):
        self._by_text = {c.intent_text: c for c in cases}
        self._rng = random.Random(seed)
        self._mutate = mutate

    def _tasks_for(self, prompt: str) -> list[TaskSpec]:
        for text, case in self._by_text.items():
            if text in prompt:
                tasks = list(case.truth_tasks)
                if self._mutate is not None:
                    tasks = self._mutate(case, tasks, self._rng)
                return tasks
        raise PlanningError("provider_failure", "prompt names no known case")

    def next_action(self, prompt, trace):
        emitted = sum(1 for s in trace if s.action is PlanAction.EMIT_TASK)
        tasks = self._trial_tasks(prompt, trace)
        if emitted >= len(tasks):
            return ProviderAction("all stages covered", PlanAction.FINISH)
        task = tasks[emitted]
        return ProviderAction(
            f"stage {emitted + 1}", PlanAction.EMIT_TASK,
            {"task_id": task.task_id, "description": task.description,
             "depends_on": list(task.depends_on), "node_kind": task.node_kind.value})

    def _trial_tasks(self, prompt, trace):
        if not trace:  # new trial: fix this trial's task list
            self._current = self._tasks_for(prompt)
        return self._current


def drop_one_task(case, tasks, rng):
    victim = rng.randrange(len(tasks))
    return _without_index(tasks, victim)


def drop_one_with_probability(p: float):
    def mutate(case, tasks, rng):
        if rng.random() < p:
            return _without_index(tasks, rng.randrange(len(tasks)))
        return tasks

    return mutate


def _without_index(tasks: list[TaskSpec], index: int) -> list[TaskSpec]:
    removed = tasks[index].task_id
    kept = []
    for t in tasks:
        if t.task_id == removed:
            continue
        kept.append(TaskSpec(t.task_id, t.description,
                             [d for d in t.depends_on if d != removed], t.node_kind))
    return kept


@dataclass
class PlannerEvalReport:
    success_rate: float
    trials: int
    successes: int
    seed: int | None
    failures: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"success_rate": self.success_rate, "trials": self.trials,
                "successes": self.successes, "seed": self.seed,
                "failures": self.failures}


def run_planner_eval(provider: ReasoningProvider, cases: Sequence[GroundTruthCase],
                     repeats: int = 5, seed: int | None = None) -> PlannerEvalReport:
    """Plan each case ``repeats`` times; success needs completeness and order."""
    successes = 0
    failures = []
    trials = 0
    for case in cases:
        for trial in range(repeats):
            trials += 1
            intent = Intent(f"{case.case_id}-{trial}", case.intent_text,
                            "eval", "eval", Mode.LLM_AGENT)
            try:
                outcome = plan(intent, provider)
                score = score_task_list(outcome.tasks, case)
            except PlanningError as exc:
                failures.append({"case": case.case_id, "trial": trial,
                                 "error": str(exc)})
                continue
            if score.success:
                successes += 1
            else:
                failures.append({
                    "case": case.case_id, "trial": trial,
                    "missing": score.missing, "extra": score.extra,
                    "order_violations": score.order_violations,
                })
    rate = successes / trials if trials else 0.0
    return PlannerEvalReport(rate, trials, successes, seed, failures)


# --- IR corpus -------------------------------------------------------------------------

_IR_ACTIONS = ["book", "search", "cancel", "summarize", "translate", "classify",
               "schedule", "review", "convert", "archive", "audit", "merge",
               "extract", "monitor", "annotate", "forecast", "cluster",
               "transcribe", "redact", "rank"]
_IR_DOMAINS = ["flight", "hotel", "invoice", "payroll", "contract", "ticket",
               "resume", "report", "image", "podcast"]

_QUERY_TEMPLATES = [
    "need to {a} a {d} right away",
    "{a} the {d} for our team",
    "help me {a} this {d}",
    "can you {a} my {d} please",
    "looking for a tool to {a} the {d}",
]


@dataclass
class IrQuery:
    query_id: str
    text: str
    relevant_ids: set[str]


@dataclass
class IrCorpus:
    seed: int
    manifests: list[ResourceManifest]
    queries: list[IrQuery]

    def validate(self) -> None:
        known = {m.resource_id for m in self.manifests}
        for q in self.queries:
            if not q.relevant_ids or not q.relevant_ids <= known:
                raise ValueError(f"query {q.query_id} has bad relevance set")


def generate_ir_corpus(seed: int, n_agents: int = 200,
                       n_queries: int = 1000) -> IrCorpus:
    """Synthetic agents over an action x domain grid; relevance is the agent
    built for the query's exact (action, domain) pair."""
    rng = random.Random(seed)
    pairs = [(a, d) for a in _IR_ACTIONS for d in _IR_DOMAINS]
    rng.shuffle(pairs)
    pairs = pairs[:n_agents]

    manifests = []
    for i, (action, domain) in enumerate(pairs):
        rid = f"agent-{i:03d}"
        manifests.append(ResourceManifest(
            resource_id=rid,
            kind=ResourceKind.AGENT if i % 2 else ResourceKind.TOOL,
            name=f"{action}-{domain}",
            description=f"{action}s {domain} records for users and handles "
                        f"{domain} {action} requests end to end",
            usage_examples=[f"{action} the {domain} for me",
                            f"please {action} this {domain} today"],
            endpoint=f"local://{rid}",
            input_schema=[SchemaField("text", FieldType.STRING)],
            output_schema=[SchemaField("text", FieldType.STRING)],
        ))

    by_pair = {pair: manifests[i].resource_id for i, pair in enumerate(pairs)}
    queries = []
    for j in range(n_queries):
        action, domain = pairs[j % len(pairs)]
        template = _QUERY_TEMPLATES[(j // len(pairs)) % len(_QUERY_TEMPLATES)]
        queries.append(IrQuery(
            query_id=f"q-{j:04d}",
            text=template.format(a=action, d=domain),
            relevant_ids={by_pair[(action, domain)]},
        ))
    corpus = IrCorpus(seed=seed, manifests=manifests, queries=queries)
    corpus.validate()
    return corpus


def save_corpus(corpus: IrCorpus, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_json_atomic(directory / "agents.json", {
        "seed": corpus.seed,
        "manifests": [to_payload(m) for m in corpus.manifests],
    })
    with open(directory / "queries.jsonl", "w", encoding="utf-8") as f:
        for q in corpus.queries:
            f.write(json.dumps({"query_id": q.query_id, "query": q.text,
                                "relevant_ids": sorted(q.relevant_ids)},
                               sort_keys=True) + "\n")


def corpus_to_registry_snapshot(corpus: IrCorpus, path: str | Path) -> None:
    """Write the corpus agents as a ready-to-serve registry snapshot.

    Entries are marked validation=passed so a gateway loading the snapshot
    exposes the whole corpus to retrieval immediately.
    """
    write_json_atomic(Path(path), {
        "v": 1,
        "rev": 0,
        "entries": [
            {
                "manifest": to_payload(m),
                "registered_at": 0,
                "validation": "passed",
                "suspension_reason": None,
                "validated_rev": 0,
                "suspended_rev": 0,
            }
            for m in corpus.manifests
        ],
    })


def load_corpus(directory: str | Path) -> IrCorpus:
    directory = Path(directory)
    doc = json.loads((directory / "agents.json").read_text("utf-8"))
    manifests = [from_payload("resource_manifest", m) for m in doc["manifests"]]
    queries = []
    for line in (directory / "queries.jsonl").read_text("utf-8").splitlines():
        d = json.loads(line)
        queries.append(IrQuery(d["query_id"], d["query"], set(d["relevant_ids"])))
    corpus = IrCorpus(seed=doc["seed"], manifests=manifests, queries=queries)
    corpus.validate()
    return corpus


# --- IR eval -----------------------------------------------------------------------------

class OracleReranker:
    """Sorts stage-1 candidates by ground-truth relevance (upper bound)."""

    name = "oracle"

    def __init__(self, corpus: IrCorpus):
        self._relevant_by_text = {q.text: q.relevant_ids for q in corpus.queries}

    def rank(self, query, context, candidates):
        relevant = self._relevant_by_text.get(query, set())
        ranked = sorted(
            candidates,
            key=lambda c: (0 if c.resource_id in relevant else 1, -c.score,
                           c.resource_id))
        n = len(ranked)
        return [(c.resource_id, (n - i) / n) for i, c in enumerate(ranked)]


METRIC_KEYS = ["ndcg@1", "ndcg@3", "recall@1", "recall@3", "recall@5"]


def _metrics_for(ranking: list[str], relevant: set[str]) -> dict[str, float]:
    relevance = {rid: 1.0 for rid in relevant}
    return {
        "ndcg@1": ndcg_at_k(ranking, relevance, 1),
        "ndcg@3": ndcg_at_k(ranking, relevance, 3),
        "recall@1": recall_at_k(ranking, relevant, 1),
        "recall@3": recall_at_k(ranking, relevant, 3),
        "recall@5": recall_at_k(ranking, relevant, 5),
    }


def _average(rows: list[dict[str, float]]) -> dict[str, float]:
    if not rows:
        return {k: 0.0 for k in METRIC_KEYS}
    return {k: sum(r[k] for r in rows) / len(rows) for k in METRIC_KEYS}


@dataclass
class IrEvalReport:
    seed: int
    queries: int
    stage1: dict[str, float]
    stage2: dict[str, float]
    stage1_oracle_delta: float
    survived_stage1: int  # queries whose relevant item is in the stage-1 list
    per_query: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "queries": self.queries, "stage1": self.stage1,
                "stage2": self.stage2, "stage1_oracle_delta": self.stage1_oracle_delta,
                "survived_stage1": self.survived_stage1}

    def table(self) -> str:
        lines = [f"{'metric':<10} {'stage1':>8} {'stage2':>8}"]
        for key in METRIC_KEYS:
            lines.append(f"{key:<10} {self.stage1[key]:>8.4f} {self.stage2[key]:>8.4f}")
        lines.append(f"stage1 full-sort delta: {self.stage1_oracle_delta:.2e}")
        return "\n".join(lines)


def run_ir_eval(corpus: IrCorpus, reranker: RerankProvider | None = None,
                keep_per_query: bool = False) -> IrEvalReport:
    """Stage-1 top-5 per query, optional stage-2 re-rank, averaged metrics.

    ``stage1_oracle_delta`` is the largest metric gap between the retrieval
    path and an independent full-sort pass over the same embeddings.
    """
    index = SearchIndex(corpus.manifests)
    texts = {m.resource_id: m.search_text() for m in corpus.manifests}

    # independent full-sort path: one matrix multiply, stable resort
    ids = [e.resource_id for e in index.entries]
    matrix = np.vstack([embed(texts[rid]) for rid in ids])

    stage1_rows, stage2_rows, oracle_rows = [], [], []
    survived = 0
    per_query = []
    for q in corpus.queries:
        stage1 = retrieve(index, q.text, STAGE1_K, query_id=q.query_id)
        provider = reranker or _IdentityForEval()
        stage2 = rerank(q.text, "", stage1, provider, texts=texts)
        stage1_rows.append(_metrics_for(stage1.ids(), q.relevant_ids))
        stage2_rows.append(_metrics_for(stage2.ids(), q.relevant_ids))

        scores = [round(float(s), SCORE_DECIMALS) for s in matrix @ embed(q.text)]
        order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
        full_sort_ids = [ids[i] for i in order[:STAGE1_K]]
        oracle_rows.append(_metrics_for(full_sort_ids, q.relevant_ids))

        if q.relevant_ids & set(stage1.ids()):
            survived += 1
        if keep_per_query:
            per_query.append({"query_id": q.query_id,
                              "stage1": stage1.ids(), "stage2": stage2.ids(),
                              "relevant": sorted(q.relevant_ids)})

    stage1_avg = _average(stage1_rows)
    oracle_avg = _average(oracle_rows)
    delta = max(abs(stage1_avg[k] - oracle_avg[k]) for k in METRIC_KEYS)
    return IrEvalReport(
        seed=corpus.seed, queries=len(corpus.queries),
        stage1=stage1_avg, stage2=_average(stage2_rows),
        stage1_oracle_delta=delta, survived_stage1=survived,
        per_query=per_query)


class _IdentityForEval:
    name = "identity"

    def rank(self, query, context, candidates):
        return [(c.resource_id, c.score) for c in candidates]
