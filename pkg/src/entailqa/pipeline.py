"""End-to-end orchestration: stage-1 tree initialization, stage-2 joint
training, and the iterative feedback loop with its stopping rule.

Per example the loop keeps a ``PipelineState``: every tree version, the fact
ids retrieved from each version, the decoded answer per version, and the
joint loss when gold targets are known. Examples are independent; iterations
within one example are strictly sequential. Failures are per-example: a
malformed backend response marks that example failed and the batch continues.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import metrics
from .dataset import QAExample, RunConfig
from .errors import EntailQAError, ParseError, TreeError, UnknownFactId
from .facts import IMAGE, TABLE, TEXT, FactBase, add_fact, linearize_table, lookup_text, retrieve_evidence
from .llm import (
    Backend,
    decompose_atomic,
    decompose_question,
    generate_tree_structure,
    refine_to_fact,
    table_qa,
    text_qa,
    vqa_answer,
)
from .moe import (
    GATE_A,
    GATE_B,
    MoeParams,
    TrainItem,
    answer_token_targets,
    backward_and_step,
    build_lexicon,
    decode_answer,
    encode,
    fact_features,
    frg_forward,
    greedy_answer_ids,
    losses,
    moe_forward,
    qa_forward,
)
from .refine import refine, tree_to_text
from .tree import EntailmentTree, leaf_preorder, parse_node_id, parse_tree, serialize_tree

STOP_BUDGET = "budget"
STOP_NO_IMPROVEMENT = "no_improvement"


@dataclass(frozen=True)
class IterationConfig:
    budget: int = 2
    validation_metric: str = "em"
    min_delta: float = 0.0

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("iteration budget must be >= 1")


@dataclass
class PipelineState:
    """Per-example record across feedback iterations."""

    question_id: str
    question: str
    iteration: int = 0
    tree_versions: list[EntailmentTree] = field(default_factory=list)
    retrieved_fact_ids: list[list[str]] = field(default_factory=list)
    predicted_answers: list[str] = field(default_factory=list)
    losses: list[Optional[float]] = field(default_factory=list)
    stopped_reason: Optional[str] = None
    error: Optional[str] = None
    frg_targets: Optional[tuple[int, ...]] = None
    qa_targets: Optional[tuple[int, ...]] = None

    @property
    def failed(self) -> bool:
        return self.error is not None

    def to_json_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "question": self.question,
            "iteration": self.iteration,
            "tree_versions": [
                {"dsl": serialize_tree(t), **t.to_json_dict()}
                for t in self.tree_versions
            ],
            "retrieved_fact_ids": self.retrieved_fact_ids,
            "predicted_answers": self.predicted_answers,
            "losses": self.losses,
            "stopped_reason": self.stopped_reason,
            "error": self.error,
            "frg_targets": list(self.frg_targets) if self.frg_targets else None,
            "qa_targets": list(self.qa_targets) if self.qa_targets else None,
        }


def _generate_and_parse(
    backend: Backend,
    question: str,
    base: FactBase,
    feedback: Optional[tuple[list[str], str]],
) -> EntailmentTree:
    """Generate structure DSL, parse, validate against the base; one reprompt."""
    last_error: Optional[Exception] = None
    for _ in range(2):
        try:
            dsl = generate_tree_structure(backend, question, base, feedback=feedback)
            tree = parse_tree(dsl, hypothesis=question)
            for leaf in tree.leaves:
                lookup_text(base, leaf)
            return tree
        except (TreeError, UnknownFactId, ParseError) as exc:
            last_error = exc
    raise last_error


def run_stage1(
    example: QAExample, backend: Backend, top_n: int = 4
) -> tuple[FactBase, EntailmentTree]:
    """Retrieve, decompose, answer per modality, refine facts, build the tree."""
    if not example.evidence:
        raise ValueError(f"example {example.id} has no evidence")
    retrieved = retrieve_evidence(example.question, list(example.evidence), top_n)
    decomposition = decompose_question(backend, example.question, retrieved)
    by_id = {ev.id: ev for ev in retrieved}

    base = FactBase(example.id)
    for sub in decomposition.sub_questions:
        ev = by_id[sub.evidence_id]
        if ev.modality == IMAGE:
            for atomic in decompose_atomic(backend, sub.question, ev):
                vqa = vqa_answer(backend, atomic, ev)
                text = refine_to_fact(backend, vqa.question, vqa.answer)
                base = add_fact(base, text, IMAGE, ev.id, origin=(atomic, vqa.answer))
        elif ev.modality == TABLE:
            question, answer = table_qa(
                backend, sub.question, linearize_table(ev.content)
            )
            text = refine_to_fact(backend, question, answer)
            base = add_fact(base, text, TABLE, ev.id, origin=(question, answer))
        else:
            question, answer = text_qa(backend, sub.question, str(ev.content))
            text = refine_to_fact(backend, question, answer)
            base = add_fact(base, text, TEXT, ev.id, origin=(question, answer))

    structure = _generate_and_parse(backend, example.question, base, feedback=None)
    return base, refine(structure, base, backend)


def stage2_targets(
    example: QAExample, base: FactBase, initial_tree: EntailmentTree, vocab_size: int
) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """0-based gold fact indices (gold tree, else gold supports, else the
    initial tree's own leaves) and gold answer token ids."""
    frg: list[int] = []
    if example.gold_tree:
        leaves = leaf_preorder(parse_tree(example.gold_tree))
        if all(1 <= leaf.index <= len(base) for leaf in leaves):
            frg = [leaf.index - 1 for leaf in leaves]
    if not frg and example.gold_support_ids:
        gold = set(example.gold_support_ids)
        frg = [
            i for i, fact in enumerate(base.facts) if fact.source_evidence_id in gold
        ]
    if not frg:
        frg = [leaf.index - 1 for leaf in leaf_preorder(initial_tree)]
    qa = answer_token_targets(example.gold_answers()[0], vocab_size)
    return tuple(frg), qa


def predict_pending(
    state: PipelineState,
    base: FactBase,
    params: MoeParams,
    decode_answer_len: int = 8,
) -> None:
    """Run stage-2 inference for every tree version not yet decoded."""
    config = params.config
    lexicon = build_lexicon(base.texts() + [state.question], config.vocab_size)
    while len(state.predicted_answers) < len(state.tree_versions):
        tree = state.tree_versions[len(state.predicted_answers)]
        enc = encode(params, tree_to_text(tree), state.question)
        ff = fact_features(params, base)

        out_a = moe_forward(params, config, enc, GATE_A)
        step_count = len(leaf_preorder(tree))
        scores = frg_forward(params, out_a, enc.features, ff, step_count)
        picks = []
        for row in np.asarray(scores):
            idx = int(np.argmax(row))
            if idx not in picks:
                picks.append(idx)
        retrieved = [f"fact{i + 1}" for i in picks]

        out_b = moe_forward(params, config, enc, GATE_B)
        logits = qa_forward(params, out_b, decode_answer_len)
        answer = decode_answer(greedy_answer_ids(logits), lexicon)

        loss = None
        if state.frg_targets and state.qa_targets:
            frg_scores = frg_forward(
                params, out_a, enc.features, ff, len(state.frg_targets)
            )
            qa_logits = qa_forward(params, out_b, len(state.qa_targets))
            _, _, loss = losses(
                frg_scores, state.frg_targets, qa_logits, state.qa_targets
            )

        state.retrieved_fact_ids.append(retrieved)
        state.predicted_answers.append(answer)
        state.losses.append(loss)


def run_feedback_iteration(
    state: PipelineState,
    base: FactBase,
    params: MoeParams,
    backend: Backend,
    decode_answer_len: int = 8,
) -> PipelineState:
    """Retrieve + answer from the current tree, feed both back, regenerate."""
    if not state.tree_versions:
        raise ValueError("state has no current tree")
    predict_pending(state, base, params, decode_answer_len)
    retrieved = state.retrieved_fact_ids[-1]
    answer = state.predicted_answers[-1]
    feedback = (
        [lookup_text(base, parse_node_id(fid)) for fid in retrieved],
        answer,
    )
    structure = _generate_and_parse(backend, state.question, base, feedback)
    state.tree_versions.append(refine(structure, base, backend))
    state.iteration += 1
    return state


def should_stop(
    scores: Sequence[float], cfg: IterationConfig
) -> tuple[bool, Optional[str]]:
    """Stop on a flat validation metric, else on the iteration budget."""
    if not scores:
        raise ValueError("need at least one validation score")
    if len(scores) >= 2 and scores[-1] - scores[-2] <= cfg.min_delta:
        return True, STOP_NO_IMPROVEMENT
    if len(scores) >= cfg.budget:
        return True, STOP_BUDGET
    return False, None


# --- training ---------------------------------------------------------------------


def build_train_items(
    examples: Sequence[QAExample],
    states: dict[str, PipelineState],
    bases: dict[str, FactBase],
) -> list[TrainItem]:
    items = []
    for example in examples:
        state = states.get(example.id)
        if state is None or state.failed or not state.tree_versions:
            continue
        items.append(
            TrainItem(
                tree_text=tree_to_text(state.tree_versions[0]),
                question=example.question,
                fact_texts=tuple(bases[example.id].texts()),
                frg_targets=state.frg_targets,
                qa_targets=state.qa_targets,
            )
        )
    return items


def train(
    params: MoeParams, config: RunConfig, items: Sequence[TrainItem]
) -> list[float]:
    """Seeded training loop; each step draws a retrieval batch and a QA batch."""
    if not items:
        return []
    rng = np.random.default_rng(config.seed)
    frg_pool = [i for i, item in enumerate(items) if item.frg_targets]
    qa_pool = [i for i, item in enumerate(items) if item.qa_targets]
    curve = []
    for _ in range(config.training.steps):
        batch: list[TrainItem] = []
        if frg_pool:
            size = min(config.training.batch_size_retrieval, len(frg_pool))
            chosen = rng.choice(len(frg_pool), size=size, replace=False)
            batch.extend(items[frg_pool[i]].without_qa() for i in chosen)
        if qa_pool:
            size = min(config.training.batch_size_qa, len(qa_pool))
            chosen = rng.choice(len(qa_pool), size=size, replace=False)
            batch.extend(items[qa_pool[i]].without_frg() for i in chosen)
        params, loss = backward_and_step(
            params,
            params.config,
            batch,
            config.training.learning_rate,
            weight_decay=config.training.weight_decay,
        )
        curve.append(loss)
    return curve


# --- full pipeline -----------------------------------------------------------------


def validation_ids(examples: Sequence[QAExample], fraction: float) -> set[str]:
    n = max(1, int(round(len(examples) * fraction)))
    return {ex.id for ex in examples[-n:]}


def _validation_em(
    examples: Sequence[QAExample],
    states: dict[str, PipelineState],
    val_ids: set[str],
) -> float:
    scores = [
        metrics.em(states[ex.id].predicted_answers[-1], ex.gold_answers())
        for ex in examples
        if ex.id in val_ids and not states[ex.id].failed
    ]
    return float(np.mean(scores)) if scores else 0.0


def stage1_states(
    examples: Sequence[QAExample], config: RunConfig, backend: Backend
) -> tuple[dict[str, PipelineState], dict[str, FactBase]]:
    """Stage 1 over a corpus; failures are recorded per example, not raised."""

    def _one(example: QAExample) -> tuple[PipelineState, Optional[FactBase]]:
        state = PipelineState(question_id=example.id, question=example.question)
        try:
            base, tree = run_stage1(example, backend, top_n=config.retrieval_top_n)
            state.tree_versions.append(tree)
            state.frg_targets, state.qa_targets = stage2_targets(
                example, base, tree, config.moe.vocab_size
            )
            return state, base
        except EntailQAError as exc:
            state.error = f"{type(exc).__name__}: {exc}"
            return state, None

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_one, examples))
    else:
        results = [_one(ex) for ex in examples]
    states: dict[str, PipelineState] = {}
    bases: dict[str, FactBase] = {}
    for example, (state, base) in zip(examples, results):
        states[example.id] = state
        if base is not None:
            bases[example.id] = base
    return states, bases


def run_pipeline(
    examples: Sequence[QAExample],
    config: RunConfig,
    backend: Backend,
    params: Optional[MoeParams] = None,
) -> tuple[dict[str, PipelineState], dict[str, FactBase], dict]:
    """Stage 1 on every example, stage-2 training, then the feedback loop.

    Returns (states by id, fact bases by id, run summary).
    """
    if params is None:
        params = MoeParams.init(config.moe)

    states, bases = stage1_states(examples, config, backend)

    items = build_train_items(examples, states, bases)
    curve = train(params, config, items)

    val_ids = validation_ids(examples, config.validation_fraction)
    active = [ex for ex in examples if not states[ex.id].failed]
    for example in active:
        predict_pending(
            states[example.id], bases[example.id], params, config.decode_answer_len
        )
    baseline_em = _validation_em(examples, states, val_ids)

    iter_cfg = IterationConfig(
        budget=config.iteration_budget,
        validation_metric=config.validation_metric,
        min_delta=config.min_delta,
    )
    history: list[float] = []
    iteration_summaries = []
    for _ in range(iter_cfg.budget):
        for example in list(active):
            state = states[example.id]
            try:
                run_feedback_iteration(
                    state, bases[example.id], params, backend, config.decode_answer_len
                )
                predict_pending(
                    state, bases[example.id], params, config.decode_answer_len
                )
            except EntailQAError as exc:
                state.error = f"{type(exc).__name__}: {exc}"
                active.remove(example)
        history.append(_validation_em(examples, states, val_ids))
        iteration_summaries.append(
            {"iteration": len(history), "validation_em": history[-1]}
        )
        stop, reason = should_stop(history, iter_cfg)
        if stop:
            for example in active:
                states[example.id].stopped_reason = reason
            break

    summary = {
        "examples": len(examples),
        "failed": sorted(ex.id for ex in examples if states[ex.id].failed),
        "train_steps": len(curve),
        "initial_loss": curve[0] if curve else None,
        "final_loss": curve[-1] if curve else None,
        "baseline_validation_em": baseline_em,
        "iterations": iteration_summaries,
        "validation_ids": sorted(val_ids),
    }
    return states, bases, summary


# --- prediction evaluation -----------------------------------------------------------


def evaluate_predictions(
    examples: Sequence[QAExample], predictions: Sequence[dict]
) -> dict:
    """Aggregate EM / word F1 / retrieval F1 / tree scores over predictions.

    Prediction entries: {"id", "answer", "retrieved_evidence_ids"?, "tree"?}.
    """
    from .tree import score_tree  # local import keeps module load light

    by_id = {ex.id: ex for ex in examples}
    em_scores, f1_scores, retrieval, tree_scores = [], [], [], []
    for pred in predictions:
        example = by_id.get(pred.get("id"))
        if example is None:
            continue
        answer = pred.get("answer", "")
        em_scores.append(metrics.em(answer, example.gold_answers()))
        f1_scores.append(metrics.word_f1(answer, example.gold_answers()))
        if example.gold_support_ids and pred.get("retrieved_evidence_ids") is not None:
            retrieval.append(
                metrics.retrieval_f1(
                    pred["retrieved_evidence_ids"], example.gold_support_ids
                )
            )
        if example.gold_tree and pred.get("tree"):
            try:
                tree_scores.append(
                    score_tree(
                        parse_tree(pred["tree"]), parse_tree(example.gold_tree)
                    )
                )
            except TreeError:
                tree_scores.append(None)

    def _mean(values):
        return float(np.mean(values)) if values else None

    tree_ok = [t for t in tree_scores if t is not None]
    return {
        "count": len(em_scores),
        "em": _mean(em_scores),
        "f1": _mean(f1_scores),
        "retrieval": {
            "p": _mean([r.precision for r in retrieval]),
            "r": _mean([r.recall for r in retrieval]),
            "f1": _mean([r.f1 for r in retrieval]),
        },
        "tree": {
            "count": len(tree_scores),
            "unparseable": len(tree_scores) - len(tree_ok),
            "leaves": _mean([t.leaves_correct for t in tree_ok]),
            "steps": _mean([t.steps_correct for t in tree_ok]),
            "intermediates": _mean([t.intermediates_correct for t in tree_ok]),
            "all": _mean([t.all_correct for t in tree_ok]),
        },
    }
