"""Dataset ingestion, run configuration, and canonical JSON persistence.

Dataset files look like::

    {"examples": [{"id": ..., "question": ..., "answer": str | [str],
                   "evidence": [{"id", "modality", "content" | {"header","rows"},
                                 "caption"?, "gold"?}],
                   "gold_support_ids"?: [...], "gold_tree"?: "fact1 -> answer"}]}

Schema violations raise ``SchemaError`` carrying a JSON-pointer location.
All persisted JSON uses sorted keys and a trailing newline so that equal
content is byte-equal.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from .errors import SchemaError, TreeError
from .facts import MODALITIES, TABLE, Evidence, Table
from .moe import MoeConfig
from .tree import parse_tree

_EVIDENCE_ID_RE = re.compile(r"[^\s\[\]]+")


@dataclass(frozen=True)
class QAExample:
    id: str
    question: str
    evidence: tuple[Evidence, ...]
    gold_answer: Union[str, tuple[str, ...]]
    gold_support_ids: Optional[tuple[str, ...]] = None
    gold_tree: Optional[str] = None

    def gold_answers(self) -> tuple[str, ...]:
        if isinstance(self.gold_answer, str):
            return (self.gold_answer,)
        return tuple(self.gold_answer)


@dataclass(frozen=True)
class TrainingConfig:
    steps: int = 200
    learning_rate: float = 1e-4
    batch_size_retrieval: int = 32
    batch_size_qa: int = 12
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.steps < 0 or self.learning_rate < 0:
            raise ValueError("steps and learning_rate must be non-negative")
        if self.batch_size_retrieval < 1 or self.batch_size_qa < 1:
            raise ValueError("batch sizes must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    backend: str = "mock"
    seed: int = 0
    iteration_budget: int = 2
    min_delta: float = 0.0
    validation_metric: str = "em"
    validation_fraction: float = 0.25
    retrieval_top_n: int = 4
    decode_answer_len: int = 8
    workers: int = 1
    http_model: str = "gpt-3.5-turbo"
    http_timeout: float = 60.0
    http_max_retries: int = 2
    http_max_in_flight: int = 4
    moe: MoeConfig = field(
        default_factory=lambda: MoeConfig(
            embed_dim=16,
            vocab_size=2048,
            n_frg_experts=2,
            n_qa_experts=2,
            n_shared_experts=2,
            max_seq_len=512,
        )
    )
    training: TrainingConfig = field(default_factory=TrainingConfig)

    def __post_init__(self):
        if self.backend not in ("mock", "http"):
            raise ValueError(f"unknown backend: {self.backend!r}")
        if self.iteration_budget < 1:
            raise ValueError("iteration budget must be >= 1")
        if self.validation_metric not in ("em", "accuracy"):
            raise ValueError(f"unknown validation metric: {self.validation_metric!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def to_json_dict(self) -> dict:
        return {
            "backend": self.backend,
            "seed": self.seed,
            "iteration_budget": self.iteration_budget,
            "min_delta": self.min_delta,
            "validation_metric": self.validation_metric,
            "validation_fraction": self.validation_fraction,
            "retrieval_top_n": self.retrieval_top_n,
            "decode_answer_len": self.decode_answer_len,
            "workers": self.workers,
            "http_model": self.http_model,
            "http_timeout": self.http_timeout,
            "http_max_retries": self.http_max_retries,
            "http_max_in_flight": self.http_max_in_flight,
            "moe": {
                "embed_dim": self.moe.embed_dim,
                "vocab_size": self.moe.vocab_size,
                "n_frg_experts": self.moe.n_frg_experts,
                "n_qa_experts": self.moe.n_qa_experts,
                "n_shared_experts": self.moe.n_shared_experts,
                "top_k": self.moe.top_k,
                "max_seq_len": self.moe.max_seq_len,
                "seed": self.moe.seed,
                "renormalize_topk": self.moe.renormalize_topk,
            },
            "training": {
                "steps": self.training.steps,
                "learning_rate": self.training.learning_rate,
                "batch_size_retrieval": self.training.batch_size_retrieval,
                "batch_size_qa": self.training.batch_size_qa,
                "weight_decay": self.training.weight_decay,
            },
        }

    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_json_dict()).encode()).hexdigest()[:12]


def run_config_from_dict(data: dict) -> RunConfig:
    """Build a RunConfig from loose JSON; the top-level seed feeds every component."""
    try:
        seed = int(data.get("seed", 0))
        moe_data = dict(data.get("moe", {}))
        moe_data.setdefault("seed", seed)
        moe_defaults = RunConfig().moe
        for key in (
            "embed_dim",
            "vocab_size",
            "n_frg_experts",
            "n_qa_experts",
            "n_shared_experts",
            "top_k",
            "max_seq_len",
            "renormalize_topk",
        ):
            moe_data.setdefault(key, getattr(moe_defaults, key))
        training = TrainingConfig(**data.get("training", {}))
        return RunConfig(
            backend=data.get("backend", "mock"),
            seed=seed,
            iteration_budget=int(data.get("iteration_budget", 2)),
            min_delta=float(data.get("min_delta", 0.0)),
            validation_metric=data.get("validation_metric", "em"),
            validation_fraction=float(data.get("validation_fraction", 0.25)),
            retrieval_top_n=int(data.get("retrieval_top_n", 4)),
            decode_answer_len=int(data.get("decode_answer_len", 8)),
            workers=int(data.get("workers", 1)),
            http_model=data.get("http_model", "gpt-3.5-turbo"),
            http_timeout=float(data.get("http_timeout", 60.0)),
            http_max_retries=int(data.get("http_max_retries", 2)),
            http_max_in_flight=int(data.get("http_max_in_flight", 4)),
            moe=MoeConfig(**moe_data),
            training=training,
        )
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"invalid run config: {exc}") from exc


def load_run_config(path: Union[str, Path]) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return run_config_from_dict(json.load(fh))


# --- dataset loading -----------------------------------------------------------------


def _expect(condition: bool, message: str, pointer: str) -> None:
    if not condition:
        raise SchemaError(message, pointer)


def _parse_table(data: dict, pointer: str) -> Table:
    _expect(isinstance(data, dict), "table content must be an object", pointer)
    header = data.get("header")
    rows = data.get("rows")
    _expect(isinstance(header, list) and header, "table needs a non-empty header", pointer)
    _expect(isinstance(rows, list), "table needs a rows list", pointer)
    coerced = []
    for i, row in enumerate(rows):
        _expect(isinstance(row, list), "row must be a list", f"{pointer}/rows/{i}")
        _expect(
            len(row) == len(header),
            f"row has {len(row)} cells for {len(header)} columns",
            f"{pointer}/rows/{i}",
        )
        coerced.append(tuple(str(cell) for cell in row))
    return Table(header=tuple(str(c) for c in header), rows=tuple(coerced))


def _parse_evidence(data: dict, pointer: str) -> Evidence:
    _expect(isinstance(data, dict), "evidence must be an object", pointer)
    ev_id = data.get("id")
    _expect(
        isinstance(ev_id, str) and bool(_EVIDENCE_ID_RE.fullmatch(ev_id)),
        "evidence id must be a non-empty string without spaces or brackets",
        f"{pointer}/id",
    )
    modality = data.get("modality")
    _expect(modality in MODALITIES, f"unknown modality {modality!r}", f"{pointer}/modality")
    caption = data.get("caption")
    if caption is not None:
        _expect(isinstance(caption, str), "caption must be a string", f"{pointer}/caption")
    content = data.get("content", "")
    if modality == TABLE:
        content = _parse_table(content, f"{pointer}/content")
    else:
        _expect(
            isinstance(content, str), "content must be a string", f"{pointer}/content"
        )
        if modality == "image":
            _expect(
                bool(caption and caption.strip()),
                "image evidence needs a caption",
                f"{pointer}/caption",
            )
        else:
            _expect(
                bool(content.strip()),
                "text evidence needs non-empty content",
                f"{pointer}/content",
            )
    is_gold = data.get("gold")
    if is_gold is not None:
        _expect(isinstance(is_gold, bool), "gold must be a boolean", f"{pointer}/gold")
    return Evidence(
        id=ev_id, modality=modality, content=content, caption=caption, is_gold=is_gold
    )


def parse_example(data: dict, pointer: str) -> QAExample:
    _expect(isinstance(data, dict), "example must be an object", pointer)
    ex_id = data.get("id")
    _expect(
        isinstance(ex_id, str) and bool(ex_id.strip()),
        "example id must be a non-empty string",
        f"{pointer}/id",
    )
    question = data.get("question")
    _expect(
        isinstance(question, str) and bool(question.strip()),
        "question must be a non-empty string",
        f"{pointer}/question",
    )
    answer = data.get("answer")
    if isinstance(answer, list):
        _expect(
            answer and all(isinstance(a, str) for a in answer),
            "answer list must hold strings",
            f"{pointer}/answer",
        )
        gold_answer: Union[str, tuple[str, ...]] = tuple(answer)
    else:
        _expect(isinstance(answer, str), "answer must be a string or list", f"{pointer}/answer")
        gold_answer = answer

    raw_evidence = data.get("evidence", [])
    _expect(isinstance(raw_evidence, list), "evidence must be a list", f"{pointer}/evidence")
    evidence = []
    seen_ids = set()
    for i, item in enumerate(raw_evidence):
        ev = _parse_evidence(item, f"{pointer}/evidence/{i}")
        _expect(
            ev.id not in seen_ids,
            f"duplicate evidence id {ev.id!r}",
            f"{pointer}/evidence/{i}/id",
        )
        seen_ids.add(ev.id)
        evidence.append(ev)

    support = data.get("gold_support_ids")
    if support is not None:
        _expect(
            isinstance(support, list) and all(isinstance(s, str) for s in support),
            "gold_support_ids must be a list of strings",
            f"{pointer}/gold_support_ids",
        )
        for i, sid in enumerate(support):
            _expect(
                sid in seen_ids,
                f"gold support id {sid!r} not in evidence",
                f"{pointer}/gold_support_ids/{i}",
            )
        support = tuple(support)

    gold_tree = data.get("gold_tree")
    if gold_tree is not None:
        _expect(
            isinstance(gold_tree, str), "gold_tree must be a string", f"{pointer}/gold_tree"
        )
        try:
            parse_tree(gold_tree)
        except TreeError as exc:
            raise SchemaError(f"gold_tree does not parse: {exc}", f"{pointer}/gold_tree")

    return QAExample(
        id=ex_id,
        question=question,
        evidence=tuple(evidence),
        gold_answer=gold_answer,
        gold_support_ids=support,
        gold_tree=gold_tree,
    )


def dataset_from_dict(data: dict) -> list[QAExample]:
    _expect(isinstance(data, dict), "dataset must be an object", "")
    raw = data.get("examples")
    _expect(isinstance(raw, list), "dataset needs an examples list", "/examples")
    examples = []
    seen = set()
    for i, item in enumerate(raw):
        ex = parse_example(item, f"/examples/{i}")
        _expect(ex.id not in seen, f"duplicate example id {ex.id!r}", f"/examples/{i}/id")
        seen.add(ex.id)
        examples.append(ex)
    return examples


def load_dataset(path: Union[str, Path]) -> list[QAExample]:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"not valid JSON: {exc}") from exc
    return dataset_from_dict(data)


def _evidence_to_dict(ev: Evidence) -> dict:
    out: dict = {"id": ev.id, "modality": ev.modality}
    if isinstance(ev.content, Table):
        out["content"] = {
            "header": list(ev.content.header),
            "rows": [list(row) for row in ev.content.rows],
        }
    else:
        out["content"] = ev.content
    if ev.caption is not None:
        out["caption"] = ev.caption
    if ev.is_gold is not None:
        out["gold"] = ev.is_gold
    return out


def example_to_dict(example: QAExample) -> dict:
    out: dict = {
        "id": example.id,
        "question": example.question,
        "answer": (
            example.gold_answer
            if isinstance(example.gold_answer, str)
            else list(example.gold_answer)
        ),
        "evidence": [_evidence_to_dict(ev) for ev in example.evidence],
    }
    if example.gold_support_ids is not None:
        out["gold_support_ids"] = list(example.gold_support_ids)
    if example.gold_tree is not None:
        out["gold_tree"] = example.gold_tree
    return out


def dataset_to_dict(examples: list[QAExample]) -> dict:
    return {"examples": [example_to_dict(ex) for ex in examples]}


# --- canonical persistence -------------------------------------------------------------


def canonical_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def write_json(path: Union[str, Path], obj) -> None:
    Path(path).write_text(canonical_json(obj), encoding="utf-8")


def read_json(path: Union[str, Path]):
    return json.loads(Path(path).read_text(encoding="utf-8"))
