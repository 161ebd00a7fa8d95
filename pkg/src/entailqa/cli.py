"""Command-line surface tying the modules together.

Subcommands: build-factbase, gen-tree, refine-tree, train, run-pipeline,
eval, route-demo. Exit codes: 0 success, 1 usage, 2 data error, 3 backend
error. Every artifact file embeds the config hash and seed that produced it.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataset import (
    RunConfig,
    canonical_json,
    load_dataset,
    load_run_config,
    read_json,
    run_config_from_dict,
    write_json,
)
from .errors import EntailQAError, GatewayError, SchemaError
from .llm import HttpBackend, MockBackend, generate_tree_structure
from .moe import GATE_A, GATE_B, MoeParams, route
from .pipeline import evaluate_predictions, run_pipeline, run_stage1
from .tree import serialize_tree


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 on usage errors; we want 1
        raise UsageError(message)


def _build_parser() -> _Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--backend", choices=["mock", "http"], help="backend kind")
    common.add_argument("--out", help="output directory", default="out")

    parser = _Parser(prog="entailqa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, needs_dataset in [
        ("build-factbase", True),
        ("gen-tree", True),
        ("refine-tree", True),
        ("train", True),
        ("run-pipeline", True),
        ("route-demo", False),
    ]:
        p = sub.add_parser(name, parents=[common])
        if needs_dataset:
            p.add_argument("dataset", help="dataset JSON file")

    p = sub.add_parser("eval", parents=[common])
    p.add_argument("--pred", required=True, help="predictions JSON file")
    p.add_argument("--gold", required=True, help="gold dataset JSON file")
    return parser


def _load_config(args) -> RunConfig:
    config = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is None and args.backend is None:
        return config
    data = config.to_json_dict()
    if args.seed is not None:
        data["seed"] = args.seed
        data["moe"]["seed"] = args.seed
    if args.backend is not None:
        data["backend"] = args.backend
    return run_config_from_dict(data)


def _make_backend(config: RunConfig):
    if config.backend == "http":
        return HttpBackend(
            model=config.http_model,
            timeout=config.http_timeout,
            max_retries=config.http_max_retries,
            max_in_flight=config.http_max_in_flight,
        )
    return MockBackend(seed=config.seed)


def _stamp(config: RunConfig, payload: dict) -> dict:
    return {"config_hash": config.config_hash(), "seed": config.seed, **payload}


def _cmd_build_factbase(args, config: RunConfig) -> int:
    examples = load_dataset(args.dataset)
    backend = _make_backend(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for example in examples:
        base, _ = run_stage1(example, backend, top_n=config.retrieval_top_n)
        write_json(out / f"{example.id}.factbase.json", _stamp(config, base.to_json_dict()))
    return 0


def _cmd_gen_tree(args, config: RunConfig) -> int:
    examples = load_dataset(args.dataset)
    backend = _make_backend(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for example in examples:
        base, _ = run_stage1(example, backend, top_n=config.retrieval_top_n)
        dsl = generate_tree_structure(backend, example.question, base)
        write_json(
            out / f"{example.id}.structure.json",
            _stamp(config, {"question_id": example.id, "dsl": dsl}),
        )
    return 0


def _cmd_refine_tree(args, config: RunConfig) -> int:
    examples = load_dataset(args.dataset)
    backend = _make_backend(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for example in examples:
        _, tree = run_stage1(example, backend, top_n=config.retrieval_top_n)
        write_json(
            out / f"{example.id}.tree.json",
            _stamp(config, {"dsl": serialize_tree(tree), **tree.to_json_dict()}),
        )
    return 0


def _cmd_train(args, config: RunConfig) -> int:
    from .pipeline import build_train_items, stage1_states, train

    examples = load_dataset(args.dataset)
    backend = _make_backend(config)
    states, bases = stage1_states(examples, config, backend)
    items = build_train_items(examples, states, bases)
    params = MoeParams.init(config.moe)
    curve = train(params, config, items)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "checkpoint.json", _stamp(config, params.to_state_dict()))
    write_json(
        out / "training.json",
        _stamp(config, {"steps": len(curve), "loss_curve": curve}),
    )
    return 0


def _cmd_run_pipeline(args, config: RunConfig) -> int:
    examples = load_dataset(args.dataset)
    backend = _make_backend(config)
    states, bases, summary = run_pipeline(examples, config, backend)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    predictions = []
    for example in examples:
        state = states[example.id]
        write_json(out / f"{example.id}.state.json", _stamp(config, state.to_json_dict()))
        if state.failed or not state.predicted_answers:
            continue
        base = bases[example.id]
        retrieved_evidence = []
        for fid in state.retrieved_fact_ids[-1]:
            fact = base.facts[int(fid[4:]) - 1]
            if fact.source_evidence_id not in retrieved_evidence:
                retrieved_evidence.append(fact.source_evidence_id)
        predictions.append(
            {
                "id": example.id,
                "answer": state.predicted_answers[-1],
                "retrieved_evidence_ids": retrieved_evidence,
                "tree": serialize_tree(state.tree_versions[-1]),
            }
        )
    write_json(out / "predictions.json", _stamp(config, {"predictions": predictions}))
    write_json(out / "manifest.json", _stamp(config, summary))
    if isinstance(backend, HttpBackend):
        write_json(out / "exchanges.json", _stamp(config, {"log": backend.exchange_log}))
    return 0


def _cmd_eval(args, config: RunConfig) -> int:
    examples = load_dataset(args.gold)
    pred_data = read_json(args.pred)
    if isinstance(pred_data, dict):
        predictions = pred_data.get("predictions")
    else:
        predictions = pred_data
    if not isinstance(predictions, list):
        raise SchemaError("predictions file needs a predictions list", "/predictions")
    report = evaluate_predictions(examples, predictions)
    sys.stdout.write(canonical_json(report))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "metrics.json", _stamp(config, report))
    return 0


def _cmd_route_demo(args, config: RunConfig) -> int:
    params = MoeParams.init(config.moe)
    rng = np.random.default_rng(config.seed)
    tokens = rng.normal(size=(8, config.moe.embed_dim))
    for gate in (GATE_A, GATE_B):
        decision = route(params, config.moe, tokens, gate)
        pool = config.moe.pool(gate)
        sys.stdout.write(f"gate {gate} pool={list(pool)}\n")
        for i in range(tokens.shape[0]):
            picks = ", ".join(
                f"expert {int(e)} @ {v:.4f}"
                for e, v in zip(decision.indices[i], decision.values[i])
            )
            sys.stdout.write(f"  token {i}: {picks}\n")
    return 0


_COMMANDS = {
    "build-factbase": _cmd_build_factbase,
    "gen-tree": _cmd_gen_tree,
    "refine-tree": _cmd_refine_tree,
    "train": _cmd_train,
    "run-pipeline": _cmd_run_pipeline,
    "eval": _cmd_eval,
    "route-demo": _cmd_route_demo,
}


def cli_dispatch(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        config = _load_config(args)
        return _COMMANDS[args.command](args, config)
    except UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return 1
    except GatewayError as exc:
        sys.stderr.write(f"backend error: {exc}\n")
        return 3
    except (SchemaError, EntailQAError, OSError) as exc:
        sys.stderr.write(f"data error: {exc}\n")
        return 2


def main() -> None:
    raise SystemExit(cli_dispatch())
