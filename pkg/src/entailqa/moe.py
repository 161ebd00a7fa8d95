"""Desk-scale joint fact-retrieval-generation / question-answering core.

Shared encoder stand-in (hashed embedding -> linear -> tanh), two top-K gates
over task-specific plus shared expert pools, per-token expert FFNs with a
residual add, and two cross-attention decoder heads:

* FRG head: learned step queries attend over the routed sequence, then the
  result attends over per-fact mean features, producing one score vector over
  the facts per retrieval step.
* QA head: learned position queries attend over the routed sequence only (no
  access to fact features) and project to vocabulary logits.

Everything runs in float64 with handwritten analytic gradients so the whole
parameter set can be checked against centered finite differences. Routing
gradients flow through the selected experts and the selected softmax
probabilities only; unselected paths receive exactly zero.

Token ids are crc32 hash buckets; bucket 0 is reserved as the end-of-answer
marker for QA targets and greedy decoding.
"""

from __future__ import annotations

import math
import re
import zlib
from dataclasses import dataclass, replace
from typing import Iterable, Literal, Optional, Sequence

import numpy as np

from .errors import LengthMismatch, NonFiniteLoss, SequenceTooLong
from .facts import FactBase

GateId = Literal["A", "B"]
GATE_A: GateId = "A"
GATE_B: GateId = "B"

EOS_ID = 0

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def token_bucket(token: str, vocab_size: int) -> int:
    """Stable hash into buckets 1..vocab_size-1 (0 is the end marker)."""
    return 1 + zlib.crc32(token.encode("utf-8")) % (vocab_size - 1)


def token_ids(text: str, vocab_size: int) -> list[int]:
    return [token_bucket(t, vocab_size) for t in tokenize(text)]


def build_lexicon(texts: Iterable[str], vocab_size: int) -> dict[int, str]:
    """First-seen bucket -> word map used to turn decoded ids back into words."""
    lexicon: dict[int, str] = {}
    for text in texts:
        for token in tokenize(text):
            lexicon.setdefault(token_bucket(token, vocab_size), token)
    return lexicon


def answer_token_targets(answer: str, vocab_size: int) -> tuple[int, ...]:
    return tuple(token_ids(answer, vocab_size)) + (EOS_ID,)


def decode_answer(ids: Sequence[int], lexicon: dict[int, str]) -> str:
    words = []
    for i in ids:
        if i == EOS_ID:
            break
        word = lexicon.get(int(i))
        if word:
            words.append(word)
    return " ".join(words)


# --- configuration and parameters --------------------------------------------------


@dataclass(frozen=True)
class MoeConfig:
    embed_dim: int
    vocab_size: int
    n_frg_experts: int
    n_qa_experts: int
    n_shared_experts: int
    top_k: int = 2
    max_seq_len: int = 128
    seed: int = 0
    renormalize_topk: bool = False

    def __post_init__(self):
        counts = (
            self.embed_dim,
            self.n_frg_experts,
            self.n_qa_experts,
            self.n_shared_experts,
            self.top_k,
            self.max_seq_len,
        )
        if any(c < 1 for c in counts):
            raise ValueError("all counts must be >= 1")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.top_k > self.n_frg_experts + self.n_shared_experts:
            raise ValueError("top_k exceeds the FRG gate pool")
        if self.top_k > self.n_qa_experts + self.n_shared_experts:
            raise ValueError("top_k exceeds the QA gate pool")

    @property
    def n_experts(self) -> int:
        return self.n_frg_experts + self.n_qa_experts + self.n_shared_experts

    @property
    def frg_expert_ids(self) -> tuple[int, ...]:
        return tuple(range(self.n_frg_experts))

    @property
    def qa_expert_ids(self) -> tuple[int, ...]:
        return tuple(range(self.n_frg_experts, self.n_frg_experts + self.n_qa_experts))

    @property
    def shared_expert_ids(self) -> tuple[int, ...]:
        return tuple(range(self.n_frg_experts + self.n_qa_experts, self.n_experts))

    def pool(self, gate: GateId) -> tuple[int, ...]:
        if gate == GATE_A:
            return self.frg_expert_ids + self.shared_expert_ids
        if gate == GATE_B:
            return self.qa_expert_ids + self.shared_expert_ids
        raise ValueError(f"unknown gate: {gate!r}")


class MoeParams:
    """All trainable tensors, float64. Mutated in place by the optimizer."""

    def __init__(self, config: MoeConfig, arrays: dict[str, np.ndarray]):
        self.config = config
        for name, arr in arrays.items():
            setattr(self, name, arr)
        self._names = tuple(sorted(arrays))
        self.opt_state: Optional[dict] = None

    @classmethod
    def init(cls, config: MoeConfig) -> "MoeParams":
        rng = np.random.default_rng(config.seed)
        d, v = config.embed_dim, config.vocab_size
        h = 2 * d
        n_e = config.n_experts
        s = config.max_seq_len

        def w(*shape: int) -> np.ndarray:
            fan_in = shape[-1]
            return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)

        arrays = {
            "embedding": rng.normal(0.0, 1.0 / math.sqrt(d), size=(v, d)),
            "enc_w": w(d, d),
            "enc_b": np.zeros(d),
            "gate_a": w(config.n_frg_experts + config.n_shared_experts, d),
            "gate_b": w(config.n_qa_experts + config.n_shared_experts, d),
            "expert_w1": w(n_e, h, d),
            "expert_b1": np.zeros((n_e, h)),
            "expert_w2": w(n_e, d, h),
            "expert_b2": np.zeros((n_e, d)),
            "frg_queries": rng.normal(0.0, 1.0 / math.sqrt(d), size=(s, d)),
            "qa_queries": rng.normal(0.0, 1.0 / math.sqrt(d), size=(s, d)),
            "frg_q1": w(d, d),
            "frg_k1": w(d, d),
            "frg_v1": w(d, d),
            "frg_q2": w(d, d),
            "frg_k2": w(d, d),
            "qa_q": w(d, d),
            "qa_k": w(d, d),
            "qa_v": w(d, d),
            "vocab_out": w(v, d),
        }
        return cls(config, arrays)

    def block_names(self) -> tuple[str, ...]:
        return self._names

    def blocks(self) -> Iterable[tuple[str, np.ndarray]]:
        for name in self._names:
            yield name, getattr(self, name)

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(arr) for name, arr in self.blocks()}

    def copy(self) -> "MoeParams":
        return MoeParams(
            self.config, {name: arr.copy() for name, arr in self.blocks()}
        )

    def to_state_dict(self) -> dict:
        return {
            "format": "entailqa-checkpoint-v1",
            "config": {
                "embed_dim": self.config.embed_dim,
                "vocab_size": self.config.vocab_size,
                "n_frg_experts": self.config.n_frg_experts,
                "n_qa_experts": self.config.n_qa_experts,
                "n_shared_experts": self.config.n_shared_experts,
                "top_k": self.config.top_k,
                "max_seq_len": self.config.max_seq_len,
                "seed": self.config.seed,
                "renormalize_topk": self.config.renormalize_topk,
            },
            "arrays": {
                name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
                for name, arr in self.blocks()
            },
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "MoeParams":
        if state.get("format") != "entailqa-checkpoint-v1":
            raise ValueError(f"unknown checkpoint format: {state.get('format')!r}")
        config = MoeConfig(**state["config"])
        arrays = {
            name: np.asarray(entry["data"], dtype=float).reshape(entry["shape"])
            for name, entry in state["arrays"].items()
        }
        return cls(config, arrays)


# --- value containers -----------------------------------------------------------


@dataclass(frozen=True)
class EncodedSequence:
    """Per-token features of "tree text (+) question", one row per token."""

    features: np.ndarray
    token_ids: tuple[int, ...]


@dataclass(frozen=True)
class FactFeatures:
    """One row per fact: mean of the fact's encoded token features."""

    features: np.ndarray


@dataclass(frozen=True)
class RoutingDecision:
    gate: GateId
    indices: np.ndarray  # (l, K) global expert ids
    values: np.ndarray  # (l, K) selected softmax probabilities
    pool_positions: np.ndarray  # (l, K) positions within the gate's pool


@dataclass(frozen=True)
class TrainItem:
    """One training example; either target may be absent."""

    tree_text: str
    question: str
    fact_texts: tuple[str, ...]
    frg_targets: Optional[tuple[int, ...]] = None
    qa_targets: Optional[tuple[int, ...]] = None

    def without_frg(self) -> "TrainItem":
        return replace(self, frg_targets=None)

    def without_qa(self) -> "TrainItem":
        return replace(self, qa_targets=None)


def _as_matrix(seq) -> np.ndarray:
    if isinstance(seq, EncodedSequence):
        return seq.features
    if isinstance(seq, FactFeatures):
        return seq.features
    return np.asarray(seq, dtype=float)


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_rows_backward(probs: np.ndarray, d_probs: np.ndarray) -> np.ndarray:
    inner = (d_probs * probs).sum(axis=-1, keepdims=True)
    return probs * (d_probs - inner)


# --- forward operations -----------------------------------------------------------


def _encode_ids(params: MoeParams, ids: Sequence[int]) -> np.ndarray:
    if not len(ids):
        return np.zeros((0, params.config.embed_dim))
    x = params.embedding[list(ids)]
    return np.tanh(x @ params.enc_w.T + params.enc_b)


def encode(params: MoeParams, tree_text: str, question: str) -> EncodedSequence:
    """Hashed-embedding + single projection + tanh over tree text then question."""
    vocab = params.config.vocab_size
    ids = token_ids(tree_text, vocab) + token_ids(question, vocab)
    if len(ids) > params.config.max_seq_len:
        raise SequenceTooLong(
            f"{len(ids)} tokens exceed max_seq_len={params.config.max_seq_len}"
        )
    return EncodedSequence(features=_encode_ids(params, ids), token_ids=tuple(ids))


def fact_features(params: MoeParams, base: FactBase) -> FactFeatures:
    """m x d matrix; row i is the token-mean encoding of fact i."""
    if not len(base):
        raise ValueError("fact base is empty")
    d = params.config.embed_dim
    rows = []
    for fact in base.facts:
        ids = token_ids(fact.text, params.config.vocab_size)
        enc = _encode_ids(params, ids)
        rows.append(enc.mean(axis=0) if len(ids) else np.zeros(d))
    return FactFeatures(features=np.stack(rows))


def _gate_matrix(params: MoeParams, gate: GateId) -> np.ndarray:
    return params.gate_a if gate == GATE_A else params.gate_b


def route(params: MoeParams, config: MoeConfig, seq, gate: GateId) -> RoutingDecision:
    """Top-K token-choice routing over the gate's expert pool.

    Values are the selected softmax probabilities, not renormalized unless
    the config says so; ties select the lowest pool index first.
    """
    feats = _as_matrix(seq)
    probs = _softmax_rows(feats @ _gate_matrix(params, gate).T)
    order = np.argsort(-probs, axis=1, kind="stable")
    pool_positions = order[:, : config.top_k]
    values = np.take_along_axis(probs, pool_positions, axis=1)
    if config.renormalize_topk:
        values = values / values.sum(axis=1, keepdims=True)
    pool = np.asarray(config.pool(gate))
    return RoutingDecision(
        gate=gate,
        indices=pool[pool_positions],
        values=values,
        pool_positions=pool_positions,
    )


def _expert_forward(
    params: MoeParams, expert: int, x: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    h = np.tanh(x @ params.expert_w1[expert].T + params.expert_b1[expert])
    out = h @ params.expert_w2[expert].T + params.expert_b2[expert]
    return out, h


def _moe_fwd(
    params: MoeParams, config: MoeConfig, feats: np.ndarray, gate: GateId
) -> tuple[np.ndarray, dict]:
    decision = route(params, config, feats, gate)
    y = np.zeros_like(feats)
    expert_cache: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = {}
    for expert in config.pool(gate):
        mask = decision.indices == expert  # (l, K)
        rows = np.nonzero(mask.any(axis=1))[0]
        if not rows.size:
            continue
        weights = (decision.values * mask)[rows].sum(axis=1)
        out, h = _expert_forward(params, expert, feats[rows])
        y[rows] += weights[:, None] * out
        expert_cache[expert] = (rows, weights, h, out)
    cache = {"decision": decision, "expert_cache": expert_cache, "feats": feats}
    return y + feats, cache


def moe_forward(params: MoeParams, config: MoeConfig, seq, gate: GateId) -> np.ndarray:
    """Per-token top-K expert mix plus the residual input row."""
    out, _ = _moe_fwd(params, config, _as_matrix(seq), gate)
    return out


def _attention_fwd(
    q_in: np.ndarray,
    kv_in: np.ndarray,
    wq: np.ndarray,
    wk: np.ndarray,
    wv: np.ndarray,
) -> tuple[np.ndarray, dict]:
    d = q_in.shape[1]
    scale = 1.0 / math.sqrt(d)
    q = q_in @ wq
    k = kv_in @ wk
    v = kv_in @ wv
    attn = _softmax_rows(q @ k.T * scale)
    out = attn @ v
    return out, {"q": q, "k": k, "v": v, "attn": attn, "scale": scale}


def _frg_fwd(
    params: MoeParams, seq_moe: np.ndarray, fact_feats: np.ndarray, step_count: int
) -> tuple[np.ndarray, dict]:
    if step_count < 1:
        raise ValueError("step_count must be >= 1")
    if step_count > params.frg_queries.shape[0]:
        raise SequenceTooLong(
            f"{step_count} steps exceed the {params.frg_queries.shape[0]} learned queries"
        )
    queries = params.frg_queries[:step_count]
    ctx, attn_cache = _attention_fwd(
        queries, seq_moe, params.frg_q1, params.frg_k1, params.frg_v1
    )
    scale = 1.0 / math.sqrt(params.config.embed_dim)
    q2 = ctx @ params.frg_q2
    k2 = fact_feats @ params.frg_k2
    scores = q2 @ k2.T * scale
    cache = {
        "queries": queries,
        "ctx": ctx,
        "q2": q2,
        "k2": k2,
        "scale": scale,
        "attn": attn_cache,
        "seq_moe": seq_moe,
        "fact_feats": fact_feats,
    }
    return scores, cache


def frg_forward(
    params: MoeParams, seq_moe, seq_enc, fact_feats, step_count: int
) -> np.ndarray:
    """Per-step score vectors over the facts (step_count x m).

    ``seq_enc`` is accepted for interface parity with callers that hold the
    raw encoder output; the scores are computed from the routed sequence.
    """
    del seq_enc
    scores, _ = _frg_fwd(params, _as_matrix(seq_moe), _as_matrix(fact_feats), step_count)
    return scores


def _qa_fwd(
    params: MoeParams, seq_moe: np.ndarray, answer_len: int
) -> tuple[np.ndarray, dict]:
    if answer_len < 1:
        raise ValueError("answer_len must be >= 1")
    if answer_len > params.qa_queries.shape[0]:
        raise SequenceTooLong(
            f"{answer_len} positions exceed the {params.qa_queries.shape[0]} learned queries"
        )
    queries = params.qa_queries[:answer_len]
    ctx, attn_cache = _attention_fwd(
        queries, seq_moe, params.qa_q, params.qa_k, params.qa_v
    )
    logits = ctx @ params.vocab_out.T
    cache = {"queries": queries, "ctx": ctx, "attn": attn_cache, "seq_moe": seq_moe}
    return logits, cache


def qa_forward(params: MoeParams, seq_moe, answer_len: int) -> np.ndarray:
    """Vocabulary logits per answer position; independent of fact features."""
    logits, _ = _qa_fwd(params, _as_matrix(seq_moe), answer_len)
    return logits


def _cross_entropy(
    scores: np.ndarray, targets: Sequence[int]
) -> tuple[float, np.ndarray]:
    """Mean negative log softmax at the target columns; returns loss and probs."""
    if scores.shape[0] != len(targets):
        raise LengthMismatch(
            f"{scores.shape[0]} score rows for {len(targets)} targets"
        )
    targets = list(targets)
    if any(not 0 <= t < scores.shape[1] for t in targets):
        raise LengthMismatch("target index out of range")
    shifted = scores - scores.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_z[:, None]
    loss = -float(np.mean(log_probs[np.arange(len(targets)), targets]))
    return loss, np.exp(log_probs)


def losses(
    frg_scores,
    gold_fact_sequence: Sequence[int],
    qa_logits,
    gold_answer_tokens: Sequence[int],
) -> tuple[float, float, float]:
    """(retrieval loss, answer loss, their sum) as mean cross-entropies."""
    l_frg, _ = _cross_entropy(_as_matrix(frg_scores), gold_fact_sequence)
    l_qa, _ = _cross_entropy(_as_matrix(qa_logits), gold_answer_tokens)
    return l_frg, l_qa, l_frg + l_qa


# --- full forward/backward for training ----------------------------------------------


def _item_forward(params: MoeParams, config: MoeConfig, item: TrainItem) -> dict:
    vocab = config.vocab_size
    ids = token_ids(item.tree_text, vocab) + token_ids(item.question, vocab)
    if len(ids) > config.max_seq_len:
        raise SequenceTooLong(f"{len(ids)} tokens exceed max_seq_len")
    feats = _encode_ids(params, ids)
    cache: dict = {"ids": ids, "feats": feats, "item": item}

    if item.frg_targets is not None:
        fact_ids = [token_ids(t, vocab) for t in item.fact_texts]
        fact_enc = [_encode_ids(params, fid) for fid in fact_ids]
        ff = np.stack(
            [
                enc.mean(axis=0) if len(fid) else np.zeros(config.embed_dim)
                for fid, enc in zip(fact_ids, fact_enc)
            ]
        )
        out_a, moe_a = _moe_fwd(params, config, feats, GATE_A)
        scores, frg_cache = _frg_fwd(params, out_a, ff, len(item.frg_targets))
        loss_frg, probs = _cross_entropy(scores, item.frg_targets)
        cache.update(
            fact_ids=fact_ids,
            fact_enc=fact_enc,
            moe_a=moe_a,
            frg=frg_cache,
            frg_probs=probs,
            loss_frg=loss_frg,
        )
    if item.qa_targets is not None:
        out_b, moe_b = _moe_fwd(params, config, feats, GATE_B)
        logits, qa_cache = _qa_fwd(params, out_b, len(item.qa_targets))
        loss_qa, probs = _cross_entropy(logits, item.qa_targets)
        cache.update(moe_b=moe_b, qa=qa_cache, qa_probs=probs, loss_qa=loss_qa)
    return cache


def _attention_bwd(
    d_out: np.ndarray,
    attn_cache: dict,
    q_in: np.ndarray,
    kv_in: np.ndarray,
    wq: np.ndarray,
    wk: np.ndarray,
    wv: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Returns (d_q_in, d_kv_in, d_wq, d_wk, d_wv)."""
    q, k, v = attn_cache["q"], attn_cache["k"], attn_cache["v"]
    attn, scale = attn_cache["attn"], attn_cache["scale"]
    d_attn = d_out @ v.T
    d_v = attn.T @ d_out
    d_scores = _softmax_rows_backward(attn, d_attn)
    d_q = d_scores @ k * scale
    d_k = d_scores.T @ q * scale
    d_wq = q_in.T @ d_q
    d_wk = kv_in.T @ d_k
    d_wv = kv_in.T @ d_v
    d_q_in = d_q @ wq.T
    d_kv_in = d_k @ wk.T + d_v @ wv.T
    return d_q_in, d_kv_in, d_wq, d_wk, d_wv


def _moe_bwd(
    params: MoeParams,
    config: MoeConfig,
    moe_cache: dict,
    d_out: np.ndarray,
    grads: dict[str, np.ndarray],
) -> np.ndarray:
    """Backward through expert mix + residual; returns gradient w.r.t. input."""
    decision: RoutingDecision = moe_cache["decision"]
    feats = moe_cache["feats"]
    d_feats = d_out.copy()  # residual path

    gate_name = "gate_a" if decision.gate == GATE_A else "gate_b"
    gate_matrix = _gate_matrix(params, decision.gate)
    probs = _softmax_rows(feats @ gate_matrix.T)
    d_probs = np.zeros_like(probs)

    for expert, (rows, weights, h, out) in moe_cache["expert_cache"].items():
        mask = decision.indices[rows] == expert  # (r, K)
        d_mix = d_out[rows]
        d_expert_out = weights[:, None] * d_mix
        d_weight = (out * d_mix).sum(axis=1)

        grads["expert_w2"][expert] += d_expert_out.T @ h
        grads["expert_b2"][expert] += d_expert_out.sum(axis=0)
        d_h = d_expert_out @ params.expert_w2[expert]
        d_a = d_h * (1.0 - h * h)
        grads["expert_w1"][expert] += d_a.T @ feats[rows]
        grads["expert_b1"][expert] += d_a.sum(axis=0)
        d_feats[rows] += d_a @ params.expert_w1[expert]

        # route the value gradient to the selected softmax entries
        slot = mask.argmax(axis=1)
        positions = decision.pool_positions[rows, slot]
        if config.renormalize_topk:
            raw = np.take_along_axis(probs[rows], decision.pool_positions[rows], axis=1)
            total = raw.sum(axis=1)
            value = raw[np.arange(len(rows)), slot]
            for j in range(config.top_k):
                pos_j = decision.pool_positions[rows, j]
                grad_j = np.where(
                    j == slot,
                    (total - value) / total**2,
                    -value / total**2,
                ) * d_weight
                np.add.at(d_probs, (rows, pos_j), grad_j)
        else:
            np.add.at(d_probs, (rows, positions), d_weight)

    d_logits = _softmax_rows_backward(probs, d_probs)
    grads[gate_name] += d_logits.T @ feats
    d_feats += d_logits @ gate_matrix
    return d_feats


def _item_backward(
    params: MoeParams,
    config: MoeConfig,
    cache: dict,
    grads: dict[str, np.ndarray],
    frg_weight: float,
    qa_weight: float,
) -> None:
    item: TrainItem = cache["item"]
    feats = cache["feats"]
    d_feats = np.zeros_like(feats)
    d_fact_rows: Optional[np.ndarray] = None

    if item.frg_targets is not None and frg_weight:
        probs = cache["frg_probs"].copy()
        probs[np.arange(len(item.frg_targets)), list(item.frg_targets)] -= 1.0
        d_scores = probs * (frg_weight / len(item.frg_targets))

        frg = cache["frg"]
        d_q2 = d_scores @ frg["k2"] * frg["scale"]
        d_k2 = d_scores.T @ frg["q2"] * frg["scale"]
        grads["frg_q2"] += frg["ctx"].T @ d_q2
        d_ctx = d_q2 @ params.frg_q2.T
        grads["frg_k2"] += frg["fact_feats"].T @ d_k2
        d_fact_rows = d_k2 @ params.frg_k2.T

        d_queries, d_seq_moe, d_wq, d_wk, d_wv = _attention_bwd(
            d_ctx,
            frg["attn"],
            frg["queries"],
            frg["seq_moe"],
            params.frg_q1,
            params.frg_k1,
            params.frg_v1,
        )
        grads["frg_q1"] += d_wq
        grads["frg_k1"] += d_wk
        grads["frg_v1"] += d_wv
        grads["frg_queries"][: len(item.frg_targets)] += d_queries
        d_feats += _moe_bwd(params, config, cache["moe_a"], d_seq_moe, grads)

    if item.qa_targets is not None and qa_weight:
        probs = cache["qa_probs"].copy()
        probs[np.arange(len(item.qa_targets)), list(item.qa_targets)] -= 1.0
        d_logits = probs * (qa_weight / len(item.qa_targets))

        qa = cache["qa"]
        grads["vocab_out"] += d_logits.T @ qa["ctx"]
        d_ctx = d_logits @ params.vocab_out

        d_queries, d_seq_moe, d_wq, d_wk, d_wv = _attention_bwd(
            d_ctx,
            qa["attn"],
            qa["queries"],
            qa["seq_moe"],
            params.qa_q,
            params.qa_k,
            params.qa_v,
        )
        grads["qa_q"] += d_wq
        grads["qa_k"] += d_wk
        grads["qa_v"] += d_wv
        grads["qa_queries"][: len(item.qa_targets)] += d_queries
        d_feats += _moe_bwd(params, config, cache["moe_b"], d_seq_moe, grads)

    # encoder + embedding for the main sequence
    _encoder_bwd(params, grads, cache["ids"], feats, d_feats)

    # encoder + embedding through the fact features
    if d_fact_rows is not None:
        for fid, enc, d_row in zip(cache["fact_ids"], cache["fact_enc"], d_fact_rows):
            if not len(fid):
                continue
            d_enc = np.repeat(d_row[None, :] / len(fid), len(fid), axis=0)
            _encoder_bwd(params, grads, fid, enc, d_enc)


def _encoder_bwd(
    params: MoeParams,
    grads: dict[str, np.ndarray],
    ids: Sequence[int],
    enc_out: np.ndarray,
    d_out: np.ndarray,
) -> None:
    d_z = d_out * (1.0 - enc_out * enc_out)
    x = params.embedding[list(ids)]
    grads["enc_w"] += d_z.T @ x
    grads["enc_b"] += d_z.sum(axis=0)
    np.add.at(grads["embedding"], list(ids), d_z @ params.enc_w)


def batch_loss(
    params: MoeParams, config: MoeConfig, batch: Sequence[TrainItem]
) -> float:
    """Pure recomputation of the joint batch loss (finite-difference oracle hook).

    The retrieval and answer terms are each averaged over the items that carry
    that target, then summed.
    """
    frg_losses, qa_losses = [], []
    for item in batch:
        cache = _item_forward(params, config, item)
        if "loss_frg" in cache:
            frg_losses.append(cache["loss_frg"])
        if "loss_qa" in cache:
            qa_losses.append(cache["loss_qa"])
    total = 0.0
    if frg_losses:
        total += sum(frg_losses) / len(frg_losses)
    if qa_losses:
        total += sum(qa_losses) / len(qa_losses)
    return total


def batch_gradients(
    params: MoeParams, config: MoeConfig, batch: Sequence[TrainItem]
) -> tuple[float, dict[str, np.ndarray]]:
    """Analytic gradients of the joint batch loss for every parameter block."""
    caches = [_item_forward(params, config, item) for item in batch]
    n_frg = sum(1 for c in caches if "loss_frg" in c)
    n_qa = sum(1 for c in caches if "loss_qa" in c)
    grads = params.zero_grads()
    total = 0.0
    for cache in caches:
        frg_w = 1.0 / n_frg if "loss_frg" in cache else 0.0
        qa_w = 1.0 / n_qa if "loss_qa" in cache else 0.0
        if "loss_frg" in cache:
            total += cache["loss_frg"] * frg_w
        if "loss_qa" in cache:
            total += cache["loss_qa"] * qa_w
        _item_backward(params, config, cache, grads, frg_w, qa_w)
    return total, grads


def backward_and_step(
    params: MoeParams,
    config: MoeConfig,
    batch: Sequence[TrainItem],
    learning_rate: float,
    weight_decay: float = 0.01,
) -> tuple[MoeParams, float]:
    """One AdamW step on the joint loss; params are updated in place."""
    loss, grads = batch_gradients(params, config, batch)
    if not math.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss}")
    _adamw_step(params, grads, learning_rate, weight_decay)
    return params, loss


def _adamw_step(
    params: MoeParams,
    grads: dict[str, np.ndarray],
    lr: float,
    weight_decay: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    if params.opt_state is None:
        params.opt_state = {
            "step": 0,
            "m": {name: np.zeros_like(arr) for name, arr in params.blocks()},
            "v": {name: np.zeros_like(arr) for name, arr in params.blocks()},
        }
    state = params.opt_state
    state["step"] += 1
    t = state["step"]
    for name, arr in params.blocks():
        g = grads[name]
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        arr -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * arr)


def greedy_answer_ids(qa_logits) -> list[int]:
    return [int(i) for i in np.argmax(_as_matrix(qa_logits), axis=1)]
