import pytest

from entailqa.errors import BackendError, EmptyDecomposition, ParseError
from entailqa.facts import Evidence, FactBase, Table, add_fact, linearize_table
from entailqa.llm import (
    BackendRequest,
    MockBackend,
    decompose_atomic,
    decompose_question,
    generate_tree_structure,
    get_template,
    infer_intermediate,
    refine_to_fact,
    table_qa,
    text_qa,
    vqa_answer,
)


class CannedBackend:
    """Replays fixed responses; counts calls."""

    def __init__(self, *responses):
        self.responses = list(responses)
        self.calls = 0
        self.requests = []

    def complete(self, request):
        self.requests.append(request)
        self.calls += 1
        return self.responses[min(self.calls - 1, len(self.responses) - 1)]


@pytest.fixture
def image_evidence():
    return Evidence(id="img1", modality="image", content="", caption="a racing brown horse")


class TestTemplates:
    def test_render_fills_slots(self):
        text = get_template("vqa").render(question="q?", caption="cap")
        assert "q?" in text and "cap" in text

    def test_unbound_slot_errors(self):
        with pytest.raises(ValueError):
            get_template("vqa").render(question="q?")

    def test_negative_temperature_rejected(self):
        with pytest.raises(ValueError):
            BackendRequest(prompt="p", temperature=-1.0)

    def test_feedback_template_slots(self):
        text = get_template("feedback").render(n="200", f="a. | b.", a="yes", q="why?")
        assert "200 words" in text
        assert "Facts:a. | b." in text


class TestDecomposeQuestion:
    def test_one_subquestion_per_evidence(self, mock_backend):
        evidence = [
            Evidence(id="e1", modality="text", content="the falcon is fast."),
            Evidence(id="e2", modality="text", content="the harbor is deep."),
        ]
        result = decompose_question(mock_backend, "how fast is the falcon?", evidence)
        assert [sq.evidence_id for sq in result.sub_questions] == ["e1", "e2"]
        assert all("?" in sq.question for sq in result.sub_questions)

    def test_single_evidence(self, mock_backend):
        evidence = [Evidence(id="e1", modality="text", content="the falcon is fast.")]
        result = decompose_question(mock_backend, "how fast?", evidence)
        assert len(result.sub_questions) == 1
        assert result.sub_questions[0].evidence_id == "e1"

    def test_prose_twice_is_parse_error(self):
        backend = CannedBackend("no list here", "still prose")
        evidence = [Evidence(id="e1", modality="text", content="x y z")]
        with pytest.raises(ParseError):
            decompose_question(backend, "q?", evidence)
        assert backend.calls == 2  # exactly one retry

    def test_retry_recovers(self):
        backend = CannedBackend("garbage", "1. what about it? [e1]")
        evidence = [Evidence(id="e1", modality="text", content="x y z")]
        result = decompose_question(backend, "q?", evidence)
        assert result.sub_questions[0].evidence_id == "e1"

    def test_unknown_ids_dropped_then_empty(self):
        backend = CannedBackend("1. q? [nope]", "1. q? [nope]")
        evidence = [Evidence(id="e1", modality="text", content="x y z")]
        with pytest.raises(EmptyDecomposition):
            decompose_question(backend, "q?", evidence)

    def test_empty_evidence_precondition(self, mock_backend):
        with pytest.raises(ValueError):
            decompose_question(mock_backend, "q?", [])


class TestDecomposeAtomic:
    def test_splits_on_conjunction(self, mock_backend, image_evidence):
        out = decompose_atomic(
            mock_backend, "what color is the horse and what is it doing?", image_evidence
        )
        assert out == ["what color is the horse?", "what is it doing?"]

    def test_atomic_already(self, mock_backend, image_evidence):
        out = decompose_atomic(mock_backend, "what color is the horse?", image_evidence)
        assert out == ["what color is the horse?"]

    def test_empty_subquestion(self, mock_backend, image_evidence):
        with pytest.raises(ValueError):
            decompose_atomic(mock_backend, "  ", image_evidence)

    def test_non_image_rejected(self, mock_backend):
        text_ev = Evidence(id="e1", modality="text", content="x")
        with pytest.raises(ValueError):
            decompose_atomic(mock_backend, "q?", text_ev)


class TestVqa:
    def test_color_keyword(self, mock_backend, image_evidence):
        answer = vqa_answer(mock_backend, "what color is the horse", image_evidence)
        assert answer.answer == "brown"

    def test_no_overlap_fallback(self, mock_backend, image_evidence):
        answer = vqa_answer(mock_backend, "when did gold rust", image_evidence)
        assert answer.answer == "unknown"

    def test_head_noun_fallback(self, mock_backend):
        ev = Evidence(id="i", modality="image", content="", caption="a falcon over the reef")
        answer = vqa_answer(mock_backend, "what flies over the reef", ev)
        assert answer.answer == "falcon"

    def test_non_image_precondition(self, mock_backend):
        with pytest.raises(ValueError):
            vqa_answer(mock_backend, "q", Evidence(id="e", modality="text", content="x"))


class TestTableQa:
    def test_winner_lookup(self, mock_backend):
        table = Table(
            header=("Season", "Winner"),
            rows=(("2010", "Super Saver"), ("2011", "Animal Kingdom")),
        )
        rows = linearize_table(table)
        question, answer = table_qa(
            mock_backend, "who was the Winner in the 2010 Season?", rows
        )
        assert answer == "Super Saver"

    def test_no_column_match(self, mock_backend):
        rows = ["row one's Season is 2010, Winner is Super Saver."]
        _, answer = table_qa(mock_backend, "what is the weather like?", rows)
        assert answer == "unknown"

    def test_empty_rows_precondition(self, mock_backend):
        with pytest.raises(ValueError):
            table_qa(mock_backend, "q?", [])


class TestTextQa:
    def test_extracts_novel_content_words(self, mock_backend):
        _, answer = text_qa(
            mock_backend,
            "what does e1 say about color falcon?",
            "the color of the falcon is crimson.",
        )
        assert answer == "crimson"

    def test_best_sentence_selected(self, mock_backend):
        passage = "the mill is old. the falcon is swift."
        _, answer = text_qa(mock_backend, "how swift is the falcon?", passage)
        assert answer == "unknown" or "swift" not in answer  # novel words only

    def test_empty_passage(self, mock_backend):
        with pytest.raises(ValueError):
            text_qa(mock_backend, "q?", "  ")


class TestRefineToFact:
    def test_wh_attribute_restatement(self, mock_backend):
        out = refine_to_fact(mock_backend, "what color is the horse", "brown")
        assert out == "the color of the horse is brown."

    def test_wh_copula_restatement(self, mock_backend):
        out = refine_to_fact(mock_backend, "what is the capital of France?", "Paris")
        assert out == "the capital of France is Paris."

    def test_fallback_restatement(self, mock_backend):
        out = refine_to_fact(mock_backend, "does the horse race", "yes")
        assert out == 'the answer to "does the horse race" is yes.'

    def test_unknown_answer_still_returned(self, mock_backend):
        out = refine_to_fact(mock_backend, "what color is the horse", "unknown")
        assert "unknown" in out

    def test_empty_answer_precondition(self, mock_backend):
        with pytest.raises(ValueError):
            refine_to_fact(mock_backend, "q?", "")


class TestTreeStructure:
    def test_scripted_by_question_id(self, small_base):
        backend = MockBackend(scripted_trees={"q1": "fact2 & fact3 -> answer"})
        out = generate_tree_structure(backend, "q?", small_base)
        assert out == "fact2 & fact3 -> answer"

    def test_default_joins_all_facts(self, mock_backend):
        base = FactBase("q")
        base = add_fact(base, "a.", "text", "e1")
        base = add_fact(base, "b.", "text", "e2")
        assert generate_tree_structure(mock_backend, "q?", base) == (
            "fact1 & fact2 -> answer"
        )

    def test_default_chain_three_facts(self, mock_backend, small_base):
        assert generate_tree_structure(mock_backend, "q?", small_base) == (
            "fact1 & fact2 -> int1; int1 & fact3 -> answer"
        )

    def test_feedback_controls_leaf_set(self, mock_backend, small_base):
        feedback = (["the harbor is deep.", "the mill is old."], "deep")
        out = generate_tree_structure(mock_backend, "q?", small_base, feedback=feedback)
        assert out == "fact2 & fact3 -> answer"

    def test_feedback_overrides_script(self, small_base):
        backend = MockBackend(scripted_trees={"q1": "fact1 -> answer"})
        feedback = (["the mill is old."], "old")
        out = generate_tree_structure(backend, "q?", small_base, feedback=feedback)
        assert out == "fact3 -> answer"

    def test_empty_base_precondition(self, mock_backend):
        with pytest.raises(ValueError):
            generate_tree_structure(mock_backend, "q?", FactBase("q"))


class TestInferIntermediate:
    def test_joiner(self, mock_backend):
        assert infer_intermediate(mock_backend, ["A.", "B."]) == "A.; therefore B."

    def test_single_premise_unchanged(self, mock_backend):
        assert infer_intermediate(mock_backend, ["A."]) == "A."

    def test_empty_precondition(self, mock_backend):
        with pytest.raises(ValueError):
            infer_intermediate(mock_backend, [])


class TestMockDeterminism:
    def test_repeated_calls_byte_identical(self, small_base):
        first = MockBackend(seed=1)
        second = MockBackend(seed=1)
        for backend in (first, second):
            backend.out = generate_tree_structure(backend, "why?", small_base)
        assert first.out == second.out

    def test_unknown_tag_rejected(self, mock_backend):
        with pytest.raises(BackendError):
            mock_backend.complete(BackendRequest(prompt="p", tag="mystery"))
