import json

import pytest

from entailqa.cli import cli_dispatch
from entailqa.dataset import (
    RunConfig,
    canonical_json,
    dataset_from_dict,
    dataset_to_dict,
    load_dataset,
    run_config_from_dict,
    write_json,
)
from entailqa.errors import SchemaError
from entailqa.synth import synthetic_corpus


def _fixture_dict():
    return {
        "examples": [
            {
                "id": "a",
                "question": "what is the color of the falcon?",
                "answer": "crimson",
                "evidence": [
                    {"id": "e1", "modality": "text", "content": "the color of the falcon is crimson."}
                ],
                "gold_support_ids": ["e1"],
                "gold_tree": "fact1 -> answer",
            },
            {
                "id": "b",
                "question": "who won in 2010?",
                "answer": ["Super Saver", "super saver"],
                "evidence": [
                    {
                        "id": "t1",
                        "modality": "table",
                        "content": {"header": ["Season", "Winner"], "rows": [[2010, "Super Saver"]]},
                    }
                ],
            },
            {
                "id": "c",
                "question": "what color is the horse?",
                "answer": "brown",
                "evidence": [
                    {"id": "i1", "modality": "image", "content": "", "caption": "a brown horse", "gold": True}
                ],
            },
        ]
    }


class TestLoadDataset:
    def test_three_example_fixture(self, tmp_path):
        path = tmp_path / "ds.json"
        write_json(path, _fixture_dict())
        examples = load_dataset(path)
        assert [ex.id for ex in examples] == ["a", "b", "c"]
        assert examples[1].gold_answers() == ("Super Saver", "super saver")

    def test_table_cells_coerced_to_strings(self):
        examples = dataset_from_dict(_fixture_dict())
        table = examples[1].evidence[0].content
        assert table.rows[0][0] == "2010"

    def test_row_length_mismatch_pointer(self):
        data = _fixture_dict()
        data["examples"][1]["evidence"][0]["content"]["rows"] = [["2010"]]
        with pytest.raises(SchemaError) as excinfo:
            dataset_from_dict(data)
        assert "/examples/1/evidence/0/content/rows/0" in str(excinfo.value)

    def test_duplicate_example_ids(self):
        data = _fixture_dict()
        data["examples"][1]["id"] = "a"
        with pytest.raises(SchemaError) as excinfo:
            dataset_from_dict(data)
        assert "duplicate example id" in str(excinfo.value)

    def test_duplicate_evidence_ids(self):
        data = _fixture_dict()
        data["examples"][0]["evidence"].append(
            {"id": "e1", "modality": "text", "content": "again."}
        )
        with pytest.raises(SchemaError):
            dataset_from_dict(data)

    def test_unknown_support_id(self):
        data = _fixture_dict()
        data["examples"][0]["gold_support_ids"] = ["nope"]
        with pytest.raises(SchemaError) as excinfo:
            dataset_from_dict(data)
        assert "/examples/0/gold_support_ids/0" in str(excinfo.value)

    def test_bad_gold_tree(self):
        data = _fixture_dict()
        data["examples"][0]["gold_tree"] = "fact1 -> fact2"
        with pytest.raises(SchemaError):
            dataset_from_dict(data)

    def test_image_needs_caption(self):
        data = _fixture_dict()
        del data["examples"][2]["evidence"][0]["caption"]
        with pytest.raises(SchemaError):
            dataset_from_dict(data)

    def test_not_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{nope")
        with pytest.raises(SchemaError):
            load_dataset(path)

    def test_byte_stable_roundtrip(self, tmp_path):
        # one load pass normalizes (table cells to strings); after that,
        # load -> serialize is byte-stable
        path = tmp_path / "ds.json"
        write_json(path, _fixture_dict())
        write_json(path, dataset_to_dict(load_dataset(path)))
        normalized = path.read_bytes()
        write_json(path, dataset_to_dict(load_dataset(path)))
        assert path.read_bytes() == normalized


class TestRunConfig:
    def test_defaults(self):
        config = RunConfig()
        assert config.training.learning_rate == 1e-4
        assert config.training.batch_size_retrieval == 32
        assert config.training.batch_size_qa == 12
        assert config.iteration_budget == 2
        assert config.moe.top_k == 2

    def test_seed_propagates_to_moe(self):
        config = run_config_from_dict({"seed": 99})
        assert config.moe.seed == 99

    def test_hash_is_stable_and_sensitive(self):
        a = run_config_from_dict({"seed": 1})
        b = run_config_from_dict({"seed": 1})
        c = run_config_from_dict({"seed": 2})
        assert a.config_hash() == b.config_hash()
        assert a.config_hash() != c.config_hash()

    def test_invalid_values_are_schema_errors(self):
        with pytest.raises(SchemaError):
            run_config_from_dict({"backend": "carrier-pigeon"})
        with pytest.raises(SchemaError):
            run_config_from_dict({"moe": {"embed_dim": 0}})
        with pytest.raises(SchemaError):
            run_config_from_dict({"moe": {"top_k": 10}})


@pytest.fixture
def small_run(tmp_path):
    ds = tmp_path / "ds.json"
    write_json(ds, synthetic_corpus(6, seed=5))
    cfg = tmp_path / "cfg.json"
    write_json(
        cfg,
        {
            "seed": 5,
            "backend": "mock",
            "moe": {
                "embed_dim": 8,
                "vocab_size": 256,
                "n_frg_experts": 2,
                "n_qa_experts": 2,
                "n_shared_experts": 2,
                "max_seq_len": 512,
            },
            "training": {
                "steps": 15,
                "learning_rate": 1e-2,
                "batch_size_retrieval": 6,
                "batch_size_qa": 4,
            },
        },
    )
    return ds, cfg, tmp_path


class TestCli:
    def test_unknown_subcommand_is_usage_error(self, capsys):
        assert cli_dispatch(["frobnicate"]) == 1
        assert "usage error" in capsys.readouterr().err

    def test_missing_dataset_is_data_error(self, tmp_path, capsys):
        rc = cli_dispatch(["run-pipeline", str(tmp_path / "nope.json")])
        assert rc == 2

    def test_bad_config_is_data_error(self, small_run, tmp_path):
        ds, _, _ = small_run
        bad = tmp_path / "bad_cfg.json"
        bad.write_text('{"backend": "smoke-signals"}')
        assert cli_dispatch(["run-pipeline", str(ds), "--config", str(bad)]) == 2

    def test_run_pipeline_writes_artifacts(self, small_run):
        ds, cfg, tmp_path = small_run
        out = tmp_path / "run"
        rc = cli_dispatch(["run-pipeline", str(ds), "--config", str(cfg), "--out", str(out)])
        assert rc == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["examples"] == 6
        assert manifest["config_hash"]
        assert (out / "predictions.json").exists()
        state = json.loads((out / "syn0000.state.json").read_text())
        assert state["config_hash"] == manifest["config_hash"]
        assert state["seed"] == 5

    def test_build_factbase_and_trees(self, small_run):
        ds, cfg, tmp_path = small_run
        for command, suffix in [
            ("build-factbase", "factbase"),
            ("gen-tree", "structure"),
            ("refine-tree", "tree"),
        ]:
            out = tmp_path / command
            rc = cli_dispatch([command, str(ds), "--config", str(cfg), "--out", str(out)])
            assert rc == 0
            assert (out / f"syn0000.{suffix}.json").exists()

    def test_train_writes_checkpoint(self, small_run):
        ds, cfg, tmp_path = small_run
        out = tmp_path / "trainout"
        rc = cli_dispatch(["train", str(ds), "--config", str(cfg), "--out", str(out)])
        assert rc == 0
        checkpoint = json.loads((out / "checkpoint.json").read_text())
        assert checkpoint["format"] == "entailqa-checkpoint-v1"
        curve = json.loads((out / "training.json").read_text())["loss_curve"]
        assert len(curve) == 15

    def test_eval_consumes_run_output(self, small_run, capsys):
        ds, cfg, tmp_path = small_run
        out = tmp_path / "run"
        cli_dispatch(["run-pipeline", str(ds), "--config", str(cfg), "--out", str(out)])
        rc = cli_dispatch(
            [
                "eval",
                "--pred",
                str(out / "predictions.json"),
                "--gold",
                str(ds),
                "--out",
                str(tmp_path / "eval"),
            ]
        )
        assert rc == 0
        report = json.loads((tmp_path / "eval" / "metrics.json").read_text())
        for key in ("em", "f1", "retrieval", "tree", "count"):
            assert key in report

    def test_route_demo(self, small_run, capsys):
        _, cfg, _ = small_run
        assert cli_dispatch(["route-demo", "--config", str(cfg)]) == 0
        out = capsys.readouterr().out
        assert "gate A" in out and "gate B" in out

    def test_seed_flag_overrides(self, small_run):
        ds, cfg, tmp_path = small_run
        out1 = tmp_path / "s1"
        out2 = tmp_path / "s2"
        cli_dispatch(["run-pipeline", str(ds), "--config", str(cfg), "--seed", "5", "--out", str(out1)])
        cli_dispatch(["run-pipeline", str(ds), "--config", str(cfg), "--seed", "6", "--out", str(out2)])
        m1 = json.loads((out1 / "manifest.json").read_text())
        m2 = json.loads((out2 / "manifest.json").read_text())
        assert m1["seed"] == 5 and m2["seed"] == 6
        assert m1["config_hash"] != m2["config_hash"]


def test_canonical_json_sorted_and_newline():
    text = canonical_json({"b": 1, "a": [1.5, 2]})
    assert text.index('"a"') < text.index('"b"')
    assert text.endswith("\n")
