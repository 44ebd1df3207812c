import json

import pytest

from golden_rpg.commons import GoldenRPG
from golden_rpg.config import ConfigValidator, config_hash, expand_dotted, load_config, merge_layers, portable_config
from golden_rpg.errors import ConfigError
from golden_rpg.json_utils import JSonUtils


def _write(path, document):
    path.write_text(json.dumps(document), encoding="utf-8")
    return str(path)


def test_packaged_defaults(desk_config):
    loss, train, adapter = desk_config.loss, desk_config.train, desk_config.adapter
    assert (loss.lambda_r, loss.lambda_d, loss.lambda_alpha, loss.m0, loss.tau_alpha) == (0.5, 0.05, 1.0, 0.05, 0.05)
    assert loss.lambda_d_alt == 0.1
    assert (train.epochs, train.batch_size, train.lr, train.weight_decay, train.grad_clip) == (200, 4, 3e-4, 0.01, 1.0)
    assert train.warmup_epochs == 60 and train.variant == "v4"
    assert (adapter.film_hidden, adapter.film_dropout, adapter.confidence_hidden) == (128, 0.1, 32)
    assert (adapter.alpha_max, adapter.alpha_init) == (0.6, 0.4)
    assert desk_config.corpus.candidates == 5 and desk_config.eval.band_at_1024 == 32
    assert (desk_config.dims.tokens, desk_config.dims.embed_dim, desk_config.dims.latent) == (8, 64, 32)


def test_full_scale_preset():
    config = load_config("full", use_environment=False)
    assert (config.dims.tokens, config.dims.embed_dim, config.dims.latent) == (77, 2048, 128)
    assert "full" in GoldenRPG.listPresets() and "desk" in GoldenRPG.listPresets()


def test_layer_precedence(tmp_path, monkeypatch):
    user = _write(tmp_path / "user.json", {"train": {"epochs": 5, "batch_size": 2}})
    environment = _write(tmp_path / "env.json", {"train": {"epochs": 7}})
    assert load_config(config_path=user).train.epochs == 5
    monkeypatch.setenv("GRPG_CONFIG", environment)
    config = load_config("desk", user)
    assert config.train.epochs == 7 and config.train.batch_size == 2
    assert load_config("desk", user, {"train.epochs": 9, "train.lr": None}).train.epochs == 9
    assert load_config(config_path=user, use_environment=False).train.epochs == 5


def test_replace_with_dotted_keys(desk_config):
    changed = desk_config.replace(**{"train.epochs": 3, "adapter.rca_norm": "literal"})
    assert changed.train.epochs == 3 and changed.adapter.rca_norm == "literal"
    assert desk_config.train.epochs == 200
    assert isinstance(desk_config.replace(**{"loss.m0": 1}).loss.m0, float)


@pytest.mark.parametrize("overrides", [
    {"train.epochs": 0},
    {"train.epochs": "many"},
    {"train.epoch": 3},
    {"adapter.rca_norm": "post"},
    {"train.warmup_epochs": True},
    {"corpus.k_distribution": {"2": 0.5}},
    {"dims.latent": 18},
    {"adapter.rca_heads": 3},
])
def test_invalid_configurations(desk_config, overrides):
    with pytest.raises(ConfigError):
        desk_config.replace(**overrides)


def test_unknown_section_in_a_file(tmp_path):
    with pytest.raises(ConfigError, match="unknown key"):
        load_config(config_path=_write(tmp_path / "bad.json", {"trian": {"epochs": 3}}), use_environment=False)


def test_validator_collects_every_error():
    validator = ConfigValidator()
    assert not validator.validate({"train": {"epochs": -1, "lr": 0}, "dims": {"latent": 16}}, partial=False)
    assert len(validator.errors) == 2 + 3
    assert validator.validate({"train": {"epochs": 3}})


def test_merge_and_expand():
    merged = merge_layers({"a": {"b": 1, "c": 2}, "corpus": {"k_distribution": {"2": 1.0}}},
                          {"a": {"b": 5}, "corpus": {"k_distribution": {"3": 1.0}}})
    assert merged == {"a": {"b": 5, "c": 2}, "corpus": {"k_distribution": {"3": 1.0}}}
    assert expand_dotted({"a.b": 1, "a.c": None, "d": 2}) == {"a": {"b": 1}, "d": 2}


def test_config_hash_ignores_run_selection(desk_config):
    digest = config_hash(desk_config)
    assert config_hash(desk_config.replace(**{"train.variant": "v3", "eval.prompts": 3})) == digest
    assert config_hash(desk_config.replace(**{"loss.m0": 0.1})) != digest
    assert "eval" not in portable_config(desk_config) and "variant" not in portable_config(desk_config)["train"]


def test_signature():
    assert GoldenRPG.signature("abc") == "qZk+NkcGgWq6PiVxeFDCbJzQ2J0="
    assert GoldenRPG.signature("a", "bc") == GoldenRPG.signature("abc")


def test_worker_count(monkeypatch):
    assert GoldenRPG.getWorkerCount(4) == 1
    monkeypatch.delenv("GRPG_DETERMINISTIC")
    assert GoldenRPG.getWorkerCount(4) == 4
    assert 1 <= GoldenRPG.getWorkerCount() <= 8


def test_version():
    assert GoldenRPG.getVersion() == "0.3.0"


def test_json_files(tmp_path):
    path = str(tmp_path / "nested" / "out.json")
    JSonUtils.saveJSON({"b": 1, "a": [1, 2]}, path)
    with open(path, encoding="utf-8") as file:
        text = file.read()
    assert text.index('"a"') < text.index('"b"') and text.endswith("}\n")
    assert JSonUtils.loadJSON(path) == {"a": [1, 2], "b": 1}
    with pytest.raises(ConfigError):
        JSonUtils.loadJSON(str(tmp_path / "absent.json"))
    (tmp_path / "broken.json").write_text("{", encoding="utf-8")
    with pytest.raises(ConfigError):
        JSonUtils.loadJSON(str(tmp_path / "broken.json"))


def test_schema_references():
    schema = {"$defs": {"positive": {"type": "number", "minimum": 0}, "weight": {"$ref": "#/$defs/positive"}},
              "properties": {"w": {"$ref": "#/$defs/weight", "maximum": 2}}}
    definitions = JSonUtils.getSchemaDefs(schema)
    assert definitions["weight"] == {"type": "number", "minimum": 0}
    solved, replaced = JSonUtils.solveSchemaRefs(schema["properties"], definitions, set())
    assert solved == {"w": {"type": "number", "minimum": 0, "maximum": 2}}
    assert replaced == {"weight"}
    with pytest.raises(ConfigError):
        JSonUtils.solveSchemaRefs({"$ref": "#/$defs/missing"}, definitions, set())
