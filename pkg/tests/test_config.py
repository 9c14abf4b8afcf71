import pydantic
import pytest
import yaml

from usemamba.config import RunConfig, apply_overrides, load_config


def test_defaults_build_models():
    run = load_config()
    cfg = run.model.build()
    assert cfg.variant == "regression" and cfg.emb_dim is None
    assert run.loss.multires().window_sizes == (256, 512, 768, 1024)


def test_unknown_keys_rejected(tmp_path):
    (tmp_path / "c.yaml").write_text("model:\n  n1_blocks: 2\n  bogus: 1\n")
    with pytest.raises(pydantic.ValidationError):
        load_config(tmp_path / "c.yaml")
    with pytest.raises(pydantic.ValidationError):
        load_config(None, ["nothing.here=1"])


def test_overrides_parse_yaml_scalars():
    run = load_config(None, ["training.steps=7", "training.lr=1e-3", "model.bidirectional=false"])
    assert run.training.steps == 7 and run.training.lr == 1e-3 and run.model.bidirectional is False
    with pytest.raises(ValueError):
        apply_overrides({}, ["no_equals_sign"])


def test_file_then_overrides(tmp_path):
    (tmp_path / "c.yaml").write_text(yaml.safe_dump({"training": {"steps": 3, "seed": 9}}))
    run = load_config(tmp_path / "c.yaml", ["training.steps=5"])
    assert run.training.steps == 5 and run.training.seed == 9


def test_flow_variant_gets_embedding():
    assert load_config(None, ["model.variant=flow"]).model.emb_dim == 1024
    with pytest.raises(pydantic.ValidationError):
        load_config(None, ["model.emb_dim=16"])
    with pytest.raises(pydantic.ValidationError):
        load_config(None, ["model.variant=flow", "model.emb_dim=15"])


def test_simulation_kinds_validated():
    with pytest.raises(pydantic.ValidationError):
        load_config(None, ["simulation.kinds=[wind]"])


def test_output_root_env(monkeypatch, tmp_path):
    run = RunConfig()
    monkeypatch.delenv("USEMAMBA_OUTPUT_ROOT", raising=False)
    assert str(run.resolve("out")) == "out"
    monkeypatch.setenv("USEMAMBA_OUTPUT_ROOT", str(tmp_path))
    assert run.resolve("out") == tmp_path / "out"
    assert run.resolve("/abs/out").as_posix() == "/abs/out"


def test_echo_reproduces_config(tmp_path):
    run = load_config(None, ["training.steps=11", "model.variant=flow", "model.emb_dim=64"])
    (tmp_path / "echo.yaml").write_text(run.echo())
    assert load_config(tmp_path / "echo.yaml") == run
