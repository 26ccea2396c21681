"""Config file parsing, validation and round-tripping."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowloss.config import (
    SCHEMA,
    ConfigError,
    TrainConfig,
    build_config,
    format_config,
    parse_config,
    parse_config_text,
)
from flowloss.losses import AdditiveGated, Baseline


def test_minimal_file_gets_defaults():
    cfg = parse_config_text("train.output_dir = runs/a\n")
    assert cfg.train.output_dir == "runs/a"
    assert cfg.strategy() == Baseline()
    defaults = TrainConfig()
    assert (cfg.edm, cfg.model, cfg.flow, cfg.optim, cfg.data) == (
        defaults.edm, defaults.model, defaults.flow, defaults.optim, defaults.data
    )  # fmt: skip
    assert (cfg.train.batch_size, cfg.train.total_steps, cfg.train.val_every) == (8, 2000, 100)
    assert cfg.optim.learning_rate == 1e-3 and cfg.loss.scale_s == 1e-6


def test_comments_blank_lines_and_typed_values():
    text = """
    # experiment
    train.output_dir = out   # trailing comment
    loss.strategy = gated
    loss.psi = 0.0625
    model.features = 8
    log.wall_ms = true
    """
    cfg = parse_config_text(text)
    assert cfg.strategy() == AdditiveGated(0.0625)
    assert cfg.model.features == 8 and isinstance(cfg.model.features, int)
    assert cfg.log.wall_ms is True


@pytest.mark.parametrize(
    "text, pattern",
    [
        ("train.output_dir = a\nloss.strategy = gated\n", r"<config>:2: .*loss\.psi"),
        ("train.output_dir = a\nmodel.features = 8\nmodel.features = 16\n", r":3: duplicate key .*line 2"),
        ("train.output_dir = a\nmodel.colour = red\n", r":2: unknown key 'model.colour'"),
        ("train.output_dir = a\nmodel.features = eight\n", r":2: model.features expects an integer"),
        ("train.output_dir = a\nlog.wall_ms = maybe\n", r":2: log.wall_ms expects a boolean"),
        ("train.output_dir = a\njust words\n", r":2: expected 'key = value'"),
        ("model.features = 8\n", r"missing required key 'train.output_dir'"),
        ("train.output_dir = a\ntrain.batch_size = 0\n", r"train.batch_size must be >= 1"),
        ("train.output_dir = a\noptim.learning_rate = -1\n", r"learning_rate must be positive"),
        ("train.output_dir = a\nloss.strategy = fancy\n", r"fancy"),
    ],
)
def test_errors_cite_the_problem(text, pattern):
    with pytest.raises(ConfigError, match=pattern):
        parse_config_text(text)


def test_parse_config_file(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text("train.output_dir = x\nloss.strategy = wavg_ls\n")
    assert parse_config(path).loss.strategy == "wavg_ls"
    with pytest.raises(ConfigError, match="does not exist"):
        parse_config(tmp_path / "missing.cfg")
    path.write_text("train.output_dir = x\nbogus = 1\n")
    with pytest.raises(ConfigError, match=f"{path}:2"):
        parse_config(path)


def test_build_config_overrides_and_rejects_unknown_keys():
    cfg = build_config({"train.output_dir": "o", "loss.strategy": "gated", "loss.psi": "0.25"})
    assert cfg.loss.psi == 0.25
    again = build_config({"train.seed": 3}, base=cfg)
    assert again.train.seed == 3 and again.loss.psi == 0.25
    with pytest.raises(ConfigError):
        build_config({"nope.key": 1})


def test_schema_covers_every_section_field():
    assert "flow.edge_scale" in SCHEMA and "sample.rho" in SCHEMA and "edm.sigma_data" in SCHEMA
    assert len(SCHEMA) == len(set(SCHEMA))


@settings(max_examples=40, deadline=None)
@given(
    steps=st.integers(1, 10**5),
    lr=st.floats(1e-6, 1.0),
    psi=st.floats(1e-3, 10.0),
    strategy=st.sampled_from(["baseline", "gated", "wavg_ss", "wavg_ls"]),
    wall=st.booleans(),
)
def test_format_round_trips(steps, lr, psi, strategy, wall):
    cfg = build_config(
        {
            "train.output_dir": "runs/x",
            "train.total_steps": steps,
            "optim.learning_rate": lr,
            "loss.strategy": strategy,
            "loss.psi": psi,
            "log.wall_ms": wall,
        }
    )
    assert parse_config_text(format_config(cfg)) == cfg
