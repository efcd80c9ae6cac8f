import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ada_forge.config import ConfigError, build_config, build_sweep, parse_pairs, parse_seeds
from ada_forge.trainer import AdaConfig


def test_parse_pairs_comments_and_blanks():
    pairs = parse_pairs(["# header", "", "lambda = 0.1  # inline", "family=moons2d"], "x")
    assert pairs == {"lambda": "0.1", "family": "moons2d"}


def test_typed_values():
    cfg, _ = build_config({"lambda": "1e-3", "split_index": "3", "patch_mode": "false",
                           "clip_norm": "none", "pretrain_checkpoint": "none", "family": "roadway_seg"})
    assert cfg.lam == 1e-3 and cfg.split_index == 3 and cfg.clip_norm is None
    assert cfg.patch_mode is False and cfg.pretrain_checkpoint is None


def test_preset_alias():
    assert build_config({"preset": "severe"})[0].severity == 0.85
    with pytest.raises(ConfigError, match="preset"):
        build_config({"preset": "extreme"})


@pytest.mark.parametrize("pairs, key", [({"lambdaa": "1"}, "lambdaa"), ({"seed": "x"}, "seed"),
                                        ({"patch_mode": "maybe"}, "patch_mode"), ({"lambda": "-1"}, "lambda")])
def test_errors_name_the_key(pairs, key):
    with pytest.raises(ConfigError, match=key):
        build_config(pairs)


def test_sweep_file():
    spec = build_sweep({"family": "moons2d", "axis": "lambda", "values": "10,1,0.1", "seeds": "0,1"})
    assert spec.values == (10.0, 1.0, 0.1) and spec.seeds == (0, 1)
    assert build_sweep({"axis": "loss_kind", "values": "minimax"}, "3").seeds == (3,)
    with pytest.raises(ConfigError, match="axis"):
        build_sweep({"axis": "dropout", "values": "1"})
    with pytest.raises(ConfigError, match="values"):
        build_sweep({"axis": "lambda"})


def test_seeds():
    assert parse_seeds("0, 1,2") == (0, 1, 2)
    with pytest.raises(ConfigError):
        parse_seeds("1,1")
    with pytest.raises(ConfigError):
        parse_seeds("a")


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 100, allow_nan=False), st.integers(0, 2**31), st.sampled_from(["confusion", "minimax"]),
       st.booleans())
def test_config_round_trips_through_text(lam, seed, kind, scope_both):
    cfg = AdaConfig(lam=lam, seed=seed, loss_kind=kind, lambda_scope="both" if scope_both else "encoder_only")
    text = [f"{k}={'none' if v is None else repr(v) if isinstance(v, float) else v}" for k, v in cfg.to_dict().items()]
    assert build_config(parse_pairs(text, "t"))[0] == cfg
