from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from tripartite.config import (
    TABLE_VARIANTS,
    AblationGrid,
    AblationVariant,
    ExperimentConfig,
    config_from_dict,
    env_overrides,
    load_config,
)
from tripartite.errors import ConfigError
from tripartite.losses import Family, LossConfig


def test_defaults_without_file():
    cfg = load_config(None, environ={})
    assert cfg == ExperimentConfig()
    assert cfg.out_dir == Path("runs")


def test_full_document(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("""
[experiment]
out_dir = "out/x"
[data]
K = 7
n1 = 30
imbalance_factor = 3
[train]
epochs_stage1 = 4
lr0 = 1
[loss]
family = "ce"
lambda_cc = 0.5
normalization = "both"
[model]
hidden = [8, 8]
feature_dim = 5
[ablation]
seeds = [4, 5]
variants = ["sc-ce", "sc-bce_cc-bce"]
""")
    cfg = load_config(p, environ={})
    assert cfg.out_dir == Path("out/x")
    assert cfg.data.K == 7 and cfg.data.imbalance_factor == 3
    assert cfg.train.lr0 == 1.0 and isinstance(cfg.train.lr0, float)
    assert cfg.loss.family is Family.CE and cfg.loss.lambda_cc == 0.5
    assert cfg.train.model.hidden == (8, 8)
    assert cfg.ablation.seeds == (4, 5)
    assert [v.name for v in cfg.ablation.variants] == ["sc-ce", "sc-bce_cc-bce"]
    # to_dict is a plain document that parses back to the same config
    assert config_from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("doc", [
    {"loss": {"lamda_ss": 0.1}},
    {"trian": {}},
    {"experiment": {"outdir": "x"}},
    {"train": {"epochs_stage1": 1.5}},
    {"train": {"momentum": "high"}},
    {"train": {"loss": {}}},
    {"loss": {"r": 0.0}},
    {"loss": {"family": "hinge"}},
    {"data": {"K": True}},
    {"model": {"hidden": 3}},
    {"ablation": {"variants": ["sc-bce", "sc-bce"]}},
    {"ablation": {"seeds": []}},
    {"data": 3},
])
def test_invalid_documents(doc):
    with pytest.raises(ConfigError):
        config_from_dict(doc)


def test_unknown_key_message_names_it():
    with pytest.raises(ConfigError, match="lamda_ss"):
        config_from_dict({"loss": {"lamda_ss": 0.1}})


def test_missing_or_malformed_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.toml", environ={})
    bad = tmp_path / "bad.toml"
    bad.write_text("[loss\nr = 1")
    with pytest.raises(ConfigError):
        load_config(bad, environ={})


def test_env_overrides(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[loss]\nr = 0.5\n")
    env = {"TRIPARTITE_LOSS__R": "0.25", "TRIPARTITE_TRAIN__EPOCHS_STAGE1": "3",
           "TRIPARTITE_LOSS__FAMILY": "ce", "TRIPARTITE_MODEL__HIDDEN": "[4, 4]",
           "TRIPARTITE_EXPERIMENT__OUT_DIR": "elsewhere", "HOME": "/root", "TRIPARTITE_X": "1"}
    cfg = load_config(p, environ=env)
    assert cfg.loss.r == 0.25
    assert cfg.train.epochs_stage1 == 3
    assert cfg.loss.family is Family.CE
    assert cfg.train.model.hidden == (4, 4)
    assert cfg.out_dir == Path("elsewhere")


def test_env_override_errors():
    with pytest.raises(ConfigError):
        env_overrides({"TRIPARTITE_BOGUS__X": "1"})
    with pytest.raises(ConfigError):
        load_config(None, environ={"TRIPARTITE_LOSS__NOPE": "1"})


def test_with_seed_sets_data_and_train():
    cfg = ExperimentConfig().with_seed(9)
    assert cfg.data.seed == 9 and cfg.train.seed == 9


# -- ablation variants ------------------------------------------------------------------


def test_table_has_fourteen_unique_rows():
    names = [v.name for v in TABLE_VARIANTS]
    assert len(names) == 14 == len(set(names))
    assert names[0] == "sc-ce" and names[-1] == "sc-bce_ss-bce_cc-bce"


@given(st.sampled_from(list(Family)), st.sampled_from([None, *Family]),
       st.sampled_from([None, *Family]))
def test_variant_name_round_trip(j, ss, cc):
    v = AblationVariant(j, ss, cc)
    assert AblationVariant.parse(v.name) == v


@pytest.mark.parametrize("name", ["", "ss-bce", "sc-bce_sc-ce", "sc-hinge", "xx-bce", "sc-bce_ss"])
def test_variant_parse_rejects(name):
    with pytest.raises(ConfigError):
        AblationVariant.parse(name)


def test_variant_loss_config_switches_terms():
    base = LossConfig(family="bce", lambda_ss=0.2, lambda_cc=0.3, r=0.4)
    lc = AblationVariant.parse("sc-ce_cc-bce").loss_config(base)
    assert lc.family is Family.CE and lc.lambda_ss == 0 and lc.lambda_cc == 0.3
    assert lc.cc_family is Family.BCE and lc.r == 0.4
    lc = AblationVariant.parse("sc-bce").loss_config(base)
    assert lc.lambda_ss == 0 and lc.lambda_cc == 0
    with pytest.raises(ConfigError):
        AblationVariant.parse("sc-bce_ss-bce").loss_config(LossConfig(lambda_cc=1.0))


def test_grid_accepts_names():
    g = AblationGrid(("sc-bce", AblationVariant(Family.CE)), [3])
    assert g.variants == (AblationVariant(Family.BCE), AblationVariant(Family.CE))
    assert g.seeds == (3,)
