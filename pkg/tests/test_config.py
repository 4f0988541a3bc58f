import json

import pytest

from cases import quick_experiment
from erpcond import config as C
from erpcond.errors import ConfigurationError

BASE = {"schema_version": 1, "name": "exp", "arch": {"arch": "phinet", "window_s": 0.35},
        "train": {"conditioning": "film", "loss": {"kind": "focal", "focal_gamma": 1.5}}}


def write(tmp_path, doc):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(doc) if not isinstance(doc, str) else doc)
    return p


def test_valid_document_loads(tmp_path):
    exp, doc = C.load_config(write(tmp_path, BASE))
    assert (exp.arch.arch, exp.train.conditioning, exp.train.loss.focal_gamma) == ("phinet", "film", 1.5)
    assert doc == BASE


@pytest.mark.parametrize("patch,path", [
    ({"train": {"lr_initial": -1}}, "train/lr_initial"),
    ({"arch": {"arch": "resnet"}}, "arch/arch"),
    ({"arch": {"window_s": 0.9}}, "arch/window_s"),
    ({"train": {"loss": {"kind": "mse"}}}, "train/loss/kind"),
    ({"increments": [1, 5]}, "increments/1"),
    ({"bogus": 1}, "<root>"),
])
def test_schema_violation_names_the_field(patch, path):
    doc = json.loads(json.dumps(BASE))
    for k, v in patch.items():
        doc[k] = {**doc.get(k, {}), **v} if isinstance(v, dict) else v
    with pytest.raises(ConfigurationError, match=f"config field {path}"):
        C.validate(doc)


def test_schema_version_required():
    with pytest.raises(ConfigurationError, match="schema_version"):
        C.validate({"name": "x"})


@pytest.mark.parametrize("text,expected", [
    ("train.lr_initial=0.002", ("train.lr_initial", 0.002)),
    ("train.max_epochs=7", ("train.max_epochs", 7)),
    ("arch.kernel_length=null", ("arch.kernel_length", None)),
    ("increments=[1,2]", ("increments", [1, 2])),
    ("train.scaler=robust", ("train.scaler", "robust")),
])
def test_parse_override(text, expected):
    assert C.parse_override(text) == expected


def test_override_without_equals():
    with pytest.raises(ConfigurationError):
        C.parse_override("train.lr_initial")


def test_overrides_apply_before_validation(tmp_path):
    p = write(tmp_path, BASE)
    exp, _ = C.load_config(p, ["train.max_epochs=3", "train.loss.kind=weighted_bce"])
    assert exp.train.max_epochs == 3 and exp.train.loss.kind == "weighted_bce"
    with pytest.raises(ConfigurationError, match="train/max_epochs"):
        C.load_config(p, ["train.max_epochs=0"])


def test_file_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        C.load_document(tmp_path / "absent.json")
    with pytest.raises(ConfigurationError):
        C.load_document(write(tmp_path, "{broken"))
    with pytest.raises(ConfigurationError):
        C.load_document(write(tmp_path, "[1, 2]"))


@pytest.mark.parametrize("cond,arch", [("projection", "eegnet"), ("film", "p300mcnn"), ("none", "phinet")])
def test_dump_round_trip(cond, arch):
    exp = quick_experiment(cond, arch)
    doc = C.dump_config(exp, plan_seed=3)
    C.validate(doc)
    assert doc["plan_seed"] == 3
    assert C.to_experiment(doc).to_dict() == exp.to_dict()


def test_loading_does_not_mutate_file(tmp_path):
    p = write(tmp_path, BASE)
    before = p.read_bytes()
    C.load_config(p, ["train.seed=4"])
    assert p.read_bytes() == before
