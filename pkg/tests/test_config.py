import pytest

from geoformer.config import RunConfig, canonical_keys, coerce, parse_overrides, read_config_text
from geoformer.data import write_extxyz
from geoformer.exceptions import ConfigError
from geoformer.synthetic import make_dataset


def test_key_resolution():
    assert canonical_keys("model.d") == ["model.dim"]
    assert canonical_keys("d") == ["model.dim"]
    assert canonical_keys("attention") == ["model.attention"]
    assert canonical_keys("lr") == ["train.lr"]
    assert canonical_keys("forces") == ["model.forces", "train.forces"]
    assert canonical_keys("batch-size") == ["train.batch_size"]
    with pytest.raises(ConfigError, match="unknown"):
        canonical_keys("model.wings")


def test_coerce():
    assert coerce("64", int, "k") == 64
    assert coerce("1e3", float, "k") == 1000.0
    assert coerce("yes", bool, "k") is True and coerce("0", bool, "k") is False
    assert coerce("none", float, "k") is None
    with pytest.raises(ConfigError, match="k"):
        coerce("1.5", int, "k")
    with pytest.raises(ConfigError):
        coerce("maybe", bool, "k")


def test_config_text_errors_name_line():
    with pytest.raises(ConfigError, match="c.cfg:2"):
        read_config_text("model.dim = 16\nnonsense\n", "c.cfg")
    with pytest.raises(ConfigError, match="c.cfg:3"):
        read_config_text("# comment\n\nmodel.bogus = 1\n", "c.cfg")


def test_overrides_forms():
    got = parse_overrides(["--d", "32", "--lr=0.01", "--forces", "--seed", "7"])
    assert got == {"model.dim": "32", "train.lr": "0.01", "model.forces": "true",
                   "train.forces": "true", "seed": "7"}
    with pytest.raises(ConfigError):
        parse_overrides(["dim"])


def test_run_config_from_file_and_overrides(tmp_path):
    write_extxyz(tmp_path / "d.xyz", make_dataset(6, seed=0))
    (tmp_path / "run.cfg").write_text(
        "seed = 3\nmodel.d = 16\nmodel.h = 2\nattention = mat_exp\n"
        "data.data = d.xyz\ndata.target = y\ndata.split = 4,1,1\n")
    rc = RunConfig.from_sources(tmp_path / "run.cfg", parse_overrides(["--blocks", "2"]))
    assert (rc.model.dim, rc.model.heads, rc.model.blocks) == (16, 2, 2)
    assert rc.model.attention == "mat_exp" and rc.seed == 3 and rc.train.seed == 3
    assert rc.data.data[0] == (tmp_path / "d.xyz").resolve()
    # resolved lines reparse to the same configuration
    (tmp_path / "again.cfg").write_text("\n".join(rc.to_lines()))
    rc2 = RunConfig.from_sources(tmp_path / "again.cfg")
    assert rc2.to_lines() == rc.to_lines()


def test_run_config_manifest_reference(tmp_path):
    sub = tmp_path / "data"
    sub.mkdir()
    write_extxyz(sub / "d.xyz", make_dataset(5, seed=0))
    (sub / "man.txt").write_text("data = d.xyz\ntarget = y\nsplit = 3,1,1\n")
    (tmp_path / "run.cfg").write_text("data.manifest = data/man.txt\ndata.seed = 4\n")
    rc = RunConfig.from_sources(tmp_path / "run.cfg")
    assert rc.data.data == [(sub / "d.xyz").resolve()] and rc.data.seed == 4


def test_run_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        RunConfig.from_sources(tmp_path / "missing.cfg")
    with pytest.raises(ConfigError):
        RunConfig.from_mapping({"model.dim": "10", "model.heads": "4"})
    with pytest.raises(ConfigError, match="gelu"):
        RunConfig.from_mapping(parse_overrides(["--forces"]))
