import pytest

from ddlab.config import ConfigError, default_config, parse_config


def test_defaults_resolve_and_reparse():
    cfg = default_config()
    text = cfg.resolved()
    again = parse_config(text)
    assert again.resolved() == text
    assert again["clip"]["lr"] == 3e-4 and again["eval"]["zero_shot_eps"] == ("0", "4/255")


def test_fraction_radii_and_types():
    cfg = parse_config("[attack]\neps = 8/255\nsteps = 40\n[clip]\nadversarial = no\n")
    assert cfg["attack"]["eps"] == 8 / 255 and cfg["attack"]["steps"] == 40
    assert cfg["clip"]["adversarial"] is False
    assert cfg.eps_list("caption_eps") == [2 / 255, 4 / 255, 8 / 255]


@pytest.mark.parametrize("text", [
    "[nonsense]\nx = 1\n",
    "[clip]\nlearning_rate = 1\n",
    "[clip]\nlr = fast\n",
    "[clip]\nadversarial = maybe\n",
    "lr = 1\n",
    "[stagex]\nresolution = 16\n",
])
def test_strict_parsing_rejects(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_stage_sections_sorted_numerically():
    cfg = parse_config("[stage10]\nresolution = 32\n[stage2]\nresolution = 16\nsteps = 2\neps = 4/255\n")
    st = cfg.stages()
    assert [s["resolution"] for s in st] == [16, 32]
    assert st[0]["eps"] == 4 / 255 and st[1]["samples"] == 2048
    assert "[stage2]" in cfg.resolved()


def test_set_override():
    cfg = default_config()
    cfg.set("run.seed", "7")
    assert cfg["run"]["seed"] == 7
    with pytest.raises(ConfigError):
        cfg.set("run.nope", "1")
    with pytest.raises(ConfigError):
        cfg.set("run.seed", "x")
