import pytest

from texscale.config import ConfigError, PipelineConfig


def test_defaults_follow_the_design():
    c = PipelineConfig()
    assert (c.s, c.xi, c.K, c.C, c.q) == (0.95, 0.1, 20, 1.0, 0.05)
    assert (c.crossover_fraction, c.mutation_fraction, c.window, c.k) == (0.10, 0.05, 5, 10)
    assert c.eta_value is None and c.band_ranges() == ((0, 1), (12, 13), (24, 25))


def test_text_roundtrip(tmp_path):
    c = PipelineConfig(eta="0.7", channels=(4, 6), use_re=False, ga="mutation", noise=0.01)
    assert PipelineConfig.loads(c.dumps()) == c
    c.save(tmp_path / "c.cfg")
    assert PipelineConfig.load(tmp_path / "c.cfg") == c
    assert c.hash() == PipelineConfig.loads(c.dumps()).hash()
    assert c.hash("xi") == c.with_overrides(seed=9).hash("xi")
    assert c.hash() != c.with_overrides(seed=9).hash()


def test_partial_file_keeps_defaults():
    c = PipelineConfig.loads("[svm]\nC = 0.5\n[ga]\nchannels = 2, 3\n")
    assert c.C == 0.5 and c.channels == (2, 3) and c.xi == 0.1


@pytest.mark.parametrize("text", [
    "[nope]\nx = 1\n",
    "[svm]\nD = 1\n",
    "[svm]\nC = abc\n",
    "[svm]\nC = -1\n",
    "[proposals]\neta = 1.5\n",
    "[proposals]\neta = often\n",
    "[data]\ndataset = manifest\n",
    "[data]\nbands = 0:1\n",
    "[proposals]\nuse_sp = maybe\n",
    "[ga]\nga = sometimes\n",
    "[semantic]\nwindow = 4\n",
    "no section header\n",
])
def test_bad_configs_raise(text):
    with pytest.raises(ConfigError):
        PipelineConfig.loads(text)


def test_overrides():
    with pytest.raises(ConfigError):
        PipelineConfig().with_overrides(bogus=1)
    with pytest.raises(ConfigError):
        PipelineConfig().with_overrides(s=1.0)
    with pytest.raises(ConfigError):
        PipelineConfig.load("/nonexistent/cfg")
