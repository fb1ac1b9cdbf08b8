import pytest

from capmlm.config import PipelineConfig
from capmlm.representation import DEFAULT_ALLOWLIST, ReprKind

TOML = """
repr_kind = "dict"
seed = 7
allowlist = ["sip.*"]

[redaction]
enable = ["msisdn_like"]

[vocab]
size = 512

[model]
preset = "desk"
layers = 1
hidden_dim = 32
heads = 2

[train]
lr = 1e-3
batch_size = 8
seed = 99

[fda]
detector = "elliptic"
level = 0.99

[paths]
corpus = "c"
"""


def test_defaults():
    cfg = PipelineConfig()
    assert cfg.kind is ReprKind.PCT_DICT
    assert cfg.chunk_size == 64 and cfg.mask_rate == 0.2
    assert cfg.fda.k == 3 and cfg.fda.multiplier == 3.0
    assert cfg.allowlist == DEFAULT_ALLOWLIST
    mc = cfg.model_config(100)
    assert (mc.layers, mc.heads, mc.hidden_dim, mc.vocab_size) == (2, 4, 128, 100)


def test_load_toml():
    cfg = PipelineConfig.loads(TOML)
    assert cfg.kind is ReprKind.DICT
    assert cfg.field_allowlist().allows("sip.method") and not cfg.field_allowlist().allows("ip.src")
    assert cfg.rules().enabled[-1].name == "msisdn_like"
    mc = cfg.model_config(512)
    assert (mc.layers, mc.hidden_dim, mc.heads, mc.intermediate_dim) == (1, 32, 2, 512)
    tc = cfg.train_config()
    assert tc.seed == 7 and tc.lr == 1e-3  # the global seed wins
    assert cfg.fda.detector == "elliptic" and cfg.paths.corpus == "c"


@pytest.mark.parametrize(
    "text",
    ['bogus = 1', '[fda]\ndetector = "svm"', '[model]\nwidth = 3', '[train]\nlearning = 1', 'mask_rate = 1.5',
     '[redaction]\nenable = ["nope"]', 'repr_kind = "yaml"'],
)
def test_rejects_bad_config(text):
    with pytest.raises(ValueError):
        PipelineConfig.loads(text)


def test_hash_tracks_relevant_settings_only():
    a = PipelineConfig()
    assert a.hash() == PipelineConfig().hash()
    assert a.with_overrides(workers=8, artifacts="/tmp/x").hash() == a.hash()
    assert a.with_overrides(seed=1).hash() != a.hash()
    assert a.with_overrides(detector="elliptic").hash() != a.hash()


def test_overrides_route_sections():
    cfg = PipelineConfig().with_overrides(k=5, detector="elliptic", corpus="z", seed=None)
    assert cfg.fda.k == 5 and cfg.fda.detector == "elliptic" and cfg.paths.corpus == "z"
    assert cfg.seed == 0
