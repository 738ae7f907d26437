import json

import pytest

from melcodec import config


class TestPresets:
    def test_paper_16k_defaults(self):
        cfg = config.preset("paper-16k")
        assert cfg.mel.sample_rate == 16000 and cfg.mel.n_mels == 80
        assert cfg.mel.frame_length == 640 and cfg.mel.hop == 160
        assert cfg.mel.fft_size == 1024
        assert cfg.coding.hidden == 256 and cfg.coding.n_blocks == 8
        assert cfg.coding.downsample == 4 and cfg.coding.code_dim == 32
        assert cfg.coding.codebook_size == 1024
        assert cfg.coding.lambda_mel_rec == 45.0 and cfg.coding.lambda_vq == 2.5
        assert cfg.coding.eta == 4.0
        assert cfg.coding.rho == 0.999 and cfg.coding.delta == 1e-3
        assert (cfg.coding.beta1, cfg.coding.beta2) == (0.8, 0.99)
        assert cfg.coding.lr == 2e-4

    def test_paper_48k(self):
        cfg = config.preset("paper-48k")
        assert cfg.mel.sample_rate == 48000 and cfg.mel.n_mels == 128

    def test_refine_defaults(self):
        r = config.preset("paper-16k").refine
        assert r.iterations == 4
        assert r.lambda_cfm == 45.0 and r.lambda_self_cons == 10.0
        assert r.epsilon == 0.01 and r.sigma == 0.3
        assert (r.dt_min, r.dt_max) == (0.005, 0.02)
        assert r.hidden == 256 and r.n_updown == 2 and r.n_bridge == 2
        assert r.heads == 2 and r.head_dim == 64 and r.dropout == 0.05
        assert r.time_dim == 256

    def test_desk_is_tiny(self):
        cfg = config.preset("desk")
        assert cfg.coding.hidden == 32 and cfg.coding.n_blocks == 2
        assert cfg.coding.codebook_size == 64

    def test_unknown_preset(self):
        with pytest.raises(ValueError):
            config.preset("mainframe")


class TestJsonRoundTrip:
    def test_round_trip(self, tmp_path):
        cfg = config.preset("desk")
        cfg.seed = 11
        cfg.corpus = ["a.wav", "b.wav"]
        cfg.checkpoint = "out.fmck"
        path = tmp_path / "cfg.json"
        config.to_json(cfg, path)
        loaded = config.from_json(path)
        assert loaded == cfg

    def test_preset_key_in_document(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"preset": "desk", "seed": 3,
                                    "coding": {"steps": 12}}))
        cfg = config.from_json(path)
        assert cfg.coding.hidden == 32  # from the preset
        assert cfg.coding.steps == 12   # overridden
        assert cfg.seed == 3

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"coding": {"hiden": 32}}))
        with pytest.raises(ValueError):
            config.from_json(path)

    def test_unknown_section_key_rejected(self, tmp_path):
        path = tmp_path / "bad2.json"
        path.write_text(json.dumps({"paths": {"corpse": []}}))
        with pytest.raises(ValueError):
            config.from_json(path)

    def test_flag_like_overrides(self):
        cfg = config.apply_overrides(config.preset("desk"),
                                     {"refine": {"iterations": 9}})
        assert cfg.refine.iterations == 9
