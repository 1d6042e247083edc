"""Model construction, freeze policies, classification, and the checkpoint format."""

import json
import struct

import numpy as np
import pytest

from beamsight import resnet as rn
from beamsight import tensorcore as tc
from beamsight.errors import InvalidConfig

SMALL = rn.ModelConfig(input_size=32, stem_channels=8, blocks_per_stage=(1, 1), num_classes=2)


def small_model(seed=0):
    return rn.build_model(SMALL, seed=seed)


def batch(n=2, seed=0, side=32, channels=1):
    rng = np.random.default_rng(seed)
    return rng.random((n, channels, side, side)).astype(np.float32)


class TestConfig:
    def test_head_features_derivation(self):
        assert rn.ModelConfig(stem_channels=16, blocks_per_stage=(2, 2, 2)).head_features == 128
        assert rn.ModelConfig(stem_channels=64, blocks_per_stage=(2, 2, 2)).head_features == 512

    def test_invalid_configs(self):
        with pytest.raises(InvalidConfig):
            rn.ModelConfig(num_classes=1).validate()
        with pytest.raises(InvalidConfig):
            rn.ModelConfig(dropout_p=1.0).validate()
        with pytest.raises(InvalidConfig):
            rn.ModelConfig(input_size=100).validate()  # not divisible by 16
        with pytest.raises(InvalidConfig):
            rn.build_model(rn.ModelConfig(blocks_per_stage=()), 0)


class TestBuild:
    def test_deterministic_for_seed(self):
        a, b = small_model(7), small_model(7)
        assert set(a.params) == set(b.params)
        for name in a.params:
            assert np.array_equal(a.params[name], b.params[name]), name

    def test_different_seeds_differ(self):
        a, b = small_model(1), small_model(2)
        assert not np.array_equal(a.params["stem.conv.w"], b.params["stem.conv.w"])

    def test_head_parameter_count(self):
        cfg = rn.ModelConfig(input_size=64, stem_channels=64, blocks_per_stage=(2, 2, 2),
                             num_classes=2)
        model = rn.build_model(cfg, seed=0)
        head = model.params["head.w"].size + model.params["head.b"].size
        assert head == 2 * 512 + 2 == 1026

    def test_trainable_count_matches_shape_walk(self):
        model = small_model()
        # independent oracle: walk the manifest shapes
        entries, _ = rn._manifest_entries(model)
        manifest_total = sum(int(np.prod(e["shape"])) for e in entries if e["kind"] == "param")
        assert model.total_param_count() == manifest_total
        assert model.trainable_param_count() == manifest_total  # all unfrozen at build

    def test_bn_init_values(self):
        model = small_model()
        assert np.array_equal(model.params["stem.bn.gamma"], np.ones(8, np.float32))
        assert np.array_equal(model.params["stem.bn.beta"], np.zeros(8, np.float32))


class TestClassify:
    def test_eval_deterministic(self):
        model = small_model()
        x = batch(3)
        assert np.array_equal(rn.classify(model, x), rn.classify(model, x))

    def test_batch_independence(self):
        model = small_model()
        x = np.repeat(batch(1), 5, axis=0)
        logits = rn.classify(model, x)
        for i in range(1, 5):
            assert np.array_equal(logits[0], logits[i])

    def test_softmax_rows_normalized(self):
        model = small_model()
        p = tc.softmax(rn.classify(model, batch(4)))
        assert np.abs(p.sum(axis=1) - 1).max() < 1e-6

    def test_shape_mismatch(self):
        model = small_model()
        with pytest.raises(tc.ShapeMismatch):
            rn.classify(model, batch(2, side=16))

    def test_stage_halving(self):
        # each stage halves the resolution handed to it and doubles channels
        model = small_model()
        g = tc.GradGraph(dtype=np.float32)
        rn.forward_graph(model.eval(), g, batch(1))
        pooled = [n.out.shape for n in g.nodes if n.kind == "max_pool2"]
        assert pooled == [(1, 8, 16, 16)]
        adds = [n.out.shape for n in g.nodes if n.kind == "add"]  # stage outputs
        assert adds == [(1, 16, 8, 8), (1, 32, 4, 4)]

    def test_gap_width_invariant_across_input_sizes(self):
        for side in (32, 64):
            cfg = rn.ModelConfig(input_size=side, stem_channels=8, blocks_per_stage=(1, 1))
            model = rn.build_model(cfg, seed=0)
            g = tc.GradGraph(dtype=np.float32)
            rn.forward_graph(model.eval(), g, batch(1, side=side))
            gap = [n.out.shape for n in g.nodes if n.kind == "global_avg_pool"]
            assert gap == [(1, cfg.head_features)]


class TestFreezePolicy:
    def test_head_only_counts(self):
        model = rn.apply_freeze_policy(small_model(), "head_only")
        d = SMALL.head_features
        assert model.trainable_param_count() == d * 2 + 2

    def test_none_unfreezes_all(self):
        model = rn.apply_freeze_policy(small_model(), "head_only")
        rn.apply_freeze_policy(model, "none")
        assert model.trainable_param_count() == model.total_param_count()

    def test_unknown_policy(self):
        with pytest.raises(ValueError):
            rn.apply_freeze_policy(small_model(), "half")

    def test_reset_head_changes_classes(self):
        model = small_model()
        rn.reset_head(model, num_classes=4, seed=9)
        assert model.config.num_classes == 4
        assert model.params["head.w"].shape == (SMALL.head_features, 4)
        assert rn.classify(model, batch(2)).shape == (2, 4)


class TestCheckpoint:
    def test_round_trip_bytes_identical(self):
        model = small_model(3)
        blob = rn.checkpoint_bytes(model)
        again = rn.checkpoint_bytes(rn.model_from_bytes(blob))
        assert blob == again

    def test_round_trip_classify_identical(self, tmp_path):
        model = small_model(4)
        path = tmp_path / "m.ckpt"
        rn.save_checkpoint(model, path)
        loaded = rn.load_checkpoint(path)
        x = batch(3, seed=5)
        assert np.array_equal(rn.classify(model, x), rn.classify(loaded, x))

    def test_truncated_payload(self):
        blob = rn.checkpoint_bytes(small_model())
        with pytest.raises(rn.CorruptCheckpoint):
            rn.model_from_bytes(blob[:-17])

    def test_bad_magic(self):
        blob = rn.checkpoint_bytes(small_model())
        with pytest.raises(rn.CorruptCheckpoint):
            rn.model_from_bytes(b"XXXX" + blob[4:])

    def test_manifest_shape_tamper(self):
        blob = rn.checkpoint_bytes(small_model())
        header_len = struct.unpack("<II", blob[4:12])[1]
        header = json.loads(blob[12 : 12 + header_len].decode())
        header["manifest"][0]["shape"] = [1, 1, 1, 1]
        raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        tampered = blob[:4] + struct.pack("<II", 1, len(raw)) + raw + blob[12 + header_len :]
        with pytest.raises(rn.CorruptCheckpoint):
            rn.model_from_bytes(tampered)

    def test_missing_file(self, tmp_path):
        with pytest.raises(rn.CorruptCheckpoint):
            rn.load_checkpoint(tmp_path / "nope.ckpt")

    def test_header_is_utf8_json_after_fixed_prelude(self):
        blob = rn.checkpoint_bytes(small_model())
        assert blob[:4] == b"RFHD"
        version, header_len = struct.unpack("<II", blob[4:12])
        assert version == 1
        header = json.loads(blob[12 : 12 + header_len].decode("utf-8"))
        assert {"format_version", "config", "manifest"} <= set(header)
