"""Image codec, ground-truth decoding, dataset discovery, checkpoints,
and config parsing."""

import numpy as np
import pytest

from mvfcn import EngineRng, build_mvfcn
from mvfcn.errors import CheckpointError, ConfigError, DataError
from mvfcn.io import (
    GtMapping,
    apply_state,
    discover_dataset,
    load_checkpoint,
    load_gt,
    load_image,
    load_scoremap,
    parse_config,
    save_checkpoint,
    save_image,
    save_scoremap,
    snapshot_state,
    validate_payload,
)
from mvfcn.train import AdamState


class TestImageCodec:
    def test_handwritten_ppm_fixture(self, tmp_path):
        # 2x2 P6: pixels (r,g,b) = (255,0,0),(0,255,0),(0,0,255),(255,255,255)
        raw = b"P6\n2 2\n255\n" + bytes(
            [255, 0, 0, 0, 255, 0, 0, 0, 255, 255, 255, 255])
        path = tmp_path / "f.ppm"
        path.write_bytes(raw)
        tensor = load_image(path)
        assert tensor.shape == (1, 3, 2, 2)
        assert tensor[0, 0, 0, 0] == 1.0 and tensor[0, 1, 0, 0] == 0.0
        assert tensor[0, 1, 0, 1] == 1.0
        assert tensor[0, 2, 1, 0] == 1.0
        assert (tensor[0, :, 1, 1] == 1.0).all()

    def test_comment_in_header(self, tmp_path):
        raw = b"P5\n# a comment\n2 1\n255\n" + bytes([0, 128])
        path = tmp_path / "c.pgm"
        path.write_bytes(raw)
        tensor = load_image(path)
        assert tensor.shape == (1, 1, 1, 2)
        assert tensor[0, 0, 0, 1] == pytest.approx(128 / 255)

    def test_round_trip_lossless(self, tmp_path):
        r = np.random.default_rng(0)
        image = (r.integers(0, 256, size=(3, 7, 9)) / 255.0).astype(np.float32)
        save_image(image, tmp_path / "x.ppm")
        back = load_image(tmp_path / "x.ppm")[0]
        assert np.array_equal(back, image.astype(np.float32))

    def test_mask_round_trip_value_set(self, tmp_path):
        mask = (np.random.default_rng(1).uniform(size=(6, 6)) > 0.5).astype(np.uint8)
        save_image(mask, tmp_path / "m.pgm")
        back = load_image(tmp_path / "m.pgm")[0, 0]
        assert set(np.unique(back)) <= {0.0, 1.0}
        assert np.array_equal(back, mask)

    def test_sixteen_bit_rejected(self, tmp_path):
        path = tmp_path / "deep.pgm"
        path.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
        with pytest.raises(DataError, match="bit depth"):
            load_image(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "short.pgm"
        path.write_bytes(b"P5\n4 4\n255\n" + b"\x00" * 7)
        with pytest.raises(DataError, match="truncated"):
            load_image(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P2\n1 1\n255\n0")
        with pytest.raises(DataError):
            load_image(path)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(DataError):
            load_image(tmp_path / "absent.pgm")


class TestGroundTruth:
    def _write(self, tmp_path, values):
        values = np.asarray(values, np.uint8)
        h, w = values.shape
        path = tmp_path / "gt.pgm"
        path.write_bytes(b"P5\n" + f"{w} {h}\n255\n".encode() + values.tobytes())
        return path

    def test_binary_frame(self, tmp_path):
        path = self._write(tmp_path, [[0, 255], [255, 0]])
        mask, roi = load_gt(path)
        assert np.array_equal(mask, [[0, 1], [1, 0]])
        assert roi.all()

    def test_outside_roi_label(self, tmp_path):
        path = self._write(tmp_path, [[0, 170], [85, 255]])
        mask, roi = load_gt(path)
        assert np.array_equal(roi, [[1, 0], [0, 1]])
        assert mask[1, 1] == 1

    def test_shadow_is_background(self, tmp_path):
        path = self._write(tmp_path, [[50, 255]])
        mask, roi = load_gt(path)
        assert mask[0, 0] == 0 and roi[0, 0] == 1

    def test_unmapped_value_strict(self, tmp_path):
        path = self._write(tmp_path, [[17]])
        with pytest.raises(DataError, match="17"):
            load_gt(path)

    def test_unmapped_value_lenient(self, tmp_path):
        path = self._write(tmp_path, [[17, 255]])
        mask, roi = load_gt(path, GtMapping(strict=False))
        assert mask[0, 1] == 1 and mask[0, 0] == 0

    def test_color_gt_rejected(self, tmp_path):
        path = tmp_path / "rgb.pgm"
        path.write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
        with pytest.raises(DataError, match="grayscale"):
            load_gt(path)


class TestDiscovery:
    def _tree(self, tmp_path, indices, gt_indices=None):
        root = tmp_path / "seq"
        (root / "input").mkdir(parents=True)
        (root / "groundtruth").mkdir()
        pixel = b"P5\n1 1\n255\n\x00"
        for i in indices:
            (root / "input" / f"in{i:06d}.ppm").write_bytes(
                b"P6\n1 1\n255\n\x00\x00\x00")
        for i in (gt_indices if gt_indices is not None else indices):
            (root / "groundtruth" / f"gt{i:06d}.pgm").write_bytes(pixel)
        return root

    def test_aligned_tree(self, tmp_path):
        root = self._tree(tmp_path, range(1, 11))
        manifest = discover_dataset(root)
        assert manifest.n == 10
        assert [f.index for f in manifest.frames] == list(range(1, 11))
        assert manifest.name == "seq"

    def test_missing_gt_strict(self, tmp_path):
        root = self._tree(tmp_path, range(1, 11), gt_indices=[i for i in range(1, 11) if i != 7])
        with pytest.raises(DataError, match="no ground truth"):
            discover_dataset(root, strict=True)

    def test_missing_gt_lenient_skips(self, tmp_path):
        root = self._tree(tmp_path, range(1, 11), gt_indices=[i for i in range(1, 11) if i != 7])
        manifest = discover_dataset(root, strict=False)
        assert manifest.n == 9
        assert 7 not in [f.index for f in manifest.frames]

    def test_gap_in_numbering_strict(self, tmp_path):
        root = self._tree(tmp_path, [1, 2, 4])
        with pytest.raises(DataError, match="gaps"):
            discover_dataset(root, strict=True)

    def test_empty_directory_rejected(self, tmp_path):
        root = tmp_path / "seq"
        (root / "input").mkdir(parents=True)
        (root / "groundtruth").mkdir()
        with pytest.raises(DataError):
            discover_dataset(root)

    def test_roi_detected(self, tmp_path):
        root = self._tree(tmp_path, [1, 2])
        (root / "ROI.pgm").write_bytes(b"P5\n1 1\n255\n\xff")
        assert discover_dataset(root).roi_path is not None

    def test_deterministic_order(self, tmp_path):
        root = self._tree(tmp_path, [3, 1, 2])
        manifest = discover_dataset(root)
        assert [f.index for f in manifest.frames] == [1, 2, 3]


def _fresh_graph(seed=0):
    graph = build_mvfcn()
    graph.initialize_parameters(EngineRng(seed))
    return graph


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        graph = _fresh_graph()
        rng = EngineRng(5)
        rng.uniform(size=100)  # advance the stream
        payload = snapshot_state(graph, rng)
        path_a = tmp_path / "a.ckpt"
        path_b = tmp_path / "b.ckpt"
        save_checkpoint(path_a, payload)
        loaded = load_checkpoint(path_a, graph)
        save_checkpoint(path_b, loaded)
        assert path_a.read_bytes() == path_b.read_bytes()

    def test_rng_position_round_trip(self, tmp_path):
        graph = _fresh_graph()
        rng = EngineRng(9)
        rng.uniform(size=17)
        payload = snapshot_state(graph, rng)
        expected = rng.uniform(size=8)
        save_checkpoint(tmp_path / "c.ckpt", payload)
        loaded = load_checkpoint(tmp_path / "c.ckpt", graph)
        restored = EngineRng(0)
        restored.set_state_words(loaded.entries[(0, 6)])
        assert np.array_equal(restored.uniform(size=8), expected)

    def test_apply_restores_forward_outputs(self, tmp_path):
        from mvfcn import forward
        graph_a = _fresh_graph(1)
        x = np.random.default_rng(2).uniform(size=(1, 3, 32, 32)).astype(np.float32)
        forward(graph_a, x, mode="train", rng=EngineRng(3))  # init BN stats
        score_a, _ = forward(graph_a, x, mode="infer")
        save_checkpoint(tmp_path / "m.ckpt", snapshot_state(graph_a, EngineRng(0)))
        graph_b = _fresh_graph(99)
        apply_state(graph_b, load_checkpoint(tmp_path / "m.ckpt", graph_b))
        score_b, _ = forward(graph_b, x, mode="infer")
        assert np.array_equal(score_a, score_b)

    def test_corrupt_payload_byte_detected(self, tmp_path):
        path = tmp_path / "x.ckpt"
        save_checkpoint(path, snapshot_state(_fresh_graph(), EngineRng(0)))
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "y.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_fingerprint_mismatch(self, tmp_path):
        from conftest import tiny_graph
        path = tmp_path / "z.ckpt"
        save_checkpoint(path, snapshot_state(_fresh_graph(), EngineRng(0)))
        other = tiny_graph()
        other.initialize_parameters(EngineRng(0))
        with pytest.raises(CheckpointError, match="fingerprint"):
            load_checkpoint(path, other)

    def test_widened_head_layer_changes_fingerprint(self, tmp_path):
        from dataclasses import replace
        from mvfcn.graph import ModelGraph
        path = tmp_path / "w.ckpt"
        save_checkpoint(path, snapshot_state(_fresh_graph(), EngineRng(0)))
        donor = build_mvfcn()
        widened = ModelGraph(
            [replace(l, out_channels=150) if l.id == 30 else l for l in donor.layers],
            in_channels=3, input_divisor=16)
        widened.initialize_parameters(EngineRng(0))
        with pytest.raises(CheckpointError, match="fingerprint"):
            load_checkpoint(path, widened)

    def test_reshaped_tensor_names_layer(self):
        graph = _fresh_graph()
        payload = snapshot_state(graph, EngineRng(0))
        payload.entries[(30, 0)] = payload.entries[(30, 0)].reshape(128, 112, 9)
        with pytest.raises(CheckpointError, match="layer 30"):
            validate_payload(graph, payload)

    def test_optimizer_state_round_trip(self, tmp_path):
        graph = _fresh_graph()
        adam = AdamState(lr=1e-3)
        adam.t = 11
        for lid, name, arr in graph.parameter_items():
            adam.m[(lid, name)] = np.full_like(arr, 0.25)
            adam.v[(lid, name)] = np.full_like(arr, 0.5)
        payload = snapshot_state(graph, EngineRng(0), adam)
        save_checkpoint(tmp_path / "o.ckpt", payload)
        loaded = load_checkpoint(tmp_path / "o.ckpt", graph)
        fresh = AdamState(lr=1e-3)
        apply_state(graph, loaded, adam=fresh)
        assert fresh.t == 11
        assert all(np.array_equal(v, 0.25 * np.ones_like(v)) for v in fresh.m.values())


class TestScoremapSidecar:
    def test_exact_round_trip(self, tmp_path):
        score = np.random.default_rng(0).uniform(size=(24, 32)).astype(np.float32)
        save_scoremap(score, tmp_path / "s.f32")
        assert np.array_equal(load_scoremap(tmp_path / "s.f32"), score)

    def test_truncated_rejected(self, tmp_path):
        save_scoremap(np.zeros((4, 4), np.float32), tmp_path / "t.f32")
        data = (tmp_path / "t.f32").read_bytes()
        (tmp_path / "t.f32").write_bytes(data[:-5])
        with pytest.raises(DataError):
            load_scoremap(tmp_path / "t.f32")


class TestConfig:
    def test_defaults_from_empty_file(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("# nothing but a comment\n")
        cfg = parse_config(path)
        assert cfg.base_lr == 2e-4
        assert cfg.batch_size == 8
        assert cfg.max_epochs == 30
        assert cfg.dropout_rate == 0.3
        assert cfg.threshold == "otsu"
        assert cfg.min_area == 50

    def test_full_file(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text(
            "seed = 11\n"
            "input_height = 64\n"
            "input_width = 64\n"
            "base_lr = 0.001\n"
            "threshold = 0.4\n"
            "gt_background = 0,50\n"
            "augment = false\n"
        )
        cfg = parse_config(path)
        assert cfg.seed == 11
        assert (cfg.input_height, cfg.input_width) == (64, 64)
        assert cfg.threshold == 0.4
        assert cfg.augment is False

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("learning_rate = 0.1\n")
        with pytest.raises(ConfigError, match="unknown config key"):
            parse_config(path)

    def test_out_of_range_rejected(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("lr_decay_factor = 1.5\n")
        with pytest.raises(ConfigError):
            parse_config(path)

    def test_indivisible_input_rejected(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("input_height = 100\n")
        with pytest.raises(ConfigError, match="divisible by 16"):
            parse_config(path)

    def test_duplicate_key_rejected(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("seed = 1\nseed = 2\n")
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config(path)

    def test_bad_threshold_string(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("threshold = sometimes\n")
        with pytest.raises(ConfigError):
            parse_config(path)
