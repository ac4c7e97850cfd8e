import struct
import zlib

import numpy as np
import pytest

from pmda.data import netpbm
from pmda.data.synthetic import SyntheticConfig, SyntheticStyleConfig, default_config, gen_synthetic
from pmda.data.weights import decode_tensors, encode_tensors, load_tensors, save_tensors
from pmda.errors import FormatError, IntegrityError, ParseError, UnsupportedFormatError, UnsupportedVersionError
from pmda.networks import SegNet
from pmda.persist import (load_seg_model, load_style_model, load_style_space, save_network, save_seg_model,
                          save_style_model, save_style_space)
from pmda.seg_train import SegModel
from pmda.style_space import fit_kpca
from pmda.style_transfer import StyleTransferModel


class TestNetpbm:
    def test_one_white_pixel(self, tmp_path):
        path = tmp_path / "w.ppm"
        path.write_bytes(b"P6\n1 1\n255\n\xff\xff\xff")
        np.testing.assert_array_equal(netpbm.read_image(path), np.ones((3, 1, 1), np.float32))

    @pytest.mark.parametrize("seed", range(5))
    def test_byte_round_trip(self, seed, tmp_path):
        rng = np.random.default_rng(seed)
        h, w = rng.integers(1, 20, 2)
        raw = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
        path = tmp_path / "a.ppm"
        netpbm.write_image(path, raw.transpose(2, 0, 1) / np.float32(255))
        data = path.read_bytes()
        np.testing.assert_array_equal(netpbm.decode(data), raw)
        netpbm.write_image(tmp_path / "b.ppm", netpbm.read_image(path))
        assert (tmp_path / "b.ppm").read_bytes() == data

    def test_labels_round_trip_with_ignore(self, tmp_path):
        lab = np.array([[0, 3, 255], [1, 2, 0]], np.uint8)
        netpbm.write_labels(tmp_path / "l.pgm", lab)
        back = netpbm.read_labels(tmp_path / "l.pgm")
        np.testing.assert_array_equal(back, lab)
        assert back[0, 2] == 255

    def test_comments_and_whitespace(self):
        buf = b"P5 # a comment\n2\t# w\n 1\n255\n\x07\x09"
        np.testing.assert_array_equal(netpbm.decode(buf), [[7, 9]])

    def test_bad_magic_offset(self):
        with pytest.raises(ParseError) as e:
            netpbm.decode(b"P3\n1 1\n255\n000")
        assert e.value.offset == 0

    def test_bad_header_byte_offset(self):
        with pytest.raises(ParseError) as e:
            netpbm.decode(b"P6\n1 x\n255\n\0\0\0")
        assert e.value.offset == 5

    def test_short_payload(self):
        with pytest.raises(ParseError) as e:
            netpbm.decode(b"P6\n2 1\n255\n\0\0\0")
        assert e.value.offset == 14

    def test_maxval(self):
        with pytest.raises(UnsupportedFormatError):
            netpbm.decode(b"P5\n1 1\n65535\n\0\0")

    def test_kind_mismatch(self, tmp_path):
        netpbm.write_labels(tmp_path / "l.pgm", np.zeros((2, 2), np.uint8))
        with pytest.raises(UnsupportedFormatError):
            netpbm.read_image(tmp_path / "l.pgm")


def rand_tensors(seed):
    rng = np.random.default_rng(seed)
    return {"a": rng.standard_normal((3, 4)).astype(np.float32),
            "b/c": rng.standard_normal((2, 1, 3, 3)).astype(np.float32),
            "scalar": np.float32(rng.standard_normal()).reshape(()),
            "odd": np.array([np.inf, -0.0, 1e-45, np.float32(3.4e38)], np.float32)}


class TestWeightsFile:
    @pytest.mark.parametrize("seed", range(5))
    def test_bit_exact(self, seed, tmp_path):
        t = rand_tensors(seed)
        save_tensors(tmp_path / "w.pmdw", t, {"x": [1, 2], "name": "ü"})
        back, meta = load_tensors(tmp_path / "w.pmdw")
        assert meta == {"x": [1, 2], "name": "ü"}
        assert list(back) == list(t)
        for k in t:
            assert back[k].dtype == np.float32 and back[k].shape == np.shape(t[k])
            assert back[k].tobytes() == np.asarray(t[k]).tobytes()

    def test_layout(self):
        buf = encode_tensors({"w": np.array([1.5], np.float32)})
        assert buf[:4] == b"PMDA"
        assert struct.unpack_from("<II", buf, 4) == (1, 1)
        assert struct.unpack("<I", buf[-4:])[0] == zlib.crc32(buf[:-4])

    @pytest.mark.parametrize("seed", range(10))
    def test_byte_flip_detected(self, seed):
        buf = bytearray(encode_tensors(rand_tensors(0), {"k": 1}))
        pos = int(np.random.default_rng(seed).integers(12, len(buf)))
        buf[pos] ^= 0x5A
        with pytest.raises(IntegrityError):
            decode_tensors(bytes(buf))

    def test_truncated(self):
        buf = encode_tensors(rand_tensors(1))
        for cut in (5, 15, len(buf) // 2, len(buf) - 1):
            with pytest.raises((IntegrityError, FormatError)):
                decode_tensors(buf[:cut])

    def test_version(self):
        buf = bytearray(encode_tensors({}))
        buf[4:8] = struct.pack("<I", 999)
        with pytest.raises(UnsupportedVersionError):
            decode_tensors(bytes(buf))

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            decode_tensors(b"NOPE" + encode_tensors({})[4:])


class TestPersist:
    def test_seg_model(self, tmp_path):
        m = SegModel(SegNet.create(3, 5, widths=(8, 8)), domain_id=1, training_meta={"steps": 7, "lr": 0.05})
        save_seg_model(tmp_path / "m.pmdw", m)
        back = load_seg_model(tmp_path / "m.pmdw")
        assert back.domain_id == 1 and back.training_meta == m.training_meta and back.class_count == 5
        x = np.random.default_rng(0).random((2, 3, 16, 16), dtype=np.float32)
        assert back.logits(x).tobytes() == m.logits(x).tobytes()

    def test_style_model(self, tmp_path):
        m = StyleTransferModel.create(2, lambda_style=3.5)
        save_style_model(tmp_path / "s.pmdw", m)
        back = load_style_model(tmp_path / "s.pmdw")
        assert back.lambda_style == 3.5
        for a, b in ((m.encoder, back.encoder), (m.decoder, back.decoder)):
            for k, p in a.params.items():
                assert b.params[k].data.tobytes() == p.data.tobytes()
        assert not any(p.requires_grad for p in back.encoder.parameters())

    @pytest.mark.parametrize("seed", range(3))
    def test_style_space_bit_exact(self, seed, tmp_path):
        rng = np.random.default_rng(seed)
        space = fit_kpca(rng.standard_normal((9, 12)), rng.integers(0, 3, 9), n_domains=3)
        save_style_space(tmp_path / "sp.pmdw", space)
        back = load_style_space(tmp_path / "sp.pmdw")
        for name in ("train_unit", "kernel_col_mean", "eigenvalues", "coefficients", "train_embedding", "domains"):
            a, b = getattr(space, name), getattr(back, name)
            assert a.shape == b.shape and a.tobytes() == np.asarray(b, a.dtype).tobytes()
        assert back.kernel_mean == space.kernel_mean
        assert back.explained_variance_ratio == space.explained_variance_ratio
        assert back.n_domains == 3

    def test_wrong_kind(self, tmp_path):
        save_network(tmp_path / "n.pmdw", SegNet.create(0, 3))
        with pytest.raises(FormatError):
            load_seg_model(tmp_path / "n.pmdw")
        with pytest.raises(FormatError):
            load_style_space(tmp_path / "n.pmdw")


@pytest.fixture(scope="module")
def corpus():
    return gen_synthetic(default_config(), 12, image_size=32, seed=4, n_test=6, n_source=24)


class TestSynthetic:
    def test_shapes_and_counts(self, corpus):
        assert len(corpus["source"]) == 24 and len(corpus["source_heldout"]) == 6
        assert set(corpus["domains"]) == {"ochre", "nocturne"}
        for d in corpus["domains"].values():
            assert len(d["train"]) == 12 and len(d["test"]) == 6
            assert all(s.labels is None for s in d["train"])
        for s in corpus["unseen"]:
            assert s.image.shape == (3, 32, 32) and s.image.min() >= 0 and s.image.max() <= 1

    def test_styling_keeps_labels(self):
        # same scene schedule and seed for both domains: only pixels may differ
        plain = SyntheticStyleConfig("plain")
        cfg_a = SyntheticConfig(4, [plain, plain])
        cfg_b = SyntheticConfig(4, [plain, SyntheticStyleConfig("dark", contrast_gamma=2.0, blur_radius=1.0)])
        a = gen_synthetic(cfg_a, 5, seed=0, n_test=5)["domains"]["plain"]["test"]
        b = gen_synthetic(cfg_b, 5, seed=0, n_test=5)["domains"]
        for x, y in zip(a, b["dark"]["test"]):
            assert x.labels.tobytes() == y.labels.tobytes()
        assert any(not np.array_equal(x.image, y.image) for x, y in zip(a, b["dark"]["test"]))

    def test_deterministic(self, corpus):
        again = gen_synthetic(default_config(), 12, image_size=32, seed=4, n_test=6, n_source=24)
        for a, b in zip(corpus["source"] + corpus["unseen"], again["source"] + again["unseen"]):
            assert a.image.tobytes() == b.image.tobytes() and a.labels.tobytes() == b.labels.tobytes()

    def test_class_frequencies_match_across_domains(self):
        corpus = gen_synthetic(default_config(), 20, image_size=32, seed=1, n_test=20)
        freqs = []
        for split in [corpus["unseen"]] + [d["test"] for d in corpus["domains"].values()]:
            counts = sum(np.bincount(s.labels.ravel(), minlength=4) for s in split)
            freqs.append(counts / counts.sum())
        freqs = np.array(freqs)
        mean = freqs.mean(axis=0)
        assert np.all(np.abs(freqs - mean) <= 0.2 * mean)

    def test_styles_are_separable(self, corpus):
        # nearest channel-mean centroid recovers the domain of every test image
        means = {k: np.stack([s.image.mean(axis=(1, 2)) for s in v["train"]]) for k, v in corpus["domains"].items()}
        centroids = {k: m.mean(axis=0) for k, m in means.items()}
        for k, v in corpus["domains"].items():
            for s in v["test"]:
                f = s.image.mean(axis=(1, 2))
                assert min(centroids, key=lambda c: np.linalg.norm(f - centroids[c])) == k

    @pytest.mark.parametrize("field,value", [("hue_deg", 200), ("texture_amp", 0.6), ("blur_radius", 5),
                                             ("contrast_gamma", 0.1), ("tint", (0.5, 0, 0))])
    def test_config_validation(self, field, value):
        with pytest.raises(ValueError):
            SyntheticStyleConfig.from_dict({"name": "x", field: value})

    def test_config_round_trip(self):
        cfg = default_config()
        assert SyntheticConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()

    def test_tiny_image_rejected(self):
        with pytest.raises(ValueError):
            gen_synthetic(default_config(), 2, image_size=8)
