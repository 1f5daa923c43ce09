import numpy as np
import pytest

from sleepcl import autodiff as ad
from sleepcl.autodiff import Tensor
from sleepcl.models import (
    ConvFeatureExtractor,
    ModelConfig,
    ParamFormatError,
    SleepModel,
    extract_features,
    load_extractor,
    load_params,
    preset,
    save_extractor,
    save_params,
)


def test_full_preset_matches_architecture():
    cfg = preset("full")
    assert cfg.feature_length == 1024
    assert cfg.hidden == 2000
    assert cfg.latent == 100
    assert cfg.extractor_output_length() == 1024


def test_inconsistent_feature_length_rejected():
    with pytest.raises(ValueError):
        ModelConfig(feature_length=1000)


def test_conv_extractor_outputs_1024_features():
    ex = ConvFeatureExtractor((3, 32, 32), (16, 32, 64, 128, 256), (1, 2, 2, 2, 2), np.random.default_rng(0))
    ex.freeze()
    h = extract_features(ex, np.zeros((2, 3, 32, 32), dtype=np.float32))
    assert h.shape == (2, 1024)


@pytest.fixture(scope="module")
def small_extractor():
    ex = ConvFeatureExtractor((3, 32, 32), (4, 4, 4, 4, 4), (1, 2, 2, 2, 2), np.random.default_rng(1))
    ex.freeze()
    return ex


def test_extractor_zero_batch_is_deterministic(small_extractor):
    z = np.zeros((3, 3, 32, 32), dtype=np.float32)
    a = extract_features(small_extractor, z).data
    b = extract_features(small_extractor, z).data
    assert a.tobytes() == b.tobytes()
    np.testing.assert_array_equal(a[0], a[1])


def test_extractor_identical_images_identical_rows(small_extractor):
    img = np.random.default_rng(0).normal(size=(1, 3, 32, 32)).astype(np.float32)
    h = extract_features(small_extractor, np.concatenate([img, img])).data
    np.testing.assert_array_equal(h[0], h[1])


def test_extractor_wrong_shape(small_extractor):
    with pytest.raises(ad.DimensionError):
        extract_features(small_extractor, np.zeros((1, 3, 28, 28), dtype=np.float32))


def test_unfrozen_extractor_refused():
    ex = ConvFeatureExtractor((3, 32, 32), (4,) * 5, (1, 2, 2, 2, 2), np.random.default_rng(0))
    with pytest.raises(RuntimeError):
        extract_features(ex, np.zeros((1, 3, 32, 32)))


def test_frozen_extractor_records_no_graph(small_extractor):
    h = small_extractor(np.ones((1, 3, 32, 32), dtype=np.float32))
    assert not h.requires_grad
    assert all(not p.requires_grad for p in small_extractor.parameters().values())


def test_extractor_snapshot_reload_reproduces_features(tmp_path, small_extractor):
    save_extractor(tmp_path / "ex.bin", small_extractor)
    again = load_extractor(tmp_path / "ex.bin")
    x = np.random.default_rng(2).normal(size=(2, 3, 32, 32)).astype(np.float32)
    assert small_extractor(x).data.tobytes() == again(x).data.tobytes()


@pytest.fixture(scope="module")
def desk_model():
    return SleepModel(preset("desk"), seed=0)


def test_encode_widths(desk_model):
    h = Tensor(np.random.default_rng(0).normal(size=(5, 256)))
    pen, mu, lv = desk_model.encode(h)
    assert pen.shape == (5, 400)
    assert mu.shape == lv.shape == (5, 32)
    assert all(np.isfinite(a.data).all() for a in (pen, mu, lv))


def test_full_preset_layer_widths():
    m = SleepModel(preset("full"), seed=0)
    p = m.parameters()
    assert p["encoder.fc1.weight"].shape == (1024, 2000)
    assert p["encoder.mu.weight"].shape == (2000, 100)
    assert p["decoder.out.weight"].shape == (2000, 1024)
    assert p["classifier.weight"].shape == (2000, 100)


def test_encode_width_mismatch(desk_model):
    with pytest.raises(ad.DimensionError):
        desk_model.encode(Tensor(np.zeros((1, 100))))


def test_decode_zero_latent_deterministic(desk_model):
    a = desk_model.decode(Tensor(np.zeros((2, 32)))).data
    b = desk_model.decode(Tensor(np.zeros((2, 32)))).data
    assert a.shape == (2, 256) and np.isfinite(a).all()
    assert a.tobytes() == b.tobytes()


def test_reconstruction_smoke(desk_model):
    h = Tensor(np.random.default_rng(1).normal(size=(4, 256)))
    _, mu, lv = desk_model.encode(h)
    rec = desk_model.decode(ad.gaussian_sample(mu, lv, np.random.default_rng(2).normal(size=mu.shape)))
    err = float(((rec.data - h.data) ** 2).mean())
    assert np.isfinite(err) and err >= 0


def test_classify_rows_sum_to_one(desk_model):
    pen, _, _ = desk_model.encode(Tensor(np.random.default_rng(3).normal(size=(6, 256))))
    p = desk_model.classify(pen).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert ((p > 0) & (p < 1)).all()


def test_zero_classifier_gives_uniform():
    m = SleepModel(preset("desk"), seed=0)
    m.layers["classifier"].weight.data[:] = 0
    p = m.classify(Tensor(np.zeros((2, 400)))).data
    np.testing.assert_allclose(p, 0.1)


def test_classify_mask_matches_manual_renormalisation(desk_model):
    pen, _, _ = desk_model.encode(Tensor(np.random.default_rng(4).normal(size=(3, 256))))
    mask = np.zeros(10, bool)
    mask[:4] = True
    masked = desk_model.classify(pen, mask).data
    full = desk_model.classify(pen).data
    manual = np.where(mask, full, 0)
    manual /= manual.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(masked, manual, rtol=1e-5)
    assert (masked[:, ~mask] == 0).all()


def test_classify_width_mismatch(desk_model):
    with pytest.raises(ad.DimensionError):
        desk_model.classify(Tensor(np.zeros((1, 10))))


def test_copy_is_independent_and_identical(desk_model):
    twin = desk_model.copy()
    h = Tensor(np.random.default_rng(5).normal(size=(2, 256)))
    assert desk_model.encode(h)[1].data.tobytes() == twin.encode(h)[1].data.tobytes()
    twin.layers["encoder.fc1"].weight.data[0, 0] += 1
    assert desk_model.layers["encoder.fc1"].weight.data[0, 0] != twin.layers["encoder.fc1"].weight.data[0, 0]


def test_param_roundtrip_bit_exact(tmp_path):
    m = SleepModel(preset("desk"), seed=7)
    save_params(tmp_path / "m.bin", m, {"note": "x"})
    ps = load_params(tmp_path / "m.bin")
    assert ps.metadata == {"note": "x"}
    for name, p in m.parameters().items():
        assert np.max(np.abs(ps.tensors[name] - p.data)) == 0
        assert ps.tensors[name].dtype == p.dtype
    fresh = SleepModel(preset("desk"), seed=8)
    fresh.load_state(ps.tensors)
    assert all(fresh.parameters()[k].data.tobytes() == v.data.tobytes() for k, v in m.parameters().items())


def test_param_names_unique_and_complete():
    m = SleepModel(preset("desk"), seed=0)
    names = list(m.parameters())
    assert len(names) == len(set(names)) == 16


def test_truncated_param_file(tmp_path):
    save_params(tmp_path / "m.bin", SleepModel(preset("desk"), seed=0))
    raw = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-100])
    with pytest.raises(ParamFormatError, match="truncated"):
        load_params(tmp_path / "t.bin")


def test_bad_magic_and_version(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"garbage!")
    with pytest.raises(ParamFormatError):
        load_params(tmp_path / "x.bin")
    save_params(tmp_path / "m.bin", {"w": Tensor(np.ones(2))})
    raw = (tmp_path / "m.bin").read_bytes().replace(b'"format_version": 1', b'"format_version": 9')
    (tmp_path / "v.bin").write_bytes(raw)
    with pytest.raises(ParamFormatError, match="version"):
        load_params(tmp_path / "v.bin")


def test_param_file_layout_is_json_header_then_little_endian(tmp_path):
    import json
    import struct

    w = Tensor(np.array([[1.0, 2.0]], dtype=np.float32))
    save_params(tmp_path / "m.bin", {"w": w})
    raw = (tmp_path / "m.bin").read_bytes()
    assert raw[:8] == b"SLPARAMS"
    (n,) = struct.unpack_from("<I", raw, 8)
    header = json.loads(raw[12:12 + n])
    assert header["tensors"][0]["shape"] == [1, 2]
    assert header["tensors"][0]["dtype"] == "<f4"
    assert raw[12 + n:] == np.array([1.0, 2.0], dtype="<f4").tobytes()
