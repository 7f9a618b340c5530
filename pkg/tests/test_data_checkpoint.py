import struct

import numpy as np
import pytest

from lipsoc.checkpoint import (
    CheckpointError,
    decode,
    encode,
    load_network,
    parse_config,
    save_network,
)
from lipsoc.data import (
    Dataset,
    DatasetFormatError,
    SyntheticSpec,
    from_bytes,
    load_dataset,
    parse_shape,
    save_dataset,
    shape_for_dims,
    synthetic_dataset,
    to_bytes,
)
from lipsoc.network import LipConvnetConfig, build_lipconvnet


def spec7():
    return SyntheticSpec(classes=2, shape=shape_for_dims(48), margin=1.0, count=256, seed=7)


def test_synthetic_bytes_are_reproducible():
    a, b = to_bytes(synthetic_dataset(spec7())), to_bytes(synthetic_dataset(spec7()))
    assert a == b
    assert to_bytes(synthetic_dataset(SyntheticSpec(**(spec7().__dict__ | {"seed": 8})))) != a


def test_synthetic_layout():
    ds = synthetic_dataset(spec7())
    assert ds.shape == (3, 4, 4) and len(ds) == 256
    assert np.bincount(ds.labels).tolist() == [128, 128]
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    means = np.stack([ds.images[ds.labels == c].reshape(-1, 48).mean(0) for c in (0, 1)])
    # centres sit 2 * margin apart before clipping
    assert np.linalg.norm(means[0] - means[1]) > 1.0
    with pytest.raises(ValueError):
        synthetic_dataset(SyntheticSpec(classes=1))


def test_lcds_header_layout_and_round_trip(tmp_path):
    ds = synthetic_dataset(SyntheticSpec(classes=3, shape=(1, 2, 2), count=5, seed=1))
    raw = to_bytes(ds)
    assert raw[:4] == b"LCDS"
    assert struct.unpack_from("<5I", raw, 4) == (5, 1, 2, 2, 3)
    assert len(raw) == 24 + 5 * (1 + 8 * 4)
    assert raw[24] == ds.labels[0]
    assert struct.unpack_from("<d", raw, 25)[0] == ds.images[0, 0, 0, 0]
    save_dataset(ds, tmp_path / "d.lcds")
    back = load_dataset(tmp_path / "d.lcds")
    assert np.array_equal(back.images, ds.images) and np.array_equal(back.labels, ds.labels)


def test_lcds_errors():
    raw = to_bytes(synthetic_dataset(SyntheticSpec(shape=(1, 2, 2), count=4)))
    with pytest.raises(DatasetFormatError, match=f"expected {len(raw)} bytes, got {len(raw) - 3}"):
        from_bytes(raw[:-3])
    with pytest.raises(DatasetFormatError, match="magic"):
        from_bytes(b"XXXX" + raw[4:])
    bad = bytearray(raw)
    bad[24] = 2
    with pytest.raises(DatasetFormatError, match="class count"):
        from_bytes(bytes(bad))
    with pytest.raises(DatasetFormatError, match="header"):
        from_bytes(raw[:10])
    with pytest.raises(FileNotFoundError):
        load_dataset("/nonexistent/file.lcds")


def test_dataset_validation():
    with pytest.raises(DatasetFormatError):
        Dataset(np.full((1, 1, 2, 2), 1.5), np.zeros(1), 2)
    with pytest.raises(DatasetFormatError):
        Dataset(np.zeros((2, 1, 2, 2)), np.zeros(1), 2)


def test_shape_helpers():
    assert parse_shape("3x16x16") == (3, 16, 16) == parse_shape("3,16,16")
    assert shape_for_dims(48) == (3, 4, 4)
    with pytest.raises(ValueError):
        parse_shape("3x16")


def test_lcrt_record_layout():
    raw = encode({"w": np.arange(6.0).reshape(2, 3)})
    assert raw[:4] == b"LCRT"
    assert struct.unpack_from("<II", raw, 4) == (1, 1)
    assert struct.unpack_from("<I", raw, 12)[0] == 1 and raw[16:17] == b"w"
    assert struct.unpack_from("<IQQ", raw, 17) == (2, 2, 3)
    assert np.array_equal(np.frombuffer(raw[37:], "<f8"), np.arange(6.0))
    assert np.array_equal(decode(raw)["w"], np.arange(6.0).reshape(2, 3))
    assert decode(encode({"s": np.float64(2.5)}))["s"].shape == ()


def test_lcrt_errors():
    raw = encode({"w": np.ones((2, 2))})
    with pytest.raises(CheckpointError, match="truncated.*payload of w"):
        decode(raw[:-1])
    with pytest.raises(CheckpointError, match="magic"):
        decode(b"LCRX" + raw[4:])
    with pytest.raises(CheckpointError, match="version"):
        decode(raw[:4] + struct.pack("<I", 9) + raw[8:])
    with pytest.raises(CheckpointError, match="trailing"):
        decode(raw + b"\0")


@pytest.mark.parametrize("pool,head", [("angular", "mlp"), ("polyline", "linear"), ("max", "mlp")])
def test_network_round_trip(tmp_path, pool, head):
    cfg = LipConvnetConfig(depth=5, base_channels=4, blocks=2, pool=pool, head=head, hidden=5,
                           in_shape=(3, 8, 8), classes=3, signed_pool=False)
    net = build_lipconvnet(cfg, seed=3)
    raw = save_network(net, tmp_path / "c.lcrt", {"epochs": 2})
    back, meta = load_network(tmp_path / "c.lcrt")
    assert back.config == cfg and float(meta["epochs"]) == 2.0
    x = np.random.default_rng(0).uniform(size=(2, 3, 8, 8))
    assert np.array_equal(back(x), net(x))
    assert save_network(back, None, {"epochs": 2}) == raw


def test_config_parsing():
    cfg = parse_config("# run\nlr = 0.02\n\nbatch-size=16  # inline\nhead=mlp\n")
    assert cfg == {"lr": "0.02", "batch_size": "16", "head": "mlp"}
    with pytest.raises(ValueError, match="line 1"):
        parse_config("nonsense")
    with pytest.raises(ValueError, match="empty key"):
        parse_config("=3")
