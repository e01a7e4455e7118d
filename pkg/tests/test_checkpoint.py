import zipfile

import numpy as np
import pytest
import torch

from vcmpost.checkpoint import load_network, read_archive, save_network, write_archive
from vcmpost.errors import FormatError, IngestionError
from vcmpost.net import NetConfig, build_network, forward

from conftest import make_frame


def _randomize(net, scale=0.1):
    with torch.no_grad():
        for p in net.parameters():
            p.add_(torch.randn_like(p) * scale)
    return net


def test_round_trip_is_bit_exact(tmp_path, small_config, rng):
    net = _randomize(build_network(small_config, seed=0))
    path = tmp_path / "net.ckpt"
    save_network(path, net)
    loaded = load_network(path)
    assert loaded.config == small_config
    for (na, pa), (nb, pb) in zip(net.named_parameters(),
                                  loaded.named_parameters()):
        assert na == nb
        assert torch.equal(pa, pb), na
    x = make_frame(rng)
    assert np.array_equal(forward(net, x), forward(loaded, x))


def test_save_is_byte_deterministic(tmp_path, small_config):
    net = _randomize(build_network(small_config, seed=1))
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_network(a, net)
    save_network(b, net)
    assert a.read_bytes() == b.read_bytes()


def test_archive_rejects_corrupted_payload(tmp_path, small_config):
    net = build_network(small_config, seed=0)
    path = tmp_path / "net.ckpt"
    save_network(path, net)
    blob = bytearray(path.read_bytes())
    # flip a byte inside a stored tensor payload, past the zip headers
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        load_network(path)


def test_archive_rejects_non_zip(tmp_path):
    path = tmp_path / "net.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(FormatError):
        load_network(path)


def test_load_rejects_missing_path(tmp_path):
    with pytest.raises(IngestionError, match="does not exist"):
        load_network(tmp_path / "none.ckpt")


def test_archive_rejects_unexpected_entry(tmp_path, small_config):
    net = build_network(small_config, seed=0)
    path = tmp_path / "net.ckpt"
    save_network(path, net)
    with zipfile.ZipFile(path, "a") as zf:
        zf.writestr("extra.bin", b"surprise")
    with pytest.raises(FormatError):
        load_network(path)


def test_load_rejects_missing_tensor(tmp_path, small_config):
    net = build_network(small_config, seed=0)
    path = tmp_path / "net.ckpt"
    save_network(path, net)
    meta, tensors = read_archive(path)
    names = sorted(tensors)
    del tensors[names[0]]
    write_archive(path, meta, tensors)
    with pytest.raises(FormatError, match="missing"):
        load_network(path)


def test_load_rejects_shape_mismatch(tmp_path, small_config):
    net = build_network(small_config, seed=0)
    path = tmp_path / "net.ckpt"
    save_network(path, net)
    meta, tensors = read_archive(path)
    name = sorted(tensors)[0]
    tensors[name] = np.zeros((2, 2), dtype=np.float32)
    write_archive(path, meta, tensors)
    with pytest.raises(FormatError, match="shape"):
        load_network(path)


def test_generic_archive_round_trip(tmp_path):
    tensors = {
        "alpha": np.arange(6, dtype=np.float32).reshape(2, 3),
        "beta/w": np.full((4,), -1.5, dtype=np.float32),
    }
    path = tmp_path / "blob.ckpt"
    write_archive(path, {"format": "test", "n": 2}, tensors)
    meta, loaded = read_archive(path)
    assert meta == {"format": "test", "n": 2}
    assert set(loaded) == set(tensors)
    for name in tensors:
        assert np.array_equal(loaded[name], tensors[name])
