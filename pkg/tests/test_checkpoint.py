import json

import numpy as np
import pytest

from sdanet.checkpoint import checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint
from sdanet.errors import CheckpointError
from sdanet.model import ModelConfig, build_model, forward


@pytest.fixture
def tiny_params():
    params = build_model(ModelConfig.tiny(), seed=11)
    rng = np.random.default_rng(0)
    for t in params.tensors.values():
        t.data[...] = rng.normal(0, 0.2, t.shape)
    return params


def test_round_trip_is_byte_identical(tmp_path, tiny_params):
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(tiny_params, tiny_params.config, p1)
    params, cfg = load_checkpoint(p1)
    save_checkpoint(params, cfg, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert cfg == tiny_params.config


def test_forward_preserved(tmp_path, tiny_params):
    save_checkpoint(tiny_params, None, tmp_path / "m.ckpt")
    params, _ = load_checkpoint(tmp_path / "m.ckpt")
    x = np.random.default_rng(1).random((1, 1, 16, 16))
    a, b = forward(tiny_params, x), forward(params, x)
    for name, ta in a.maps().items():
        tb = b.maps()[name]
        scale = max(np.abs(ta.data).max(), 1e-12)
        assert np.abs(ta.data - tb.data).max() / scale <= 1e-6, name


def test_header_is_json_line(tiny_params):
    data = checkpoint_bytes(tiny_params)
    header = json.loads(data[:data.index(b"\n")])
    assert header["format"] == "sdanet-checkpoint"
    assert header["blob_elements"] == tiny_params.total()
    assert len(data) - data.index(b"\n") - 1 == 4 * tiny_params.total()


@pytest.mark.parametrize("mutate, match", [
    (lambda d: d[:-4], "blob"),
    (lambda d: d + b"\0\0\0\0", "blob"),
    (lambda d: d[:d.index(b"\n")], "terminator"),
    (lambda d: b"{oops" + d[d.index(b"\n"):], "JSON"),
    (lambda d: d.replace(b"sdanet-checkpoint", b"other-checkpoint1"), "not an SDANet"),
    (lambda d: d.replace(b'"version":1', b'"version":9'), "version"),
])
def test_corruption_detected(tiny_params, mutate, match):
    with pytest.raises(CheckpointError, match=match):
        parse_checkpoint(mutate(checkpoint_bytes(tiny_params)))


def test_config_tensor_mismatch(tiny_params):
    data = checkpoint_bytes(tiny_params)
    nl = data.index(b"\n")
    header = json.loads(data[:nl])
    header["config"]["use_refine"] = False
    bad = json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + data[nl:]
    with pytest.raises(CheckpointError):
        parse_checkpoint(bad)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.ckpt")
