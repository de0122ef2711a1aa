import json
import struct

import numpy as np
import pytest

from dogm.errors import ConfigError, DataError
from dogm.nn.checkpoint import (
    MAGIC, checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint,
)
from dogm.nn.network import NetConfig, Network, gradcheck_config, init
from dogm.nn.training import Adam


def _trained():
    net = Network(gradcheck_config())
    opt = Adam(lr=3e-3, clip_norm=5.0)
    rng = np.random.default_rng(0)
    for _ in range(3):
        opt.update(net.params, {k: rng.normal(size=v.shape) for k, v in net.params.items()})
    return net, opt


def test_round_trip_bit_exact(tmp_path):
    net, opt = _trained()
    path = tmp_path / "a.dgmw"
    save_checkpoint(path, net, opt)
    ck = load_checkpoint(path)
    assert ck.iteration == 3
    assert ck.network.config == net.config
    for k in net.params:
        assert ck.network.params[k].dtype == net.params[k].dtype
        assert np.array_equal(ck.network.params[k], net.params[k])
        assert np.array_equal(ck.optimizer.m[k], opt.m[k])
        assert np.array_equal(ck.optimizer.v[k], opt.v[k])
    assert (ck.optimizer.lr, ck.optimizer.clip_norm) == (3e-3, 5.0)
    save_checkpoint(tmp_path / "b.dgmw", ck.network, ck.optimizer)
    assert (tmp_path / "b.dgmw").read_bytes() == path.read_bytes()
    assert not (tmp_path / "a.dgmw.tmp").exists()


def test_round_trip_float32_without_optimizer():
    net = init(NetConfig(input_size=81, level_channels=(4, 4, 4, 4), skip_state_channels=(2, 2, 2),
                         bottleneck_channels=4))
    buf = checkpoint_bytes(net)
    ck = checkpoint_from_bytes(buf)
    assert ck.optimizer is None and ck.iteration == 0
    assert all(ck.network.params[k].dtype == np.float32 for k in net.params)
    assert checkpoint_bytes(ck.network) == buf


def test_layout_prefix():
    net, _ = _trained()
    buf = checkpoint_bytes(net)
    magic, version, hlen = struct.unpack_from("<4sII", buf)
    assert magic == MAGIC and version == 1
    header = json.loads(buf[12:12 + hlen])
    assert header["config"]["input_size"] == 12
    assert [t[0] for t in header["tensors"]] == sorted(net.params)


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + struct.pack("<I", 9) + b[8:],
    lambda b: b[:-1],
    lambda b: b + b"\0",
    lambda b: b[:8] + struct.pack("<I", 5) + b[12:],
    lambda b: b[:6],
])
def test_corrupt_files_rejected(mutate):
    net, opt = _trained()
    with pytest.raises(DataError):
        checkpoint_from_bytes(mutate(checkpoint_bytes(net, opt)))


def test_missing_file(tmp_path):
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "nope.dgmw")


def test_config_parameter_mismatch():
    net, _ = _trained()
    buf = checkpoint_bytes(net)
    _, _, hlen = struct.unpack_from("<4sII", buf)
    header = json.loads(buf[12:12 + hlen])
    header["config"]["level_channels"] = [3, 3]
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    bad = struct.pack("<4sII", MAGIC, 1, len(hb)) + hb + buf[12 + hlen:]
    with pytest.raises(ConfigError):
        checkpoint_from_bytes(bad)


def test_resumed_training_matches_uninterrupted():
    net_a, opt_a = _trained()
    ck = checkpoint_from_bytes(checkpoint_bytes(net_a, opt_a))
    net_b, opt_b = ck.network, ck.optimizer
    g = {k: np.full(v.shape, 0.3) for k, v in net_a.params.items()}
    opt_a.update(net_a.params, g)
    opt_b.update(net_b.params, g)
    assert opt_b.iteration == 4
    assert all(np.array_equal(net_a.params[k], net_b.params[k]) for k in g)
