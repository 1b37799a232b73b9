import json
import struct

import numpy as np
import pytest

from modal_distill.checkpoint import MAGIC, load_checkpoint, read_manifest, save_checkpoint
from modal_distill.errors import ConfigHashError, FormatError, ManifestError, PersistenceError, TruncatedError
from modal_distill.networks import NetworkConfig, build_student, build_teacher
from modal_distill.train import params_digest


@pytest.fixture
def saved(tmp_path):
    net = build_student(5, NetworkConfig.desk(n_layers=2), 13)
    rng = np.random.default_rng(0)
    for p in net.named_parameters().values():
        p.data[...] = rng.normal(size=p.shape)  # non-init values
    return net, save_checkpoint(net, tmp_path / "m.ckpt")


def _rewrite_manifest(path, edit):
    raw = path.read_bytes()
    (n,) = struct.unpack_from("<I", raw, 5)
    manifest = json.loads(raw[9 : 9 + n])
    edit(manifest)
    body = json.dumps(manifest).encode()
    path.write_bytes(raw[:5] + struct.pack("<I", len(body)) + body + raw[9 + n :])


def test_roundtrip_bit_exact(saved):
    net, path = saved
    back = load_checkpoint(path)
    a, b = net.named_parameters(), back.named_parameters()
    assert a.keys() == b.keys()
    for k in a:
        assert a[k].data.tobytes() == b[k].data.tobytes()
    assert params_digest(net) == params_digest(back)


@pytest.mark.parametrize("build", [lambda c: build_teacher("audio", c, 1), lambda c: build_student(2, c, 1, "T_up")])
def test_roundtrip_rebuilds_variant(tmp_path, build):
    net = build(NetworkConfig.desk(n_layers=1))
    back = load_checkpoint(save_checkpoint(net, tmp_path / "x.ckpt"))
    assert (back.role, back.variant, back.all_ids) == (net.role, net.variant, net.all_ids)


def test_manifest_contents(saved):
    net, path = saved
    manifest, blob = read_manifest(path)
    assert path.read_bytes()[:4] == MAGIC
    assert manifest["seed"] == 13
    assert sum(e["nbytes"] for e in manifest["params"]) == len(blob)
    first = manifest["params"][0]
    vals = np.frombuffer(blob[first["offset"] : first["offset"] + first["nbytes"]], "<f4")
    np.testing.assert_array_equal(vals, net.named_parameters()[first["name"]].data.ravel())


def test_bad_magic(saved):
    _, path = saved
    path.write_bytes(b"NOPE" + path.read_bytes()[4:])
    with pytest.raises(FormatError) as e:
        load_checkpoint(path)
    assert e.value.exit_code == 5


def test_bad_version(saved):
    _, path = saved
    raw = bytearray(path.read_bytes())
    raw[4] = 7
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_corrupt_manifest_json(saved):
    _, path = saved
    raw = bytearray(path.read_bytes())
    raw[9] = ord("#")
    path.write_bytes(bytes(raw))
    with pytest.raises(ManifestError) as e:
        load_checkpoint(path)
    assert e.value.exit_code == 6


def test_manifest_shape_mismatch(saved):
    _, path = saved
    _rewrite_manifest(path, lambda m: m["params"][0].update(shape=[1, 2, 3]))
    with pytest.raises(ManifestError):
        load_checkpoint(path)


def test_trailing_bytes(saved):
    _, path = saved
    path.write_bytes(path.read_bytes() + b"\0\0\0\0")
    with pytest.raises(ManifestError):
        load_checkpoint(path)


@pytest.mark.parametrize("cut", [3, 200, 8])
def test_truncation(saved, cut):
    _, path = saved
    raw = path.read_bytes()
    path.write_bytes(raw[:cut] if cut < 100 else raw[:-cut])
    with pytest.raises((TruncatedError, FormatError)):
        load_checkpoint(path)


def test_truncated_blob_code(saved):
    _, path = saved
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(TruncatedError) as e:
        load_checkpoint(path)
    assert e.value.exit_code == 7


def test_hash_mismatch_unless_forced(saved):
    net, path = saved
    _rewrite_manifest(path, lambda m: m.update(config_hash="0" * 64))
    with pytest.raises(ConfigHashError) as e:
        load_checkpoint(path)
    assert e.value.exit_code == 9
    back = load_checkpoint(path, force=True)
    assert params_digest(back) == params_digest(net)


def test_expected_config_mismatch(saved):
    _, path = saved
    load_checkpoint(path, expect=NetworkConfig.desk(n_layers=2))
    with pytest.raises(ConfigHashError):
        load_checkpoint(path, expect=NetworkConfig.desk())
    load_checkpoint(path, expect=NetworkConfig.desk(), force=True)


def test_missing_file(tmp_path):
    with pytest.raises(PersistenceError):
        load_checkpoint(tmp_path / "nothing.ckpt")
