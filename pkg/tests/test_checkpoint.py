import struct

import numpy as np
import pytest

from fedsynth import checkpoint
from fedsynth.models import GeneratorConfig, ParameterSet, build_generator, export_parameters


def test_roundtrip_bit_exact(tmp_path, rng):
    g = export_parameters(build_generator(GeneratorConfig(resolution=32, base_channels=4), 3))
    odd = ParameterSet([("tiny", np.array([np.float32(1e-45), -0.0, 3.4e38], dtype=np.float32))])
    meta = {"epoch": 7, "seed": 3, "config": {"resolution": 32}}
    path = checkpoint.save(tmp_path / "m.ckpt", {"generator": g, "odd": odd}, meta)
    sets, loaded_meta = checkpoint.load(path)
    assert sets["generator"].equals(g)
    assert sets["odd"].equals(odd)
    assert np.signbit(sets["odd"]["tiny"][1])
    assert loaded_meta == meta


def test_layout_is_little_endian_float32():
    p = ParameterSet([("w", np.array([[1.0, 2.0]], dtype=np.float32))])
    blob = checkpoint.encode({"params": p})
    assert blob[:8] == checkpoint.MAGIC
    (hlen,) = struct.unpack("<I", blob[8:12])
    assert blob[12 + hlen :] == struct.pack("<2f", 1.0, 2.0)
    assert checkpoint.decode_parameter_set(blob).equals(p)
    assert checkpoint.encode_parameter_set(p) == blob


def test_rejects_garbage():
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(b"NOTACKPT" + b"\0" * 8)
    p = ParameterSet([("w", np.ones(4, dtype=np.float32))])
    blob = checkpoint.encode({"params": p})
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(blob[:-4])
    bad_version = blob.replace(b'"format_version": 1', b'"format_version": 9')
    with pytest.raises(checkpoint.CheckpointError, match="version"):
        checkpoint.decode(bad_version)
