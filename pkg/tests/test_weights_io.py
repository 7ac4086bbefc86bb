import json

import numpy as np
import pytest

from cyclempc.weights_io import (WeightsChecksumError, WeightsFormatError,
                                 WeightsTruncatedError, WeightsVersionError,
                                 export_weights_json, load_weights,
                                 load_weights_json, save_weights)
from oracles import make_test_weights


@pytest.fixture
def weights():
    return make_test_weights(seed=11)


def test_binary_round_trip_exact(tmp_path, weights):
    path = tmp_path / "w.nnw"
    save_weights(weights, path)
    loaded = load_weights(path)
    assert np.array_equal(loaded.to_vector(), weights.to_vector())
    assert np.array_equal(loaded.norm.output_scale, weights.norm.output_scale)
    assert loaded.spec == weights.spec


def test_json_round_trip_exact(tmp_path, weights):
    path = tmp_path / "w.json"
    export_weights_json(weights, path)
    doc = json.loads(path.read_text())
    assert doc["version"] == 1
    loaded = load_weights_json(path)
    assert np.array_equal(loaded.to_vector(), weights.to_vector())


def test_bad_magic_rejected(tmp_path, weights):
    path = tmp_path / "w.nnw"
    save_weights(weights, path)
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(WeightsFormatError):
        load_weights(path)


def test_unsupported_version_rejected(tmp_path, weights):
    path = tmp_path / "w.nnw"
    save_weights(weights, path)
    raw = bytearray(path.read_bytes())
    raw[4] = 99  # version field sits right after the 4-byte magic
    path.write_bytes(bytes(raw))
    with pytest.raises(WeightsVersionError):
        load_weights(path)


def test_payload_corruption_fails_checksum(tmp_path, weights):
    path = tmp_path / "w.nnw"
    save_weights(weights, path)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(WeightsChecksumError):
        load_weights(path)


def test_truncated_file_rejected(tmp_path, weights):
    path = tmp_path / "w.nnw"
    save_weights(weights, path)
    raw = path.read_bytes()
    # files too short for header+trailer report truncation; longer cuts
    # fail the whole-payload crc before any array parsing happens, so
    # they surface as checksum mismatches, which is equally loud
    for cut in (0, 3, 10):
        path.write_bytes(raw[:cut])
        with pytest.raises(WeightsTruncatedError):
            load_weights(path)
    for cut in (len(raw) // 3, len(raw) // 2, len(raw) - 1):
        path.write_bytes(raw[:cut])
        with pytest.raises(WeightsChecksumError):
            load_weights(path)
