"""Versioned binary weights container plus a lossless JSON export.

Layout (all little-endian):

    magic      4 bytes  b"NNW1"
    version    u32      currently 1
    n_layers   u32
    per layer: kind u8 (0 dense, 1 lstm), activation u8 (0 tanh,
               1 linear, 2 sigmoid), pad u16 = 0, in u32, out u32
    n_in, n_out  u32 each (normalization channel counts)
    f64[n_in]  input offsets, f64[n_in] input scales
    f64[n_out] output offsets, f64[n_out] output scales
    n_params   u64
    f64[n_params] parameters (layer order; dense: W row-major then b;
               lstm: Wi Wf Wg Wo Ui Uf Ug Uo bi bf bg bo)
    crc32      u32 over everything above

Corruption anywhere before the trailer flips the CRC, so a damaged file
raises a checksum error instead of loading garbage.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .network import (
    DenseWeights,
    LayerSpec,
    LstmWeights,
    NetworkSpec,
    NetworkWeights,
    Normalization,
    zero_weights,
)

MAGIC = b"NNW1"
FORMAT_VERSION = 1

_KIND_CODES = {"dense": 0, "lstm": 1}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}
_ACT_CODES = {"tanh": 0, "linear": 1, "sigmoid": 2}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}

_HEAD = struct.Struct("<4sII")
_LAYER = struct.Struct("<BBHII")
_NORM_COUNTS = struct.Struct("<II")
_NPARAMS = struct.Struct("<Q")
_CRC = struct.Struct("<I")


class WeightsIOError(Exception):
    """Base class for weights-file errors."""


class WeightsFormatError(WeightsIOError):
    """Bad magic or malformed structure."""


class WeightsVersionError(WeightsIOError):
    """File declares an unsupported format version."""


class WeightsChecksumError(WeightsIOError):
    """CRC32 trailer does not match the payload."""


class WeightsTruncatedError(WeightsIOError):
    """File is shorter than its own declared contents."""


def _pack(weights: NetworkWeights) -> bytes:
    parts = [_HEAD.pack(MAGIC, FORMAT_VERSION, len(weights.spec.layers))]
    for ls in weights.spec.layers:
        parts.append(_LAYER.pack(_KIND_CODES[ls.kind], _ACT_CODES[ls.activation],
                                 0, ls.input_width, ls.output_width))
    norm = weights.norm
    n_in = norm.input_offset.size
    n_out = norm.output_offset.size
    parts.append(_NORM_COUNTS.pack(n_in, n_out))
    for arr in (norm.input_offset, norm.input_scale,
                norm.output_offset, norm.output_scale):
        parts.append(np.asarray(arr, dtype="<f8").tobytes())
    vec = weights.to_vector()
    parts.append(_NPARAMS.pack(vec.size))
    parts.append(vec.astype("<f8").tobytes())
    payload = b"".join(parts)
    return payload + _CRC.pack(zlib.crc32(payload))


def save_weights(weights: NetworkWeights, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_pack(weights))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise WeightsTruncatedError(
                f"needed {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def load_weights(path) -> NetworkWeights:
    with open(path, "rb") as fh:
        data = fh.read()

    if len(data) < _HEAD.size + _CRC.size:
        raise WeightsTruncatedError(f"file is only {len(data)} bytes")
    magic = data[:4]
    if magic != MAGIC:
        raise WeightsFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise WeightsVersionError(
            f"unsupported weights format version {version}, "
            f"this build reads version {FORMAT_VERSION}")
    payload, trailer = data[:-_CRC.size], data[-_CRC.size:]
    (stored_crc,) = _CRC.unpack(trailer)
    actual_crc = zlib.crc32(payload)
    if stored_crc != actual_crc:
        raise WeightsChecksumError(
            f"crc mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}")

    rd = _Reader(payload)
    _, _, n_layers = _HEAD.unpack(rd.take(_HEAD.size))
    layer_specs = []
    for _ in range(n_layers):
        kind, act, _pad, win, wout = _LAYER.unpack(rd.take(_LAYER.size))
        if kind not in _KIND_NAMES or act not in _ACT_NAMES:
            raise WeightsFormatError(f"unknown layer kind/activation codes {kind}/{act}")
        layer_specs.append(LayerSpec(_KIND_NAMES[kind], win, wout, _ACT_NAMES[act]))
    spec = NetworkSpec(tuple(layer_specs))

    n_in, n_out = _NORM_COUNTS.unpack(rd.take(_NORM_COUNTS.size))

    def read_f64(n):
        return np.frombuffer(rd.take(8 * n), dtype="<f8").astype(float)

    norm = Normalization(read_f64(n_in), read_f64(n_in),
                         read_f64(n_out), read_f64(n_out))
    norm.validate()
    (n_params,) = _NPARAMS.unpack(rd.take(_NPARAMS.size))
    weights = zero_weights(spec, norm)
    if n_params != weights.parameter_count:
        raise WeightsFormatError(
            f"file declares {n_params} parameters, spec implies "
            f"{weights.parameter_count}")
    weights.from_vector(read_f64(n_params))
    if rd.pos != len(payload):
        raise WeightsFormatError(f"{len(payload) - rd.pos} unexpected trailing bytes")
    return weights


# ---------------------------------------------------------------------------
# human-readable export

def export_weights_json(weights: NetworkWeights, path) -> None:
    """Diff-friendly text twin of the binary file.

    Floats serialize via repr so a round trip is bit-lossless.
    """
    doc = {
        "format": "cyclempc-weights",
        "version": FORMAT_VERSION,
        "layers": [
            {"kind": ls.kind, "activation": ls.activation,
             "input_width": ls.input_width, "output_width": ls.output_width}
            for ls in weights.spec.layers
        ],
        "normalization": {
            "input_offset": weights.norm.input_offset.tolist(),
            "input_scale": weights.norm.input_scale.tolist(),
            "output_offset": weights.norm.output_offset.tolist(),
            "output_scale": weights.norm.output_scale.tolist(),
        },
        "parameter_count": weights.parameter_count,
        "parameters": weights.to_vector().tolist(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_weights_json(path) -> NetworkWeights:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "cyclempc-weights":
        raise WeightsFormatError("not a cyclempc weights export")
    if doc.get("version") != FORMAT_VERSION:
        raise WeightsVersionError(f"unsupported export version {doc.get('version')}")
    spec = NetworkSpec(tuple(
        LayerSpec(l["kind"], l["input_width"], l["output_width"], l["activation"])
        for l in doc["layers"]))
    nm = doc["normalization"]
    norm = Normalization(*(np.asarray(nm[k], dtype=float) for k in
                           ("input_offset", "input_scale",
                            "output_offset", "output_scale")))
    norm.validate()
    weights = zero_weights(spec, norm)
    vec = np.asarray(doc["parameters"], dtype=float)
    if vec.size != weights.parameter_count:
        raise WeightsFormatError("parameter count mismatch in export")
    weights.from_vector(vec)
    return weights
