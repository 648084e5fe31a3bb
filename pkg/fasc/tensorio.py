#
#   FASC Toolkit - Tensor and Manifest I/O
#
#   Tensor file layout (all little-endian):
#       bytes 0-7    magic "FASCTEN1"
#       byte  8      kind (0 = activation, 1 = gradient)
#       bytes 9-12   layer_id (u32)
#       bytes 13-16  n (u32)
#       bytes 17-20  d (u32)
#       then n*d float32 values, row-major, one sample per row.
#
import json
import logging
import os.path
import struct
from dataclasses import dataclass, field
from typing import List, Optional

import crcmod.predefined
import numpy as np

from .errors import (
    BadMagicError,
    DimensionMismatchError,
    ManifestError,
    NonFiniteValueError,
    TensorFormatError,
    TruncatedPayloadError,
)


MAGIC = b"FASCTEN1"
HEADER_FORMAT = "<8sBIII"
HEADER_SIZE = struct.calcsize(HEADER_FORMAT)
FORMAT_VERSION = 1

KIND_ACTIVATION = "activation"
KIND_GRADIENT = "gradient"
KIND_CODES = {KIND_ACTIVATION: 0, KIND_GRADIENT: 1}
KIND_NAMES = {0: KIND_ACTIVATION, 1: KIND_GRADIENT}

LAYER_KINDS = ("mlp", "attention")

# CRC-16/CCITT-FALSE over the whole file, recorded in the manifest.
file_crc16 = crcmod.predefined.mkPredefinedCrcFun("crc-ccitt-false")


def find_non_finite(data):
    """ Return (row, column) of the first NaN/Inf in a 2D array, or None """
    _mask = ~np.isfinite(data)
    if not _mask.any():
        return None
    _row, _col = np.argwhere(_mask)[0]
    return int(_row), int(_col)


def check_finite(data, source="tensor"):
    _pos = find_non_finite(data)
    if _pos is not None:
        _row, _col = _pos
        raise NonFiniteValueError(
            f"{source}: non-finite value {data[_row, _col]} at row {_row}, column {_col}",
            row=_row,
            column=_col,
        )


@dataclass(frozen=True, eq=False)
class TensorBlock:
    """
    A dense n x d block of samples for one layer.

    Data is stored as read-only float32, which is what lands on disk, so a
    block survives a write/read cycle bit for bit. Use as_float64() for maths.
    """

    layer_id: int
    kind: str
    data: np.ndarray

    def __post_init__(self):
        if self.kind not in KIND_CODES:
            raise ValueError(f"Unknown tensor kind: {self.kind}")
        if not (0 <= int(self.layer_id) < 2 ** 32):
            raise ValueError(f"layer_id out of range: {self.layer_id}")

        _data = np.asarray(self.data)
        if _data.ndim != 2:
            raise DimensionMismatchError(f"Tensor data must be 2D, got shape {_data.shape}")
        if _data.shape[0] < 1 or _data.shape[1] < 1:
            raise DimensionMismatchError(f"Tensor must have n >= 1 and d >= 1, got shape {_data.shape}")

        _data = np.ascontiguousarray(_data, dtype="<f4")
        check_finite(_data, source=f"layer {self.layer_id} {self.kind}")
        if _data is self.data:
            _data = _data.copy()
        _data.setflags(write=False)

        object.__setattr__(self, "layer_id", int(self.layer_id))
        object.__setattr__(self, "data", _data)

    @property
    def n(self):
        return self.data.shape[0]

    @property
    def d(self):
        return self.data.shape[1]

    def as_float64(self):
        return self.data.astype(np.float64)

    def __eq__(self, other):
        if not isinstance(other, TensorBlock):
            return NotImplemented
        return (
            self.layer_id == other.layer_id
            and self.kind == other.kind
            and self.data.shape == other.data.shape
            and np.array_equal(self.data.view(np.uint32), other.data.view(np.uint32))
        )

    __hash__ = None


def check_paired(xs, gs):
    """ Activation and gradient blocks must describe the same samples of the same layer """
    if xs.n != gs.n or xs.d != gs.d:
        raise DimensionMismatchError(
            f"Unpaired blocks: activations {xs.n}x{xs.d}, gradients {gs.n}x{gs.d}"
        )


def write_tensor(block, path):
    """ Write a TensorBlock to disk """
    check_finite(block.data, source=f"layer {block.layer_id} {block.kind}")

    _header = struct.pack(HEADER_FORMAT, MAGIC, KIND_CODES[block.kind], block.layer_id, block.n, block.d)
    with open(path, "wb") as _f:
        _f.write(_header)
        _f.write(block.data.astype("<f4", copy=False).tobytes(order="C"))

    logging.debug(f"Tensor IO - Wrote {block.kind} block for layer {block.layer_id} ({block.n}x{block.d}) to {path}")


def _parse_header(raw, path):
    if len(raw) < len(MAGIC) or raw[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"bad magic in {path}")
    if len(raw) < HEADER_SIZE:
        raise TruncatedPayloadError(f"truncated payload in {path}: incomplete header")

    _magic, _kind, _layer_id, _n, _d = struct.unpack(HEADER_FORMAT, raw[:HEADER_SIZE])
    if _kind not in KIND_NAMES:
        raise TensorFormatError(f"Unknown kind byte {_kind} in {path}")
    if _n < 1 or _d < 1:
        raise TensorFormatError(f"Invalid dimensions {_n}x{_d} in {path}")

    return KIND_NAMES[_kind], _layer_id, _n, _d


def read_header(path):
    """ Read (kind, layer_id, n, d) without touching the payload """
    with open(path, "rb") as _f:
        _raw = _f.read(HEADER_SIZE)
    return _parse_header(_raw, path)


def read_tensor(path):
    """ Read and validate a TensorBlock """
    with open(path, "rb") as _f:
        _raw = _f.read()

    _kind, _layer_id, _n, _d = _parse_header(_raw, path)

    _expected = _n * _d * 4
    _payload = len(_raw) - HEADER_SIZE
    if _payload < _expected:
        raise TruncatedPayloadError(
            f"truncated payload in {path}: header claims {_n}x{_d} ({_n * _d} values), file holds {_payload // 4}"
        )
    if _payload > _expected:
        raise TensorFormatError(f"{path} has {_payload - _expected} trailing bytes after the payload")

    _data = np.frombuffer(_raw, dtype="<f4", count=_n * _d, offset=HEADER_SIZE).reshape(_n, _d)
    check_finite(_data, source=str(path))

    return TensorBlock(layer_id=_layer_id, kind=_kind, data=_data)


@dataclass(frozen=True)
class LayerEntry:
    layer_id: int
    activation: str
    gradient: str
    d: int
    n: int
    layer_kind: str = "mlp"
    activation_crc: Optional[int] = None
    gradient_crc: Optional[int] = None

    def to_dict(self):
        _out = {
            "layer_id": self.layer_id,
            "activation": self.activation,
            "gradient": self.gradient,
            "d": self.d,
            "n": self.n,
            "layer_kind": self.layer_kind,
        }
        if self.activation_crc is not None:
            _out["activation_crc"] = self.activation_crc
        if self.gradient_crc is not None:
            _out["gradient_crc"] = self.gradient_crc
        return _out


@dataclass(frozen=True)
class Manifest:
    layers: List[LayerEntry]
    calibration_tag: str = ""
    format_version: int = FORMAT_VERSION
    root: str = field(default=".", compare=False)

    def path_for(self, filename):
        return os.path.join(self.root, filename)

    def layer_ids(self):
        return [_l.layer_id for _l in self.layers]

    def to_dict(self):
        return {
            "format_version": self.format_version,
            "calibration_tag": self.calibration_tag,
            "layers": [_l.to_dict() for _l in self.layers],
        }


def file_crc(path):
    with open(path, "rb") as _f:
        return file_crc16(_f.read())


def write_manifest(manifest, path):
    with open(path, "w") as _f:
        json.dump(manifest.to_dict(), _f, indent=2)
        _f.write("\n")
    logging.info(f"Tensor IO - Wrote manifest with {len(manifest.layers)} layers: {path}")


def _entry_from_dict(item):
    try:
        _entry = LayerEntry(
            layer_id=int(item["layer_id"]),
            activation=str(item["activation"]),
            gradient=str(item["gradient"]),
            d=int(item["d"]),
            n=int(item["n"]),
            layer_kind=str(item.get("layer_kind", "mlp")),
            activation_crc=item.get("activation_crc"),
            gradient_crc=item.get("gradient_crc"),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ManifestError(f"Malformed layer entry {item!r}: {str(e)}")

    if _entry.layer_kind not in LAYER_KINDS:
        raise ManifestError(f"Layer {_entry.layer_id}: unknown layer_kind {_entry.layer_kind}")
    return _entry


def _verify_entry(manifest, entry):
    for _kind, _name, _crc in (
        (KIND_ACTIVATION, entry.activation, entry.activation_crc),
        (KIND_GRADIENT, entry.gradient, entry.gradient_crc),
    ):
        _path = manifest.path_for(_name)
        if not os.path.isfile(_path):
            raise ManifestError(f"Layer {entry.layer_id}: {_kind} file not found: {_path}")

        try:
            _hkind, _hlayer, _hn, _hd = read_header(_path)
        except TensorFormatError as e:
            raise ManifestError(f"Layer {entry.layer_id}: unreadable {_kind} file - {str(e)}")

        if _hkind != _kind:
            raise ManifestError(f"Layer {entry.layer_id}: {_path} holds {_hkind} data, expected {_kind}")
        if _hlayer != entry.layer_id:
            raise ManifestError(f"Layer {entry.layer_id}: {_path} header says layer {_hlayer}")
        if (_hn, _hd) != (entry.n, entry.d):
            raise ManifestError(
                f"Layer {entry.layer_id}: {_path} header is {_hn}x{_hd}, manifest says {entry.n}x{entry.d}"
            )
        if _crc is not None and file_crc(_path) != int(_crc):
            raise ManifestError(f"Layer {entry.layer_id}: CRC mismatch on {_path}")


def read_manifest(path, verify=True):
    """ Read a manifest, checking every referenced file against its entry """
    try:
        with open(path, "r") as _f:
            _raw = json.load(_f)
    except json.JSONDecodeError as e:
        raise ManifestError(f"Manifest {path} is not valid JSON: {str(e)}")

    if not isinstance(_raw, dict) or "layers" not in _raw:
        raise ManifestError(f"Manifest {path} has no layer list")

    _version = int(_raw.get("format_version", FORMAT_VERSION))
    if _version != FORMAT_VERSION:
        raise ManifestError(f"Unsupported manifest format_version {_version}")

    _layers = [_entry_from_dict(_item) for _item in _raw["layers"]]
    _ids = [_l.layer_id for _l in _layers]
    if len(set(_ids)) != len(_ids):
        raise ManifestError(f"Manifest {path} lists a layer more than once")

    _manifest = Manifest(
        layers=_layers,
        calibration_tag=str(_raw.get("calibration_tag", "")),
        format_version=_version,
        root=os.path.dirname(os.path.abspath(path)),
    )

    if verify:
        for _entry in _layers:
            _verify_entry(_manifest, _entry)

    logging.info(f"Tensor IO - Loaded manifest '{_manifest.calibration_tag}' with {len(_layers)} layers.")
    return _manifest


def load_layer(manifest, entry):
    """ Load and pair the activation and gradient blocks of one manifest entry """
    _xs = read_tensor(manifest.path_for(entry.activation))
    _gs = read_tensor(manifest.path_for(entry.gradient))

    if _xs.kind != KIND_ACTIVATION or _gs.kind != KIND_GRADIENT:
        raise ManifestError(f"Layer {entry.layer_id}: activation/gradient files swapped")
    if _xs.layer_id != _gs.layer_id:
        raise ManifestError(f"Layer {entry.layer_id}: blocks belong to layers {_xs.layer_id} and {_gs.layer_id}")
    check_paired(_xs, _gs)

    return _xs, _gs
