"""WFTM model and WFTD dataset files: fixed little-endian layout with a trailing CRC32.

The byte layout is documented in docs/formats.md.
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .conv import ConvSpec, Engine
from .fxp import DatapathSpec, FxpFormat, FxpTensor
from .network import Dataset, LayerKind, LayerSpec, Model, Provenance

MODEL_MAGIC = b"WFTM"
DATASET_MAGIC = b"WFTD"
VERSION = 1

KIND_TAGS = {LayerKind.CONV: 0, LayerKind.FC: 1, LayerKind.RELU: 2, LayerKind.MAXPOOL2: 3, LayerKind.FLATTEN: 4}
TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}
ENGINE_TAGS = {Engine.DIRECT: 0, Engine.WINOGRAD: 1}
TAG_ENGINES = {v: k for k, v in ENGINE_TAGS.items()}
PROVENANCE_TAGS = {Provenance.SELF_LABELED: 0, Provenance.EXTERNAL: 1}
TAG_PROVENANCE = {v: k for k, v in PROVENANCE_TAGS.items()}


class FormatError(ValueError):
    pass


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class CorruptRecordError(FormatError):
    pass


def _word_dtype(word_bits: int) -> str:
    return {8: "<i1", 16: "<i2"}[word_bits]


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"need {n} bytes at offset {self.pos}, file body has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        vals = struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))
        return vals if len(vals) > 1 else vals[0]

    def words(self, count: int, word_bits: int) -> np.ndarray:
        return np.frombuffer(self.take(count * word_bits // 8), dtype=_word_dtype(word_bits)).astype(np.int64)


def _open(data: bytes, magic: bytes) -> tuple[_Reader, int]:
    if len(data) < 4 or data[:4] != magic:
        raise BadMagicError(f"expected magic {magic!r}, found {data[:4]!r}")
    if len(data) < 6:
        raise TruncatedFileError("file ends inside the version field")
    version = struct.unpack("<H", data[4:6])[0]
    if version != VERSION:
        raise UnsupportedVersionError(f"version {version} not supported (expected {VERSION})")
    if len(data) < 10:
        raise TruncatedFileError("file ends inside the length field")
    total = struct.unpack("<I", data[6:10])[0]
    if len(data) < total:
        raise TruncatedFileError(f"file has {len(data)} bytes, header declares {total}")
    if len(data) > total or total < 14:
        raise CorruptRecordError(f"file has {len(data)} bytes, header declares {total}")
    body, crc = data[:-4], struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(body) != crc:
        raise ChecksumError(f"CRC32 mismatch: stored {crc:#010x}, computed {zlib.crc32(body):#010x}")
    r = _Reader(body)
    r.pos = 10
    return r, version


def _header(magic: bytes) -> bytearray:
    # total length is patched in by _seal
    return bytearray(magic + struct.pack("<HI", VERSION, 0))


def _seal(body: bytearray) -> bytes:
    body[6:10] = struct.pack("<I", len(body) + 4)
    return bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)))


def model_to_bytes(model: Model) -> bytes:
    fmt, dp = model.fmt, model.dp
    name = model.name.encode("utf-8")
    out = _header(MODEL_MAGIC)
    out += struct.pack("<BBBBB", fmt.word_bits, fmt.frac_bits, dp.mul_out_bits, dp.acc_bits, int(dp.wrap_on_overflow))
    out += struct.pack("<HHHH", *model.input_shape, model.num_classes)
    out += struct.pack("<Q", model.seed & (2**64 - 1))
    out += struct.pack("<H", len(name)) + name
    out += struct.pack("<H", len(model.layers))
    dt = _word_dtype(fmt.word_bits)
    for i, l in enumerate(model.layers):
        out += struct.pack("<B", KIND_TAGS[l.kind])
        if l.kind == LayerKind.CONV:
            s = l.conv
            out += struct.pack("<HHHHBBBB", s.in_channels, s.out_channels, s.height, s.width, s.kernel, s.stride,
                               s.padding, ENGINE_TAGS[l.engine])
        elif l.kind == LayerKind.FC:
            out += struct.pack("<II", l.n_in, l.n_out)
        if l.weighted:
            w = model.weights[i].data.reshape(-1)
            out += struct.pack("<I", w.size) + w.astype(dt).tobytes()
    return _seal(out)


def model_from_bytes(data: bytes) -> Model:
    r, _ = _open(data, MODEL_MAGIC)
    wb, fb, mob, ab, wrap = r.unpack("BBBBB")
    if wb not in (8, 16):
        raise CorruptRecordError(f"word_bits {wb} not in {{8, 16}}")
    fmt = FxpFormat(wb, fb)
    dp = DatapathSpec(mob, ab, bool(wrap))
    c, h, w, ncls = r.unpack("HHHH")
    seed = r.unpack("Q")
    name = r.take(r.unpack("H")).decode("utf-8")
    n_layers = r.unpack("H")
    layers, weights = [], {}
    for i in range(n_layers):
        tag = r.unpack("B")
        if tag not in TAG_KINDS:
            raise CorruptRecordError(f"layer {i}: unknown kind tag {tag}")
        kind = TAG_KINDS[tag]
        if kind == LayerKind.CONV:
            ci, co, hh, ww, k, st, pad, eng = r.unpack("HHHHBBBB")
            if eng not in TAG_ENGINES:
                raise CorruptRecordError(f"layer {i}: unknown engine tag {eng}")
            spec = ConvSpec(ci, co, hh, ww, padding=pad, kernel=k, stride=st)
            layers.append(LayerSpec(kind, conv=spec, engine=TAG_ENGINES[eng]))
            shape = (co, ci, k, k)
        elif kind == LayerKind.FC:
            n_in, n_out = r.unpack("II")
            layers.append(LayerSpec(kind, n_in=n_in, n_out=n_out))
            shape = (n_out, n_in)
        else:
            layers.append(LayerSpec(kind))
            continue
        count = r.unpack("I")
        if count != int(np.prod(shape)):
            raise CorruptRecordError(f"layer {i}: {count} weights for shape {shape}")
        weights[i] = FxpTensor(r.words(count, wb).reshape(shape), fmt)
    if r.pos != len(r.buf):
        raise CorruptRecordError(f"{len(r.buf) - r.pos} trailing bytes before checksum")
    return Model(name, layers, weights, fmt, (c, h, w), ncls, dp, seed)


def dataset_to_bytes(ds: Dataset) -> bytes:
    fmt = ds.inputs.fmt
    n, c, h, w = ds.inputs.shape
    out = _header(DATASET_MAGIC)
    out += struct.pack("<BBB", fmt.word_bits, fmt.frac_bits, PROVENANCE_TAGS[ds.provenance])
    out += struct.pack("<IHHHH", n, c, h, w, ds.num_classes)
    out += ds.inputs.data.reshape(-1).astype(_word_dtype(fmt.word_bits)).tobytes()
    out += ds.labels.astype("<u2").tobytes()
    return _seal(out)


def dataset_from_bytes(data: bytes) -> Dataset:
    r, _ = _open(data, DATASET_MAGIC)
    wb, fb, prov = r.unpack("BBB")
    if wb not in (8, 16):
        raise CorruptRecordError(f"word_bits {wb} not in {{8, 16}}")
    if prov not in TAG_PROVENANCE:
        raise CorruptRecordError(f"unknown provenance tag {prov}")
    fmt = FxpFormat(wb, fb)
    n, c, h, w, ncls = r.unpack("IHHHH")
    x = r.words(n * c * h * w, wb).reshape(n, c, h, w)
    labels = np.frombuffer(r.take(2 * n), dtype="<u2").astype(np.int64)
    if r.pos != len(r.buf):
        raise CorruptRecordError(f"{len(r.buf) - r.pos} trailing bytes before checksum")
    return Dataset(FxpTensor(x, fmt), labels, ncls, TAG_PROVENANCE[prov])


def save_model(model: Model, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> Model:
    return model_from_bytes(Path(path).read_bytes())


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def load_dataset(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())
