"""Binary model files.

Layout: an 8-byte magic, a little-endian uint32 format version, then
length-prefixed sections (4-byte tag, uint64 length, payload) ending
with an ``END`` section.  Arrays are stored as little-endian float64 so
a save/load round trip is bit-exact.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from .data import Vocab
from .engine import AlphaSchedule, BranchyModel, ThresholdSet
from .errors import FormatError, VersionError
from .models import ArchSpec, init_parameters

MAGIC = b"BRANCHY\x00"
FORMAT_VERSION = 1
SECTIONS = (b"CONF", b"VOCB", b"LABL", b"THRS", b"PARM")


def _json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _section(tag, payload):
    return tag + struct.pack("<Q", len(payload)) + payload


def _encode_params(model):
    out = io.BytesIO()
    named = list(model.named_parameters())
    out.write(struct.pack("<I", len(named)))
    for name, p in named:
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)) + raw)
        out.write(struct.pack("<B", p.data.ndim))
        out.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        out.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return out.getvalue()


def model_bytes(model):
    meta = {
        "arch": {
            "kind": model.arch.kind,
            "vocab_size": model.arch.vocab_size,
            "embed_dim": model.arch.embed_dim,
            "hidden_sizes": list(model.arch.hidden_sizes),
            "n_classes": model.arch.n_classes,
            "trainable_embeddings": model.arch.trainable_embeddings,
        },
        "alpha": {"r_l": model.alphas.r_l, "r_u": model.alphas.r_u, "mode": model.alphas.mode},
        "max_len": model.max_len,
        "config": model.config,
    }
    vocab = model.vocab.index_to_token if model.vocab is not None else None
    thresholds = list(model.thresholds.thresholds) if model.thresholds is not None else []
    parts = [
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        _section(b"CONF", _json(meta)),
        _section(b"VOCB", _json(vocab)),
        _section(b"LABL", _json(model.label_names)),
        _section(b"THRS", struct.pack("<I", len(thresholds)) + np.asarray(thresholds, dtype="<f8").tobytes()),
        _section(b"PARM", _encode_params(model)),
        _section(b"END\x00", b""),
    ]
    return b"".join(parts)


def persist_model(model, path):
    with open(path, "wb") as fh:
        fh.write(model_bytes(model))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError("model file is truncated")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _decode_json(payload, tag):
    try:
        return json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise FormatError(f"section {tag!r} is corrupt: {err}") from None


def _decode_params(payload):
    r = _Reader(payload)
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8", errors="replace")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    return params


def model_from_bytes(buf):
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError("not a model file (bad magic)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise VersionError(f"model file format version {version}, this library reads version {FORMAT_VERSION}")
    sections = {}
    while True:
        tag = r.take(4)
        (length,) = r.unpack("<Q")
        payload = r.take(length)
        if tag == b"END\x00":
            break
        sections[tag] = payload
    missing = [t.decode() for t in SECTIONS if t not in sections]
    if missing:
        raise FormatError(f"model file lacks sections {missing}")

    meta = _decode_json(sections[b"CONF"], "CONF")
    vocab = _decode_json(sections[b"VOCB"], "VOCB")
    labels = _decode_json(sections[b"LABL"], "LABL")
    tr = _Reader(sections[b"THRS"])
    (n_thr,) = tr.unpack("<I")
    thresholds = np.frombuffer(tr.take(8 * n_thr), dtype="<f8").tolist()
    arrays = _decode_params(sections[b"PARM"])

    try:
        arch = ArchSpec(**meta["arch"])
        alpha = meta["alpha"]
        parts = init_parameters(arch, 0)
        model = BranchyModel(
            arch,
            parts.embedding,
            parts.backbone,
            parts.heads,
            AlphaSchedule(alpha["r_l"], alpha["r_u"], len(arch.hidden_sizes), alpha["mode"]),
            max_len=meta["max_len"],
            vocab=Vocab(vocab) if vocab is not None else None,
            label_names=labels,
            config=meta["config"],
        )
    except (KeyError, TypeError) as err:
        raise FormatError(f"model metadata is incomplete: {err}") from None
    named = dict(model.named_parameters())
    if set(named) != set(arrays):
        raise FormatError("stored parameters do not match the declared architecture")
    for name, p in named.items():
        if p.data.shape != arrays[name].shape:
            raise FormatError(f"parameter {name} has shape {arrays[name].shape}, expected {p.data.shape}")
        p.data = arrays[name].copy()
    if thresholds:
        model.thresholds = ThresholdSet(thresholds, arch.n_classes)
    return model


def load_model(path):
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
