"""Corpus containers and on-disk artifact formats.

Three artifact kinds, all designed for bit-exact round trips:

* feature archives: magic ``FARC``, version u32, then one record per
  utterance (id length u32 + UTF-8 id, rows u32, cols u32, row-major
  little-endian float32) until end of file;
* phone-target files: UTF-8 text, one utterance per line,
  ``utt-id<TAB>space-separated integer labels``;
* manifests: UTF-8 text, one utterance per line,
  ``utt-id<TAB>archive-ref<TAB>language<TAB>transcript[<TAB>phone-ref]``,
  refs resolved relative to the manifest's directory.

The module also provides the low-level length-prefixed string, config
blob, and named-float64-tensor helpers shared by the model and
bottleneck-network checkpoint formats.
"""

import os
import struct
from dataclasses import dataclass, field

import numpy as np

FARC_MAGIC = b"FARC"
FARC_VERSION = 1


@dataclass
class Utterance:
    utt_id: str
    language: str
    transcript: str
    features: np.ndarray = None          # (T, D) float32
    phone_labels: np.ndarray = None      # (T,) int64, optional

    @property
    def frames(self):
        return self.features.shape[0]


def _check_field(value, what):
    if "\t" in value or "\n" in value:
        raise ValueError(f"{what} may not contain tabs or newlines: {value!r}")
    return value


def _write_u32(f, n):
    f.write(struct.pack("<I", n))


def _read_u32(f):
    buf = f.read(4)
    if len(buf) != 4:
        raise ValueError("truncated file: expected u32")
    return struct.unpack("<I", buf)[0]


def _write_str(f, s):
    data = s.encode("utf-8")
    _write_u32(f, len(data))
    f.write(data)


def _read_str(f):
    n = _read_u32(f)
    data = f.read(n)
    if len(data) != n:
        raise ValueError("truncated file: expected string payload")
    return data.decode("utf-8")


# ---------------------------------------------------------------- features

def write_feature_archive(path, records):
    """records: iterable of (utt_id, 2-d float array); stored as float32."""
    with open(path, "wb") as f:
        f.write(FARC_MAGIC)
        _write_u32(f, FARC_VERSION)
        for utt_id, feats in records:
            feats = np.ascontiguousarray(feats, dtype="<f4")
            if feats.ndim != 2:
                raise ValueError(f"features for {utt_id!r} must be 2-d, got {feats.shape}")
            _write_str(f, _check_field(utt_id, "utterance id"))
            _write_u32(f, feats.shape[0])
            _write_u32(f, feats.shape[1])
            f.write(feats.tobytes())


def read_feature_archive(path):
    """Returns {utt_id: (rows, cols) float32 array}, in file order."""
    out = {}
    with open(path, "rb") as f:
        if f.read(4) != FARC_MAGIC:
            raise ValueError(f"{path}: not a feature archive")
        version = _read_u32(f)
        if version != FARC_VERSION:
            raise ValueError(f"{path}: unsupported archive version {version}")
        while True:
            probe = f.read(1)
            if not probe:
                break
            f.seek(-1, os.SEEK_CUR)
            utt_id = _read_str(f)
            rows = _read_u32(f)
            cols = _read_u32(f)
            buf = f.read(rows * cols * 4)
            if len(buf) != rows * cols * 4:
                raise ValueError(f"{path}: truncated record {utt_id!r}")
            out[utt_id] = np.frombuffer(buf, dtype="<f4").reshape(rows, cols).copy()
    return out


# ------------------------------------------------------------ phone targets

def write_phone_targets(path, records):
    """records: iterable of (utt_id, 1-d int labels)."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for utt_id, labels in records:
            labels = np.asarray(labels, dtype=np.int64)
            body = " ".join(str(int(v)) for v in labels)
            f.write(f"{_check_field(utt_id, 'utterance id')}\t{body}\n")


def read_phone_targets(path):
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            utt_id, _, body = line.partition("\t")
            vals = [int(v) for v in body.split()] if body else []
            out[utt_id] = np.array(vals, dtype=np.int64)
    return out


# ---------------------------------------------------------------- manifests

def write_manifest(path, rows):
    """rows: (utt_id, archive_ref, language, transcript[, phone_ref])."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            row = list(row)
            if len(row) == 4:
                row.append(None)
            utt_id, ref, lang, text, phone_ref = row
            for v, what in ((utt_id, "utterance id"), (ref, "archive ref"),
                            (lang, "language id"), (text, "transcript")):
                _check_field(v, what)
            line = f"{utt_id}\t{ref}\t{lang}\t{text}"
            if phone_ref is not None:
                line += f"\t{_check_field(phone_ref, 'phone-target ref')}"
            f.write(line + "\n")


def read_manifest(path):
    rows = []
    with open(path, encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) == 4:
                parts.append(None)
            if len(parts) != 5:
                raise ValueError(f"{path}:{ln}: expected 4 or 5 tab-separated fields")
            rows.append(tuple(parts))
    return rows


def load_corpus(manifest_path):
    """Manifest -> list of Utterance with features (and phone labels) attached."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    rows = read_manifest(manifest_path)
    archives = {}
    phone_files = {}
    utts = []
    for utt_id, ref, lang, text, phone_ref in rows:
        apath = os.path.join(base, ref)
        if apath not in archives:
            archives[apath] = read_feature_archive(apath)
        try:
            feats = archives[apath][utt_id]
        except KeyError:
            raise KeyError(f"{utt_id!r} missing from archive {ref}") from None
        phones = None
        if phone_ref is not None:
            ppath = os.path.join(base, phone_ref)
            if ppath not in phone_files:
                phone_files[ppath] = read_phone_targets(ppath)
            try:
                phones = phone_files[ppath][utt_id]
            except KeyError:
                raise KeyError(f"{utt_id!r} missing from phone targets {phone_ref}") from None
            if phones.shape[0] != feats.shape[0]:
                raise ValueError(
                    f"{utt_id!r}: {phones.shape[0]} phone labels vs {feats.shape[0]} frames")
        utts.append(Utterance(utt_id, lang, text, feats, phones))
    return utts


# ------------------------------------------------- shared checkpoint pieces

def write_config_blob(f, config):
    """dict -> length-prefixed UTF-8 key=value lines, keys sorted."""
    lines = []
    for k in sorted(config):
        v = config[k]
        if "=" in k or "\n" in k:
            raise ValueError(f"bad config key {k!r}")
        v = str(v)
        if "\n" in v:
            raise ValueError(f"bad config value for {k!r}")
        lines.append(f"{k}={v}")
    _write_str(f, "\n".join(lines))


def read_config_blob(f):
    blob = _read_str(f)
    config = {}
    for line in blob.splitlines():
        if not line:
            continue
        k, _, v = line.partition("=")
        config[k] = v
    return config


def write_tensors(f, tensors):
    """tensors: iterable of (name, array); float64 little-endian payload."""
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        _write_str(f, name)
        _write_u32(f, arr.ndim)
        for d in arr.shape:
            _write_u32(f, d)
        f.write(arr.tobytes())


def read_tensors(f):
    """Reads (name, rank, dims, float64 data) records until EOF."""
    out = {}
    while True:
        probe = f.read(1)
        if not probe:
            break
        f.seek(-1, os.SEEK_CUR)
        name = _read_str(f)
        rank = _read_u32(f)
        dims = tuple(_read_u32(f) for _ in range(rank))
        count = int(np.prod(dims)) if dims else 1
        buf = f.read(count * 8)
        if len(buf) != count * 8:
            raise ValueError(f"truncated tensor {name!r}")
        out[name] = np.frombuffer(buf, dtype="<f8").reshape(dims).copy()
    return out
