"""Dataset directory layout and the two on-disk formats.

    labels/NNNN.pgm    16-bit binary portable graymap (P5, maxval 65535),
                       one label per pixel, 65535 = ignore. Samples are
                       two bytes each, most significant byte first, per the
                       netpbm convention.
    features/NNNN.bin  magic "RRKF", then u32 H, W, D and H*W*D float32
                       values, all little-endian.
    meta.txt           frequency-cache format (see stats module) with a
                       checksum over the emitted label file names.

The same layout is the ingestion format for user-supplied real data.
"""

from __future__ import annotations

import os
import re

import numpy as np

from .stats import FrequencyTable, file_list_checksum, load_frequency_cache, save_frequency_cache

FEATURE_MAGIC = b"RRKF"


class DataFormatError(ValueError):
    """A dataset file does not match the declared layout."""


def write_pgm(path, labels: np.ndarray) -> None:
    """Write a label grid as a 16-bit binary PGM."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError("labels must be a 2-d grid")
    if labels.min() < 0 or labels.max() > 65535:
        raise ValueError("labels must fit in 16 bits")
    h, w = labels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode())
        fh.write(labels.astype(">u2").tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into a uint16 grid (8-bit files are widened)."""
    with open(path, "rb") as fh:
        data = fh.read()
    # Header: magic, width, height, maxval, separated by whitespace with
    # optional '#' comment lines, then a single whitespace byte before data.
    pos = 0
    tokens = []
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n)*\s*(\S+)").match(data, pos)
        if m is None:
            raise DataFormatError(f"{path}: truncated header")
        tokens.append(m.group(2))
        pos = m.end()
    if tokens[0] != b"P5":
        raise DataFormatError(f"{path}: not a binary graymap (got {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataFormatError(f"{path}: non-numeric header field") from None
    pos += 1  # single whitespace after maxval
    dtype = ">u2" if maxval > 255 else "u1"
    expect = h * w * (2 if maxval > 255 else 1)
    raw = data[pos : pos + expect]
    if len(raw) != expect:
        raise DataFormatError(f"{path}: expected {expect} sample bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=dtype).reshape(h, w).astype(np.uint16)


def write_features(path, features: np.ndarray) -> None:
    """Write an H x W x D feature tensor in the RRKF binary format."""
    features = np.asarray(features)
    if features.ndim != 3:
        raise ValueError("features must be H x W x D")
    h, w, d = features.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(np.array([h, w, d], dtype="<u4").tobytes())
        fh.write(features.astype("<f4").tobytes())


def read_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FEATURE_MAGIC:
            raise DataFormatError(f"{path}: bad magic {magic!r}")
        dims = np.frombuffer(fh.read(12), dtype="<u4")
        if len(dims) != 3:
            raise DataFormatError(f"{path}: truncated dimension header")
        h, w, d = (int(v) for v in dims)
        raw = fh.read(h * w * d * 4)
    if len(raw) != h * w * d * 4:
        raise DataFormatError(f"{path}: expected {h * w * d} floats, file is short")
    return np.frombuffer(raw, dtype="<f4").reshape(h, w, d).copy()


def _index_name(i: int, n: int) -> str:
    return str(i).zfill(max(4, len(str(max(n - 1, 0)))))


def save_dataset(root, labels: list, features: list | None, table: FrequencyTable) -> None:
    """Write label maps, optional features, and the frequency meta file."""
    root = os.fspath(root)
    os.makedirs(os.path.join(root, "labels"), exist_ok=True)
    if features is not None:
        os.makedirs(os.path.join(root, "features"), exist_ok=True)
    n = len(labels)
    names = []
    for i, lab in enumerate(labels):
        name = _index_name(i, n)
        write_pgm(os.path.join(root, "labels", f"{name}.pgm"), lab)
        names.append(f"labels/{name}.pgm")
        if features is not None:
            write_features(os.path.join(root, "features", f"{name}.bin"), features[i])
    save_frequency_cache(os.path.join(root, "meta.txt"), table, file_list_checksum(names))


def list_label_files(root) -> list[str]:
    label_dir = os.path.join(os.fspath(root), "labels")
    if not os.path.isdir(label_dir):
        raise DataFormatError(f"{root}: missing labels/ directory")
    return sorted(
        os.path.join(label_dir, f) for f in os.listdir(label_dir) if f.endswith(".pgm")
    )


def load_dataset(root, with_features: bool = True):
    """Read a dataset directory back: (labels, features-or-None, meta-or-None)."""
    root = os.fspath(root)
    label_files = list_label_files(root)
    if not label_files:
        raise DataFormatError(f"{root}: no images (labels/ holds no .pgm files)")
    labels = [read_pgm(p) for p in label_files]
    features = None
    if with_features:
        feat_dir = os.path.join(root, "features")
        if os.path.isdir(feat_dir):
            features = []
            for p in label_files:
                stem = os.path.splitext(os.path.basename(p))[0]
                fpath = os.path.join(feat_dir, f"{stem}.bin")
                if not os.path.isfile(fpath):
                    raise DataFormatError(f"{fpath}: feature file missing for {stem}.pgm")
                features.append(read_features(fpath))
    meta = None
    meta_path = os.path.join(root, "meta.txt")
    if os.path.isfile(meta_path):
        meta, _ = load_frequency_cache(meta_path)
    return labels, features, meta
