"""Readers and writers for the wire formats shared with external tooling.

Formats
-------
ACTV1 (binary, little-endian regardless of host):
    magic ``SGLPACT1`` (8 bytes), u32 layer count ``L``, then per layer:
    u16 name byte-length, UTF-8 name, u32 ``n``, u32 ``d``, and ``n*d``
    IEEE-754 binary32 values in sample-major (row-major) order.

Similarity matrix (text): ``L`` lines of ``L`` comma-separated decimals,
17 significant digits each.

Score table (text): ``segment_index<TAB>keep_mask_hex<TAB>score_decimal``
per record. Blank lines and ``#`` comments are ignored, except that the
directive line ``#!partial`` marks an incomplete export and makes the
whole file unreadable on purpose.

Values are stored binary32; analysis code works in binary64.
"""

from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import dataclass
from typing import BinaryIO, Iterable, TextIO

import numpy as np

from .errors import DataError, FormatError

ACTIVATIONS_MAGIC = b"SGLPACT1"

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")


@dataclass(frozen=True)
class LayerActivations:
    """One layer's captured activations: an (n_samples, n_features) matrix."""

    name: str
    matrix: np.ndarray


@dataclass(frozen=True)
class ActivationSet:
    """Ordered per-layer activations from one forward pass.

    Layer order is the network's forward order and is never permuted.
    Matrices are float32 (the storage type of the ACTV1 format).
    """

    layers: tuple[LayerActivations, ...]

    @classmethod
    def from_matrices(cls, names: Iterable[str], matrices: Iterable[np.ndarray]) -> "ActivationSet":
        layers = tuple(
            LayerActivations(name, np.ascontiguousarray(m, dtype=np.float32))
            for name, m in zip(names, matrices, strict=True)
        )
        out = cls(layers)
        out.validate()
        return out

    def validate(self) -> None:
        if len(self.layers) < 2:
            raise DataError(f"activation set needs at least 2 layers, got {len(self.layers)}")
        n = None
        for i, layer in enumerate(self.layers):
            m = layer.matrix
            if m.ndim != 2:
                raise DataError(f"layer {layer.name!r}: expected a 2-D matrix, got shape {m.shape}")
            if m.shape[0] < 2:
                raise DataError(f"layer {layer.name!r}: need at least 2 samples, got {m.shape[0]}")
            if m.shape[1] < 1:
                raise DataError(f"layer {layer.name!r}: need at least 1 feature")
            if n is None:
                n = m.shape[0]
            elif m.shape[0] != n:
                raise DataError(
                    f"layer {layer.name!r}: sample count {m.shape[0]} differs from first layer's {n}"
                )
            if not np.isfinite(m).all():
                raise DataError(f"layer {layer.name!r}: non-finite activation values")

    @property
    def n_samples(self) -> int:
        return int(self.layers[0].matrix.shape[0])

    @property
    def layer_names(self) -> tuple[str, ...]:
        return tuple(layer.name for layer in self.layers)

    def __len__(self) -> int:
        return len(self.layers)


def write_activations(activation_set: ActivationSet, destination: BinaryIO) -> int:
    """Write an ActivationSet in ACTV1 format; returns the byte count written.

    The set is validated before any byte is emitted.
    """
    activation_set.validate()
    chunks: list[bytes] = [ACTIVATIONS_MAGIC, _U32.pack(len(activation_set.layers))]
    for layer in activation_set.layers:
        name = layer.name.encode("utf-8")
        if len(name) > 0xFFFF:
            raise DataError(f"layer name too long ({len(name)} bytes)")
        n, d = layer.matrix.shape
        chunks.append(_U16.pack(len(name)))
        chunks.append(name)
        chunks.append(_U32.pack(n))
        chunks.append(_U32.pack(d))
        values = np.ascontiguousarray(layer.matrix, dtype="<f4")
        chunks.append(values.tobytes())
    written = 0
    for chunk in chunks:
        destination.write(chunk)
        written += len(chunk)
    return written


def _read_exact(source: BinaryIO, count: int, what: str) -> bytes:
    data = source.read(count)
    if len(data) != count:
        raise FormatError(f"unexpected end of stream while reading {what}")
    return data


def read_activations(source: BinaryIO) -> ActivationSet:
    """Read one ACTV1 record; exact inverse of :func:`write_activations`."""
    magic = source.read(len(ACTIVATIONS_MAGIC))
    if magic != ACTIVATIONS_MAGIC:
        raise FormatError("unrecognized format: bad magic bytes")
    (layer_count,) = _U32.unpack(_read_exact(source, 4, "layer count"))
    layers = []
    shared_n = None
    for index in range(layer_count):
        (name_len,) = _U16.unpack(_read_exact(source, 2, f"layer {index} name length"))
        try:
            name = _read_exact(source, name_len, f"layer {index} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"corrupt data: layer {index} name is not valid UTF-8") from exc
        (n,) = _U32.unpack(_read_exact(source, 4, f"layer {name!r} sample count"))
        (d,) = _U32.unpack(_read_exact(source, 4, f"layer {name!r} feature count"))
        if n < 2 or d < 1:
            raise FormatError(f"corrupt data: layer {name!r} has invalid shape ({n}, {d})")
        if shared_n is None:
            shared_n = n
        elif n != shared_n:
            raise FormatError(
                f"corrupt data: layer {name!r} sample count {n} differs from {shared_n}"
            )
        raw = _read_exact(source, 4 * n * d, f"layer {name!r} values")
        matrix = np.frombuffer(raw, dtype="<f4").reshape(n, d).astype(np.float32)
        if not np.isfinite(matrix).all():
            raise FormatError(f"corrupt data: layer {name!r} contains non-finite values")
        layers.append(LayerActivations(name, matrix))
    if layer_count < 2:
        raise FormatError(f"corrupt data: layer count {layer_count} below minimum of 2")
    return ActivationSet(tuple(layers))


def write_similarity(matrix: np.ndarray, destination: TextIO) -> None:
    """Write a square similarity matrix as comma-separated decimal text."""
    m = np.asarray(matrix, dtype=np.float64)
    _validate_similarity(m, tolerance=1e-9)
    for row in m:
        destination.write(",".join(f"{v:.17g}" for v in row))
        destination.write("\n")


def read_similarity(source: TextIO) -> np.ndarray:
    """Read a similarity matrix written by :func:`write_similarity`.

    Re-validates squareness, symmetry, unit diagonal (tolerance 1e-6) and
    the [0, 1] value range.
    """
    rows = []
    for line_no, line in enumerate(source, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            rows.append([float(field) for field in line.split(",")])
        except ValueError as exc:
            raise FormatError(f"line {line_no}: unparseable value: {exc}") from exc
    if not rows:
        raise FormatError("empty similarity matrix")
    width = len(rows[0])
    if any(len(r) != width for r in rows) or len(rows) != width:
        raise FormatError(
            f"non-square similarity matrix: {len(rows)} rows, row widths {sorted({len(r) for r in rows})}"
        )
    m = np.array(rows, dtype=np.float64)
    _validate_similarity(m, tolerance=1e-6)
    return m


def _validate_similarity(m: np.ndarray, tolerance: float) -> None:
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DataError(f"non-square similarity matrix of shape {m.shape}")
    if not np.isfinite(m).all():
        raise DataError("similarity matrix contains non-finite values")
    asym = float(np.abs(m - m.T).max())
    if asym > tolerance:
        raise DataError(f"similarity matrix asymmetric by {asym:.3g} (tolerance {tolerance:.1g})")
    diag = np.diag(m)
    # Degenerate (constant) layers are pinned to 0 on the diagonal.
    bad = np.abs(diag - 1.0) > tolerance
    bad &= np.abs(diag) > tolerance
    if bad.any():
        i = int(np.argmax(bad))
        raise DataError(f"diagonal entry {i} is {diag[i]:.6g}, expected 1 (or 0 for degenerate layers)")
    if float(m.min()) < -tolerance or float(m.max()) > 1.0 + max(tolerance, 1e-9):
        raise DataError(
            f"similarity values outside [0, 1]: min {m.min():.6g}, max {m.max():.6g}"
        )


@dataclass(frozen=True)
class ScoreRecord:
    segment_index: int
    keep_mask: int
    score: float


@dataclass(frozen=True)
class ScoreTable:
    """Externally computed candidate scores, keyed by (segment, keep mask)."""

    records: tuple[ScoreRecord, ...]

    def as_dict(self) -> dict[tuple[int, int], float]:
        return {(r.segment_index, r.keep_mask): r.score for r in self.records}


def read_score_table(source: TextIO) -> ScoreTable:
    """Parse a score table; rejects duplicates, empty masks and partial files."""
    records: list[ScoreRecord] = []
    seen: dict[tuple[int, int], int] = {}
    for line_no, raw in enumerate(source, start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            if line.lower().startswith("#!partial"):
                raise FormatError(f"line {line_no}: score table is marked partial; refusing to use it")
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise FormatError(f"line {line_no}: expected 3 tab-separated fields, got {len(fields)}")
        try:
            segment_index = int(fields[0], 10)
            keep_mask = int(fields[1], 16)
            score = float(fields[2])
        except ValueError as exc:
            raise FormatError(f"line {line_no}: unparseable field: {exc}") from exc
        if segment_index < 0:
            raise FormatError(f"line {line_no}: negative segment index {segment_index}")
        if keep_mask == 0:
            raise FormatError(f"line {line_no}: keep mask 0 (empty keep-set) is not allowed")
        if not math.isfinite(score):
            raise FormatError(f"line {line_no}: non-finite score")
        key = (segment_index, keep_mask)
        if key in seen:
            raise FormatError(
                f"line {line_no}: duplicate record for segment {segment_index}, "
                f"mask {keep_mask:#x} (first seen on line {seen[key]})"
            )
        seen[key] = line_no
        records.append(ScoreRecord(segment_index, keep_mask, score))
    return ScoreTable(tuple(records))


def write_score_table(table: ScoreTable, destination: TextIO) -> None:
    for r in table.records:
        if r.keep_mask == 0:
            raise DataError("keep mask 0 (empty keep-set) is not allowed")
        destination.write(f"{r.segment_index}\t{r.keep_mask:x}\t{r.score:.17g}\n")


def to_matrix(activations: np.ndarray, mode: str = "flatten") -> np.ndarray:
    """Reshape an (n, ...) activation tensor to an (n, d) matrix.

    ``flatten`` keeps every feature (d = product of trailing dims);
    ``channel-mean`` averages all trailing spatial dims, keeping (n, channels).
    """
    a = np.asarray(activations)
    if a.ndim < 2:
        raise DataError(f"need at least 2 dimensions, got shape {a.shape}")
    if mode == "flatten":
        return a.reshape(a.shape[0], -1)
    if mode == "channel-mean":
        if a.ndim == 2:
            return a
        return a.reshape(a.shape[0], a.shape[1], -1).mean(axis=2)
    raise DataError(f"unknown feature mode {mode!r} (expected 'flatten' or 'channel-mean')")


def atomic_write_bytes(path: os.PathLike | str, data: bytes) -> None:
    """Write a file via a temporary sibling and an atomic rename."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=os.path.basename(path) + ".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: os.PathLike | str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_activations_file(activation_set: ActivationSet, path: os.PathLike | str) -> int:
    import io as _io

    buffer = _io.BytesIO()
    count = write_activations(activation_set, buffer)
    atomic_write_bytes(path, buffer.getvalue())
    return count


def read_activations_file(path: os.PathLike | str) -> ActivationSet:
    with open(path, "rb") as handle:
        return read_activations(handle)


def write_similarity_file(matrix: np.ndarray, path: os.PathLike | str) -> None:
    import io as _io

    buffer = _io.StringIO()
    write_similarity(matrix, buffer)
    atomic_write_text(path, buffer.getvalue())


def read_similarity_file(path: os.PathLike | str) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as handle:
        return read_similarity(handle)


def read_score_table_file(path: os.PathLike | str) -> ScoreTable:
    with open(path, "r", encoding="utf-8") as handle:
        return read_score_table(handle)


def write_score_table_file(table: ScoreTable, path: os.PathLike | str) -> None:
    import io as _io

    buffer = _io.StringIO()
    write_score_table(table, buffer)
    atomic_write_text(path, buffer.getvalue())
