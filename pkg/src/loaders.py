"""Reading and writing observation and feature files.

Formats:
    Observations: whitespace-separated text, ``k`` 1-based index columns and
        one value column per line; lines starting with ``%`` are comments.
    Dense features: CSV, one row per instance.
    Sparse features: header line ``%%shape N F`` followed by 1-based
        ``row col value`` triplets.
"""

from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import scipy.sparse

from .errors import ParseError
from .logger import get_logger
from .model import FeatureMatrix, Observations

logger = get_logger(__name__)

PathLike = Union[str, Path]
FEATURE_FORMATS = ("dense-csv", "sparse-triplet")
SHAPE_HEADER = "%%shape"


def _data_lines(path: PathLike) -> List[Tuple[int, str]]:
    """Return ``(line number, stripped text)`` for every non-comment, non-blank line."""
    with open(path, "r", encoding="utf-8") as handle:
        return [
            (number, text)
            for number, text in ((n, line.strip()) for n, line in enumerate(handle, 1))
            if text and not text.startswith("%")
        ]


def load_observations(path: PathLike, degree: int) -> Observations:
    """Parse an observation file of a degree-``degree`` relation.

    Indices are converted from the file's 1-based convention to 0-based storage.

    Raises:
        ParseError: On a wrong column count, a non-integer or nonpositive index,
            or a non-numeric value; the error names the line.
    """
    path = str(path)
    indices: List[List[int]] = []
    values: List[float] = []
    for number, text in _data_lines(path):
        fields = text.split()
        if len(fields) != degree + 1:
            raise ParseError(
                f"expected {degree + 1} columns ({degree} indices + value), "
                f"got {len(fields)}",
                path,
                number,
            )
        try:
            index = [int(f) for f in fields[:degree]]
            value = float(fields[degree])
        except ValueError as exc:
            raise ParseError(f"cannot parse '{text}': {exc}", path, number) from None
        if min(index) < 1:
            raise ParseError("indices are 1-based and must be >= 1", path, number)
        indices.append([i - 1 for i in index])
        values.append(value)

    logger.info(f"Loaded {len(values)} observations from {path}")
    if not indices:
        return Observations(np.empty((0, degree), dtype=np.int64), np.empty(0))
    return Observations(np.array(indices, dtype=np.int64), np.array(values))


def save_observations(path: PathLike, observations: Observations) -> None:
    """Write observations in the 1-based text format; floats round-trip exactly."""
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(f"% {observations.degree} index columns, 1 value column\n")
        for row, value in zip(observations.indices, observations.values):
            handle.write(" ".join(str(int(i) + 1) for i in row))
            handle.write(f" {float(value)!r}\n")


def _load_dense(path: str) -> np.ndarray:
    try:
        matrix = np.loadtxt(path, delimiter=",", comments="%", ndmin=2)
    except ValueError as exc:
        raise ParseError(f"invalid dense feature CSV: {exc}", path) from None
    if matrix.size == 0:
        raise ParseError("dense feature file has no rows", path)
    return matrix


def _load_sparse(path: str) -> scipy.sparse.csr_matrix:
    shape: Optional[Tuple[int, int]] = None
    rows: List[int] = []
    cols: List[int] = []
    data: List[float] = []
    with open(path, "r", encoding="utf-8") as handle:
        for number, line in enumerate(handle, 1):
            text = line.strip()
            if text.startswith(SHAPE_HEADER):
                fields = text.split()
                try:
                    shape = (int(fields[1]), int(fields[2]))
                except (IndexError, ValueError):
                    raise ParseError(
                        f"header must read '{SHAPE_HEADER} N F'", path, number
                    ) from None
                continue
            if not text or text.startswith("%"):
                continue
            if shape is None:
                raise ParseError(
                    f"missing '{SHAPE_HEADER} N F' header before triplets", path, number
                )
            fields = text.split()
            if len(fields) != 3:
                raise ParseError(
                    f"expected 'row col value', got {len(fields)} columns", path, number
                )
            try:
                row, col, value = int(fields[0]), int(fields[1]), float(fields[2])
            except ValueError as exc:
                raise ParseError(f"cannot parse '{text}': {exc}", path, number) from None
            if not (1 <= row <= shape[0] and 1 <= col <= shape[1]):
                raise ParseError(
                    f"entry ({row}, {col}) outside declared shape {shape}", path, number
                )
            rows.append(row - 1)
            cols.append(col - 1)
            data.append(value)

    if shape is None:
        raise ParseError(f"missing '{SHAPE_HEADER} N F' header", path)
    matrix = scipy.sparse.coo_matrix((data, (rows, cols)), shape=shape)
    if len(set(zip(rows, cols))) != len(data):
        raise ParseError("duplicate (row, col) entries", path)
    return matrix.tocsr()


def load_features(path: PathLike, fmt: str = "dense-csv") -> FeatureMatrix:
    """Load an entity or relation feature matrix.

    Args:
        path: Feature file.
        fmt: ``"dense-csv"`` or ``"sparse-triplet"``.

    Returns:
        Dense ``numpy`` array or CSR matrix.

    Raises:
        ParseError: On malformed content, ragged CSV rows, or a missing shape header.
    """
    path = str(path)
    if fmt == "dense-csv":
        matrix: FeatureMatrix = _load_dense(path)
    elif fmt == "sparse-triplet":
        matrix = _load_sparse(path)
    else:
        raise ParseError(f"unknown feature format '{fmt}'; use one of {FEATURE_FORMATS}", path)
    logger.info(f"Loaded {matrix.shape[0]}x{matrix.shape[1]} {fmt} features from {path}")
    return matrix


def save_features(path: PathLike, matrix: FeatureMatrix) -> None:
    """Write dense features as CSV, sparse ones as shaped triplets."""
    if scipy.sparse.issparse(matrix):
        coo = scipy.sparse.coo_matrix(matrix)
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(f"{SHAPE_HEADER} {coo.shape[0]} {coo.shape[1]}\n")
            for row, col, value in zip(coo.row, coo.col, coo.data):
                handle.write(f"{int(row) + 1} {int(col) + 1} {float(value)!r}\n")
    else:
        np.savetxt(path, np.asarray(matrix, dtype=float), delimiter=",", fmt="%.17g")
