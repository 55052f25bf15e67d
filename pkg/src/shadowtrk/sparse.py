"""Sparse matrix core: COO/CSR containers and the handful of kernels the
samplers are built from (SpGEMM, selection-matrix extraction, row
normalization, stacking, block-diagonal assembly).

All values are float64. Explicit zeros never survive construction, so the
structural support of a matrix is always its set of stored entries.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "CooMatrix",
    "CsrMatrix",
    "coo_to_csr",
    "csr_to_coo",
    "csr_from_arrays",
    "transpose",
    "spgemm",
    "selection_matrix",
    "induced_subgraph",
    "block_induced_subgraphs",
    "row_normalize",
    "vstack",
    "block_diag",
    "pattern",
    "union_pattern",
]

INDEX = np.int64


def _as_index(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=INDEX)


@dataclass(frozen=True, eq=False)
class CooMatrix:
    """Coordinate-format matrix. Entries may be unsorted until canonicalized."""

    n_rows: int
    n_cols: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        rows, cols = _as_index(self.rows), _as_index(self.cols)
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if not (rows.shape == cols.shape == values.shape) or rows.ndim != 1:
            raise ValueError("rows, cols and values must be 1-d arrays of equal length")
        if rows.size and (rows.min() < 0 or rows.max() >= self.n_rows):
            raise ValueError(f"row index out of range for {self.n_rows} rows")
        if cols.size and (cols.min() < 0 or cols.max() >= self.n_cols):
            raise ValueError(f"column index out of range for {self.n_cols} columns")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)
        object.__setattr__(self, "values", values)

    @property
    def nnz(self) -> int:
        return int(self.rows.size)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    def is_canonical(self) -> bool:
        if self.nnz < 2:
            return True
        key = self.rows * self.n_cols + self.cols
        return bool(np.all(np.diff(key) > 0))

    def canonicalize(self, sum_duplicates: bool = True) -> "CooMatrix":
        """Sort entries by (row, col), merge duplicates and drop zeros.

        With ``sum_duplicates=False`` a repeated coordinate raises instead.
        """
        if self.nnz == 0:
            return self
        order = np.lexsort((self.cols, self.rows))
        rows, cols, vals = self.rows[order], self.cols[order], self.values[order]
        new = np.empty(rows.size, dtype=bool)
        new[0] = True
        new[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
        if not new.all():
            if not sum_duplicates:
                i = int(np.flatnonzero(~new)[0])
                raise ValueError(f"duplicate coordinate ({rows[i]}, {cols[i]})")
            starts = np.flatnonzero(new)
            vals = np.add.reduceat(vals, starts)
            rows, cols = rows[starts], cols[starts]
        keep = vals != 0.0
        return CooMatrix(self.n_rows, self.n_cols, rows[keep], cols[keep], vals[keep])

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        np.add.at(out, (self.rows, self.cols), self.values)
        return out

    @classmethod
    def from_dense(cls, dense) -> "CooMatrix":
        dense = np.asarray(dense, dtype=np.float64)
        r, c = np.nonzero(dense)
        return cls(dense.shape[0], dense.shape[1], r, c, dense[r, c])


@dataclass(frozen=True, eq=False)
class CsrMatrix:
    """Compressed sparse row matrix with strictly increasing columns per row."""

    n_rows: int
    n_cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "row_ptr", _as_index(self.row_ptr))
        object.__setattr__(self, "col_idx", _as_index(self.col_idx))
        object.__setattr__(self, "values", np.ascontiguousarray(self.values, dtype=np.float64))
        if self.row_ptr.shape != (self.n_rows + 1,):
            raise ValueError("row_ptr must have n_rows + 1 entries")
        if self.row_ptr[0] != 0 or self.row_ptr[-1] != self.col_idx.size:
            raise ValueError("row_ptr must start at 0 and end at nnz")
        if self.col_idx.shape != self.values.shape:
            raise ValueError("col_idx and values must have equal length")

    @property
    def nnz(self) -> int:
        return int(self.col_idx.size)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    def row_lengths(self) -> np.ndarray:
        return np.diff(self.row_ptr)

    def row_ids(self) -> np.ndarray:
        """Row index of every stored entry."""
        return np.repeat(np.arange(self.n_rows, dtype=INDEX), self.row_lengths())

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.row_ptr[i], self.row_ptr[i + 1]
        return self.col_idx[lo:hi], self.values[lo:hi]

    def row_slice(self, start: int, stop: int) -> "CsrMatrix":
        lo, hi = self.row_ptr[start], self.row_ptr[stop]
        return CsrMatrix(
            stop - start,
            self.n_cols,
            self.row_ptr[start : stop + 1] - lo,
            self.col_idx[lo:hi],
            self.values[lo:hi],
        )

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.row_ids(), self.col_idx] = self.values
        return out

    def check(self) -> None:
        """Validate the structural invariants; raises ValueError."""
        if np.any(np.diff(self.row_ptr) < 0):
            raise ValueError("row_ptr is decreasing")
        if self.nnz:
            if self.col_idx.min() < 0 or self.col_idx.max() >= self.n_cols:
                raise ValueError("column index out of range")
            same_row = np.diff(self.row_ids()) == 0
            if np.any(np.diff(self.col_idx)[same_row] <= 0):
                raise ValueError("columns not strictly increasing within a row")

    @classmethod
    def from_dense(cls, dense) -> "CsrMatrix":
        return coo_to_csr(CooMatrix.from_dense(dense))

    @classmethod
    def identity(cls, n: int) -> "CsrMatrix":
        return cls(n, n, np.arange(n + 1), np.arange(n), np.ones(n))


def csr_from_arrays(n_rows, n_cols, rows, cols, values=None, sum_duplicates=True) -> CsrMatrix:
    """Build a CSR matrix from unsorted triplets."""
    rows = _as_index(rows)
    if values is None:
        values = np.ones(rows.size)
    coo = CooMatrix(n_rows, n_cols, rows, cols, values).canonicalize(sum_duplicates)
    return coo_to_csr(coo)


def coo_to_csr(m: CooMatrix) -> CsrMatrix:
    """Convert a canonical COO matrix to CSR.

    Raises ValueError if ``m`` has unsorted or duplicate coordinates.
    """
    if not m.is_canonical():
        key = m.rows * m.n_cols + m.cols
        if np.any(np.diff(key) == 0) or np.unique(key).size != key.size:
            raise ValueError("duplicate coordinates in COO input")
        raise ValueError("COO input is not canonicalized")
    if np.any(m.values == 0.0):
        m = m.canonicalize()
    row_ptr = np.zeros(m.n_rows + 1, dtype=INDEX)
    np.cumsum(np.bincount(m.rows, minlength=m.n_rows), out=row_ptr[1:])
    return CsrMatrix(m.n_rows, m.n_cols, row_ptr, m.cols.copy(), m.values.copy())


def csr_to_coo(m: CsrMatrix) -> CooMatrix:
    return CooMatrix(m.n_rows, m.n_cols, m.row_ids(), m.col_idx.copy(), m.values.copy())


def transpose(m: CsrMatrix) -> CsrMatrix:
    rows = m.row_ids()
    order = np.lexsort((rows, m.col_idx))
    row_ptr = np.zeros(m.n_cols + 1, dtype=INDEX)
    np.cumsum(np.bincount(m.col_idx, minlength=m.n_cols), out=row_ptr[1:])
    return CsrMatrix(m.n_cols, m.n_rows, row_ptr, rows[order], m.values[order])


def pattern(m: CsrMatrix) -> CsrMatrix:
    """Same support, all values 1."""
    return CsrMatrix(m.n_rows, m.n_cols, m.row_ptr, m.col_idx, np.ones(m.nnz))


def union_pattern(a: CsrMatrix, b: CsrMatrix) -> CsrMatrix:
    """Binary matrix whose support is supp(a) | supp(b)."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    rows = np.concatenate([a.row_ids(), b.row_ids()])
    cols = np.concatenate([a.col_idx, b.col_idx])
    key = np.unique(rows * a.n_cols + cols)
    return coo_to_csr(CooMatrix(a.n_rows, a.n_cols, key // a.n_cols, key % a.n_cols, np.ones(key.size)))


def _expand_products(a: CsrMatrix, b: CsrMatrix):
    """Every partial product a[i,k] * b[k,j] as flat (i, j, value) arrays."""
    a_rows = a.row_ids()
    b_len = np.diff(b.row_ptr)[a.col_idx]
    total = int(b_len.sum())
    out_rows = np.repeat(a_rows, b_len)
    # positions in b of each partial product: b.row_ptr[k] + 0..len-1
    seg_start = np.cumsum(b_len) - b_len
    src = np.arange(total, dtype=INDEX) - np.repeat(seg_start - b.row_ptr[a.col_idx], b_len)
    out_cols = b.col_idx[src]
    out_vals = np.repeat(a.values, b_len) * b.values[src]
    return out_rows, out_cols, out_vals


def spgemm(a: CsrMatrix, b: CsrMatrix) -> CsrMatrix:
    """Sparse product ``a @ b``.

    Partial products are expanded in one pass; they are merged either by a
    dense scratch accumulator (when the output rows are expected to be dense,
    more than n_cols/8 products per row) or by sort-and-compress.
    """
    if a.n_cols != b.n_rows:
        raise ValueError(f"dimension mismatch: {a.shape} @ {b.shape}")
    m, n = a.n_rows, b.n_cols
    rows, cols, vals = _expand_products(a, b)
    if rows.size == 0:
        return CsrMatrix(m, n, np.zeros(m + 1), np.zeros(0), np.zeros(0))
    per_row = rows.size / max(m, 1)
    if per_row > n / 8 and m * n <= 1 << 22:
        acc = np.bincount(rows * n + cols, weights=vals, minlength=m * n)
        touched = np.zeros(m * n, dtype=bool)
        touched[rows * n + cols] = True
        key = np.flatnonzero(touched & (acc != 0.0))
        out_vals = acc[key]
    else:
        key_all = rows * n + cols
        order = np.argsort(key_all, kind="stable")
        key_sorted = key_all[order]
        starts = np.flatnonzero(np.r_[True, key_sorted[1:] != key_sorted[:-1]])
        key = key_sorted[starts]
        out_vals = np.add.reduceat(vals[order], starts)
        nonzero = out_vals != 0.0
        key, out_vals = key[nonzero], out_vals[nonzero]
    out_rows = key // n
    row_ptr = np.zeros(m + 1, dtype=INDEX)
    np.cumsum(np.bincount(out_rows, minlength=m), out=row_ptr[1:])
    return CsrMatrix(m, n, row_ptr, key % n, out_vals)


def selection_matrix(vertices, n: int) -> CsrMatrix:
    """|vertices| x n matrix with a single 1.0 at (i, vertices[i])."""
    v = _as_index(vertices)
    if v.size and (v.min() < 0 or v.max() >= n):
        raise ValueError("vertex index out of range")
    return CsrMatrix(v.size, n, np.arange(v.size + 1), v, np.ones(v.size))


def induced_subgraph(a: CsrMatrix, vertices) -> tuple[CsrMatrix, np.ndarray]:
    """Submatrix on ``vertices`` computed as S @ A @ S^T.

    Returns the subgraph and its local-to-global vertex map (= vertices).
    """
    v = _as_index(vertices)
    if a.n_rows != a.n_cols:
        raise ValueError("adjacency must be square")
    if v.size and (v.min() < 0 or v.max() >= a.n_rows):
        raise ValueError("vertex index out of range")
    if np.unique(v).size != v.size:
        raise ValueError("duplicate vertex in selection")
    s = selection_matrix(v, a.n_rows)
    return spgemm(spgemm(s, a), transpose(s)), v


def block_induced_subgraphs(a: CsrMatrix, groups: CsrMatrix) -> tuple[CsrMatrix, np.ndarray, np.ndarray]:
    """One induced subgraph of ``a`` per row of the indicator matrix ``groups``.

    Row g of ``groups`` (shape G x n) lists the vertices of component g. The
    result is the block-diagonal matrix of all components, built with two
    selection products: a row selection S @ A, then a column selection
    against a component-tagged S^T so entries never cross components.

    Returns (block matrix, local_to_global, component offsets).
    """
    n = a.n_rows
    touched = groups.col_idx
    comp = groups.row_ids()
    offsets = groups.row_ptr.copy()
    picked = spgemm(selection_matrix(touched, n), a)
    # Column selection against a component-tagged S^T. S^T has one entry per
    # row of the (comp * n + vertex) index space, so it is kept doubly
    # compressed: the sorted tag keys are its nonempty rows.
    keys = comp * n + touched
    tagged = comp[picked.row_ids()] * n + picked.col_idx
    pos = np.minimum(np.searchsorted(keys, tagged), max(keys.size - 1, 0))
    hit = keys[pos] == tagged if keys.size else np.zeros(0, dtype=bool)
    rows = picked.row_ids()[hit]
    row_ptr = np.zeros(touched.size + 1, dtype=INDEX)
    np.cumsum(np.bincount(rows, minlength=touched.size), out=row_ptr[1:])
    # tags increase with the vertex id inside a component, so columns stay sorted
    out = CsrMatrix(touched.size, touched.size, row_ptr, pos[hit], picked.values[hit])
    return out, touched.copy(), offsets


def row_normalize(a: CsrMatrix) -> CsrMatrix:
    """Divide each row by its sum; empty rows stay empty."""
    if a.nnz and a.values.min() < 0:
        raise ValueError("row_normalize requires nonnegative values")
    lengths = a.row_lengths()
    sums = np.bincount(np.repeat(np.arange(a.n_rows), lengths), a.values, minlength=a.n_rows)
    sums = np.where(lengths > 0, sums, 1.0)
    return CsrMatrix(a.n_rows, a.n_cols, a.row_ptr, a.col_idx, a.values / np.repeat(sums, lengths))


def vstack(ms: list[CsrMatrix]) -> CsrMatrix:
    """Concatenate rows of matrices sharing a column count."""
    if not ms:
        raise ValueError("vstack needs at least one matrix")
    n_cols = ms[0].n_cols
    if any(m.n_cols != n_cols for m in ms):
        raise ValueError("column-count mismatch in vstack")
    ptr_parts = [np.zeros(1, dtype=INDEX)]
    base = 0
    for m in ms:
        ptr_parts.append(m.row_ptr[1:] + base)
        base += m.nnz
    return CsrMatrix(
        sum(m.n_rows for m in ms),
        n_cols,
        np.concatenate(ptr_parts),
        np.concatenate([m.col_idx for m in ms]),
        np.concatenate([m.values for m in ms]),
    )


def block_diag(ms: list[CooMatrix]) -> tuple[CooMatrix, np.ndarray]:
    """Disjoint union of square or rectangular blocks along the diagonal.

    Returns the assembled matrix and offsets with ``offsets[i]`` the first row
    (and column) of block i; ``offsets[-1]`` is the total size.
    """
    row_off = np.zeros(len(ms) + 1, dtype=INDEX)
    col_off = np.zeros(len(ms) + 1, dtype=INDEX)
    np.cumsum([m.n_rows for m in ms], out=row_off[1:])
    np.cumsum([m.n_cols for m in ms], out=col_off[1:])
    if not ms:
        return CooMatrix(0, 0, [], [], []), row_off
    rows = np.concatenate([m.rows + o for m, o in zip(ms, row_off)])
    cols = np.concatenate([m.cols + o for m, o in zip(ms, col_off)])
    vals = np.concatenate([m.values for m in ms])
    return CooMatrix(int(row_off[-1]), int(col_off[-1]), rows, cols, vals).canonicalize(), row_off
