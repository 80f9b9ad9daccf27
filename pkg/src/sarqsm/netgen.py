"""Random network generators and row normalization for simulated weights.

Adjacency matrices are directed 0/1 with a zero diagonal.  Instead of drawing
n^2 Bernoulli variates, each generator draws the number of edges in a block
of candidate pairs from the binomial law and then a uniform subset of that
size, which has exactly the same distribution.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .linalg import SparseWeights
from .model import make_rng

__all__ = [
    "gen_bernoulli",
    "gen_sbm",
    "row_normalize",
    "RowNormalizeReport",
    "read_edge_list",
    "write_edge_list",
    "EdgeListError",
]


def _offdiag_block(rng, rows: np.ndarray, cols: np.ndarray, prob: float, same: bool):
    """Sample Bernoulli(prob) edges among rows x cols (excluding i == j when same)."""
    nr, nc = rows.size, cols.size
    if same:
        # candidate pairs: (a, b) with a != b, indexed as a*(nr-1) + b' where b' skips a
        total = nr * (nr - 1)
    else:
        total = nr * nc
    if total == 0 or prob <= 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    m = rng.binomial(total, min(prob, 1.0))
    if m == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    idx = rng.choice(total, size=m, replace=False)
    idx.sort()
    if same:
        a, b = np.divmod(idx, nr - 1)
        b = b + (b >= a)
        return rows[a], rows[b]
    a, b = np.divmod(idx, nc)
    return rows[a], cols[b]


def _adjacency(n, i, j) -> SparseWeights:
    a = sp.csr_matrix((np.ones(i.size), (i, j)), shape=(n, n))
    return SparseWeights(a)


def gen_bernoulli(n: int, edge_prob: float, seed=0) -> SparseWeights:
    """Directed Erdos-Renyi adjacency: each a_ij (i != j) is Bernoulli(edge_prob)."""
    if n < 2:
        raise ValueError("n must be at least 2")
    if not 0 <= edge_prob <= 1:
        raise ValueError(f"edge_prob must lie in [0, 1], got {edge_prob}")
    rng = make_rng(seed)
    nodes = np.arange(n)
    i, j = _offdiag_block(rng, nodes, nodes, edge_prob, same=True)
    return _adjacency(n, i, j)


def gen_sbm(n: int, blocks: int = 5, p_in: float | None = None, p_out: float | None = None,
            seed=0, return_labels: bool = False):
    """Directed stochastic block model.

    Labels are uniform on ``{0, ..., blocks-1}``; P(a_ij = 1) is ``p_in`` for
    same-label pairs and ``p_out`` otherwise.  Defaults are ``n**-0.4`` and
    ``n**-0.8``.
    """
    if blocks < 1:
        raise ValueError("blocks must be >= 1")
    p_in = n ** -0.4 if p_in is None else p_in
    p_out = n ** -0.8 if p_out is None else p_out
    for name, p in (("p_in", p_in), ("p_out", p_out)):
        if not 0 < p <= 1:
            raise ValueError(f"{name} must lie in (0, 1], got {p}")
    rng = make_rng(seed)
    labels = rng.integers(blocks, size=n)
    members = [np.flatnonzero(labels == b) for b in range(blocks)]
    ii, jj = [], []
    for a in range(blocks):
        for b in range(blocks):
            same = a == b
            i, j = _offdiag_block(rng, members[a], members[b], p_in if same else p_out, same)
            ii.append(i)
            jj.append(j)
    w = _adjacency(n, np.concatenate(ii), np.concatenate(jj))
    return (w, labels) if return_labels else w


@dataclass(frozen=True)
class RowNormalizeReport:
    zero_rows: np.ndarray

    @property
    def n_zero_rows(self) -> int:
        return int(self.zero_rows.size)


def row_normalize(adj: SparseWeights, return_report: bool = False):
    """w_ij = a_ij / sum_j' a_ij'.  Rows without edges stay zero and are reported."""
    m = adj.matrix
    rs = np.asarray(m.sum(axis=1)).ravel()
    zero = np.flatnonzero(np.diff(m.indptr) == 0)
    scale = np.ones_like(rs)
    nz = rs != 0
    scale[nz] = 1.0 / rs[nz]
    w = sp.diags(scale) @ m
    out = SparseWeights(w.tocsr(), row_normalized=True, zero_rows=zero)
    return (out, RowNormalizeReport(zero)) if return_report else out


class EdgeListError(ValueError):
    """Malformed edge-list input; message carries the offending line number."""


def read_edge_list(source, one_based: bool = False, n: int | None = None,
                   node_ids=None):
    """Parse an edge list into an adjacency :class:`SparseWeights`.

    Each non-comment line holds ``i j`` separated by whitespace or a comma;
    ``#`` starts a comment; duplicate edges collapse to one and self-loops are
    dropped.  With ``node_ids`` (a sequence of labels), tokens are looked up
    as labels instead of integer positions.

    Returns
    -------
    SparseWeights
    """
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source
                                     and Path(source).is_file()):
        text = Path(source).read_text()
    elif isinstance(source, io.IOBase):
        text = source.read()
    else:
        text = str(source)
    lookup = None if node_ids is None else {str(k): v for v, k in enumerate(node_ids)}
    ii, jj = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.replace(",", " ").split()
        if len(toks) < 2:
            raise EdgeListError(f"line {lineno}: expected 'i j', got {raw!r}")
        if lookup is not None:
            try:
                a, b = lookup[toks[0]], lookup[toks[1]]
            except KeyError as exc:
                raise EdgeListError(f"line {lineno}: unknown node id {exc.args[0]!r}") from None
        else:
            try:
                a, b = int(toks[0]), int(toks[1])
            except ValueError:
                raise EdgeListError(f"line {lineno}: node ids must be integers, got {raw!r}") from None
            if one_based:
                a, b = a - 1, b - 1
            if a < 0 or b < 0:
                raise EdgeListError(f"line {lineno}: negative node index")
        ii.append(a)
        jj.append(b)
    ii = np.asarray(ii, dtype=np.int64)
    jj = np.asarray(jj, dtype=np.int64)
    size = n if n is not None else (len(lookup) if lookup is not None else
                                    (int(max(ii.max(), jj.max())) + 1 if ii.size else 0))
    if ii.size and max(ii.max(), jj.max()) >= size:
        raise EdgeListError(f"node index {int(max(ii.max(), jj.max()))} out of range for n={size}")
    keep = ii != jj
    a = sp.csr_matrix((np.ones(int(keep.sum())), (ii[keep], jj[keep])), shape=(size, size))
    a.data[:] = 1.0  # duplicates summed above; collapse to 0/1
    return SparseWeights(a)


def write_edge_list(adj: SparseWeights, path=None, one_based: bool = False) -> str:
    """Serialize the sparsity pattern as ``i j`` lines; returns the text."""
    coo = adj.matrix.tocoo()
    order = np.lexsort((coo.col, coo.row))
    off = 1 if one_based else 0
    lines = [f"{r + off} {c + off}" for r, c in zip(coo.row[order], coo.col[order])]
    text = "\n".join(lines) + ("\n" if lines else "")
    if path is not None:
        Path(path).write_text(text)
    return text
