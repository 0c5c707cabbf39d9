"""Sparse SPD matrices, block-row partitioning, and distributed primitives.

Matrices are stored in CSR form (thin wrappers around the usual three-array
layout, with scipy doing the heavy lifting).  A ``DistributedMatrix`` splits
the rows of a square matrix into contiguous blocks, one per simulated node,
and precomputes the exact column footprint each node needs from every other
node -- that footprint drives the halo exchange of the distributed
matrix-vector product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse

from .errors import MatrixFormatError, PartitionMismatchError

__all__ = [
    "CsrMatrix",
    "BlockRowPartition",
    "DistributedMatrix",
    "DistributedVector",
    "Preconditioner",
    "load_matrix_market",
    "partition",
    "distribute",
    "gather",
    "spmv_exchange",
    "dot",
    "axpy",
    "build_preconditioner",
    "preconditioner_rows",
    "poisson2d",
    "tridiag",
]


# ---------------------------------------------------------------------------
# matrices


@dataclass
class CsrMatrix:
    """Square sparse matrix in compressed-sparse-row form.

    ``symmetric`` records whether pattern and values are symmetric; it is
    checked (not trusted) by the constructor helpers.
    """

    n: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray
    symmetric: bool = False

    def __post_init__(self):
        self.row_ptr = np.asarray(self.row_ptr, dtype=np.int64)
        self.col_idx = np.asarray(self.col_idx, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if len(self.row_ptr) != self.n + 1:
            raise ValueError("row_ptr must have length n+1")
        if np.any(np.diff(self.row_ptr) < 0):
            raise ValueError("row_ptr must be non-decreasing")
        if self.nnz != len(self.col_idx) or self.nnz != len(self.values):
            raise ValueError("col_idx/values length inconsistent with row_ptr")
        if self.nnz and (self.col_idx.min() < 0 or self.col_idx.max() >= self.n):
            raise ValueError("column index out of range")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("matrix values must be finite")

    @property
    def nnz(self) -> int:
        return int(self.row_ptr[-1])

    @classmethod
    def from_scipy(cls, mat, symmetric=None) -> "CsrMatrix":
        mat = scipy.sparse.csr_matrix(mat)
        if mat.shape[0] != mat.shape[1]:
            raise ValueError("matrix must be square")
        mat.sum_duplicates()
        mat.sort_indices()
        if symmetric is None:
            diff = mat - mat.T
            symmetric = diff.nnz == 0 or np.max(np.abs(diff.data)) == 0.0
        return cls(mat.shape[0], mat.indptr, mat.indices, mat.data, bool(symmetric))

    @classmethod
    def from_dense(cls, arr) -> "CsrMatrix":
        return cls.from_scipy(scipy.sparse.csr_matrix(np.asarray(arr, dtype=np.float64)))

    def to_scipy(self) -> scipy.sparse.csr_matrix:
        return scipy.sparse.csr_matrix(
            (self.values, self.col_idx, self.row_ptr), shape=(self.n, self.n)
        )

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def diagonal(self) -> np.ndarray:
        return self.to_scipy().diagonal()

    def matvec(self, x: np.ndarray) -> np.ndarray:
        """Sequential SpMV, the oracle the distributed product is checked against."""
        return self.to_scipy() @ np.asarray(x, dtype=np.float64)


def load_matrix_market(path) -> CsrMatrix:
    """Parse a Matrix Market coordinate file (real, general or symmetric).

    Symmetric storage is expanded to the full pattern.  A general file whose
    content happens to be symmetric gets the ``symmetric`` flag as well.

    Raises
    ------
    MatrixFormatError
        On malformed headers or entries (with the offending line number),
        non-square sizes, or a non-real field.
    """
    with open(path, "r", encoding="ascii", errors="replace") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise MatrixFormatError("empty file", line=1)
    header = lines[0].strip().lower().split()
    if len(header) != 5 or header[0] != "%%matrixmarket":
        raise MatrixFormatError("expected '%%MatrixMarket matrix coordinate real ...' header", line=1)
    _, obj, fmt, fieldkind, symkind = header
    if obj != "matrix" or fmt != "coordinate":
        raise MatrixFormatError(f"unsupported object/format '{obj} {fmt}'", line=1)
    if fieldkind != "real":
        raise MatrixFormatError(f"non-real field '{fieldkind}'", line=1)
    if symkind not in ("general", "symmetric"):
        raise MatrixFormatError(f"unsupported symmetry '{symkind}'", line=1)

    lineno = 1
    sizes = None
    for lineno, raw in enumerate(lines[1:], start=2):
        text = raw.strip()
        if not text or text.startswith("%"):
            continue
        sizes = text.split()
        break
    if sizes is None:
        raise MatrixFormatError("missing size line", line=lineno)
    if len(sizes) != 3:
        raise MatrixFormatError("size line must be 'rows cols nnz'", line=lineno)
    try:
        rows, cols, nnz = (int(tok) for tok in sizes)
    except ValueError:
        raise MatrixFormatError("size line must hold three integers", line=lineno)
    if rows != cols:
        raise MatrixFormatError(f"non-square matrix ({rows} x {cols})", line=lineno)

    ii = np.empty(nnz, dtype=np.int64)
    jj = np.empty(nnz, dtype=np.int64)
    vv = np.empty(nnz, dtype=np.float64)
    count = 0
    for lineno, raw in enumerate(lines[lineno:], start=lineno + 1):
        text = raw.strip()
        if not text or text.startswith("%"):
            continue
        if count >= nnz:
            raise MatrixFormatError("more entries than declared", line=lineno)
        toks = text.split()
        if len(toks) != 3:
            raise MatrixFormatError("entry must be 'i j value'", line=lineno)
        try:
            i, j, v = int(toks[0]), int(toks[1]), float(toks[2])
        except ValueError:
            raise MatrixFormatError(f"cannot parse entry {toks!r}", line=lineno)
        if not (1 <= i <= rows and 1 <= j <= cols):
            raise MatrixFormatError(f"index ({i}, {j}) outside {rows} x {cols}", line=lineno)
        if not math.isfinite(v):
            raise MatrixFormatError("non-finite value", line=lineno)
        ii[count], jj[count], vv[count] = i - 1, j - 1, v
        count += 1
    if count != nnz:
        raise MatrixFormatError(f"declared {nnz} entries, found {count}", line=lineno)

    if symkind == "symmetric":
        off = ii != jj
        ii, jj, vv = (
            np.concatenate([ii, jj[off]]),
            np.concatenate([jj, ii[off]]),
            np.concatenate([vv, vv[off]]),
        )
    coo = scipy.sparse.coo_matrix((vv, (ii, jj)), shape=(rows, cols))
    return CsrMatrix.from_scipy(coo.tocsr())


def poisson2d(k: int) -> CsrMatrix:
    """Standard 5-point Laplacian on a k x k grid (SPD, bandwidth k)."""
    if k < 2:
        raise ValueError("grid size must be >= 2")
    one = scipy.sparse.eye(k, format="csr")
    t = scipy.sparse.diags([-1.0, 2.0, -1.0], [-1, 0, 1], shape=(k, k), format="csr")
    lap = scipy.sparse.kron(one, t) + scipy.sparse.kron(t, one)
    return CsrMatrix.from_scipy(lap.tocsr(), symmetric=True)


def tridiag(n: int) -> CsrMatrix:
    """SPD tridiagonal matrix with diagonal 2 and off-diagonals -1."""
    if n < 2:
        raise ValueError("size must be >= 2")
    t = scipy.sparse.diags([-1.0, 2.0, -1.0], [-1, 0, 1], shape=(n, n), format="csr")
    return CsrMatrix.from_scipy(t.tocsr(), symmetric=True)


# ---------------------------------------------------------------------------
# partitioning


@dataclass(frozen=True)
class BlockRowPartition:
    """Contiguous block-row split of ``n`` rows over ``nn`` nodes.

    Ceil-sized blocks go to the lowest ranks, so sizes differ by at most one.
    """

    n: int
    nn: int
    starts: tuple = field(default=())

    def __post_init__(self):
        if not self.starts:
            base, rem = divmod(self.n, self.nn)
            starts = [0]
            for j in range(self.nn):
                starts.append(starts[-1] + base + (1 if j < rem else 0))
            object.__setattr__(self, "starts", tuple(starts))

    def range_of(self, rank: int) -> tuple:
        return self.starts[rank], self.starts[rank + 1]

    def size_of(self, rank: int) -> int:
        lo, hi = self.range_of(rank)
        return hi - lo

    def owner_of(self, index: int) -> int:
        return int(np.searchsorted(self.starts, index, side="right") - 1)

    def indices_of(self, rank: int) -> np.ndarray:
        lo, hi = self.range_of(rank)
        return np.arange(lo, hi, dtype=np.int64)


def partition(n: int, nn: int) -> BlockRowPartition:
    """Split ``n`` rows over ``nn`` nodes; rejects nn outside [1, n]."""
    if not (1 <= nn <= n):
        raise ValueError(f"node count {nn} must satisfy 1 <= nn <= n = {n}")
    return BlockRowPartition(n, nn)


# ---------------------------------------------------------------------------
# distributed matrix / vector


@dataclass
class DistributedMatrix:
    """Block-row distribution of a square sparse matrix.

    ``recv_map[j][k]`` holds the global column indices owned by node ``k``
    that appear in node ``j``'s rows; ``send_map`` is its transpose view.
    Both are the exact nonzero footprint, nothing more.
    """

    partition: BlockRowPartition
    matrix: CsrMatrix
    row_blocks: list
    recv_map: list
    send_map: list

    @property
    def n(self) -> int:
        return self.partition.n

    @property
    def nn(self) -> int:
        return self.partition.nn

    def rows_of(self, ranks) -> scipy.sparse.csr_matrix:
        """Row block for one rank or a sorted union of ranks (static data access)."""
        if np.isscalar(ranks):
            ranks = [ranks]
        blocks = [self.row_blocks[rk] for rk in sorted(ranks)]
        return scipy.sparse.vstack(blocks, format="csr")


def distribute(matrix: CsrMatrix, nodes) -> DistributedMatrix:
    """Split ``matrix`` by block rows across ``nodes`` (a count or a partition)."""
    part = nodes if isinstance(nodes, BlockRowPartition) else partition(matrix.n, nodes)
    if part.n != matrix.n:
        raise PartitionMismatchError("partition size does not match the matrix")
    sp = matrix.to_scipy()
    row_blocks = []
    recv_map = []
    for j in range(part.nn):
        lo, hi = part.range_of(j)
        block = sp[lo:hi, :].tocsr()
        block.sort_indices()
        row_blocks.append(block)
        cols = np.unique(block.indices)
        needed = {}
        for k in range(part.nn):
            if k == j:
                continue
            klo, khi = part.range_of(k)
            sel = cols[(cols >= klo) & (cols < khi)]
            if sel.size:
                needed[k] = sel.astype(np.int64)
        recv_map.append(needed)
    send_map = [dict() for _ in range(part.nn)]
    for j in range(part.nn):
        for k, idx in recv_map[j].items():
            send_map[k][j] = idx
    return DistributedMatrix(part, matrix, row_blocks, recv_map, send_map)


def gather(dist: DistributedMatrix) -> CsrMatrix:
    """Reassemble the global matrix from the row blocks (round-trip check)."""
    stacked = scipy.sparse.vstack(dist.row_blocks, format="csr")
    return CsrMatrix.from_scipy(stacked, symmetric=dist.matrix.symmetric)


ROLE_TAGS = ("x", "r", "u", "w", "m", "n", "s", "p", "q", "z", "c", "d", "g", "h", "b")


@dataclass
class DistributedVector:
    """Per-node blocks of a global vector, with an iteration stamp and role tag."""

    partition: BlockRowPartition
    blocks: list
    stamp: int = 0
    role: str = "x"

    def __post_init__(self):
        if len(self.blocks) != self.partition.nn:
            raise PartitionMismatchError("one block per node required")
        for j, blk in enumerate(self.blocks):
            if len(blk) != self.partition.size_of(j):
                raise PartitionMismatchError(f"block {j} has wrong length")

    @classmethod
    def from_global(cls, part: BlockRowPartition, values, stamp=0, role="x"):
        values = np.asarray(values, dtype=np.float64)
        blocks = [values[slice(*part.range_of(j))].copy() for j in range(part.nn)]
        return cls(part, blocks, stamp, role)

    def to_global(self) -> np.ndarray:
        return np.concatenate(self.blocks)

    def copy(self) -> "DistributedVector":
        return DistributedVector(
            self.partition, [blk.copy() for blk in self.blocks], self.stamp, self.role
        )


def _check_same_partition(v: DistributedVector, w: DistributedVector):
    if v.partition.n != w.partition.n or v.partition.starts != w.partition.starts:
        raise PartitionMismatchError("vectors carry different partitions")


def dot(v: DistributedVector, w: DistributedVector, cluster=None) -> float:
    """Distributed inner product.

    With a cluster the per-node partial sums go through one allreduce over the
    fixed reduction tree, which makes repeated runs bitwise identical; without
    a cluster the same tree order is applied directly.
    """
    _check_same_partition(v, w)
    parts = [float(np.dot(v.blocks[j], w.blocks[j])) for j in range(v.partition.nn)]
    if cluster is not None:
        handles = [
            cluster.iallreduce_sum(j, [parts[j]]) for j in cluster.live_ranks()
        ]
        results = [cluster.wait(h)[0] for h in handles]
        return results[0]
    from .cluster import tree_sum

    return tree_sum(parts)


def axpy(alpha: float, v: DistributedVector, w: DistributedVector) -> DistributedVector:
    """Return alpha * v + w, block by block (no communication)."""
    _check_same_partition(v, w)
    blocks = [alpha * v.blocks[j] + w.blocks[j] for j in range(v.partition.nn)]
    return DistributedVector(v.partition, blocks, w.stamp, w.role)


def spmv_exchange(A: DistributedMatrix, v: DistributedVector, cluster,
                  plan=None, backup_payload=None) -> DistributedVector:
    """Distributed SpMV with halo exchange, optionally piggybacking backups.

    Every node first sends the pattern-required elements of its block to each
    neighbor; with a ``plan`` the same messages additionally carry the
    redundant sets, and every receiver files all received copies in its backup
    store before the product is computed.  The arithmetic is identical with
    and without a plan.

    ``backup_payload`` is a list of ``(stamp, blocks)`` pairs to protect; it
    defaults to the input vector itself.  Extra stamps ride along on the same
    messages (the two-iterations-at-once methods need that).
    """
    part = v.partition
    if part.starts != A.partition.starts:
        raise PartitionMismatchError("vector partition does not match the matrix")
    if plan is not None and backup_payload is None:
        backup_payload = [(v.stamp, v.blocks)]

    live = cluster.live_ranks()
    # send phase, rank order
    for j in live:
        dests = set(A.send_map[j])
        if plan is not None:
            dests.update(plan.targets[j])
        for k in sorted(dests):
            if k == j or k not in live:
                continue
            pattern_idx = A.send_map[j].get(k, np.empty(0, dtype=np.int64))
            lo = part.range_of(j)[0]
            parts_payload = []
            pattern_vals = v.blocks[j][pattern_idx - lo]
            n_red = 0
            if plan is not None:
                red_idx = plan.redundant_for(j, k)
                for stamp, blocks in backup_payload:
                    # the input stamp's pattern part already rides in the
                    # message body; older stamps mirror it as pure redundancy
                    if stamp != v.stamp and pattern_idx.size:
                        parts_payload.append((stamp, pattern_idx, blocks[j][pattern_idx - lo]))
                        n_red += pattern_idx.size
                    if red_idx.size:
                        parts_payload.append((stamp, red_idx, blocks[j][red_idx - lo]))
                        n_red += red_idx.size
            payload = {
                "owner": j,
                "pattern_idx": pattern_idx,
                "pattern_vals": pattern_vals,
                "backups": parts_payload,
            }
            cluster.send(j, k, payload, kind="halo",
                         elements=int(pattern_idx.size), extra_elements=n_red)

    # receive + compute phase, rank order
    out_blocks = []
    result = {}
    for j in live:
        x_full = np.zeros(part.n)
        lo, hi = part.range_of(j)
        x_full[lo:hi] = v.blocks[j]
        senders = set(A.recv_map[j])
        if plan is not None:
            senders.update(plan.sources[j])
        for k in sorted(senders):
            if k == j or k not in live:
                continue
            payload = cluster.recv(j, k)
            x_full[payload["pattern_idx"]] = payload["pattern_vals"]
            if plan is not None:
                ctx = cluster.node(j)
                if payload["pattern_idx"].size:
                    ctx.backup.store(payload["owner"], v.stamp,
                                     payload["pattern_idx"], payload["pattern_vals"])
                for stamp, idx, vals in payload["backups"]:
                    ctx.backup.store(payload["owner"], stamp, idx, vals)
        result[j] = A.row_blocks[j] @ x_full

    if plan is not None:
        newest = max(stamp for stamp, _ in backup_payload)
        for j in live:
            cluster.node(j).backup.commit(newest)

    for j in range(part.nn):
        if j in result:
            out_blocks.append(result[j])
        else:
            out_blocks.append(np.zeros(part.size_of(j)))
    return DistributedVector(part, out_blocks, v.stamp, v.role)


# ---------------------------------------------------------------------------
# preconditioners


@dataclass
class Preconditioner:
    """SPD preconditioner applied as P = M^-1.

    Kinds: ``identity``, ``jacobi`` (inverse diagonal), ``block_jacobi``
    (dense Cholesky of each node's diagonal block, so P is block diagonal and
    the off-block rows vanish), and ``explicit_sparse`` (a given sparse SPD
    matrix applied via its own halo exchange).
    """

    kind: str
    partition: BlockRowPartition
    inv_diag: list = None          # jacobi: per-node inverse diagonal
    block_chol: list = None        # block_jacobi: per-node cho_factor of A_jj
    explicit: DistributedMatrix = None  # explicit_sparse

    @property
    def is_local(self) -> bool:
        return self.kind in ("identity", "jacobi", "block_jacobi")

    def apply_block(self, rank: int, block: np.ndarray) -> np.ndarray:
        """Apply P to one node's block (local kinds only)."""
        if self.kind == "identity":
            return block.copy()
        if self.kind == "jacobi":
            return self.inv_diag[rank] * block
        if self.kind == "block_jacobi":
            return scipy.linalg.cho_solve(self.block_chol[rank], block)
        raise ValueError("explicit preconditioner needs the exchange path")

    def apply(self, v: DistributedVector, cluster, trace=True) -> DistributedVector:
        """Apply P to a distributed vector over the cluster."""
        if self.is_local:
            blocks = []
            for j in range(v.partition.nn):
                if cluster is None or j in cluster.live_ranks():
                    blocks.append(self.apply_block(j, v.blocks[j]))
                    if cluster is not None and trace:
                        cluster.mark("precond-apply", j, elements=len(blocks[-1]))
                else:
                    blocks.append(np.zeros(v.partition.size_of(j)))
            return DistributedVector(v.partition, blocks, v.stamp, v.role)
        out = spmv_exchange(self.explicit, v, cluster)
        if trace:
            for j in cluster.live_ranks():
                cluster.mark("precond-apply", j, elements=v.partition.size_of(j))
        return out


def build_preconditioner(A: DistributedMatrix, kind: str,
                         explicit: CsrMatrix = None) -> Preconditioner:
    """Build a preconditioner of the given kind for a distributed matrix.

    ``jacobi`` requires a strictly positive diagonal; ``block_jacobi``
    requires every diagonal block to admit a Cholesky factorization.
    ``explicit_sparse`` takes the sparse P itself via ``explicit``.
    """
    part = A.partition
    if kind == "identity":
        return Preconditioner("identity", part)
    if kind == "jacobi":
        diag = A.matrix.diagonal()
        if np.any(diag <= 0):
            bad = int(np.argmin(diag))
            raise ValueError(f"jacobi needs a positive diagonal; entry {bad} is {diag[bad]}")
        inv = [1.0 / diag[slice(*part.range_of(j))] for j in range(part.nn)]
        return Preconditioner("jacobi", part, inv_diag=inv)
    if kind == "block_jacobi":
        chol = []
        for j in range(part.nn):
            lo, hi = part.range_of(j)
            dense = A.row_blocks[j][:, lo:hi].toarray()
            try:
                chol.append(scipy.linalg.cho_factor(dense))
            except scipy.linalg.LinAlgError as exc:
                raise ValueError(f"diagonal block of node {j} is not SPD") from exc
        return Preconditioner("block_jacobi", part, block_chol=chol)
    if kind == "explicit_sparse":
        if explicit is None:
            raise ValueError("explicit_sparse needs the sparse P matrix")
        return Preconditioner("explicit_sparse", part, explicit=distribute(explicit, part))
    raise ValueError(f"unknown preconditioner kind {kind!r}")


def preconditioner_rows(P: Preconditioner, ranks) -> scipy.sparse.csr_matrix:
    """Explicit sparse rows of P for the given ranks (recovery static data).

    For block-jacobi the diagonal blocks are inverted from the stored
    factorizations; for local kinds the off-block columns are exactly zero.
    """
    if np.isscalar(ranks):
        ranks = [ranks]
    ranks = sorted(ranks)
    part = P.partition
    n = part.n
    rows = []
    for rk in ranks:
        lo, hi = part.range_of(rk)
        sz = hi - lo
        if P.kind == "identity":
            block = scipy.sparse.eye(sz, format="csr")
            rows.append(_place_cols(block, lo, n))
        elif P.kind == "jacobi":
            block = scipy.sparse.diags(P.inv_diag[rk], format="csr")
            rows.append(_place_cols(block, lo, n))
        elif P.kind == "block_jacobi":
            inv = scipy.linalg.cho_solve(P.block_chol[rk], np.eye(sz))
            rows.append(_place_cols(scipy.sparse.csr_matrix(inv), lo, n))
        elif P.kind == "explicit_sparse":
            rows.append(P.explicit.row_blocks[rk])
        else:
            raise ValueError(f"unknown preconditioner kind {P.kind!r}")
    return scipy.sparse.vstack(rows, format="csr")


def _place_cols(block, col_offset, n):
    """Embed a local block into global column coordinates."""
    block = scipy.sparse.csr_matrix(block)
    return scipy.sparse.csr_matrix(
        (block.data, block.indices + col_offset, block.indptr),
        shape=(block.shape[0], n),
    )
