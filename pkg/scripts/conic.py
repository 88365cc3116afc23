"""
Cone programs over real decision variables.

Design subproblems are written with `AffineExpr` objects built from a
`ProgramBuilder`: complex vectors and Hermitian matrices are parametrised by
real scalars, so every expression is an affine map from the real variable
vector to a (possibly complex) array. Constraint blocks are

    nonneg:  A x + b >= 0
    soc:     (A x + b)[0] >= ||(A x + b)[1:]||
    psd:     mat(A x + b) is positive semidefinite

A complex Hermitian n x n block is stored through its real 2n x 2n embedding.
The shipped backend solves programs with cvxopt's `conelp`.
"""

import logging
import time
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Protocol, Tuple

import numpy as np
from scipy import sparse

DEFAULT_TOL = 1e-7
DEFAULT_MAX_ITERS = 200
RELAXED_TOL = 1e-5
HERMITIAN_TOL = 1e-10


class ConicSolverError(RuntimeError):
    pass


class InfeasibleProgram(ConicSolverError):
    pass


class SolverFailure(ConicSolverError):
    pass


class Cone(Enum):
    NONNEG = "Nonnegative"
    SOC = "SecondOrder"
    PSD = "Semidefinite"


class SolverStatus(Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    NUMERICAL_FAILURE = "numerical_failure"


def _as_array(value):
    return np.asarray(value, dtype=complex)


def _expand(coef, ndim):
    """Insert unit axes after the variable axis so coef broadcasts like an ndim-array."""
    missing = ndim - (coef.ndim - 1)
    return coef.reshape((coef.shape[0],) + (1,) * missing + coef.shape[1:])


class AffineExpr:
    """Affine map x -> const + sum_i x_i coef[i] over real variables x."""

    # let numpy hand binary operators over to the expression
    __array_ufunc__ = None

    def __init__(self, coef, const):
        self.coef = _as_array(coef)
        self.const = _as_array(const)
        if self.coef.shape[1:] != self.const.shape:
            raise ValueError(f"Coefficient shape {self.coef.shape} does not match constant {self.const.shape}")

    @classmethod
    def constant(cls, value, num_vars=0):
        value = _as_array(value)
        return cls(np.zeros((num_vars,) + value.shape, dtype=complex), value)

    @property
    def shape(self):
        return self.const.shape

    @property
    def ndim(self):
        return self.const.ndim

    @property
    def num_vars(self):
        return self.coef.shape[0]

    def widen(self, num_vars):
        if num_vars == self.num_vars:
            return self
        if num_vars < self.num_vars:
            raise ValueError("Cannot drop variables from an expression")
        padding = np.zeros((num_vars - self.num_vars,) + self.shape, dtype=complex)
        return AffineExpr(np.concatenate([self.coef, padding]), self.const)

    @staticmethod
    def lift(other, num_vars=0):
        if isinstance(other, AffineExpr):
            return other
        return AffineExpr.constant(other, num_vars)

    def _align(self, other):
        other = AffineExpr.lift(other, self.num_vars)
        width = max(self.num_vars, other.num_vars)
        return self.widen(width), other.widen(width)

    def __add__(self, other):
        a, b = self._align(other)
        const = a.const + b.const
        coef = _expand(a.coef, const.ndim) + _expand(b.coef, const.ndim)
        return AffineExpr(np.broadcast_to(coef, (a.num_vars,) + const.shape).copy(), const)

    __radd__ = __add__

    def __neg__(self):
        return AffineExpr(-self.coef, -self.const)

    def __sub__(self, other):
        return self + (-AffineExpr.lift(other, self.num_vars))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, AffineExpr):
            if other.num_vars and np.any(other.coef):
                raise TypeError("Product of two affine expressions is not affine")
            other = other.const
        other = _as_array(other)
        const = self.const * other
        coef = _expand(self.coef, const.ndim) * other
        return AffineExpr(np.broadcast_to(coef, (self.num_vars,) + const.shape).copy(), const)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self * (1.0 / _as_array(other))

    def __matmul__(self, other):
        if isinstance(other, AffineExpr):
            raise TypeError("Product of two affine expressions is not affine")
        other = _as_array(other)
        return AffineExpr(self.coef @ other, self.const @ other)

    def __rmatmul__(self, other):
        other = _as_array(other)
        if self.ndim == 1:
            if other.ndim == 1:
                return AffineExpr(self.coef @ other, self.const @ other)
            return AffineExpr((other @ self.coef.T).T, other @ self.const)
        return AffineExpr(other @ self.coef, other @ self.const)

    def __getitem__(self, key):
        if not isinstance(key, tuple):
            key = (key,)
        return AffineExpr(self.coef[(slice(None),) + key], self.const[key])

    def conj(self):
        return AffineExpr(self.coef.conj(), self.const.conj())

    @property
    def T(self):
        if self.ndim < 2:
            return self
        return AffineExpr(np.swapaxes(self.coef, -1, -2), self.const.T)

    @property
    def H(self):
        return self.T.conj()

    @property
    def real(self):
        return AffineExpr(self.coef.real, self.const.real)

    @property
    def imag(self):
        return AffineExpr(self.coef.imag, self.const.imag)

    def trace(self):
        return AffineExpr(np.trace(self.coef, axis1=-2, axis2=-1), np.trace(self.const))

    def sum(self):
        return AffineExpr(self.coef.reshape(self.num_vars, -1).sum(axis=1), self.const.sum())

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return AffineExpr(self.coef.reshape((self.num_vars,) + tuple(shape)), self.const.reshape(shape))

    def ravel(self):
        return self.reshape(-1)

    def value(self, x):
        x = np.asarray(x, dtype=float)[: self.num_vars]
        return self.const + np.tensordot(x, self.coef, axes=1)

    @staticmethod
    def concat(items, axis=0):
        items = [AffineExpr.lift(item) for item in items]
        width = max(item.num_vars for item in items)
        items = [item.widen(width) for item in items]
        return AffineExpr(
            np.concatenate([item.coef for item in items], axis=axis + 1 if axis >= 0 else axis),
            np.concatenate([item.const for item in items], axis=axis),
        )

    @staticmethod
    def bmat(rows):
        """Assemble a 2-D block matrix; scalars and 1-D blocks are promoted to matrices."""

        def as_matrix(block):
            block = AffineExpr.lift(block)
            if block.ndim == 0:
                return block.reshape(1, 1)
            if block.ndim == 1:
                return block.reshape(-1, 1)
            return block

        return AffineExpr.concat(
            [AffineExpr.concat([as_matrix(block) for block in row], axis=1) for row in rows], axis=0
        )

    def __repr__(self):
        return f"AffineExpr(shape={self.shape}, num_vars={self.num_vars})"


def hermitian_part(matrix):
    return 0.5 * (matrix + matrix.conj().T)


def embed_hermitian(matrix):
    matrix = np.asarray(matrix, dtype=complex)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"Expected a square matrix, got shape {matrix.shape}")
    scale = max(1.0, float(np.max(np.abs(matrix), initial=0.0)))
    if np.max(np.abs(matrix - matrix.conj().T), initial=0.0) > HERMITIAN_TOL * scale:
        raise ValueError("Matrix is not Hermitian")
    return _embed(matrix)


def _embed(matrix):
    re, im = matrix.real, matrix.imag
    return np.block([[re, -im], [im, re]])


def unembed_symmetric(matrix):
    """Inverse of the embedding's adjoint: the Hermitian Z with <Z, X> = <matrix, embed(X)>."""
    n = matrix.shape[0] // 2
    top_left, top_right = matrix[:n, :n], matrix[:n, n:]
    bottom_left, bottom_right = matrix[n:, :n], matrix[n:, n:]
    return (top_left + bottom_right) + 1j * (bottom_left - top_right)


@dataclass(frozen=True, eq=False)
class ConeBlock:
    name: str
    cone: Cone
    matrix: np.ndarray  # rows x num_vars, real
    offset: np.ndarray
    side: int = 0  # real side of a psd block
    hermitian_side: int = 0

    @property
    def dim(self):
        return self.matrix.shape[0]

    def widen(self, num_vars):
        if self.matrix.shape[1] == num_vars:
            return self
        matrix = np.hstack([self.matrix, np.zeros((self.dim, num_vars - self.matrix.shape[1]))])
        return ConeBlock(self.name, self.cone, matrix, self.offset, self.side, self.hermitian_side)

    def slack(self, x):
        return self.matrix @ x + self.offset

    @classmethod
    def nonneg(cls, expr: AffineExpr, name="nonneg"):
        expr = expr.real.ravel()
        return cls(name, Cone.NONNEG, expr.coef.real.T.copy(), expr.const.real.copy())

    @classmethod
    def soc(cls, t: AffineExpr, x: AffineExpr, name="soc"):
        t = AffineExpr.lift(t)
        x = AffineExpr.lift(x).ravel()
        rows = [t.real.reshape(1), x.real]
        if np.any(x.coef.imag) or np.any(x.const.imag):
            rows.append(x.imag)
        stacked = AffineExpr.concat(rows)
        return cls(name, Cone.SOC, stacked.coef.real.T.copy(), stacked.const.real.copy())

    @classmethod
    def psd(cls, expr: AffineExpr, name="psd"):
        n = expr.shape[0]
        if expr.ndim != 2 or expr.shape[1] != n:
            raise ValueError(f"PSD block {name} needs a square expression, got {expr.shape}")
        scale = max(1.0, float(np.max(np.abs(expr.coef), initial=0.0)), float(np.max(np.abs(expr.const))))
        skew = max(
            float(np.max(np.abs(expr.coef - np.swapaxes(expr.coef, -1, -2).conj()), initial=0.0)),
            float(np.max(np.abs(expr.const - expr.const.conj().T))),
        )
        if skew > 1e-9 * scale:
            raise ValueError(f"PSD block {name} is not Hermitian (skew {skew:.2e})")
        is_real = not (np.any(expr.coef.imag) or np.any(expr.const.imag))
        if is_real:
            embedded_coef, embedded_const, side = expr.coef.real, expr.const.real, n
        else:
            embedded_coef = np.stack([_embed(hermitian_part(c)) for c in expr.coef]) if expr.num_vars else np.zeros((0, 2 * n, 2 * n))
            embedded_const, side = _embed(hermitian_part(expr.const)), 2 * n
        # cvxopt stores matrices column-major
        matrix = embedded_coef.transpose(0, 2, 1).reshape(expr.num_vars, side * side).T
        offset = embedded_const.T.reshape(side * side)
        return cls(name, Cone.PSD, matrix.copy(), offset.copy(), side, 0 if is_real else n)


def hyperbolic_constraint(a: AffineExpr, b: AffineExpr, s: float, name="hyperbolic") -> ConeBlock:
    """a * b >= s with a, b >= 0, as ||[2 sqrt(s), a - b]|| <= a + b."""
    if s <= 0:
        raise ValueError(f"Hyperbolic constraint needs s > 0, got {s}")
    a, b = AffineExpr.lift(a), AffineExpr.lift(b)
    x = AffineExpr.concat([AffineExpr.lift(np.array([2.0 * np.sqrt(s)])), (a - b).reshape(1)])
    return ConeBlock.soc(a + b, x, name)


@dataclass(frozen=True, eq=False)
class ConicProgram:
    objective: np.ndarray
    objective_offset: float
    blocks: Tuple[ConeBlock, ...]
    variable_names: Tuple[str, ...]

    def __post_init__(self):
        n = len(self.objective)
        if n != len(self.variable_names):
            raise ValueError("Objective length does not match the variable table")
        for block in self.blocks:
            if block.matrix.shape[1] != n:
                raise ValueError(f"Block {block.name} has {block.matrix.shape[1]} columns, expected {n}")
            if block.cone == Cone.PSD and block.dim != block.side**2:
                raise ValueError(f"PSD block {block.name} has {block.dim} rows for side {block.side}")
            if block.cone == Cone.SOC and block.dim < 1:
                raise ValueError(f"SOC block {block.name} is empty")

    @property
    def num_vars(self):
        return len(self.objective)

    def to_triplets(self):
        for col in np.flatnonzero(self.objective):
            yield ("objective", 0, int(col), float(self.objective[col]))
        for index, block in enumerate(self.blocks):
            coo = sparse.coo_matrix(block.matrix)
            for row, col, value in zip(coo.row, coo.col, coo.data):
                yield (f"{index}:{block.cone.value}", int(row), int(col), float(value))
            for row in np.flatnonzero(block.offset):
                yield (f"{index}:{block.cone.value}", int(row), -1, float(block.offset[row]))

    def dump_triplets(self, path):
        with open(path, "w") as f:
            for block, row, col, value in self.to_triplets():
                f.write(f"{block} {row} {col} {value:.17g}\n")
        logging.debug(f"Wrote {len(self.blocks)} blocks over {self.num_vars} variables to {path}")

    def __str__(self):
        counts = {cone: sum(1 for b in self.blocks if b.cone == cone) for cone in Cone}
        return (
            f"ConicProgram({self.num_vars} vars, {counts[Cone.NONNEG]} nonneg, "
            f"{counts[Cone.SOC]} soc, {counts[Cone.PSD]} psd blocks)"
        )


class ProgramBuilder:
    def __init__(self):
        self._names: List[str] = []
        self._blocks: List[ConeBlock] = []
        self._objective: Optional[AffineExpr] = None

    @property
    def num_vars(self):
        return len(self._names)

    def _allocate(self, names):
        start = self.num_vars
        self._names.extend(names)
        return start

    def _identity(self, start, count, shape):
        coef = np.zeros((self.num_vars, count), dtype=complex)
        coef[start + np.arange(count), np.arange(count)] = 1.0
        return AffineExpr(coef.reshape((self.num_vars,) + shape), np.zeros(shape, dtype=complex))

    def real(self, name, shape=()):
        shape = tuple(np.atleast_1d(shape)) if shape != () else ()
        count = int(np.prod(shape)) if shape else 1
        start = self._allocate([f"{name}[{i}]" for i in range(count)] if shape else [name])
        return self._identity(start, count, shape)

    def complex(self, name, shape):
        shape = tuple(np.atleast_1d(shape))
        count = int(np.prod(shape))
        start = self._allocate([f"re({name})[{i}]" for i in range(count)] + [f"im({name})[{i}]" for i in range(count)])
        coef = np.zeros((self.num_vars, count), dtype=complex)
        coef[start + np.arange(count), np.arange(count)] = 1.0
        coef[start + count + np.arange(count), np.arange(count)] = 1j
        return AffineExpr(coef.reshape((self.num_vars,) + shape), np.zeros(shape, dtype=complex))

    def hermitian(self, name, n):
        """n x n Hermitian matrix: real diagonal, real and imaginary strict upper triangle."""
        upper_rows, upper_cols = np.triu_indices(n, k=1)
        names = [f"{name}[{i},{i}]" for i in range(n)]
        names += [f"re({name})[{i},{j}]" for i, j in zip(upper_rows, upper_cols)]
        names += [f"im({name})[{i},{j}]" for i, j in zip(upper_rows, upper_cols)]
        start = self._allocate(names)
        m = len(upper_rows)
        coef = np.zeros((self.num_vars, n, n), dtype=complex)
        diag = np.arange(n)
        coef[start + diag, diag, diag] = 1.0
        offdiag = start + n + np.arange(m)
        coef[offdiag, upper_rows, upper_cols] = 1.0
        coef[offdiag, upper_cols, upper_rows] = 1.0
        coef[offdiag + m, upper_rows, upper_cols] = 1j
        coef[offdiag + m, upper_cols, upper_rows] = -1j
        return AffineExpr(coef, np.zeros((n, n), dtype=complex))

    def add(self, block: ConeBlock) -> int:
        self._blocks.append(block)
        return len(self._blocks) - 1

    def nonneg(self, expr, name="nonneg") -> int:
        return self.add(ConeBlock.nonneg(AffineExpr.lift(expr, self.num_vars), name))

    def soc(self, t, x, name="soc") -> int:
        return self.add(ConeBlock.soc(t, x, name))

    def psd(self, expr, name="psd") -> int:
        return self.add(ConeBlock.psd(expr, name))

    def hyperbolic(self, a, b, s, name="hyperbolic") -> int:
        return self.add(hyperbolic_constraint(a, b, s, name))

    def squared_norm_bound(self, x, bound, name="squared_norm") -> int:
        """||x||^2 <= bound for an affine scalar bound."""
        bound = AffineExpr.lift(bound).reshape(())
        x = AffineExpr.lift(x).ravel()
        residual = AffineExpr.concat([x, ((bound - 1.0) * 0.5).reshape(1)])
        return self.soc((bound + 1.0) * 0.5, residual, name)

    def minimize(self, expr):
        self._objective = AffineExpr.lift(expr).reshape(())

    def build(self) -> ConicProgram:
        n = self.num_vars
        objective = self._objective if self._objective is not None else AffineExpr.constant(0.0)
        objective = objective.widen(n)
        return ConicProgram(
            objective=objective.coef.real.copy(),
            objective_offset=float(objective.const.real),
            blocks=tuple(block.widen(n) for block in self._blocks),
            variable_names=tuple(self._names),
        )


@dataclass(eq=False)
class ConicSolution:
    status: SolverStatus
    primal: Optional[np.ndarray]
    duals: List[Optional[np.ndarray]]
    objective: float
    iterations: int
    dual_objective: float = float("nan")
    gap: float = float("nan")
    primal_residual: float = float("nan")
    dual_residual: float = float("nan")
    inaccurate: bool = False
    wall_time: float = 0.0
    certificate: Optional[np.ndarray] = None
    backend: str = ""

    @property
    def optimal(self):
        return self.status == SolverStatus.OPTIMAL

    def value(self, expr: AffineExpr):
        if self.primal is None:
            raise SolverFailure(f"No primal values for status {self.status.value}")
        return expr.value(self.primal)

    def real_value(self, expr: AffineExpr):
        return np.real(self.value(expr))

    def dual(self, block_index):
        return self.duals[block_index]

    def __str__(self):
        return (
            f"{self.backend} {self.status.value}: objective={self.objective:.6g}, "
            f"gap={self.gap:.2e}, iterations={self.iterations}, {self.wall_time * 1e3:.1f} ms"
        )


class ConicBackend(Protocol):
    name: str

    def solve(self, program: ConicProgram, tol: float, max_iters: int) -> ConicSolution: ...


class CvxoptBackend:
    """Interior-point solve through cvxopt.solvers.conelp (G x + s = h, s in K)."""

    name = "cvxopt"

    def __init__(self, relaxed_tol=RELAXED_TOL):
        self.relaxed_tol = relaxed_tol

    def _ordered_blocks(self, program):
        order = [i for i, b in enumerate(program.blocks) if b.cone == Cone.NONNEG]
        order += [i for i, b in enumerate(program.blocks) if b.cone == Cone.SOC]
        order += [i for i, b in enumerate(program.blocks) if b.cone == Cone.PSD]
        return order

    def _to_cvxopt(self, program, order):
        from cvxopt import matrix, spmatrix

        blocks = [program.blocks[i] for i in order]
        dims = {
            "l": sum(b.dim for b in blocks if b.cone == Cone.NONNEG),
            "q": [b.dim for b in blocks if b.cone == Cone.SOC],
            "s": [b.side for b in blocks if b.cone == Cone.PSD],
        }
        stacked = sparse.vstack([sparse.coo_matrix(-b.matrix) for b in blocks]).tocoo()
        G = spmatrix(stacked.data.tolist(), stacked.row.tolist(), stacked.col.tolist(), stacked.shape)
        h = matrix(np.concatenate([b.offset for b in blocks]).reshape(-1, 1))
        c = matrix(program.objective.reshape(-1, 1))
        return c, G, h, dims

    def _split_duals(self, program, order, z):
        duals = [None] * len(program.blocks)
        offset = 0
        for index in order:
            block = program.blocks[index]
            segment = z[offset : offset + block.dim]
            offset += block.dim
            if block.cone == Cone.PSD:
                square = segment.reshape(block.side, block.side, order="F")
                lower = np.tril(square)
                square = lower + np.tril(square, -1).T
                duals[index] = unembed_symmetric(square) if block.hermitian_side else square
            else:
                duals[index] = segment.copy()
        return duals

    def solve(self, program: ConicProgram, tol: float = DEFAULT_TOL, max_iters: int = DEFAULT_MAX_ITERS) -> ConicSolution:
        try:
            from cvxopt import solvers
        except ImportError as e:
            raise SolverFailure("cvxopt is not installed") from e

        order = self._ordered_blocks(program)
        c, G, h, dims = self._to_cvxopt(program, order)
        options = {
            "show_progress": False,
            "abstol": tol,
            "reltol": tol,
            "feastol": tol,
            "maxiters": max_iters,
        }
        start = time.perf_counter()
        try:
            result = solvers.conelp(c, G, h, dims, options=options)
        except (ArithmeticError, ValueError) as e:
            logging.debug(f"conelp raised {e!r} on {program}")
            return ConicSolution(SolverStatus.NUMERICAL_FAILURE, None, [None] * len(program.blocks), float("nan"), 0, wall_time=time.perf_counter() - start, backend=self.name)
        elapsed = time.perf_counter() - start
        return self._interpret(program, order, result, elapsed)

    def _interpret(self, program, order, result, elapsed):
        status_name = result["status"]
        iterations = int(result.get("iterations", 0) or 0)
        x = np.array(result["x"]).ravel() if result.get("x") is not None else None
        z = np.array(result["z"]).ravel() if result.get("z") is not None else None

        def metric(key):
            value = result.get(key)
            return float(value) if value is not None else float("nan")

        pres, dres = metric("primal infeasibility"), metric("dual infeasibility")
        gap = metric("relative gap")
        if np.isnan(gap):
            gap = metric("gap")
        status, inaccurate, certificate = SolverStatus.NUMERICAL_FAILURE, False, None
        if status_name == "optimal":
            status = SolverStatus.OPTIMAL
        elif status_name == "primal infeasible":
            status, certificate = SolverStatus.INFEASIBLE, z
        elif status_name == "dual infeasible":
            status, certificate = SolverStatus.UNBOUNDED, x
        else:
            if max(pres, dres, abs(gap)) <= self.relaxed_tol:
                status, inaccurate = SolverStatus.OPTIMAL, True
                logging.warning(
                    f"⚠️ conelp stopped at iteration {iterations} with residuals "
                    f"{pres:.1e}/{dres:.1e}, gap {gap:.1e}; accepting as inaccurate optimum"
                )
            elif metric("residual as primal infeasibility certificate") <= self.relaxed_tol:
                status, certificate = SolverStatus.INFEASIBLE, z
        primal_objective = metric("primal objective") + program.objective_offset
        dual_objective = metric("dual objective") + program.objective_offset
        solution = ConicSolution(
            status=status,
            primal=x if status == SolverStatus.OPTIMAL else None,
            duals=self._split_duals(program, order, z) if status == SolverStatus.OPTIMAL and z is not None else [None] * len(program.blocks),
            objective=primal_objective,
            iterations=iterations,
            dual_objective=dual_objective,
            gap=gap,
            primal_residual=pres,
            dual_residual=dres,
            inaccurate=inaccurate,
            wall_time=elapsed,
            certificate=certificate,
            backend=self.name,
        )
        logging.debug(f"{program} -> {solution}")
        return solution


_DEFAULT_BACKEND = CvxoptBackend()


def solve(
    program: ConicProgram,
    tol: float = DEFAULT_TOL,
    backend: Optional[ConicBackend] = None,
    max_iters: int = DEFAULT_MAX_ITERS,
) -> ConicSolution:
    return (backend or _DEFAULT_BACKEND).solve(program, tol, max_iters)


def solve_or_raise(program: ConicProgram, name: str, tol: float = DEFAULT_TOL, backend: Optional[ConicBackend] = None) -> ConicSolution:
    """Solve and convert non-optimal outcomes into exceptions."""
    solution = solve(program, tol, backend)
    if solution.status == SolverStatus.OPTIMAL:
        return solution
    if solution.status == SolverStatus.INFEASIBLE:
        raise InfeasibleProgram(f"{name} is infeasible")
    raise SolverFailure(f"{name} ended with status {solution.status.value} after {solution.iterations} iterations")


def psd_corner(dual: np.ndarray) -> float:
    """Lower-right entry of a Hermitian dual block."""
    return float(np.real(dual[-1, -1]))


def principal_component(matrix: np.ndarray) -> Tuple[np.ndarray, float]:
    """Principal eigenvector scaled by sqrt of its eigenvalue, plus the second/first eigenvalue ratio."""
    values, vectors = np.linalg.eigh(hermitian_part(matrix))
    top = max(values[-1], 0.0)
    ratio = float(max(values[-2], 0.0) / top) if len(values) > 1 and top > 0 else 0.0
    return np.sqrt(top) * vectors[:, -1], ratio


def eigen_factor(matrix: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Q and Lambda^(1/2) of a PSD matrix with eigenvalues in descending order."""
    values, vectors = np.linalg.eigh(hermitian_part(matrix))
    values = np.clip(values[::-1], 0.0, None)
    return vectors[:, ::-1], np.sqrt(values)

