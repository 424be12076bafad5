"""Reverse-mode automatic differentiation over dense 2-D float64 matrices.

Every differentiable value is a Tensor: a (rows, cols) float64 array plus an
optional handle into the Tape that recorded it. A Tensor without a tape is a
constant; all operations also accept pure constants and then record nothing,
which doubles as the tape-free evaluation mode used at meta-test time.

A Tape stores nodes in execution order, so inputs always precede the ops that
consume them and the reverse pass is a single reversed sweep over the list.
Arrays handed to Tensors are not copied and must not be mutated while a tape
that references them is still alive.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np


class AutodiffError(ValueError):
    """Shape mismatch, domain violation, or non-finite result."""


def _as_matrix(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise AutodiffError(f"tensors are 2-D matrices, got shape {arr.shape}")
    return arr


class Tensor:
    """Dense float64 matrix, optionally recorded on a Tape.

    Scalars and 1-D arrays are promoted to (1, 1) and (1, n). Python
    operators (+, -, *, @) delegate to the module-level ops.
    """

    __slots__ = ("values", "tape", "node_id")

    def __init__(self, values, tape: "Tape | None" = None, node_id: int | None = None):
        self.values = _as_matrix(values)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise AutodiffError(f"item() needs a 1x1 tensor, got shape {self.shape}")
        return float(self.values[0, 0])

    def __repr__(self) -> str:
        tag = "const" if self.tape is None else f"node {self.node_id}"
        return f"Tensor(shape={self.shape}, {tag})"

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, _lift(other))

    def __rsub__(self, other):
        return subtract(_lift(other), self)

    def __mul__(self, other):
        return multiply(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def constant(values) -> Tensor:
    """Wrap values as a tape-free Tensor."""
    return Tensor(values)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("inputs", "backward_fns")

    def __init__(self, inputs, backward_fns):
        self.inputs = inputs            # parent node ids, aligned with backward_fns
        self.backward_fns = backward_fns  # each maps upstream grad -> contribution


class Tape:
    """Ordered record of differentiable operations for one reverse pass."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def leaf(self, values) -> Tensor:
        """Register an input whose gradient backward() will report."""
        self._nodes.append(_Node((), ()))
        return Tensor(values, self, len(self._nodes) - 1)

    def record(self, out_values, parents, backward_fns) -> Tensor:
        """Record a custom op. parents are tape-bound Tensors; backward_fns[i]
        maps the upstream gradient to the contribution for parents[i]."""
        ids = tuple(p.node_id for p in parents)
        self._nodes.append(_Node(ids, tuple(backward_fns)))
        return Tensor(out_values, self, len(self._nodes) - 1)

    def backward(self, loss: Tensor) -> list[np.ndarray | None]:
        """Accumulate adjoints of loss w.r.t. every recorded node.

        Returns a list indexed by node id; entries are None for nodes the
        loss does not depend on.
        """
        if loss.tape is not self:
            raise AutodiffError("loss tensor was not recorded on this tape")
        if loss.shape != (1, 1):
            raise AutodiffError(f"loss must be a 1x1 scalar, got shape {loss.shape}")
        grads: list[np.ndarray | None] = [None] * len(self._nodes)
        grads[loss.node_id] = np.ones((1, 1))
        for i in range(loss.node_id, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = self._nodes[i]
            for pid, fn in zip(node.inputs, node.backward_fns):
                contrib = fn(g)
                grads[pid] = contrib if grads[pid] is None else grads[pid] + contrib
        return grads


def backward(tape: Tape, loss: Tensor) -> list[np.ndarray | None]:
    """Functional alias for Tape.backward."""
    return tape.backward(loss)


# ---------------------------------------------------------------------------
# op plumbing
# ---------------------------------------------------------------------------

def _ensure_finite(op: str, out: np.ndarray) -> None:
    if not np.isfinite(out).all():
        raise AutodiffError(f"{op}: non-finite values in output")


def _result(op: str, out: np.ndarray, pairs) -> Tensor:
    """Finish an op: finiteness check, tape resolution, node recording.

    pairs is a sequence of (input Tensor, backward fn); constants drop out.
    """
    _ensure_finite(op, out)
    tape = None
    for t, _ in pairs:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise AutodiffError(f"{op}: inputs recorded on two different tapes")
    if tape is None:
        return Tensor(out)
    live = [(t, fn) for t, fn in pairs if t.tape is not None]
    return tape.record(out, [t for t, _ in live], [fn for _, fn in live])


def _broadcast_shape(op: str, a: tuple[int, int], b: tuple[int, int]) -> tuple[int, int]:
    shape = []
    for da, db in zip(a, b):
        if da == db or db == 1:
            shape.append(da)
        elif da == 1:
            shape.append(db)
        else:
            raise AutodiffError(f"{op} shape mismatch: {a} vs {b}")
    return tuple(shape)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    # Collapse gradient back onto a row/column-vector input.
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# the differentiable primitive set
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape[1] != b.shape[0]:
        raise AutodiffError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.values @ b.values
    av, bv = a.values, b.values
    return _result("matmul", out, [
        (a, lambda g: g @ bv.T),
        (b, lambda g: av.T @ g),
    ])


def sparse_dense_matmul(adj, x: Tensor) -> Tensor:
    """Multiply a fixed sparse adjacency (CSR, non-differentiable) by x.

    adj must expose num_nodes, to_csr() and to_csr_transpose() returning
    scipy CSR matrices; NormalizedAdjacency does.
    """
    x = _lift(x)
    if adj.num_nodes != x.shape[0]:
        raise AutodiffError(
            f"sparse_dense_matmul shape mismatch: ({adj.num_nodes}, {adj.num_nodes}) @ {x.shape}"
        )
    csr = adj.to_csr()
    out = csr @ x.values
    csr_t = adj.to_csr_transpose()
    return _result("sparse_dense_matmul", out, [(x, lambda g: csr_t @ g)])


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("add", a.shape, b.shape)
    out = a.values + b.values
    return _result("add", out, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


def subtract(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("subtract", a.shape, b.shape)
    out = a.values - b.values
    return _result("subtract", out, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    ])


def multiply(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product, broadcasting row/column vectors."""
    a, b = _lift(a), _lift(b)
    _broadcast_shape("multiply", a.shape, b.shape)
    out = a.values * b.values
    av, bv = a.values, b.values
    return _result("multiply", out, [
        (a, lambda g: _unbroadcast(g * bv, a.shape)),
        (b, lambda g: _unbroadcast(g * av, b.shape)),
    ])


def scale(x: Tensor, c: float) -> Tensor:
    x = _lift(x)
    c = float(c)
    out = x.values * c
    return _result("scale", out, [(x, lambda g: g * c)])


def relu(x: Tensor) -> Tensor:
    x = _lift(x)
    out = np.maximum(x.values, 0.0)
    mask = x.values > 0.0
    return _result("relu", out, [(x, lambda g: g * mask)])


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    x = _lift(x)
    out = np.where(x.values > 0.0, x.values, slope * x.values)
    grad_factor = np.where(x.values > 0.0, 1.0, slope)
    return _result("leaky_relu", out, [(x, lambda g: g * grad_factor)])


def exp(x: Tensor) -> Tensor:
    x = _lift(x)
    out = np.exp(x.values)
    return _result("exp", out, [(x, lambda g: g * out)])


def log(x: Tensor) -> Tensor:
    x = _lift(x)
    if np.any(x.values <= 0.0):
        bad = np.argwhere(x.values <= 0.0)[0]
        raise AutodiffError(
            f"log: non-positive entry {x.values[bad[0], bad[1]]!r} at ({bad[0]}, {bad[1]})"
        )
    out = np.log(x.values)
    xv = x.values
    return _result("log", out, [(x, lambda g: g / xv)])


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), computed stably; used to keep predicted scales > 0."""
    x = _lift(x)
    out = np.logaddexp(0.0, x.values)
    xv = x.values
    # d/dx softplus = sigmoid(x), written to avoid overflow for |x| large
    sig = np.where(xv >= 0, 1.0 / (1.0 + np.exp(-np.abs(xv))),
                   np.exp(-np.abs(xv)) / (1.0 + np.exp(-np.abs(xv))))
    return _result("softplus", out, [(x, lambda g: g * sig)])


def row_softmax(x: Tensor) -> Tensor:
    """Softmax over each row, with the row max subtracted for stability."""
    x = _lift(x)
    shifted = x.values - x.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def back(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        return out * (g - inner)

    return _result("row_softmax", out, [(x, back)])


def row_sum(x: Tensor) -> Tensor:
    x = _lift(x)
    out = x.values.sum(axis=1, keepdims=True)
    cols = x.shape[1]
    return _result("row_sum", out, [(x, lambda g: np.repeat(g, cols, axis=1))])


def row_mean(x: Tensor) -> Tensor:
    x = _lift(x)
    cols = x.shape[1]
    out = x.values.mean(axis=1, keepdims=True)
    return _result("row_mean", out, [(x, lambda g: np.repeat(g / cols, cols, axis=1))])


def sum_all(x: Tensor) -> Tensor:
    x = _lift(x)
    out = np.array([[x.values.sum()]])
    shape = x.shape
    return _result("sum_all", out, [(x, lambda g: np.full(shape, g[0, 0]))])


def mean_all(x: Tensor) -> Tensor:
    x = _lift(x)
    out = np.array([[x.values.mean()]])
    shape = x.shape
    size = x.values.size
    return _result("mean_all", out, [(x, lambda g: np.full(shape, g[0, 0] / size))])


def column_slice(x: Tensor, start: int, stop: int) -> Tensor:
    x = _lift(x)
    if not (0 <= start < stop <= x.shape[1]):
        raise AutodiffError(f"column_slice [{start}:{stop}] out of range for shape {x.shape}")
    out = x.values[:, start:stop].copy()
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return full

    return _result("column_slice", out, [(x, back)])


def concat_rows(tensors) -> Tensor:
    """Stack matrices vertically; all inputs must share a column count."""
    tensors = [_lift(t) for t in tensors]
    cols = tensors[0].shape[1]
    for t in tensors[1:]:
        if t.shape[1] != cols:
            raise AutodiffError(
                f"concat_rows column mismatch: {tensors[0].shape} vs {t.shape}"
            )
    out = np.vstack([t.values for t in tensors])
    pairs = []
    offset = 0
    for t in tensors:
        lo, hi = offset, offset + t.shape[0]
        pairs.append((t, lambda g, lo=lo, hi=hi: g[lo:hi]))
        offset = hi
    return _result("concat_rows", out, pairs)


def concat_cols(tensors) -> Tensor:
    """Join matrices side by side; all inputs must share a row count."""
    tensors = [_lift(t) for t in tensors]
    rows = tensors[0].shape[0]
    for t in tensors[1:]:
        if t.shape[0] != rows:
            raise AutodiffError(
                f"concat_cols row mismatch: {tensors[0].shape} vs {t.shape}"
            )
    out = np.hstack([t.values for t in tensors])
    pairs = []
    offset = 0
    for t in tensors:
        lo, hi = offset, offset + t.shape[1]
        pairs.append((t, lambda g, lo=lo, hi=hi: g[:, lo:hi]))
        offset = hi
    return _result("concat_cols", out, pairs)


def l2_row_normalize(x: Tensor, row_ids=None) -> Tensor:
    """Scale each row to unit Euclidean norm.

    A zero row has no direction to normalize, which in this codebase means a
    collapsed embedding; the error names the offending row (or the id from
    row_ids when given).
    """
    x = _lift(x)
    norms = np.sqrt((x.values ** 2).sum(axis=1, keepdims=True))
    if np.any(norms == 0.0):
        row = int(np.argwhere(norms[:, 0] == 0.0)[0][0])
        name = row_ids[row] if row_ids is not None else row
        raise AutodiffError(f"l2_row_normalize: zero-norm row for node {name}")
    out = x.values / norms

    def back(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        return (g - out * inner) / norms

    return _result("l2_row_normalize", out, [(x, back)])


def transpose(x: Tensor) -> Tensor:
    x = _lift(x)
    return _result("transpose", x.values.T.copy(), [(x, lambda g: g.T)])


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows by index (repeats allowed); backward scatter-adds."""
    x = _lift(x)
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise AutodiffError(f"gather_rows: index out of range for {x.shape[0]} rows")
    out = x.values[idx]
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return full

    return _result("gather_rows", out, [(x, back)])


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor) elementwise; gradient is zero where the clamp engages."""
    x = _lift(x)
    out = np.maximum(x.values, floor)
    mask = x.values > floor
    return _result("clamp_min", out, [(x, lambda g: g * mask)])


def reshape(x: Tensor, rows: int, cols: int) -> Tensor:
    x = _lift(x)
    if rows * cols != x.values.size:
        raise AutodiffError(f"reshape to ({rows}, {cols}) incompatible with shape {x.shape}")
    out = x.values.reshape(rows, cols).copy()
    shape = x.shape
    return _result("reshape", out, [(x, lambda g: g.reshape(shape))])


def tile_rows(x: Tensor, reps: int) -> Tensor:
    """Repeat the whole matrix reps times along the row axis."""
    x = _lift(x)
    if reps < 1:
        raise AutodiffError(f"tile_rows needs reps >= 1, got {reps}")
    out = np.tile(x.values, (reps, 1))
    rows, cols = x.shape
    return _result("tile_rows", out, [
        (x, lambda g: g.reshape(reps, rows, cols).sum(axis=0)),
    ])


# ---------------------------------------------------------------------------
# parameter store
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "ugn-checkpoint-v1"


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    """Uniform(-b, b) init with b = sqrt(6 / (fan_in + fan_out))."""
    fan_in, fan_out = shape
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class ParamStore:
    """Named trainable matrices plus their optimizer moment accumulators.

    Parameter arrays are updated in place by the optimizer between episodes;
    bind() exposes them as fresh tape leaves for one forward/backward pass.
    """

    def __init__(self):
        self._params: dict[str, np.ndarray] = {}
        self.moment1: dict[str, np.ndarray] = {}
        self.moment2: dict[str, np.ndarray] = {}
        self.step_count = 0
        self.consecutive_skips = 0

    def add(self, name: str, values) -> None:
        if name in self._params:
            raise AutodiffError(f"parameter {name!r} already registered")
        arr = _as_matrix(values).copy()
        self._params[name] = arr
        self.moment1[name] = np.zeros_like(arr)
        self.moment2[name] = np.zeros_like(arr)

    def names(self) -> list[str]:
        return list(self._params)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def value(self, name: str) -> np.ndarray:
        return self._params[name]

    def set_value(self, name: str, values) -> None:
        arr = _as_matrix(values)
        if arr.shape != self._params[name].shape:
            raise AutodiffError(
                f"parameter {name!r}: shape {arr.shape} != stored {self._params[name].shape}"
            )
        self._params[name][...] = arr

    def bind(self, tape: Tape) -> dict[str, Tensor]:
        """Register every parameter as a leaf on the tape."""
        return {name: tape.leaf(arr) for name, arr in self._params.items()}

    def gradients(self, leaves: dict[str, Tensor], tape_grads) -> dict[str, np.ndarray]:
        """Pick per-parameter gradients out of a backward() result.

        Parameters the loss never touched get explicit zeros.
        """
        out = {}
        for name, leaf in leaves.items():
            g = tape_grads[leaf.node_id]
            out[name] = np.zeros_like(self._params[name]) if g is None else g
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: arr.copy() for name, arr in self._params.items()}

    def restore(self, snapshot: dict[str, np.ndarray]) -> None:
        for name, arr in snapshot.items():
            self.set_value(name, arr)

    def fingerprint(self) -> str:
        """SHA-256 over all parameter bytes, for no-mutation assertions."""
        h = hashlib.sha256()
        for name in sorted(self._params):
            h.update(name.encode())
            h.update(self._params[name].tobytes())
        return h.hexdigest()

    def state_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "params": {
                name: {"shape": list(arr.shape), "values": arr.ravel().tolist()}
                for name, arr in self._params.items()
            },
        }

    def save(self, path) -> None:
        """Write a JSON checkpoint: format tag, then name -> shape -> values.

        Floats are rendered with repr (shortest exact round-trip), so saving
        identical parameters yields identical bytes.
        """
        payload = json.dumps(self.state_dict(), sort_keys=True, indent=1)
        tmp = f"{path}.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(payload)
            fh.write("\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "ParamStore":
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise AutodiffError(f"unrecognized checkpoint format in {path}")
        store = cls()
        for name, entry in payload["params"].items():
            rows, cols = entry["shape"]
            store.add(name, np.array(entry["values"]).reshape(rows, cols))
        return store


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradientCheckResult:
    """Outcome of one finite-difference comparison."""

    passed: bool
    max_rel_error: float
    per_input: list[float]
    step: float
    tolerance: float

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"gradient check: {status}, max rel error {self.max_rel_error:.3e} "
                f"(tol {self.tolerance:.1e}, step {self.step:.1e})")


def _rel_error(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(a), abs(b))


def gradient_check(f, inputs, step: float = 1e-5, tolerance: float = 1e-6) -> GradientCheckResult:
    """Compare tape gradients of f against central finite differences.

    f maps one Tensor per entry of inputs to a 1x1 Tensor and must be
    deterministic (freeze any noise before calling). Failures are reported in
    the result, never raised.
    """
    arrays = [_as_matrix(x).copy() for x in inputs]

    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    loss = f(*leaves)
    grads = tape.backward(loss)
    analytic = [grads[leaf.node_id] for leaf in leaves]

    def eval_at(perturbed) -> float:
        return f(*[Tensor(a) for a in perturbed]).item()

    per_input = []
    for i, base in enumerate(arrays):
        g = analytic[i]
        if g is None:
            g = np.zeros_like(base)
        worst = 0.0
        work = [a.copy() for a in arrays]
        flat = work[i].ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            f_plus = eval_at(work)
            flat[j] = orig - step
            f_minus = eval_at(work)
            flat[j] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            worst = max(worst, _rel_error(g.ravel()[j], fd))
        per_input.append(worst)

    max_err = max(per_input) if per_input else 0.0
    return GradientCheckResult(
        passed=max_err < tolerance,
        max_rel_error=max_err,
        per_input=per_input,
        step=step,
        tolerance=tolerance,
    )
