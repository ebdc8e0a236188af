"""
Dense 2-D reverse-mode differentiation.

A Graph records every operation as a node (op kind, input node ids, cached
output). Nodes are appended in evaluation order, so the node list is already
topologically sorted and backward() simply walks it in reverse.

Only the operation set the FNR head needs is supported: matmul, pairwise
row inner products, transpose, elementwise add/mul/scale, bias rows,
column concat, exact GELU, row softmax, inverted dropout, clamp, log and
sum/mean reductions.

Precision:
- "standard" (float32) is used for training
- "extended" (float64) is used for gradient checking, where central
  differences at h=1e-6 are meaningless in float32
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from errors import ContractError, NumericError, ShapeError

logger = logging.getLogger(__name__)

DTYPES = {"standard": np.float32, "extended": np.float64}

LOG_CLAMP = 1e-7
SQRT2 = math.sqrt(2.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Tensor2 values are plain 2-D numpy arrays
Tensor2 = np.ndarray


def dtype_for(precision):
    try:
        return DTYPES[precision]
    except KeyError:
        raise ContractError(f"Unknown precision {precision!r}; expected one of {sorted(DTYPES)}") from None


def tensor2(values, dtype=np.float64):
    """Coerce to a finite 2-D array (1-D input becomes a single row)."""
    out = np.array(values, dtype=dtype, ndmin=2)
    if out.ndim != 2:
        raise ShapeError(f"Expected a 2-D tensor, got shape {out.shape}")
    if not np.isfinite(out).all():
        raise NumericError("Tensor contains NaN or Inf")
    return out


def _phi(x):
    """Standard normal CDF via the error function."""
    return 0.5 * (1.0 + erf(x / SQRT2))


@dataclass
class Node:
    op: str
    inputs: tuple
    value: np.ndarray
    requires_grad: bool
    ctx: dict = field(default_factory=dict)


class Graph:
    """
    Single-use computation graph.

    Build it by calling the op methods (each returns a node id), then call
    backward() once on a 1x1 loss node.
    """

    def __init__(self, precision="standard"):
        self.precision = precision
        self.dtype = dtype_for(precision)
        self.nodes = []
        self.parameters = set()

    # ------------------------------------------------------------------ #
    # bookkeeping
    # ------------------------------------------------------------------ #
    def _push(self, op, inputs, value, **ctx):
        if not np.isfinite(value).all():
            raise NumericError(f"Non-finite output from '{op}' (node {len(self.nodes)})")
        requires = any(self.nodes[i].requires_grad for i in inputs)
        self.nodes.append(Node(op, tuple(inputs), value, requires, ctx))
        return len(self.nodes) - 1

    def leaf(self, value, trainable=False):
        """Add an input tensor; trainable leaves receive gradients."""
        data = tensor2(value, self.dtype)
        self.nodes.append(Node("leaf", (), data, trainable))
        node = len(self.nodes) - 1
        if trainable:
            self.parameters.add(node)
        return node

    def constant(self, value):
        return self.leaf(value, trainable=False)

    def value(self, node):
        return self.nodes[node].value

    def shape(self, node):
        return self.nodes[node].value.shape

    def _same_shape(self, op, a, b):
        if self.shape(a) != self.shape(b):
            raise ShapeError(f"{op}: shape mismatch {self.shape(a)} vs {self.shape(b)}")

    # ------------------------------------------------------------------ #
    # operations
    # ------------------------------------------------------------------ #
    def matmul(self, a, b):
        sa, sb = self.shape(a), self.shape(b)
        if sa[1] != sb[0]:
            raise ShapeError(f"matmul: cannot multiply {sa} by {sb}")
        return self._push("matmul", (a, b), self.value(a) @ self.value(b))

    def inner(self, a, b):
        """
        Pairwise row inner products, a @ b.T.

        Products are summed along the feature axis row by row, so
        inner(a, b) equals inner(b, a).T bitwise.
        """
        sa, sb = self.shape(a), self.shape(b)
        if sa[1] != sb[1]:
            raise ShapeError(f"inner: feature sizes differ {sa} vs {sb}")
        va, vb = self.value(a), self.value(b)
        out = (va[:, None, :] * vb[None, :, :]).sum(axis=2)
        return self._push("inner", (a, b), out)

    def transpose(self, a):
        return self._push("transpose", (a,), np.ascontiguousarray(self.value(a).T))

    def add(self, a, b):
        self._same_shape("add", a, b)
        return self._push("add", (a, b), self.value(a) + self.value(b))

    def mul(self, a, b):
        self._same_shape("mul", a, b)
        return self._push("mul", (a, b), self.value(a) * self.value(b))

    def scale(self, a, c):
        c = float(c)
        return self._push("scale", (a,), self.value(a) * c, c=c)

    def one_minus(self, a):
        return self._push("one_minus", (a,), 1.0 - self.value(a))

    def add_row(self, a, row):
        """Add a 1 x cols bias row to every row of a."""
        sa, sr = self.shape(a), self.shape(row)
        if sr != (1, sa[1]):
            raise ShapeError(f"add_row: bias {sr} does not fit {sa}")
        return self._push("add_row", (a, row), self.value(a) + self.value(row))

    def concat(self, a, b):
        sa, sb = self.shape(a), self.shape(b)
        if sa[0] != sb[0]:
            raise ShapeError(f"concat: row counts differ {sa} vs {sb}")
        out = np.concatenate([self.value(a), self.value(b)], axis=1)
        return self._push("concat", (a, b), out, split=sa[1])

    def gelu(self, a):
        x = self.value(a)
        cdf = _phi(x)
        return self._push("gelu", (a,), x * cdf, cdf=cdf)

    def softmax_rows(self, a):
        x = self.value(a)
        z = np.exp(x - x.max(axis=1, keepdims=True))
        return self._push("softmax_rows", (a,), z / z.sum(axis=1, keepdims=True))

    def dropout(self, a, rate, rng):
        """Inverted dropout: survivors are scaled by 1/(1-rate)."""
        if not 0.0 <= rate < 1.0:
            raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
        keep = rng.random(self.shape(a)) >= rate
        mask = keep.astype(self.dtype) / (1.0 - rate)
        return self._push("dropout", (a,), self.value(a) * mask, mask=mask)

    def clamp(self, a, lo, hi):
        return self._push("clamp", (a,), np.clip(self.value(a), lo, hi), lo=lo, hi=hi)

    def log(self, a):
        x = self.value(a)
        if (x <= 0).any():
            raise NumericError("log of a non-positive value; clamp first")
        return self._push("log", (a,), np.log(x))

    def sum(self, a):
        return self._push("sum", (a,), self.value(a).sum(keepdims=True).reshape(1, 1))

    def mean(self, a):
        x = self.value(a)
        return self._push("mean", (a,), np.array([[x.sum() / x.size]], dtype=self.dtype))

    # ------------------------------------------------------------------ #
    # composites
    # ------------------------------------------------------------------ #
    def bce_mean(self, target, pred):
        """
        Mean over all elements of -(t ln p + (1-t) ln(1-p)).

        pred is clamped to [1e-7, 1-1e-7] before either logarithm. The
        target may itself depend on trainable nodes.
        """
        self._same_shape("bce_mean", target, pred)
        t = self.value(target)
        if (t < 0).any() or (t > 1).any():
            raise ContractError("bce_mean: target entries must lie in [0, 1]")
        p = self.clamp(pred, LOG_CLAMP, 1.0 - LOG_CLAMP)
        pos = self.mul(target, self.log(p))
        neg = self.mul(self.one_minus(target), self.log(self.one_minus(p)))
        return self.scale(self.mean(self.add(pos, neg)), -1.0)

    def scalar(self, node):
        return float(self.value(node)[0, 0])

    # ------------------------------------------------------------------ #
    # reverse pass
    # ------------------------------------------------------------------ #
    def backward(self, loss):
        """
        Gradients of the 1x1 loss node w.r.t. every trainable leaf.

        Leaves the loss does not reach get zeros.
        """
        if self.shape(loss) != (1, 1):
            raise ContractError(f"backward needs a scalar (1x1) loss node, got {self.shape(loss)}")

        grads = {loss: np.ones((1, 1), dtype=self.dtype)}
        for index in range(loss, -1, -1):
            node = self.nodes[index]
            if node.op == "leaf" or not node.requires_grad:
                continue
            g = grads.pop(index, None)
            if g is None:
                continue
            for parent, pg in zip(node.inputs, _BACKWARD[node.op](self, node, g)):
                if pg is None or not self.nodes[parent].requires_grad:
                    continue
                if parent in grads:
                    grads[parent] = grads[parent] + pg
                else:
                    grads[parent] = pg

        return {p: grads.get(p, np.zeros_like(self.nodes[p].value)) for p in self.parameters}


def backward(graph, loss):
    return graph.backward(loss)


# ---------------------------------------------------------------------- #
# vector-Jacobian products, one per op
# ---------------------------------------------------------------------- #
def _vjp_matmul(graph, node, g):
    a, b = (graph.value(i) for i in node.inputs)
    return g @ b.T, a.T @ g


def _vjp_inner(graph, node, g):
    a, b = (graph.value(i) for i in node.inputs)
    return g @ b, g.T @ a


def _vjp_gelu(graph, node, g):
    x = graph.value(node.inputs[0])
    pdf = np.exp(-0.5 * x * x) * INV_SQRT_2PI
    return (g * (node.ctx["cdf"] + x * pdf),)


def _vjp_softmax(graph, node, g):
    y = node.value
    return (y * (g - (g * y).sum(axis=1, keepdims=True)),)


def _vjp_clamp(graph, node, g):
    x = graph.value(node.inputs[0])
    inside = (x >= node.ctx["lo"]) & (x <= node.ctx["hi"])
    return (g * inside,)


def _vjp_concat(graph, node, g):
    split = node.ctx["split"]
    return g[:, :split], g[:, split:]


def _vjp_mul(graph, node, g):
    a, b = (graph.value(i) for i in node.inputs)
    return g * b, g * a


def _vjp_mean(graph, node, g):
    x = graph.value(node.inputs[0])
    return (np.full_like(x, g[0, 0] / x.size),)


_BACKWARD = {
    "matmul": _vjp_matmul,
    "inner": _vjp_inner,
    "transpose": lambda graph, node, g: (g.T,),
    "add": lambda graph, node, g: (g, g),
    "mul": _vjp_mul,
    "scale": lambda graph, node, g: (g * node.ctx["c"],),
    "one_minus": lambda graph, node, g: (-g,),
    "add_row": lambda graph, node, g: (g, g.sum(axis=0, keepdims=True)),
    "concat": _vjp_concat,
    "gelu": _vjp_gelu,
    "softmax_rows": _vjp_softmax,
    "dropout": lambda graph, node, g: (g * node.ctx["mask"],),
    "clamp": _vjp_clamp,
    "log": lambda graph, node, g: (g / graph.value(node.inputs[0]),),
    "sum": lambda graph, node, g: (np.full_like(graph.value(node.inputs[0]), g[0, 0]),),
    "mean": _vjp_mean,
}


# ---------------------------------------------------------------------- #
# finite-difference verification
# ---------------------------------------------------------------------- #
@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    per_param: dict
    offending: list
    tol: float

    @property
    def passed(self):
        return not self.offending


def relative_error(analytic, numeric):
    """|a - n| / max(|a|, |n|, 1e-12), entry by entry; a float for scalar input."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    err = np.abs(analytic - numeric) / scale
    return float(err) if err.ndim == 0 else err


def finite_diff_check(loss_fn, params, step=1e-6, tol=1e-5):
    """
    Compare analytic gradients with central differences.

    loss_fn(params) must return (loss value, {name: gradient}) and be
    deterministic. params maps names to float arrays and is not modified.
    A parameter's error is the largest relative error over its entries;
    worst_index is the entry where the overall worst error occurs.
    """
    base = {name: np.array(value, dtype=np.float64) for name, value in params.items()}
    value_a, grads = loss_fn(base)
    value_b, _ = loss_fn(base)
    if value_a != value_b:
        raise ContractError(f"finite_diff_check: loss_fn is not deterministic ({value_a!r} != {value_b!r})")

    per_param = {}
    worst = (0.0, "", ())
    for name, theta in base.items():
        analytic = np.asarray(grads[name], dtype=np.float64).reshape(theta.shape)
        numeric = np.zeros_like(theta)
        for index in np.ndindex(theta.shape):
            original = theta[index]
            theta[index] = original + step
            plus, _ = loss_fn(base)
            theta[index] = original - step
            minus, _ = loss_fn(base)
            theta[index] = original
            numeric[index] = (plus - minus) / (2.0 * step)

        errors = np.asarray(relative_error(analytic, numeric)).reshape(-1)
        flat = int(np.argmax(errors))
        err = float(errors[flat])
        per_param[name] = err
        if err > worst[0] or not worst[1]:
            worst = (err, name, tuple(int(i) for i in np.unravel_index(flat, theta.shape)))

    offending = [name for name, err in per_param.items() if err >= tol]
    for name in offending:
        logger.warning(f"Gradient check failed for {name}: rel err {per_param[name]:.3e} >= {tol:g}")

    return GradCheckReport(
        max_rel_error=worst[0],
        worst_param=worst[1],
        worst_index=worst[2],
        per_param=per_param,
        offending=offending,
        tol=tol,
    )
