"""Reverse-mode automatic differentiation over dense float64 tensors.

Every network, loss, and sampler in this package is built from the
primitives defined here.  The backward rule of each primitive is itself
written with the same primitives, so a gradient is an ordinary graph node
and can be differentiated again.  That closure property is what makes the
gradient-penalty term (a parameter gradient of an input-gradient norm)
work without any special casing.

Tensors are immutable once committed: the wrapped numpy array is marked
read-only and every operation allocates a fresh output.  All arithmetic
is float64.
"""

from __future__ import annotations

import itertools

import numpy as np

from .errors import CapabilityError, ConfigurationError, NumericError, UsageError

_ids = itertools.count()

# Primitives whose backward is not expressible in the primitive vocabulary.
# Kept empty on purpose; grad(create_graph=True) checks membership so the
# failure mode is explicit if an exception is ever added.
NON_REDIFFERENTIABLE: set[str] = set()


class Tensor:
    """A dense float64 array plus its position in the computation graph.

    Leaf tensors are created with :func:`tensor` (trainable, tracked) or
    :func:`constant` (untracked).  Interior tensors are produced by the
    primitive functions below and remember their op name, parents, and
    op-local constants, which is all the tape needs for replay and for
    reverse-mode differentiation.
    """

    __slots__ = ("data", "requires_grad", "op", "parents", "attrs", "id")

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), attrs=None):
        arr = np.asarray(data, dtype=np.float64)
        if op == "leaf":
            arr = arr.copy()
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in op '{op}'")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.parents = tuple(parents)
        self.attrs = attrs or {}
        self.id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, grad={self.requires_grad})"

    # Operator sugar.  Python scalars are promoted to constants.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __truediv__(self, other):
        return mul(self, power(_as_tensor(other), -1.0))

    def __rtruediv__(self, other):
        return mul(_as_tensor(other), power(self, -1.0))

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data) -> Tensor:
    """A leaf tensor that participates in differentiation."""
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    """A leaf tensor excluded from differentiation (e.g. data, masks)."""
    return Tensor(data, requires_grad=False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _commit(op, parents, data, attrs=None) -> Tensor:
    try:
        return Tensor(
            data,
            requires_grad=any(p.requires_grad for p in parents),
            op=op,
            parents=parents,
            attrs=attrs,
        )
    except NumericError as e:
        raise NumericError(f"{e} (parents: {[p.id for p in parents]})") from None


def _require_same_or_broadcastable(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConfigurationError(
            f"{op}: shapes {a.shape} and {b.shape} are not broadcastable"
        ) from None


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_or_broadcastable("add", a, b)
    return _commit("add", (a, b), a.data + b.data)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_or_broadcastable("mul", a, b)
    return _commit("mul", (a, b), a.data * b.data)


def neg(a: Tensor) -> Tensor:
    return _commit("neg", (a,), -a.data)


def scale(a: Tensor, c: float) -> Tensor:
    return _commit("scale", (a,), a.data * float(c), {"c": float(c)})


def power(a: Tensor, p: float) -> Tensor:
    with np.errstate(all="ignore"):  # non-finite results are caught on commit
        out = np.power(a.data, float(p))
    return _commit("power", (a,), out, {"p": float(p)})


def exp(a: Tensor) -> Tensor:
    with np.errstate(all="ignore"):
        out = np.exp(a.data)
    return _commit("exp", (a,), out)


def log(a: Tensor) -> Tensor:
    with np.errstate(all="ignore"):
        out = np.log(a.data)
    return _commit("log", (a,), out)


def sigmoid(a: Tensor) -> Tensor:
    d = a.data
    out = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    return _commit("sigmoid", (a,), out)


def clamp_min(a: Tensor, lo: float) -> Tensor:
    return _commit("clamp_min", (a,), np.maximum(a.data, float(lo)), {"lo": float(lo)})


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigurationError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _commit("matmul", (a, b), a.data @ b.data)


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ConfigurationError(f"transpose2d: expected 2-d, got {a.shape}")
    return _commit("transpose2d", (a,), a.data.T)


def swap01(a: Tensor) -> Tensor:
    if a.data.ndim < 2:
        raise ConfigurationError(f"swap01: expected >=2-d, got {a.shape}")
    return _commit("swap01", (a,), np.swapaxes(a.data, 0, 1))


def flip_hw(a: Tensor) -> Tensor:
    if a.data.ndim < 2:
        raise ConfigurationError(f"flip_hw: expected >=2-d, got {a.shape}")
    return _commit("flip_hw", (a,), a.data[..., ::-1, ::-1])


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ConfigurationError(f"reshape: cannot view {a.shape} as {shape}")
    return _commit("reshape", (a,), a.data.reshape(shape), {"shape": shape})


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ConfigurationError(f"broadcast_to: {a.shape} -> {shape}") from None
    return _commit("broadcast_to", (a,), np.ascontiguousarray(out), {"shape": shape})


def _sum_to(arr: np.ndarray, shape: tuple) -> np.ndarray:
    while arr.ndim > len(shape):
        arr = arr.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and arr.shape[ax] != 1:
            arr = arr.sum(axis=ax, keepdims=True)
    if arr.shape != shape:
        raise ConfigurationError(f"sum_to_shape: cannot reduce to {shape}")
    return arr


def sum_to_shape(a: Tensor, shape) -> Tensor:
    """Sum over broadcast axes so the result has the given shape.

    The inverse of broadcast_to; together they close reductions under
    differentiation.
    """
    shape = tuple(int(s) for s in shape)
    return _commit("sum_to_shape", (a,), _sum_to(a.data, shape), {"shape": shape})


def _conv2d_raw(x: np.ndarray, w: np.ndarray, pad: int) -> np.ndarray:
    n, c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    if c != c2:
        raise ConfigurationError(f"conv2d: input channels {c} != kernel channels {c2}")
    ho = h + 2 * pad - kh + 1
    wo = wd + 2 * pad - kw + 1
    if ho <= 0 or wo <= 0:
        raise ConfigurationError(f"conv2d: kernel {kh}x{kw} too large for input {h}x{wd} with pad {pad}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    out = np.zeros((n, o, ho, wo))
    if kh * kw <= ho * wo:
        # accumulate over kernel offsets; each term is a channel matmul
        wr = w.reshape(o, c, kh * kw)
        for idx in range(kh * kw):
            u, v = divmod(idx, kw)
            patch = xp[:, :, u:u + ho, v:v + wo]
            out += np.einsum("nchw,oc->nohw", patch, wr[:, :, idx], optimize=True)
    else:
        # tiny output (e.g. weight-gradient convolutions): loop output pixels
        for i in range(ho):
            for j in range(wo):
                out[:, :, i, j] = np.einsum(
                    "nckl,ockl->no", xp[:, :, i:i + kh, j:j + kw], w, optimize=True
                )
    return out


def conv2d(x: Tensor, w: Tensor, pad: int) -> Tensor:
    """Stride-1 cross-correlation of NCHW input with OCkk kernels."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ConfigurationError(f"conv2d: need 4-d input and kernel, got {x.shape}, {w.shape}")
    return _commit("conv2d", (x, w), _conv2d_raw(x.data, w.data, int(pad)), {"pad": int(pad)})


def avg_pool2(a: Tensor) -> Tensor:
    """2x2 average pooling with stride 2."""
    if a.data.ndim != 4 or a.shape[2] % 2 or a.shape[3] % 2:
        raise ConfigurationError(f"avg_pool2: need even NCHW spatial dims, got {a.shape}")
    n, c, h, w = a.shape
    out = a.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    return _commit("avg_pool2", (a,), out)


def upsample2(a: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling."""
    if a.data.ndim != 4:
        raise ConfigurationError(f"upsample2: need NCHW, got {a.shape}")
    out = np.repeat(np.repeat(a.data, 2, axis=2), 2, axis=3)
    return _commit("upsample2", (a,), out)


# ---------------------------------------------------------------------------
# Backward rules, each expressed with the primitives above
# ---------------------------------------------------------------------------

def _vjp_add(node, g):
    a, b = node.parents
    return sum_to_shape(g, a.shape), sum_to_shape(g, b.shape)


def _vjp_mul(node, g):
    a, b = node.parents
    return sum_to_shape(mul(g, b), a.shape), sum_to_shape(mul(g, a), b.shape)


def _vjp_neg(node, g):
    return (neg(g),)


def _vjp_scale(node, g):
    return (scale(g, node.attrs["c"]),)


def _vjp_power(node, g):
    (a,) = node.parents
    p = node.attrs["p"]
    return (mul(g, scale(power(a, p - 1.0), p)),)


def _vjp_exp(node, g):
    (a,) = node.parents
    return (mul(g, exp(a)),)


def _vjp_log(node, g):
    (a,) = node.parents
    return (mul(g, power(a, -1.0)),)


def _vjp_sigmoid(node, g):
    (a,) = node.parents
    s = sigmoid(a)
    return (mul(g, mul(s, add(constant(1.0), neg(s)))),)


def _vjp_clamp_min(node, g):
    (a,) = node.parents
    mask = constant((a.data >= node.attrs["lo"]).astype(np.float64))
    return (mul(g, mask),)


def _vjp_matmul(node, g):
    a, b = node.parents
    return matmul(g, transpose2d(b)), matmul(transpose2d(a), g)


def _vjp_transpose2d(node, g):
    return (transpose2d(g),)


def _vjp_swap01(node, g):
    return (swap01(g),)


def _vjp_flip_hw(node, g):
    return (flip_hw(g),)


def _vjp_reshape(node, g):
    (a,) = node.parents
    return (reshape(g, a.shape),)


def _vjp_broadcast_to(node, g):
    (a,) = node.parents
    return (sum_to_shape(g, a.shape),)


def _vjp_sum_to_shape(node, g):
    (a,) = node.parents
    return (broadcast_to(g, a.shape),)


def _vjp_conv2d(node, g):
    x, w = node.parents
    pad = node.attrs["pad"]
    k = w.shape[2]
    gx = conv2d(g, flip_hw(swap01(w)), pad=k - 1 - pad)
    gw = swap01(conv2d(swap01(x), swap01(g), pad=pad))
    return gx, gw


def _vjp_avg_pool2(node, g):
    return (scale(upsample2(g), 0.25),)


def _vjp_upsample2(node, g):
    return (scale(avg_pool2(g), 4.0),)


_VJPS = {
    "add": _vjp_add,
    "mul": _vjp_mul,
    "neg": _vjp_neg,
    "scale": _vjp_scale,
    "power": _vjp_power,
    "exp": _vjp_exp,
    "log": _vjp_log,
    "sigmoid": _vjp_sigmoid,
    "clamp_min": _vjp_clamp_min,
    "matmul": _vjp_matmul,
    "transpose2d": _vjp_transpose2d,
    "swap01": _vjp_swap01,
    "flip_hw": _vjp_flip_hw,
    "reshape": _vjp_reshape,
    "broadcast_to": _vjp_broadcast_to,
    "sum_to_shape": _vjp_sum_to_shape,
    "conv2d": _vjp_conv2d,
    "avg_pool2": _vjp_avg_pool2,
    "upsample2": _vjp_upsample2,
}

_FORWARD = {
    "add": lambda ps, at: ps[0] + ps[1],
    "mul": lambda ps, at: ps[0] * ps[1],
    "neg": lambda ps, at: -ps[0],
    "scale": lambda ps, at: ps[0] * at["c"],
    "power": lambda ps, at: np.power(ps[0], at["p"]),
    "exp": lambda ps, at: np.exp(ps[0]),
    "log": lambda ps, at: np.log(ps[0]),
    "sigmoid": lambda ps, at: np.where(
        ps[0] >= 0,
        1.0 / (1.0 + np.exp(-np.abs(ps[0]))),
        np.exp(-np.abs(ps[0])) / (1.0 + np.exp(-np.abs(ps[0]))),
    ),
    "clamp_min": lambda ps, at: np.maximum(ps[0], at["lo"]),
    "matmul": lambda ps, at: ps[0] @ ps[1],
    "transpose2d": lambda ps, at: ps[0].T,
    "swap01": lambda ps, at: np.swapaxes(ps[0], 0, 1),
    "flip_hw": lambda ps, at: ps[0][..., ::-1, ::-1],
    "reshape": lambda ps, at: ps[0].reshape(at["shape"]),
    "broadcast_to": lambda ps, at: np.ascontiguousarray(np.broadcast_to(ps[0], at["shape"])),
    "sum_to_shape": lambda ps, at: _sum_to(ps[0], at["shape"]),
    "conv2d": lambda ps, at: _conv2d_raw(ps[0], ps[1], at["pad"]),
    "avg_pool2": lambda ps, at: ps[0].reshape(
        ps[0].shape[0], ps[0].shape[1], ps[0].shape[2] // 2, 2, ps[0].shape[3] // 2, 2
    ).mean(axis=(3, 5)),
    "upsample2": lambda ps, at: np.repeat(np.repeat(ps[0], 2, axis=2), 2, axis=3),
}


# ---------------------------------------------------------------------------
# Composite operations (no custom backward needed)
# ---------------------------------------------------------------------------

def reduce_sum(a: Tensor, axis=None) -> Tensor:
    """Sum over all elements (axis=None) or over the given axes."""
    if axis is None:
        return reshape(sum_to_shape(a, (1,) * a.data.ndim), ())
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    keep = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
    final = tuple(s for i, s in enumerate(a.shape) if i not in axes)
    return reshape(sum_to_shape(a, keep), final)


def reduce_mean(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    if n == 0:
        raise UsageError("mean over an empty axis")
    return scale(reduce_sum(a, axis), 1.0 / n)


def square(a: Tensor) -> Tensor:
    return power(a, 2.0)


def sqrt(a: Tensor) -> Tensor:
    return power(a, 0.5)


def l2_norm(a: Tensor, axis=None) -> Tensor:
    """Euclidean norm over all elements or over the given axes."""
    return sqrt(reduce_sum(square(a), axis))


def swish(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    return mul(a, sigmoid(a))


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample normalization over all non-batch features, then affine.

    gain/bias broadcast against the normalized tensor (per-channel for
    conv maps, per-feature for flat inputs).
    """
    axes = tuple(range(1, a.data.ndim))
    m = reduce_mean(a, axes)
    mshape = (a.shape[0],) + (1,) * (a.data.ndim - 1)
    centered = a - reshape(m, mshape)
    var = reduce_mean(square(centered), axes)
    inv = power(reshape(var, mshape) + constant(eps), -0.5)
    return mul(centered, inv) * gain + bias


def dropout(a: Tensor, rate: float, rng: np.random.Generator, train: bool) -> Tensor:
    """Inverted dropout; the sampled mask is committed to the graph as a
    constant so forward and backward see the same mask.  Identity in eval
    mode or at rate 0."""
    if not train or rate <= 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise UsageError(f"dropout rate must be in [0, 1), got {rate}")
    keep = 1.0 - rate
    mask = (rng.random(a.shape) < keep).astype(np.float64) / keep
    return mul(a, constant(mask))


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b for 2-d batches."""
    return matmul(x, w) + b


# ---------------------------------------------------------------------------
# Differentiation
# ---------------------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.id not in seen:
                stack.append((p, False))
    return order


def grad(output: Tensor, wrt, create_graph: bool = False):
    """Reverse-mode gradients of a scalar output.

    wrt may be a single tensor or a sequence; the return value matches.
    With create_graph the returned gradients keep their graph links and
    can be differentiated again; otherwise they are detached leaves.
    """
    if output.data.size != 1:
        raise UsageError(
            f"grad: output must be scalar (got shape {output.shape}); reduce it first"
        )
    single = isinstance(wrt, Tensor)
    targets = [wrt] if single else list(wrt)
    for t in targets:
        if not isinstance(t, Tensor):
            raise UsageError("grad: wrt entries must be tensors")

    topo = _toposort(output)
    target_ids = {t.id for t in targets}
    needed = set(target_ids)
    for node in topo:  # parents precede children
        if node.id in needed or any(p.id in needed for p in node.parents):
            needed.add(node.id)

    grads: dict[int, Tensor] = {output.id: constant(np.ones(output.shape))}
    saved: dict[int, Tensor] = {}
    for node in reversed(topo):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node.id in target_ids:
            saved[node.id] = g
        if not node.parents:
            continue
        if create_graph and node.op in NON_REDIFFERENTIABLE:
            raise CapabilityError(
                f"primitive '{node.op}' has no re-differentiable backward"
            )
        pgrads = _VJPS[node.op](node, g)
        for parent, pg in zip(node.parents, pgrads):
            if pg is None or parent.id not in needed:
                continue
            held = grads.get(parent.id)
            grads[parent.id] = pg if held is None else add(held, pg)

    out = []
    for t in targets:
        g = saved.get(t.id)
        if g is None:
            g = constant(np.zeros(t.shape))
        elif not create_graph:
            g = g.detach()
        out.append(g)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Tape: explicit record of a committed computation
# ---------------------------------------------------------------------------

class Tape:
    """Topologically ordered record of the graph below an output tensor.

    Mostly a debugging and verification tool: `replay` re-executes every
    interior node from its parents' stored values and checks bit-exact
    agreement with what was committed.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes
        index = {n.id: i for i, n in enumerate(nodes)}
        for n in nodes:
            for p in n.parents:
                if index[p.id] >= index[n.id]:
                    raise ConfigurationError("tape order is not topological")

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        return cls(_toposort(output))

    @property
    def output(self) -> Tensor:
        return self.nodes[-1]

    def replay(self) -> bool:
        """Recompute every interior node; True iff all match bit-exactly."""
        values = {}
        for n in self.nodes:
            if not n.parents:
                values[n.id] = n.data
                continue
            recomputed = _FORWARD[n.op]([values[p.id] for p in n.parents], n.attrs)
            if not np.array_equal(recomputed, n.data):
                return False
            values[n.id] = recomputed
        return True

    def __len__(self):
        return len(self.nodes)
