"""Dense float64 tensors with a tape-based reverse-mode gradient facility.

Operations record themselves on the active :class:`GradTape` only when at
least one operand is already tracked by that tape. Outside a tape every op is
a thin wrapper over numpy, which keeps sampling/inference cheap.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "GradTape",
    "as_tensor",
    "evaluate_with_gradients",
]

_ACTIVE = []


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""


def _active_tape():
    return _ACTIVE[-1] if _ACTIVE else None


class Tensor:
    """Immutable wrapper around a float64 ndarray.

    ``node`` is the tape slot of this value, or ``None`` for constants.
    """

    __slots__ = ("data", "node", "tape")
    __array_priority__ = 100.0

    def __init__(self, data, node=None, tape=None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.node = node
        self.tape = tape

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def tracked(self):
        return self.node is not None and self.tape is _active_tape()

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", tracked" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    # arithmetic sugar -------------------------------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __rmatmul__(self, other):
        from . import ops
        return ops.matmul(other, self)

    def __getitem__(self, index):
        from . import ops
        return ops.take(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class GradTape:
    """Records primitive operations for one backward pass.

    Usage::

        tape = GradTape()
        with tape:
            w = tape.watch(w_array)
            loss = f(w)
        (gw,) = tape.gradient(loss, [w])
    """

    def __init__(self):
        self._vjps = []      # node -> (parent nodes, vjp)
        self._shapes = []
        self.params = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def release(self):
        """Drop recorded backward rules so their saved activations can be freed."""
        self._vjps.clear()
        self._shapes.clear()
        self.params.clear()

    def _new_node(self, shape, parents, vjp):
        self._vjps.append((parents, vjp))
        self._shapes.append(shape)
        return len(self._vjps) - 1

    def watch(self, value):
        """Register a leaf (parameter) on this tape and return it tracked."""
        data = value.data if isinstance(value, Tensor) else value
        data = np.asarray(data, dtype=np.float64)
        node = self._new_node(data.shape, (), None)
        t = Tensor(data, node, self)
        self.params.append(t)
        return t

    def record(self, out, inputs, vjp):
        """Create the output tensor of a primitive.

        ``vjp(g, needs)`` returns one cotangent (or None) per input; ``needs``
        flags which inputs are tracked.
        """
        parents = tuple(x.node if (isinstance(x, Tensor) and x.tape is self
                                   and x.node is not None) else None
                        for x in inputs)
        if all(p is None for p in parents):
            return Tensor(out)
        node = self._new_node(np.shape(out), parents, vjp)
        return Tensor(out, node, self)

    def gradient(self, target, sources):
        """Reverse sweep from scalar ``target``; one array per source."""
        if not isinstance(target, Tensor) or target.data.size != 1:
            shape = np.shape(getattr(target, "data", target))
            raise ShapeError(f"gradient target must be a scalar, got shape {shape}")
        keep = {s.node for s in sources if s.tape is self and s.node is not None}
        grads = {}
        if target.node is not None and target.tape is self:
            grads[target.node] = np.ones_like(target.data)
        for node in range(len(self._vjps) - 1, -1, -1):
            g = grads.get(node) if node in keep else grads.pop(node, None)
            if g is None:
                continue
            parents, vjp = self._vjps[node]
            if not parents:
                continue
            cots = vjp(g, tuple(p is not None for p in parents))
            for p, c in zip(parents, cots):
                if p is None or c is None:
                    continue
                grads[p] = grads[p] + c if p in grads else c
        out = []
        for s in sources:
            g = grads.get(s.node) if (s.tape is self and s.node is not None) else None
            out.append(np.zeros(s.shape) if g is None
                       else np.asarray(g, dtype=np.float64).reshape(s.shape))
        return out


def evaluate_with_gradients(f, params):
    """Evaluate scalar program ``f`` and its gradient for each parameter.

    ``params`` is a mapping name -> ndarray; ``f`` receives the same mapping
    with tracked :class:`Tensor` values and must return a scalar Tensor.
    Returns ``(value, {name: grad})``.
    """
    tape = GradTape()
    with tape:
        tracked = {k: tape.watch(v) for k, v in params.items()}
        loss = f(tracked)
    names = list(tracked)
    try:
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise ShapeError("program output must be a scalar tensor")
        grads = tape.gradient(loss, [tracked[k] for k in names])
    finally:
        tape.release()
    return float(loss.data), dict(zip(names, grads))
