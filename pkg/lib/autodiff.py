"""
Minimal automatic differentiation over numpy arrays.

Var  - reverse mode. Each node keeps its parents and a closure mapping the
       output cotangent to parent cotangents. The graph can be back-propagated
       many times with different seeds (one forward pass, many VJPs).
Dual - forward mode. Carries (value, tangent) pairs through the same ops.

Both types support the handful of operations the network and the PDE
operators use: + - * / ** @, .T, reshape, indexing, sum, tanh, exp.
Code written against these ops runs unchanged on plain ndarrays.
"""

import numpy as np


def _unbroadcast(g, shape):
    """Sum a broadcast cotangent back down to `shape`"""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Var:
    __array_ufunc__ = None   # make ndarray <op> Var defer to Var.__r<op>__

    def __init__(self, value, parents=(), backward=None):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self._order = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    # ---- graph traversal ----------------------------------------------

    def _topo(self):
        if self._order is not None:
            return self._order
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._order = order
        return order

    def backward(self, seed=None):
        """Accumulate d(seed . self)/d(leaf) into every leaf's .grad"""
        order = self._topo()
        for node in order:
            if not node._parents:
                node.grad = None
        g0 = np.ones_like(self.value) if seed is None else np.asarray(seed, dtype=float).reshape(self.value.shape)
        grads = {id(self): g0}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        return self

    # ---- arithmetic ----------------------------------------------------

    def __add__(self, other):
        other = _lift(other)
        a, b = self, other
        return Var(a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    __radd__ = __add__

    def __neg__(self):
        return Var(-self.value, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-_lift(other))

    def __rsub__(self, other):
        return _lift(other) + (-self)

    def __mul__(self, other):
        other = _lift(other)
        a, b = self, other
        return Var(a.value * b.value, (a, b),
                   lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other)
        a, b = self, other
        return Var(a.value / b.value, (a, b),
                   lambda g: (_unbroadcast(g / b.value, a.shape),
                              _unbroadcast(-g * a.value / b.value ** 2, b.shape)))

    def __rtruediv__(self, other):
        return _lift(other) / self

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only constant exponents are supported")
        a = self
        return Var(a.value ** p, (a,), lambda g: (g * p * a.value ** (p - 1),))

    def __matmul__(self, other):
        other = _lift(other)
        return _matmul(self, other)

    def __rmatmul__(self, other):
        return _matmul(_lift(other), self)

    @property
    def T(self):
        a = self
        return Var(a.value.T, (a,), lambda g: (g.T,))

    def reshape(self, *shape):
        a = self
        return Var(a.value.reshape(*shape), (a,), lambda g: (g.reshape(a.shape),))

    def __getitem__(self, idx):
        a = self

        def back(g):
            out = np.zeros_like(a.value)
            np.add.at(out, idx, g)
            return (out,)
        return Var(a.value[idx], (a,), back)

    def sum(self, axis=None):
        a = self

        def back(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)
        return Var(a.value.sum(axis=axis), (a,), back)

    def tanh(self):
        t = np.tanh(self.value)
        return Var(t, (self,), lambda g: (g * (1.0 - t * t),))

    def exp(self):
        e = np.exp(self.value)
        return Var(e, (self,), lambda g: (g * e,))


def _matmul(a, b):
    value = a.value @ b.value

    def back(g):
        if b.ndim == 1:
            ga = np.outer(g, b.value) if a.ndim == 2 else g * b.value
            gb = a.value.T @ g
        else:
            ga = g @ b.value.T
            gb = a.value.T @ g if a.ndim == 2 else np.outer(a.value, g)
        return ga, gb
    return Var(value, (a, b), back)


def _lift(x):
    return x if isinstance(x, Var) else Var(x)


class Dual:
    __array_ufunc__ = None

    def __init__(self, value, tangent):
        self.value = np.asarray(value, dtype=float)
        self.tangent = np.broadcast_to(np.asarray(tangent, dtype=float), self.value.shape)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Dual(shape={self.value.shape})"

    def __add__(self, other):
        v, t = _split(other)
        return Dual(self.value + v, self.tangent + t)

    __radd__ = __add__

    def __neg__(self):
        return Dual(-self.value, -self.tangent)

    def __sub__(self, other):
        v, t = _split(other)
        return Dual(self.value - v, self.tangent - t)

    def __rsub__(self, other):
        v, t = _split(other)
        return Dual(v - self.value, t - self.tangent)

    def __mul__(self, other):
        v, t = _split(other)
        return Dual(self.value * v, self.tangent * v + self.value * t)

    __rmul__ = __mul__

    def __truediv__(self, other):
        v, t = _split(other)
        return Dual(self.value / v, (self.tangent * v - self.value * t) / v ** 2)

    def __rtruediv__(self, other):
        v, t = _split(other)
        return Dual(v / self.value, (t * self.value - v * self.tangent) / self.value ** 2)

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only constant exponents are supported")
        return Dual(self.value ** p, p * self.value ** (p - 1) * self.tangent)

    def __matmul__(self, other):
        v, t = _split(other)
        return Dual(self.value @ v, self.tangent @ v + self.value @ t)

    def __rmatmul__(self, other):
        v, t = _split(other)
        return Dual(v @ self.value, t @ self.value + v @ self.tangent)

    @property
    def T(self):
        return Dual(self.value.T, self.tangent.T)

    def reshape(self, *shape):
        return Dual(self.value.reshape(*shape), self.tangent.reshape(*shape))

    def __getitem__(self, idx):
        return Dual(self.value[idx], self.tangent[idx])

    def sum(self, axis=None):
        return Dual(self.value.sum(axis=axis), self.tangent.sum(axis=axis))

    def tanh(self):
        t = np.tanh(self.value)
        return Dual(t, (1.0 - t * t) * self.tangent)

    def exp(self):
        e = np.exp(self.value)
        return Dual(e, e * self.tangent)


def _split(x):
    if isinstance(x, Dual):
        return x.value, x.tangent
    x = np.asarray(x, dtype=float)
    return x, np.zeros_like(x)


# ---- generic helpers (ndarray / Var / Dual) --------------------------------

def tanh(x):
    return x.tanh() if isinstance(x, (Var, Dual)) else np.tanh(x)


def exp(x):
    return x.exp() if isinstance(x, (Var, Dual)) else np.exp(x)


def concat_columns(blocks):
    """Column-stack 2D blocks; only plain arrays are accepted"""
    return np.concatenate([np.asarray(b, dtype=float) for b in blocks], axis=1)


def value_of(x):
    """Plain ndarray behind an ndarray / Var / Dual"""
    return x.value if isinstance(x, (Var, Dual)) else np.asarray(x, dtype=float)


def tangent_of(x):
    if isinstance(x, Dual):
        return x.tangent
    return np.zeros_like(np.asarray(x, dtype=float))
