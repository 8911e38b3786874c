"""Strongly-typed kernel expression trees.

A kernel is a tree of elementary expressions. Every node produces one of
four value types: the raw input pair ``(x, x')``, a transformed input pair,
a hyperparameter, or a covariance value. The grammar below fixes the input
and output types of every primitive, so a tree is valid only if each child
produces the type its parent expects at that position and the root produces
a covariance value.

Trees are immutable. Hyperparameter leaves ``h<k>`` index into a theta
vector whose final entry is always the white-noise amplitude, which is not
part of the tree and is only added on the diagonal of self-covariance
matrices.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

__all__ = [
    "ExprType",
    "Primitive",
    "PRIMITIVES",
    "CONSTANTS",
    "Node",
    "X",
    "hyper",
    "const",
    "op",
    "KernelTypeError",
    "EvalError",
    "ParseError",
    "type_check",
    "depth",
    "size",
    "hyper_count",
    "hyper_indices",
    "slot_kinds",
    "iter_nodes",
    "get_subtree",
    "replace_subtree",
    "canonical_hyper_reindex",
    "eval_kernel",
    "cov_matrix",
    "compile_kernel",
    "serialize",
    "parse",
]


class ExprType(enum.Enum):
    INPUT_PAIR = "input_pair"
    TRANSFORMED_PAIR = "transformed_pair"
    HYPER = "hyper"
    COV = "cov"


@dataclass(frozen=True)
class Primitive:
    name: str
    inputs: tuple[ExprType, ...]
    output: ExprType
    group: str  # "terminal", "not_nestable" or "nestable"

    @property
    def arity(self) -> int:
        return len(self.inputs)


_IP, _TP, _H, _C = (ExprType.INPUT_PAIR, ExprType.TRANSFORMED_PAIR,
                    ExprType.HYPER, ExprType.COV)

PRIMITIVES: dict[str, Primitive] = {p.name: p for p in [
    Primitive("x", (), _IP, "terminal"),
    Primitive("hyper", (), _H, "terminal"),
    Primitive("const", (), _C, "terminal"),
    Primitive("euc", (_IP,), _TP, "not_nestable"),
    Primitive("spectral", (_IP, _H), _TP, "not_nestable"),
    Primitive("sq_dist", (_TP, _H), _C, "not_nestable"),
    Primitive("dot_prod", (_TP, _H, _H), _C, "not_nestable"),
    Primitive("hp", (_H,), _C, "not_nestable"),
    Primitive("power", (_C, _H), _C, "nestable"),
    Primitive("add", (_C, _C), _C, "nestable"),
    Primitive("multiply", (_C, _C), _C, "nestable"),
    Primitive("div", (_C,), _C, "nestable"),
    Primitive("exp", (_C,), _C, "nestable"),
    Primitive("sqrt", (_C,), _C, "nestable"),
    Primitive("square", (_C,), _C, "nestable"),
]}

CONSTANTS: tuple[float, ...] = (-1.0, -0.5, 0.5, 1.0, 2.0, 3.0, 5.0)


@dataclass(frozen=True)
class Node:
    """One node of a kernel expression tree.

    ``value`` holds the slot index for ``hyper`` leaves and the number for
    ``const`` leaves; it is ``None`` everywhere else.
    """

    kind: str
    children: tuple["Node", ...] = ()
    value: float | int | None = None

    @property
    def primitive(self) -> Primitive:
        return PRIMITIVES[self.kind]

    @property
    def output_type(self) -> ExprType:
        return PRIMITIVES[self.kind].output

    def __str__(self) -> str:
        return serialize(self)


X = Node("x")


def hyper(index: int) -> Node:
    return Node("hyper", (), int(index))


def const(value: float) -> Node:
    return Node("const", (), float(value))


def op(kind: str, *children: Node) -> Node:
    return Node(kind, tuple(children))


class KernelTypeError(TypeError):
    """A tree violates the grammar at ``path`` (tuple of child positions)."""

    def __init__(self, path, expected, found, message=None):
        self.path = tuple(path)
        self.expected = expected
        self.found = found
        super().__init__(message or (
            f"at node path {list(self.path)}: expected {expected}, found {found}"))


class EvalError(ArithmeticError):
    """Kernel evaluation produced a non-finite value or a domain violation."""

    NON_FINITE = "NonFinite"
    DOMAIN = "DomainViolation"

    def __init__(self, kind: str, path=(), message: str = ""):
        self.kind = kind
        self.path = tuple(path)
        super().__init__(f"{kind} at node path {list(self.path)}"
                         + (f": {message}" if message else ""))


class ParseError(ValueError):
    def __init__(self, position: int, message: str):
        self.position = position
        super().__init__(f"{message} (at position {position})")


# ---------------------------------------------------------------------------
# structure


def type_check(node: Node, want: ExprType = ExprType.COV, _path=()) -> None:
    """Raise :class:`KernelTypeError` unless ``node`` is a well-typed tree
    producing ``want``."""
    prim = PRIMITIVES.get(node.kind)
    if prim is None:
        raise KernelTypeError(_path, "a grammar primitive", node.kind)
    if prim.output is not want:
        raise KernelTypeError(_path, want.value, f"{node.kind} -> {prim.output.value}")
    if len(node.children) != prim.arity:
        raise KernelTypeError(_path, f"{prim.arity} inputs for {node.kind}",
                              f"{len(node.children)} inputs")
    if node.kind == "const" and node.value not in CONSTANTS:
        raise KernelTypeError(_path, f"constant in {CONSTANTS}", node.value)
    if node.kind == "hyper" and (not isinstance(node.value, int) or node.value < 0):
        raise KernelTypeError(_path, "non-negative slot index", node.value)
    for i, (child, typ) in enumerate(zip(node.children, prim.inputs)):
        type_check(child, typ, _path + (i,))


def depth(node: Node) -> int:
    if not node.children:
        return 1
    return 1 + max(depth(c) for c in node.children)


def size(node: Node) -> int:
    return 1 + sum(size(c) for c in node.children)


def iter_nodes(node: Node, _path=()) -> Iterator[tuple[tuple[int, ...], Node]]:
    """Yield ``(path, node)`` pairs in depth-first pre-order."""
    yield _path, node
    for i, child in enumerate(node.children):
        yield from iter_nodes(child, _path + (i,))


def hyper_indices(node: Node) -> list[int]:
    """Slot indices of the hyperparameter leaves, left to right."""
    return [n.value for _, n in iter_nodes(node) if n.kind == "hyper"]


def hyper_count(node: Node) -> int:
    return len(hyper_indices(node))


def slot_kinds(node: Node) -> list[str]:
    """Role of every hyperparameter slot, inferred from the consuming node.

    Returned list is ordered by slot index and assumes dense indices.
    """
    kinds: dict[int, str] = {}

    def visit(n: Node) -> None:
        roles = _SLOT_ROLES.get(n.kind, ())
        for i, child in enumerate(n.children):
            if child.kind == "hyper":
                kinds[child.value] = roles[i] if i < len(roles) else "amplitude"
            else:
                visit(child)

    visit(node)
    return [kinds[i] for i in sorted(kinds)]


_SLOT_ROLES = {
    "spectral": (None, "scale"),
    "sq_dist": (None, "scale"),
    "dot_prod": (None, "shift", "scale"),
    "hp": ("amplitude",),
    "power": (None, "exponent"),
}


def get_subtree(node: Node, path) -> Node:
    for i in path:
        node = node.children[i]
    return node


def replace_subtree(node: Node, path, new: Node) -> Node:
    if not path:
        return new
    i = path[0]
    children = list(node.children)
    children[i] = replace_subtree(children[i], path[1:], new)
    return Node(node.kind, tuple(children), node.value)


def canonical_hyper_reindex(node: Node) -> tuple[Node, tuple[int, ...]]:
    """Renumber slots densely in depth-first order.

    Returns the new tree and ``origin`` with ``origin[new] == old``. A slot
    index appearing twice is split into two new slots that share an origin.
    """
    origin: list[int] = []

    def visit(n: Node) -> Node:
        if n.kind == "hyper":
            origin.append(n.value)
            return hyper(len(origin) - 1)
        if not n.children:
            return n
        return Node(n.kind, tuple(visit(c) for c in n.children), n.value)

    return visit(node), tuple(origin)


# ---------------------------------------------------------------------------
# evaluation
#
# A tree is compiled once against fixed inputs into a closure over theta.
# Pairs of points are laid out either as a full (n, m) grid or, for
# self-covariance, as the packed upper triangle; every primitive is
# symmetric in (x, x') so the packed layout loses nothing.


class _Pairs:
    def __init__(self, A: np.ndarray, B: np.ndarray, packed: bool):
        self.A, self.B, self.packed = A, B, packed
        if packed:
            n = A.shape[0]
            self.I, self.J = np.triu_indices(n)
            self.shape = (len(self.I),)
            self._upper = self.I * n + self.J
            self._lower = self.J * n + self.I
        else:
            self.shape = (A.shape[0], B.shape[0])
        self._diff = None

    def left(self, F):
        return F[self.I] if self.packed else F[:, None, :]

    def right(self, F):
        return F[self.J] if self.packed else F[None, :, :]

    @property
    def diff(self):
        # per-coordinate differences, theta-independent
        if self._diff is None:
            self._diff = self.left(self.A) - self.right(self.B)
        return self._diff

    def unpack(self, values: np.ndarray) -> np.ndarray:
        if not self.packed:
            return values
        n = self.A.shape[0]
        out = np.empty(n * n)
        out[self._upper] = values
        out[self._lower] = values
        return out.reshape(n, n)


def _raise_domain(path, message):
    raise EvalError(EvalError.DOMAIN, path, message)


def _compile(node: Node, pairs: _Pairs, path) -> Callable:
    kind = node.kind
    ch = node.children

    if kind == "const":
        v = float(node.value)
        return lambda th: v
    if kind == "hyper":
        k = node.value
        return lambda th: th[k]
    if kind == "hp":
        return _compile(ch[0], pairs, path + (0,))

    if kind in ("euc", "spectral"):
        # transformed pairs are carried as (kind, per-point feature function)
        return _compile_transform(node, pairs, path)

    if kind == "sq_dist":
        tkind, tfun, freq = _compile_transform(ch[0], pairs, path + (0,))
        length = _compile(ch[1], pairs, path + (1,))
        if tkind == "euc":
            d2 = np.sum(pairs.diff ** 2, axis=-1)

            def sq_dist(th):
                return d2 / length(th) ** 2
        else:
            # |[sin a, cos a] - [sin b, cos b]|^2 = 4 sin^2((a - b) / 2)
            diff = pairs.diff

            def sq_dist(th):
                s = np.sin(0.5 * freq(th) * diff)
                return 4.0 * np.sum(s * s, axis=-1) / length(th) ** 2
        return sq_dist

    if kind == "dot_prod":
        _, tfun, _ = _compile_transform(ch[0], pairs, path + (0,))
        shift = _compile(ch[1], pairs, path + (1,))
        length = _compile(ch[2], pairs, path + (2,))

        def dot_prod(th):
            FA, FB = tfun(th)
            s = shift(th)
            prod = (pairs.left(FA) - s) * (pairs.right(FB) - s)
            return np.sum(prod, axis=-1) / length(th)
        return dot_prod

    fs = [_compile(c, pairs, path + (i,)) for i, c in enumerate(ch)]

    if kind == "add":
        a, b = fs
        return lambda th: a(th) + b(th)
    if kind == "multiply":
        a, b = fs
        return lambda th: a(th) * b(th)
    if kind == "exp":
        (a,) = fs
        return lambda th: np.exp(a(th))
    if kind == "square":
        (a,) = fs
        return lambda th: np.square(a(th))

    if kind == "sqrt":
        (a,) = fs

        def sqrt(th):
            w = a(th)
            if np.any(w < 0):
                _raise_domain(path, "sqrt of a negative value")
            return np.sqrt(w)
        return sqrt

    if kind == "div":
        (a,) = fs

        def div(th):
            w = a(th)
            if np.any(w == 0):
                _raise_domain(path, "division by zero")
            return 1.0 / w
        return div

    if kind == "power":
        base, expo = fs

        def power(th):
            w = base(th)
            e = float(expo(th))
            if e != round(e) and np.any(w < 0):
                _raise_domain(path, "non-integer power of a negative value")
            if e < 0 and np.any(w == 0):
                _raise_domain(path, "zero raised to a negative power")
            return np.power(w, e)
        return power

    raise KernelTypeError(path, "a covariance primitive", kind)


def _compile_transform(node: Node, pairs: _Pairs, path):
    """Return ``(kind, features, frequency)`` for a transformed-pair node."""
    if node.kind == "euc":
        A, B = pairs.A, pairs.B
        return "euc", (lambda th: (A, B)), None
    if node.kind == "spectral":
        freq = _compile(node.children[1], pairs, path + (1,))
        A, B = pairs.A, pairs.B

        def features(th):
            w = freq(th)
            return (np.concatenate([np.sin(w * A), np.cos(w * A)], axis=1),
                    np.concatenate([np.sin(w * B), np.cos(w * B)], axis=1))
        return "spectral", features, freq
    raise KernelTypeError(path, ExprType.TRANSFORMED_PAIR.value, node.kind)


def compile_kernel(node: Node, A, B=None, packed: bool = False) -> Callable:
    """Compile ``node`` against fixed inputs.

    Returns ``fun(theta) -> ndarray`` giving the covariance between the rows
    of ``A`` and ``B`` (``B`` defaults to ``A``). With ``packed=True`` only
    the upper triangle of the self-covariance is computed and the result is
    the flat triangle; use ``fun.unpack`` to expand it. Raises
    :class:`EvalError` on non-finite output or a domain violation. The
    noise term is never included.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = A if B is None else np.atleast_2d(np.asarray(B, dtype=float))
    if packed and B is not A:
        raise ValueError("packed evaluation needs a self-covariance")
    pairs = _Pairs(A, B, packed)
    body = _compile(node, pairs, ())
    shape = pairs.shape

    def fun(theta):
        with np.errstate(all="ignore"):
            out = body(theta)
        out = np.broadcast_to(np.asarray(out, dtype=float), shape)
        if not np.all(np.isfinite(out)):
            raise EvalError(EvalError.NON_FINITE, (), "non-finite covariance")
        return out

    fun.unpack = pairs.unpack
    fun.shape = shape
    return fun


def eval_kernel(node: Node, theta, x, x2) -> float:
    """Covariance between single points ``x`` and ``x2``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))[None, :]
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))[None, :]
    return float(compile_kernel(node, x, x2)(np.asarray(theta, dtype=float))[0, 0])


def cov_matrix(node: Node, theta, A, B=None, add_noise: bool = False) -> np.ndarray:
    """Covariance matrix between rows of ``A`` and ``B``.

    When ``B`` is omitted the self-covariance of ``A`` is returned and, if
    ``add_noise``, the squared noise amplitude ``theta[-1] ** 2`` is added on
    the diagonal.
    """
    theta = np.asarray(theta, dtype=float)
    K = np.array(compile_kernel(node, A, B)(theta))
    if add_noise and B is None:
        K[np.diag_indices_from(K)] += theta[-1] ** 2
    return K


# ---------------------------------------------------------------------------
# text format


def _fmt_const(v: float) -> str:
    return format(v, "g")


def serialize(node: Node) -> str:
    if node.kind == "x":
        return "x"
    if node.kind == "hyper":
        return f"h{node.value}"
    if node.kind == "const":
        return _fmt_const(node.value)
    return "(" + " ".join([node.kind] + [serialize(c) for c in node.children]) + ")"


_TOKEN = re.compile(r"\s*(\(|\)|[^\s()]+)")
_HYPER = re.compile(r"h(\d+)\Z")


def _tokenize(text: str) -> list[tuple[str, int]]:
    tokens = []
    pos = 0
    while True:
        m = _TOKEN.match(text, pos)
        if m is None:
            if text[pos:].strip():
                raise ParseError(pos, "unexpected character")
            return tokens
        tokens.append((m.group(1), m.start(1)))
        pos = m.end()


def parse(text: str) -> Node:
    """Parse the prefix notation produced by :func:`serialize`.

    Only the grammar's vocabulary and arities are enforced here; call
    :func:`type_check` for full type correctness.
    """
    tokens = _tokenize(text)
    end = len(text)
    if not tokens:
        raise ParseError(0, "empty expression")

    def atom(tok: str, pos: int) -> Node:
        if tok == "x":
            return X
        m = _HYPER.match(tok)
        if m:
            return hyper(int(m.group(1)))
        try:
            v = float(tok)
        except ValueError:
            raise ParseError(pos, f"unknown symbol {tok!r}") from None
        if v not in CONSTANTS:
            raise ParseError(pos, f"constant {tok} is not in the grammar")
        return const(v)

    def expr(i: int) -> tuple[Node, int]:
        if i >= len(tokens):
            raise ParseError(end, "unexpected end of input")
        tok, pos = tokens[i]
        if tok == ")":
            raise ParseError(pos, "unexpected ')'")
        if tok != "(":
            return atom(tok, pos), i + 1
        if i + 1 >= len(tokens):
            raise ParseError(end, "unexpected end of input")
        name, npos = tokens[i + 1]
        prim = PRIMITIVES.get(name)
        if prim is None or prim.group == "terminal":
            raise ParseError(npos, f"unknown operator {name!r}")
        children = []
        j = i + 2
        while True:
            if j >= len(tokens):
                raise ParseError(end, "unexpected end of input")
            if tokens[j][0] == ")":
                break
            child, j = expr(j)
            children.append(child)
        if len(children) != prim.arity:
            raise ParseError(npos, f"{name} takes {prim.arity} inputs, got {len(children)}")
        return Node(name, tuple(children)), j + 1

    node, i = expr(0)
    if i != len(tokens):
        raise ParseError(tokens[i][1], "trailing input")
    return node
