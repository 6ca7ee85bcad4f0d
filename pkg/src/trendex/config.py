"""Model definitions from JSON configs.

A config is either a named built-in,

    {"builtin": "vasicek", "alpha": 0.05, "beta": 2.0, "sigma": 0.1, "x0": 0.03}
    {"builtin": "heston", "mu": 0.05, "k": 2.0, "theta": 0.04, "xi": 0.3,
     "f": "0.25 + 0.1*sin(x2)", "g": "0.3 + 0.1*cos(x2)", "s0": 1.0, "v0": 0.04}

or a generic coefficient bundle,

    {"dim": 1, "horizon": 1.0, "x0": 0.1,
     "b": "-1.0", "m": "0.1*sin(x1)", "sigma": "0.2"}

where b/m/sigma entries are numbers or expression strings in a small
arithmetic grammar: operators + - * / ^, functions sin cos exp sqrt,
variables t and x1..xd.  For d > 1, b and sigma are d x d nested lists
and m is a list of d entries.  Expressions compile through the ast
module against a whitelist, so a config can never execute arbitrary
code.
"""

from __future__ import annotations

import ast
import json
from pathlib import Path

import numpy as np

from .errors import ConfigInvalid
from .fundmat import MatrixFunction
from .models import DiffusionModel, make_heston_like, make_vasicek, mark_batch_ok

_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "sqrt": np.sqrt}

_ALLOWED_BINOPS = (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow)
_ALLOWED_UNARY = (ast.USub, ast.UAdd)


def _validate_node(node, names):
    if isinstance(node, ast.Expression):
        _validate_node(node.body, names)
    elif isinstance(node, ast.BinOp) and isinstance(node.op, _ALLOWED_BINOPS):
        _validate_node(node.left, names)
        _validate_node(node.right, names)
    elif isinstance(node, ast.UnaryOp) and isinstance(node.op, _ALLOWED_UNARY):
        _validate_node(node.operand, names)
    elif isinstance(node, ast.Call):
        if not (isinstance(node.func, ast.Name) and node.func.id in _FUNCS
                and len(node.args) == 1 and not node.keywords):
            raise ConfigInvalid(f"only single-argument {sorted(_FUNCS)} calls are allowed")
        _validate_node(node.args[0], names)
    elif isinstance(node, ast.Name):
        if node.id not in names:
            raise ConfigInvalid(f"unknown variable {node.id!r}; allowed: {sorted(names)}")
    elif isinstance(node, ast.Constant):
        if not isinstance(node.value, (int, float)):
            raise ConfigInvalid(f"only numeric constants allowed, got {node.value!r}")
    else:
        raise ConfigInvalid(f"disallowed syntax: {ast.dump(node)}")


def compile_expression(src, dim: int):
    """Compile an expression string (or a bare number) to f(t, x).

    The returned callable broadcasts: x may be shape (d,) or a stack
    (..., d), and the result follows the leading shape.
    """
    if isinstance(src, (int, float)):
        val = float(src)
        fn = lambda t, x: np.broadcast_to(val, np.shape(x)[:-1]).copy()
        fn.constant = val
        return mark_batch_ok(fn)
    if not isinstance(src, str):
        raise ConfigInvalid(f"coefficient must be a number or expression string, got {src!r}")
    names = {"t"} | {f"x{i + 1}" for i in range(dim)}
    try:
        tree = ast.parse(src.replace("^", "**"), mode="eval")
    except SyntaxError as exc:
        raise ConfigInvalid(f"cannot parse expression {src!r}: {exc}") from exc
    _validate_node(tree, names)
    code = compile(tree, f"<expr {src!r}>", "eval")

    def fn(t, x):
        x = np.asarray(x, dtype=float)
        env = {"t": t}
        for i in range(dim):
            env[f"x{i + 1}"] = x[..., i]
        out = eval(code, {"__builtins__": {}}, {**_FUNCS, **env})
        return np.broadcast_to(np.asarray(out, dtype=float), x.shape[:-1]).copy()

    fn.source = src
    return mark_batch_ok(fn)


def _expr_grid(spec, dim, what):
    """Nested list of expressions -> list of compiled entries."""
    if dim == 1 and not isinstance(spec, list):
        return [[compile_expression(spec, dim)]]
    if not isinstance(spec, list) or len(spec) != dim:
        raise ConfigInvalid(f"{what} must be a {dim}x{dim} nested list for dim={dim}")
    rows = []
    for row in spec:
        if not isinstance(row, list) or len(row) != dim:
            raise ConfigInvalid(f"{what} must be a {dim}x{dim} nested list for dim={dim}")
        rows.append([compile_expression(e, dim) for e in row])
    return rows


def _expr_vector(spec, dim, what):
    if dim == 1 and not isinstance(spec, list):
        return [compile_expression(spec, dim)]
    if not isinstance(spec, list) or len(spec) != dim:
        raise ConfigInvalid(f"{what} must be a list of {dim} entries for dim={dim}")
    return [compile_expression(e, dim) for e in spec]


def _matrix_function_from(entries, dim) -> MatrixFunction:
    zero = np.zeros(dim)

    def fn(t):
        return np.array([[float(entries[i][j](t, zero)) for j in range(dim)]
                         for i in range(dim)])

    return MatrixFunction(dim, fn)


def _vector_coeff(entries, dim):
    def m(t, x):
        x = np.asarray(x, dtype=float)
        comps = [e(t, x) for e in entries]
        return np.stack(comps, axis=-1)

    return mark_batch_ok(m)


def _matrix_coeff(entries, dim):
    def sig(t, x):
        x = np.asarray(x, dtype=float)
        return np.array([[float(entries[i][j](t, x)) for j in range(dim)]
                         for i in range(dim)])

    return sig


def _scalar_matrix_coeff(entry):
    # d=1 keeps the (1, 1) matrix contract but stays batch-capable.
    def sig(t, x):
        x = np.asarray(x, dtype=float)
        v = entry(t, x)
        if np.ndim(x) > 1:
            return np.asarray(v, dtype=float).reshape(-1, 1, 1)
        return np.array([[float(v)]])

    return mark_batch_ok(sig)


def _require(cfg, key):
    if key not in cfg:
        raise ConfigInvalid(f"missing required key {key!r}")
    return cfg[key]


def model_from_dict(cfg: dict) -> DiffusionModel:
    if not isinstance(cfg, dict):
        raise ConfigInvalid(f"config must be a JSON object, got {type(cfg).__name__}")
    if "builtin" in cfg:
        name = cfg["builtin"]
        if name == "vasicek":
            return make_vasicek(
                _require(cfg, "alpha"), _require(cfg, "beta"),
                _require(cfg, "sigma"), _require(cfg, "x0"),
            )
        if name == "heston":
            f_expr = compile_expression(_require(cfg, "f"), 2)
            g_expr = compile_expression(_require(cfg, "g"), 2)
            f = lambda v, s: float(f_expr(0.0, np.array([s, v])))
            g = lambda v: float(g_expr(0.0, np.array([0.0, v])))
            return make_heston_like(
                _require(cfg, "mu"), _require(cfg, "k"), _require(cfg, "theta"),
                _require(cfg, "xi"), f, g, _require(cfg, "s0"), _require(cfg, "v0"),
            )
        raise ConfigInvalid(f"unknown builtin {name!r}; expected 'vasicek' or 'heston'")

    dim = _require(cfg, "dim")
    if not isinstance(dim, int) or dim < 1:
        raise ConfigInvalid(f"dim must be a positive integer, got {dim!r}")
    horizon = float(cfg.get("horizon", 1.0))
    x0 = np.atleast_1d(np.asarray(_require(cfg, "x0"), dtype=float))
    if x0.shape != (dim,):
        raise ConfigInvalid(f"x0 must have {dim} entries, got {x0.tolist()}")

    b_entries = _expr_grid(_require(cfg, "b"), dim, "b")
    m_entries = _expr_vector(_require(cfg, "m"), dim, "m")
    s_entries = _expr_grid(_require(cfg, "sigma"), dim, "sigma")
    for row in b_entries:
        for e in row:
            if getattr(e, "source", "").find("x") >= 0:
                # b is the linear part: time-only by construction
                for i in range(dim):
                    if f"x{i + 1}" in e.source:
                        raise ConfigInvalid("b must depend on t only (state enters via b(t)*x)")

    sigma = (_scalar_matrix_coeff(s_entries[0][0]) if dim == 1
             else _matrix_coeff(s_entries, dim))
    return DiffusionModel(
        dim=dim,
        b=_matrix_function_from(b_entries, dim),
        m=_vector_coeff(m_entries, dim),
        sigma=sigma,
        x0=x0,
        horizon=horizon,
        name=cfg.get("name", "config-model"),
    )


def load_model(path) -> DiffusionModel:
    """Read a JSON model config from disk."""
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
    return model_from_dict(cfg)
