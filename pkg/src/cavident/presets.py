"""Named experiment presets and the traction expression language.

Tractions are written as coordinate pairs like "(0, 1/10 - 3/10*y)" in the
variables x and y, with +, -, *, /, ^ (or **), parentheses, and pi.
Variable-free subexpressions are evaluated in exact rational arithmetic,
so "1/10" means one tenth and not a truncation artifact.
"""

from __future__ import annotations

import ast
import math
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Optional, Tuple

import numpy as np

from .inversion import EpsilonSchedule, RunConfig
from .mesh import AxisSquare, Disk, Polygon, ShapeUnion
from .synth import NoiseSpec


class TractionParseError(Exception):
    def __init__(self, message, expression=None, position=None):
        if position is not None:
            message = "%s (column %d)" % (message, position)
        super().__init__(message)
        self.expression = expression
        self.position = position


_ALLOWED_NAMES = ("x", "y", "pi")
_BINOPS = (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow)


def _err(message, node, expression):
    return TractionParseError(message, expression, getattr(node, "col_offset", None))


def _validate(node, expression, allow_tuple):
    if isinstance(node, ast.Tuple):
        if not allow_tuple:
            raise _err("nested pairs are not allowed", node, expression)
        for elt in node.elts:
            _validate(elt, expression, allow_tuple=False)
        return
    if isinstance(node, ast.BinOp):
        if not isinstance(node.op, _BINOPS):
            raise _err("unsupported operator", node, expression)
        _validate(node.left, expression, False)
        _validate(node.right, expression, False)
        return
    if isinstance(node, ast.UnaryOp):
        if not isinstance(node.op, (ast.USub, ast.UAdd)):
            raise _err("unsupported unary operator", node, expression)
        _validate(node.operand, expression, False)
        return
    if isinstance(node, ast.Constant):
        if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
            raise _err("only numeric constants are allowed", node, expression)
        return
    if isinstance(node, ast.Name):
        if node.id not in _ALLOWED_NAMES:
            raise _err("unknown name %r (use x, y, pi)" % node.id, node, expression)
        return
    raise _err("unsupported expression element", node, expression)


def _const_eval(node, expression):
    """Value of a variable-free subtree: Fraction when exactly rational."""
    if isinstance(node, ast.Constant):
        return Fraction(node.value) if isinstance(node.value, int) else float(node.value)
    if isinstance(node, ast.Name):  # only pi reaches here
        return math.pi
    if isinstance(node, ast.UnaryOp):
        v = _const_eval(node.operand, expression)
        return -v if isinstance(node.op, ast.USub) else v
    a = _const_eval(node.left, expression)
    b = _const_eval(node.right, expression)
    exact = isinstance(a, Fraction) and isinstance(b, Fraction)
    op = node.op
    if isinstance(op, ast.Add):
        return a + b
    if isinstance(op, ast.Sub):
        return a - b
    if isinstance(op, ast.Mult):
        return a * b
    if isinstance(op, ast.Div):
        if b == 0:
            raise _err("division by zero", node, expression)
        return a / b
    if exact and b.denominator == 1:
        if a == 0 and b < 0:
            raise _err("zero raised to a negative power", node, expression)
        return a ** int(b)
    return float(a) ** float(b)


def _has_coords(node):
    return any(
        isinstance(n, ast.Name) and n.id in ("x", "y") for n in ast.walk(node)
    )


def _check_constants(node, expression):
    """Force errors in variable-free subtrees (1/0, 0^-1) at parse time."""
    if not _has_coords(node):
        _const_eval(node, expression)
        return
    for child in ast.iter_child_nodes(node):
        if isinstance(child, ast.expr):
            _check_constants(child, expression)


def _eval(node, x, y, expression):
    if not _has_coords(node):
        return float(_const_eval(node, expression))
    if isinstance(node, ast.Name):
        return x if node.id == "x" else y
    if isinstance(node, ast.UnaryOp):
        v = _eval(node.operand, x, y, expression)
        return -v if isinstance(node.op, ast.USub) else v
    a = _eval(node.left, x, y, expression)
    b = _eval(node.right, x, y, expression)
    op = node.op
    if isinstance(op, ast.Add):
        return a + b
    if isinstance(op, ast.Sub):
        return a - b
    if isinstance(op, ast.Mult):
        return a * b
    if isinstance(op, ast.Div):
        return a / b
    return a ** b


def parse_traction_expression(expression):
    """Compile "(gx, gy)" into a callable mapping (m, 2) points to values."""
    source = expression.replace("^", "**")
    try:
        tree = ast.parse(source, mode="eval")
    except SyntaxError as exc:
        raise TractionParseError(
            "invalid syntax: %s" % exc.msg, expression, exc.offset
        ) from None
    body = tree.body
    if not isinstance(body, ast.Tuple) or len(body.elts) != 2:
        raise _err("a traction must be a pair '(gx, gy)'", body, expression)
    _validate(body, expression, allow_tuple=True)
    gx, gy = body.elts
    _check_constants(gx, expression)
    _check_constants(gy, expression)

    def traction(points):
        p = np.atleast_2d(np.asarray(points, dtype=float))
        x, y = p[:, 0], p[:, 1]
        out = np.empty((len(p), 2))
        out[:, 0] = _eval(gx, x, y, expression)
        out[:, 1] = _eval(gy, x, y, expression)
        return out

    traction.expression = expression
    return traction


# ---------------------------------------------------------------------------
# presets

_EPS16 = 1.0 / (16.0 * math.pi)
_EPS8 = 1.0 / (8.0 * math.pi)
_EPS4 = 1.0 / (4.0 * math.pi)

_DISK = Disk((0.0, 0.0), 0.3)
_SQUARE = AxisSquare((0.0, 0.0), 0.3)
_TWO_SHAPES = ShapeUnion((AxisSquare((-0.4, -0.4), 0.2), Disk((0.4, 0.4), 0.25)))
_L_SHAPE = Polygon(
    ((-0.4, -0.4), (0.4, -0.4), (0.4, 0.0), (0.0, 0.0), (0.0, 0.4), (-0.4, 0.4))
)


@dataclass(frozen=True)
class ExperimentPreset:
    """A ready-to-run reconstruction scenario."""

    name: str
    description: str
    target: object
    tractions: Tuple[str, str]
    mu: float = 0.2
    lam: float = 1.0
    delta: float = 1e-2
    alpha_tilde: float = 1e-2
    tau: float = 1e-3
    epsilon: float = _EPS16
    refine_period: int = 1000
    epsilon_schedule: Optional[EpsilonSchedule] = None
    noise_level: float = 0.0
    resolution: int = 32
    generator_resolution: int = 64

    def config(self, **overrides):
        base = RunConfig(
            mu=self.mu,
            lam=self.lam,
            delta=self.delta,
            alpha_tilde=self.alpha_tilde,
            tau=self.tau,
            epsilon=self.epsilon,
            resolution=self.resolution,
            refine_period=self.refine_period,
            epsilon_schedule=self.epsilon_schedule,
        )
        return replace(base, **overrides) if overrides else base

    def load_definitions(self):
        """(id, traction callable) pairs, ids counted from one."""
        return [
            (i + 1, parse_traction_expression(expr))
            for i, expr in enumerate(self.tractions)
        ]

    def noise(self, seed=0):
        if self.noise_level == 0.0:
            return None
        return NoiseSpec(self.noise_level, seed=seed)


def _make_presets():
    presets = [
        ExperimentPreset(
            name="test1",
            description="centered disk cavity, gentle vertical load plus a bending load",
            target=_DISK,
            tractions=("(0, 1/10 - 3/10*y)", "(-1/2*x^2, y^2)"),
            mu=0.2,
            lam=1.0,
            refine_period=1000,
        ),
        ExperimentPreset(
            name="test2a",
            description="disk cavity, stiffer material, uniform horizontal pull",
            target=_DISK,
            tractions=("(2, 0)", "(-1/2*x^2, y^2)"),
            mu=1.0,
            lam=1.0,
            refine_period=1500,
        ),
        ExperimentPreset(
            name="test2b",
            description="disk cavity, radial and rotational loads",
            target=_DISK,
            tractions=("(x, y)", "(-y, -x)"),
            mu=0.5,
            lam=1.0,
            refine_period=1000,
        ),
        ExperimentPreset(
            name="test2c",
            description="disk cavity, near-zero Poisson ratio material",
            target=_DISK,
            tractions=("(5*x, 4*y)", "(-3*y, -3*x)"),
            mu=2.0,
            lam=-0.2,
            refine_period=2000,
        ),
        ExperimentPreset(
            name="test3a",
            description="square cavity, coarse interface width",
            target=_SQUARE,
            tractions=("(1/10, 0)", "(-1/2*x^2, y^2)"),
            mu=0.5,
            lam=1.0,
            epsilon=_EPS8,
            refine_period=6000,
        ),
        ExperimentPreset(
            name="test3b",
            description="square cavity, coarse interface width, stronger regularization",
            target=_SQUARE,
            tractions=("(1/10, 0)", "(-1/2*x^2, y^2)"),
            mu=0.5,
            lam=1.0,
            alpha_tilde=5e-2,
            epsilon=_EPS8,
            refine_period=6000,
        ),
        ExperimentPreset(
            name="test3c",
            description="square cavity, mixed shear load",
            target=_SQUARE,
            tractions=("(0, 2/5*x - 3/10*y)", "(-1/2*x^2, y^2)"),
            mu=0.5,
            lam=1.0,
            refine_period=3000,
        ),
        ExperimentPreset(
            name="test4a",
            description="two cavities (square and disk), radial and rotational loads",
            target=_TWO_SHAPES,
            tractions=("(x, y)", "(-y, -x)"),
            mu=0.5,
            lam=1.0,
            refine_period=5000,
        ),
        ExperimentPreset(
            name="test4b",
            description="two cavities, wide interface tightened mid-run, soft ersatz",
            target=_TWO_SHAPES,
            tractions=("(x, y)", "(-y, -x)"),
            mu=0.5,
            lam=1.0,
            delta=7.5e-2,
            epsilon=_EPS4,
            epsilon_schedule=EpsilonSchedule(8000, 4.0),
            refine_period=5000,
        ),
        ExperimentPreset(
            name="test5",
            description="L-shaped cavity, radial and rotational loads, small step",
            target=_L_SHAPE,
            tractions=("(x, y)", "(-y, -x)"),
            mu=0.5,
            lam=1.0,
            tau=5e-4,
            refine_period=5000,
        ),
        ExperimentPreset(
            name="test6a",
            description="disk cavity with 2% measurement noise",
            target=_DISK,
            tractions=("(0, 1/10 - 3/10*y)", "(-1/2*x^2, y^2)"),
            mu=0.2,
            lam=1.0,
            tau=5e-4,
            refine_period=2000,
            noise_level=2.0,
        ),
        ExperimentPreset(
            name="test6b",
            description="disk cavity with 5% noise and stronger regularization",
            target=_DISK,
            tractions=("(0, 1/10 - 3/10*y)", "(-1/2*x^2, y^2)"),
            mu=0.2,
            lam=1.0,
            alpha_tilde=5e-2,
            tau=5e-4,
            refine_period=2500,
            noise_level=5.0,
        ),
        ExperimentPreset(
            name="test6c",
            description="square cavity with 2% measurement noise",
            target=_SQUARE,
            tractions=("(0, 2/5*x - 3/10*y)", "(-1/2*x^2, y^2)"),
            mu=0.5,
            lam=1.0,
            tau=5e-4,
            refine_period=3000,
            noise_level=2.0,
        ),
        ExperimentPreset(
            name="test6d",
            description="square cavity with 5% measurement noise",
            target=_SQUARE,
            tractions=("(0, 2/5*x - 3/10*y)", "(-1/2*x^2, y^2)"),
            mu=0.5,
            lam=1.0,
            tau=5e-4,
            refine_period=10000,
            noise_level=5.0,
        ),
        ExperimentPreset(
            name="test6e",
            description="two cavities with 2% noise, tightening interface",
            target=_TWO_SHAPES,
            tractions=("(x, y)", "(-y, -x)"),
            mu=0.5,
            lam=1.0,
            delta=7.5e-2,
            epsilon=_EPS4,
            epsilon_schedule=EpsilonSchedule(8000, 4.0),
            refine_period=5000,
            noise_level=2.0,
        ),
        ExperimentPreset(
            name="test6f",
            description="two cavities with 5% noise, tightening interface",
            target=_TWO_SHAPES,
            tractions=("(x, y)", "(-y, -x)"),
            mu=0.5,
            lam=1.0,
            delta=7.5e-2,
            tau=5e-4,
            epsilon=_EPS4,
            epsilon_schedule=EpsilonSchedule(10000, 4.0),
            refine_period=8000,
            noise_level=5.0,
        ),
    ]
    return {p.name: p for p in presets}


PRESETS = _make_presets()


def get_preset(name):
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(
            "unknown preset %r; available: %s" % (name, ", ".join(PRESETS))
        ) from None


def preset_table():
    """Stable parameter table of every preset (for audits and the CLI)."""
    rows = []
    for p in PRESETS.values():
        sched = None
        if p.epsilon_schedule is not None:
            sched = (p.epsilon_schedule.switch_iteration, p.epsilon_schedule.divisor)
        rows.append(
            {
                "name": p.name,
                "mu": p.mu,
                "lam": p.lam,
                "delta": p.delta,
                "alpha_tilde": p.alpha_tilde,
                "tau": p.tau,
                "epsilon": p.epsilon,
                "refine_period": p.refine_period,
                "epsilon_schedule": sched,
                "noise_level": p.noise_level,
                "tractions": p.tractions,
                "target": p.target.describe(),
            }
        )
    return rows
