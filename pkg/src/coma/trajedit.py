"""Ground-plane trajectories: a small parametric-curve language, sampling, arc-length
resampling, and remapping of a path onto the root rotation channel of a motion.

Curve programs look like::

    x = 16*sin(t)^3;
    y = 13*cos(t) - 5*cos(2*t) - 2*cos(3*t) - cos(4*t);
    t in [0, 2*pi];

or, for piecewise paths, a sequence of ``segment { ... }`` blocks whose t-ranges
abut.  ``closed;`` / ``open;`` may be given as a hint.  ``^`` and ``**`` are both
right-associative powers; ``np.`` prefixes are accepted so numpy-style formulas
paste in unchanged.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy.interpolate import make_interp_spline
from scipy.optimize import least_squares
from scipy.sparse import coo_matrix

from .motiondata import MotionSequence, standard_layout

DEFAULT_SAMPLES = 200

logger = logging.getLogger(__name__)


class CurveSyntaxError(ValueError):
    def __init__(self, msg: str, text: str = "", pos: int = 0):
        line = text.count("\n", 0, pos) + 1
        col = pos - (text.rfind("\n", 0, pos) + 1) + 1
        super().__init__(f"{msg} at line {line}, column {col}")
        self.pos = pos
        self.line = line
        self.column = col


class CurveEvalError(ValueError):
    pass


class NoCodeBlockError(ValueError):
    pass


_FENCE = re.compile(r"```[^\n`]*\n(.*?)```", re.DOTALL)


def extract_code_block(reply: str) -> str:
    blocks = _FENCE.findall(reply or "")
    if not blocks:
        raise NoCodeBlockError("reply contains no fenced code block")
    return blocks[-1]


# ---------------------------------------------------------------- lexer / parser

_FUNCS: Dict[str, Callable] = {
    "sin": np.sin, "cos": np.cos, "tan": np.tan, "abs": np.abs,
    "sqrt": np.sqrt, "exp": np.exp, "log": np.log,
}

_TOKEN = re.compile(r"""
    (?P<ws>\s+|\#[^\n]*)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>(?:np\.)?[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>\*\*|[-+*/^(),;=\[\]{}])
""", re.VERBOSE)


@dataclass(frozen=True)
class _Tok:
    kind: str
    value: str
    pos: int


def _lex(text: str) -> List[_Tok]:
    out = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise CurveSyntaxError(f"unexpected character {text[pos]!r}", text, pos)
        kind = m.lastgroup
        if kind != "ws":
            val = m.group()
            if kind == "name" and val.startswith("np."):
                val = val[3:]
            out.append(_Tok(kind, "^" if val == "**" else val, m.start()))
        pos = m.end()
    out.append(_Tok("eof", "", len(text)))
    return out


# AST nodes are tuples: ("num", v) | ("t",) | ("neg", a) | ("bin", op, a, b) | ("call", f, a)

class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.toks = _lex(text)
        self.i = 0

    @property
    def cur(self) -> _Tok:
        return self.toks[self.i]

    def error(self, msg: str, tok: Optional[_Tok] = None):
        tok = tok or self.cur
        raise CurveSyntaxError(msg, self.text, tok.pos)

    def take(self, value: Optional[str] = None, kind: Optional[str] = None) -> _Tok:
        tok = self.cur
        if (value is not None and tok.value != value) or (kind is not None and tok.kind != kind):
            want = repr(value) if value is not None else kind
            got = repr(tok.value) if tok.kind != "eof" else "end of input"
            self.error(f"expected {want}, found {got}")
        self.i += 1
        return tok

    def accept(self, value: str) -> bool:
        if self.cur.value == value and self.cur.kind in ("op", "name"):
            self.i += 1
            return True
        return False

    # expr := term (('+'|'-') term)*
    def expr(self):
        node = self.term()
        while self.cur.value in ("+", "-") and self.cur.kind == "op":
            op = self.take().value
            node = ("bin", op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.cur.value in ("*", "/") and self.cur.kind == "op":
            op = self.take().value
            node = ("bin", op, node, self.unary())
        return node

    # unary binds looser than '^' so -t^2 == -(t^2)
    def unary(self):
        if self.cur.kind == "op" and self.cur.value in ("-", "+"):
            op = self.take().value
            inner = self.unary()
            return ("neg", inner) if op == "-" else inner
        return self.power()

    def power(self):
        base = self.atom()
        if self.cur.kind == "op" and self.cur.value == "^":
            self.take()
            return ("bin", "^", base, self.unary())
        return base

    def atom(self):
        tok = self.cur
        if tok.kind == "num":
            self.take()
            return ("num", float(tok.value))
        if tok.kind == "name":
            self.take()
            if tok.value == "t":
                return ("t",)
            if tok.value == "pi":
                return ("num", math.pi)
            if tok.value in _FUNCS:
                self.take("(")
                arg = self.expr()
                self.take(")")
                return ("call", tok.value, arg)
            if self.cur.value == "(":
                self.error(f"unknown function {tok.value!r}", tok)
            self.error(f"unknown identifier {tok.value!r}", tok)
        if tok.kind == "op" and tok.value == "(":
            self.take()
            node = self.expr()
            self.take(")")
            return node
        self.error("expected an expression" if tok.kind != "eof" else "unexpected end of input")


def _evaluate(node, t: np.ndarray) -> np.ndarray:
    kind = node[0]
    if kind == "num":
        return np.full_like(t, node[1])
    if kind == "t":
        return t
    if kind == "neg":
        return -_evaluate(node[1], t)
    if kind == "call":
        return _FUNCS[node[1]](_evaluate(node[2], t))
    a, b = _evaluate(node[2], t), _evaluate(node[3], t)
    op = node[1]
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        return a / b
    return np.power(a, b)


def _uses_t(node) -> bool:
    if node[0] == "t":
        return True
    return any(isinstance(c, tuple) and _uses_t(c) for c in node[1:])


@dataclass(frozen=True)
class CurveSegment:
    x_expr: tuple
    y_expr: tuple
    t_start: float
    t_end: float

    def evaluate(self, t) -> Tuple[np.ndarray, np.ndarray]:
        t = np.asarray(t, dtype=np.float64)
        with np.errstate(all="ignore"):
            x = _evaluate(self.x_expr, t)
            y = _evaluate(self.y_expr, t)
        bad = ~(np.isfinite(x) & np.isfinite(y))
        if bad.any():
            raise CurveEvalError(f"curve is not finite at t={float(np.atleast_1d(t)[np.argmax(bad)])!r}")
        return x, y


@dataclass(frozen=True)
class CurveSpec:
    segments: Tuple[CurveSegment, ...]
    closed_hint: Optional[bool] = None

    @property
    def t_start(self) -> float:
        return self.segments[0].t_start

    @property
    def t_end(self) -> float:
        return self.segments[-1].t_end

    def evaluate(self, t) -> Tuple[np.ndarray, np.ndarray]:
        """Evaluate at scalar or array t; each t uses the segment whose range holds it."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if ((t < self.t_start) | (t > self.t_end)).any():
            raise CurveEvalError(f"t outside [{self.t_start}, {self.t_end}]")
        x = np.empty_like(t)
        y = np.empty_like(t)
        ends = np.array([s.t_end for s in self.segments[:-1]])
        which = np.searchsorted(ends, t, side="left")
        for k, seg in enumerate(self.segments):
            sel = which == k
            if sel.any():
                x[sel], y[sel] = seg.evaluate(t[sel])
        return x, y


def _parse_body(p: _Parser, allow_segments: bool):
    fields: Dict[str, object] = {}
    segments = []
    closed = None
    while p.cur.kind != "eof" and p.cur.value != "}":
        tok = p.cur
        if tok.kind != "name":
            p.error("expected a statement")
        if tok.value in ("x", "y"):
            p.take()
            if tok.value in fields:
                p.error(f"{tok.value} assigned twice", tok)
            p.take("=")
            fields[tok.value] = (p.expr(), tok)
            p.take(";")
        elif tok.value == "t":
            p.take()
            p.take("in", kind="name")
            p.take("[")
            lo = p.expr()
            p.take(",")
            hi = p.expr()
            p.take("]")
            p.take(";")
            if "t" in fields:
                p.error("t range given twice", tok)
            for node in (lo, hi):
                if _uses_t(node):
                    p.error("t range bounds must not depend on t", tok)
            fields["t"] = (float(_evaluate(lo, np.zeros(1))[0]), float(_evaluate(hi, np.zeros(1))[0]), tok)
        elif tok.value in ("closed", "open"):
            p.take()
            p.take(";")
            closed = tok.value == "closed"
        elif tok.value == "segment":
            if not allow_segments:
                p.error("segments cannot be nested", tok)
            p.take()
            p.take("{")
            seg, _, inner_closed = _parse_body(p, allow_segments=False)
            if inner_closed is not None:
                p.error("closed/open hints belong at the top level", tok)
            p.take("}")
            segments.append(seg[0])
        else:
            p.error(f"unknown statement {tok.value!r}", tok)
    if fields and segments:
        p.error("mix of top-level x/y/t statements and segment blocks")
    if fields or not allow_segments:
        for key in ("x", "y", "t"):
            if key not in fields:
                p.error(f"missing {key} {'range' if key == 't' else 'expression'}")
        lo, hi, ttok = fields["t"]
        if not (np.isfinite(lo) and np.isfinite(hi)) or not hi > lo:
            p.error(f"t range [{lo}, {hi}] must be finite and increasing", ttok)
        segments = [CurveSegment(fields["x"][0], fields["y"][0], lo, hi)]
    return segments, None, closed


def parse_curve_spec(text: str) -> CurveSpec:
    p = _Parser(text)
    segments, _, closed = _parse_body(p, allow_segments=True)
    if p.cur.kind != "eof":
        p.error(f"unexpected {p.cur.value!r}")
    if not segments:
        raise CurveSyntaxError("empty curve program", text, 0)
    for a, b in zip(segments, segments[1:]):
        if not math.isclose(a.t_end, b.t_start, rel_tol=1e-12, abs_tol=1e-12):
            raise CurveSyntaxError(f"segment ranges not contiguous: {a.t_end} then {b.t_start}", text, len(text))
    spec = CurveSpec(tuple(segments), closed)
    for seg in spec.segments:  # fail early on obviously broken formulas
        seg.evaluate(np.linspace(seg.t_start, seg.t_end, 17))
    return spec


# ---------------------------------------------------------------- sampling

@dataclass(frozen=True)
class PolyLine:
    points: np.ndarray  # (N, 2)

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError(f"polyline needs at least 2 (x, y) points, got shape {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("polyline has non-finite points")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    def segment_lengths(self) -> np.ndarray:
        return np.linalg.norm(np.diff(self.points, axis=0), axis=1)

    def length(self) -> float:
        return float(self.segment_lengths().sum())

    def is_closed(self, tol: float = 1e-9) -> bool:
        return bool(np.linalg.norm(self.points[0] - self.points[-1]) <= tol)


def sample_curve(spec: CurveSpec, n_samples: int = DEFAULT_SAMPLES) -> PolyLine:
    if n_samples < 2:
        raise ValueError("need at least 2 samples")
    t = np.linspace(spec.t_start, spec.t_end, n_samples)
    x, y = spec.evaluate(t)
    return PolyLine(np.stack([x, y], axis=1))


def _dedupe(points: np.ndarray, tol: float) -> np.ndarray:
    keep = [0]
    for i in range(1, len(points)):
        if np.linalg.norm(points[i] - points[keep[-1]]) > tol:
            keep.append(i)
    return points[keep]


def _fit_spline(points: np.ndarray, closed: bool):
    chord = np.linalg.norm(np.diff(points, axis=0), axis=1)
    u = np.concatenate([[0.0], np.cumsum(chord)])
    u /= u[-1]
    k = min(3, len(points) - 1)
    if closed and k == 3:
        pts = points.copy()
        pts[-1] = pts[0]
        return make_interp_spline(u, pts, k=3, bc_type="periodic")
    return make_interp_spline(u, points, k=k)


def _equal_chord_params(spline, n_out: int, dense: int) -> np.ndarray:
    """Spline parameters u_0=0 < ... < u_N=1 with all chords |S(u_i+1) - S(u_i)| equal.

    Solved as a square least-squares system in (u_1..u_N-1, L), started from equal
    arc-length spacing.  A direct chord walk stalls at cusps where the path doubles
    back; the joint solve places a sample on the cusp instead.
    """
    N = n_out - 1
    grid = np.linspace(0.0, 1.0, dense)
    pts = spline(grid)
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    u0 = np.interp(np.linspace(0.0, arc[-1], n_out), arc, grid)
    deriv = spline.derivative()

    def full(x):
        return np.concatenate([[0.0], x[:-1], [1.0]])

    def residual(x):
        q = spline(full(x))
        return np.linalg.norm(np.diff(q, axis=0), axis=1) - x[-1]

    def jacobian(x):
        u = full(x)
        dq = np.diff(spline(u), axis=0)
        e = dq / np.maximum(np.linalg.norm(dq, axis=1), 1e-300)[:, None]
        du = deriv(u)
        rows = np.arange(N)
        lo = -(e * du[:-1]).sum(axis=1)  # d c_i / d u_i
        hi = (e * du[1:]).sum(axis=1)  # d c_i / d u_i+1
        r = np.concatenate([rows[1:], rows[:-1], rows])
        c = np.concatenate([rows[1:] - 1, rows[:-1], np.full(N, N - 1)])
        v = np.concatenate([lo[1:], hi[:-1], -np.ones(N)])
        return coo_matrix((v, (r, c)), shape=(N, N)).tocsr()

    x0 = np.concatenate([u0[1:-1], [arc[-1] / N]])
    sol = least_squares(residual, x0, jac=jacobian, method="trf", x_scale="jac",
                        xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=200)
    u = full(sol.x)
    if not (np.diff(u) > 0).all():
        logger.warning("equal-chord solve lost ordering; using arc-length spacing")
        return u0
    return u


def resample_uniform(poly: PolyLine, n_out: int, dense: int = 8000) -> PolyLine:
    """Interpolating cubic B-spline (chord-length knots, interpolated end points, periodic
    when the input is closed), then ``n_out`` points with equal consecutive chords."""
    if n_out < 2:
        raise ValueError("n_out must be >= 2")
    pts = np.asarray(poly.points)
    scale = float(np.abs(pts).max()) or 1.0
    clean = _dedupe(pts, 1e-12 * scale)
    closed = poly.is_closed(1e-9 * scale)
    if closed:
        while len(clean) > 1 and np.linalg.norm(clean[-1] - pts[0]) <= 1e-9 * scale:
            clean = clean[:-1]
        clean = np.vstack([clean, pts[:1]])
    if len(clean) < (4 if closed else 2):
        raise ValueError("degenerate polyline: points coincide")
    start, end = pts[0].copy(), pts[-1].copy()
    if n_out == 2:
        return PolyLine(np.stack([start, end]))
    spline = _fit_spline(clean, closed)
    out = spline(_equal_chord_params(spline, n_out, max(dense, 20 * n_out)))
    out[0], out[-1] = start, end
    return PolyLine(out)


def spacing_dispersion(poly: PolyLine) -> float:
    """(max - min) / mean of consecutive chord lengths."""
    d = poly.segment_lengths()
    return float((d.max() - d.min()) / d.mean())


# ---------------------------------------------------------------- profiles

@dataclass(frozen=True)
class TrajectoryProfile:
    heading_delta: np.ndarray  # rad/frame, counter-clockwise positive
    speed: np.ndarray  # units/frame

    def __post_init__(self):
        h = np.array(self.heading_delta, dtype=np.float64)
        s = np.array(self.speed, dtype=np.float64)
        if h.ndim != 1 or h.shape != s.shape or len(h) < 1:
            raise ValueError("heading_delta and speed must be equal-length 1-D arrays")
        if not (np.isfinite(h).all() and np.isfinite(s).all()):
            raise ValueError("profile has non-finite values")
        if (np.abs(h) >= np.pi).any():
            raise ValueError("heading change per frame must stay below pi")
        h.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "heading_delta", h)
        object.__setattr__(self, "speed", s)

    @property
    def T(self) -> int:
        return len(self.heading_delta)


def _signed_angles(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    dot = (a * b).sum(axis=1)
    return np.arctan2(cross, dot)


def derive_profile(poly: PolyLine, v_bar: float) -> TrajectoryProfile:
    """Per-step turning angle and speed.  The first step keeps the initial facing
    (direction of the first segment) except on closed paths, where it turns from
    the last segment's direction into the first."""
    if not v_bar > 0:
        raise ValueError("v_bar must be positive")
    d = np.diff(poly.points, axis=0)
    lengths = np.linalg.norm(d, axis=1)
    if (lengths <= 1e-12 * max(1.0, float(np.abs(poly.points).max()))).any():
        raise ValueError("polyline has zero-length segments")
    heading = np.zeros(len(d))
    heading[1:] = _signed_angles(d[:-1], d[1:])
    if poly.is_closed(1e-9 * max(1.0, float(np.abs(poly.points).max()))) and len(d) > 1:
        heading[0] = _signed_angles(d[-1:], d[:1])[0]
    speed = lengths * (v_bar / lengths.mean())
    return TrajectoryProfile(heading, speed)


def fit_profile(profile: TrajectoryProfile, length: int) -> TrajectoryProfile:
    """Resample to ``length`` steps, keeping total turning and mean speed."""
    if length < 1:
        raise ValueError("length must be >= 1")
    if length == profile.T:
        return profile
    src = (np.arange(profile.T) + 0.5) / profile.T
    dst = (np.arange(length) + 0.5) / length
    heading = np.interp(dst, src, profile.heading_delta)
    total = profile.heading_delta.sum()
    if abs(heading.sum()) > 0:
        heading *= total / heading.sum()
    else:
        heading[:] = total / length
    speed = np.interp(dst, src, profile.speed)
    speed *= profile.speed.mean() / speed.mean()
    return TrajectoryProfile(heading, speed)


def apply_trajectory(m: MotionSequence, profile: TrajectoryProfile, overwrite_speed: bool = False
                     ) -> MotionSequence:
    """Write the profile's turning into the root rotation channel.

    Frame 0 keeps its facing (value 0); frames 1..T-1 receive ``heading_delta``.
    Only column 0 changes unless ``overwrite_speed`` also sets the root velocity to
    (0, speed), i.e. straight ahead in the root frame.
    """
    if m.T < 2:
        raise ValueError("motion needs at least 2 frames")
    if profile.T != m.T - 1:
        profile = fit_profile(profile, m.T - 1)
    layout = standard_layout()
    frames = np.array(m.frames)
    col = layout.root_rot_vel
    frames[0, col] = 0.0
    frames[1:, col] = profile.heading_delta.astype(np.float32)
    if overwrite_speed:
        a, b = layout.root_lin_vel
        frames[1:, a] = 0.0
        frames[1:, b] = profile.speed.astype(np.float32)
    return m.with_frames(frames)


def read_profile(m: MotionSequence) -> np.ndarray:
    return m.frames[1:, standard_layout().root_rot_vel].astype(np.float64)


def integrate_root(m: MotionSequence) -> np.ndarray:
    """Planar root path (T, 2).  Step i -> i+1 moves by frame i+1's root velocity
    (side, forward) turned by the heading accumulated over frames 0..i+1."""
    layout = standard_layout()
    a, b = layout.root_lin_vel
    f = m.frames.astype(np.float64)
    yaw = np.cumsum(f[:, layout.root_rot_vel])
    side, fwd = f[:, a], f[:, b]
    vx = fwd * np.cos(yaw) + side * np.sin(yaw)
    vy = fwd * np.sin(yaw) - side * np.cos(yaw)
    path = np.zeros((m.T, 2))
    path[1:, 0] = np.cumsum(vx[1:])
    path[1:, 1] = np.cumsum(vy[1:])
    return path


def trajectory_from_spec(text: str, T: int, v_bar: float, n_samples: int = DEFAULT_SAMPLES
                         ) -> Tuple[PolyLine, TrajectoryProfile]:
    """DSL text -> sampled curve -> T uniform points -> profile of length T-1."""
    spec = parse_curve_spec(text)
    poly = resample_uniform(sample_curve(spec, n_samples), T)
    return poly, derive_profile(poly, v_bar)
