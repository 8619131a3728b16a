"""Coefficient descriptions, switching sequences and the example catalog.

Times on the half-line are carried as :class:`TimePoint` objects, i.e. a
segment index of the switching partition, an offset inside that segment and
a correctly rounded absolute clock.  Segment lengths of the super-exponential
sequence reach ``e**196`` so window arithmetic must stay segment-relative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Mapping

import numpy as np

SEQUENCE_KINDS = ("paper51", "mild51", "dyadic", "custom")
EXAMPLE_NAMES = (
    "remark26",
    "prop52",
    "diag_pm1",
    "remark59",
    "sec6",
    "eps_perturbed",
    "product3d",
    "constant",
)
STRUCTURE_TAGS = frozenset({"diagonal", "upper_triangular", "bounded"})

# e**(k*k) overflows a double beyond k = 26
_PAPER51_MAX_SEGMENTS = 27


class ParameterError(ValueError):
    """Raised when an example or sequence is built from invalid parameters."""


@dataclass(frozen=True, order=True)
class TimePoint:
    segment: int
    offset: float
    clock: float = field(compare=False)

    def __post_init__(self):
        if self.segment < 0:
            raise ValueError("segment index must be non-negative")
        if self.offset < 0:
            raise ValueError("offset must be non-negative")


@dataclass(frozen=True)
class SwitchingSequence:
    """Strictly increasing switching times ``T_0 = 0 < T_1 < ...``.

    ``gaps[j]`` is the length of segment ``j``.  ``scale`` multiplies every
    gap (used by :func:`scale_shift`).
    """

    kind: str
    horizon_segments: int
    custom_gaps: tuple[float, ...] = ()
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in SEQUENCE_KINDS:
            raise ParameterError(f"unknown sequence kind {self.kind!r}")
        if self.horizon_segments < 1:
            raise ParameterError("horizon_segments must be positive")
        if self.kind == "paper51" and self.horizon_segments > _PAPER51_MAX_SEGMENTS:
            raise ParameterError(
                f"paper51 supports at most {_PAPER51_MAX_SEGMENTS} segments in double precision"
            )
        if self.kind == "custom":
            if len(self.custom_gaps) < self.horizon_segments:
                raise ParameterError("custom sequence needs one gap per segment")
            if any(not (g > 0) for g in self.custom_gaps):
                raise ParameterError("gaps must be strictly positive")
        if not self.scale > 0:
            raise ParameterError("scale must be positive")

    @cached_property
    def gaps(self) -> tuple[float, ...]:
        n = self.horizon_segments
        if self.kind == "paper51":
            raw = [math.exp(k * k) if k % 2 == 0 else float(k) for k in range(n)]
        elif self.kind == "mild51":
            # long first-phase gaps, logarithmically short second-phase gaps
            raw = [float((k + 1) ** 2) if k % 2 == 0 else 1.0 + math.log(k + 1) for k in range(n)]
        elif self.kind == "dyadic":
            raw = [1.0] + [2.0 ** (j - 1) for j in range(1, n)]
        else:
            raw = [float(g) for g in self.custom_gaps[:n]]
        return tuple(g * self.scale for g in raw)

    @cached_property
    def boundaries(self) -> tuple[float, ...]:
        """Correctly rounded boundary clocks ``b_0 = 0, ..., b_n``."""
        if self.kind == "dyadic":
            return (0.0,) + tuple(self.scale * 2.0**j for j in range(self.horizon_segments))
        g = self.gaps
        return tuple(math.fsum(g[:j]) for j in range(len(g) + 1))

    @property
    def horizon(self) -> float:
        return self.boundaries[-1]

    def boundary(self, j: int) -> TimePoint:
        """TimePoint at the start of segment ``j`` (``j == n`` is the horizon end)."""
        n = self.horizon_segments
        if not 0 <= j <= n:
            raise ParameterError(f"boundary {j} beyond horizon ({n} segments)")
        if j == n:
            return TimePoint(n - 1, self.gaps[-1], self.boundaries[-1])
        return TimePoint(j, 0.0, self.boundaries[j])

    def point(self, segment: int, offset: float) -> TimePoint:
        if not 0 <= segment < self.horizon_segments:
            raise ParameterError(f"segment {segment} beyond horizon")
        if offset > self.gaps[segment] * (1 + 1e-15):
            raise ParameterError("offset exceeds segment length")
        offset = min(offset, self.gaps[segment])
        return TimePoint(segment, offset, math.fsum((self.boundaries[segment], offset)))

    def locate(self, t: float) -> TimePoint:
        """TimePoint for an absolute time; boundaries go to the right segment."""
        b = self.boundaries
        if t < 0 or t > b[-1] * (1 + 1e-15):
            raise ParameterError(f"time {t} outside [0, {b[-1]}]")
        j = int(np.searchsorted(b, t, side="right")) - 1
        j = min(max(j, 0), self.horizon_segments - 1)
        return TimePoint(j, min(max(t - b[j], 0.0), self.gaps[j]), float(t))

    def segment_of(self, t: float) -> int:
        """Segment containing ``t`` with left-segment attribution at switches."""
        b = self.boundaries
        j = int(np.searchsorted(b, t, side="left")) - 1
        return min(max(j, 0), self.horizon_segments - 1)


def switching_time(seq: SwitchingSequence, k: int) -> TimePoint:
    """The switching time ``T_k`` of the sequence.

    For the dyadic kind ``T_k = 2**k`` (times the scale); the leading unit
    segment ``[0, 1)`` precedes ``T_0``.
    """
    if k < 0:
        raise ParameterError("k must be non-negative")
    if seq.kind == "dyadic":
        if k + 1 > seq.horizon_segments:
            raise ParameterError(f"T_{k} beyond horizon")
        return seq.boundary(k + 1)
    if k > seq.horizon_segments:
        raise ParameterError(f"T_{k} beyond horizon")
    return seq.boundary(k)


# ---------------------------------------------------------------------------
# system bodies


@dataclass(frozen=True)
class PiecewiseConstant:
    sequence: SwitchingSequence
    phase_matrices: Mapping[str, np.ndarray]
    phase_rule: Callable[[int], str]

    def matrix(self, segment: int) -> np.ndarray:
        return self.phase_matrices[self.phase_rule(segment)]


@dataclass(frozen=True)
class ScalarRule:
    """Scalar coefficient constant on each segment, ``a(t) = rate(segment)``."""

    sequence: SwitchingSequence
    rate: Callable[[int], float]
    description: str = ""

    def matrix(self, segment: int) -> np.ndarray:
        return np.array([[float(self.rate(segment))]])

    def __call__(self, t: float) -> float:
        return float(self.rate(self.sequence.segment_of(t)))


@dataclass(frozen=True)
class General:
    """Arbitrary callable ``A(t)``; ``sequence`` is a uniform cell grid."""

    func: Callable[[float], np.ndarray]
    sequence: SwitchingSequence


@dataclass(frozen=True, eq=False)
class LinearSystem:
    dimension: int
    body: PiecewiseConstant | ScalarRule | General
    bound: float | None = None
    structure_tags: frozenset = frozenset()
    name: str = ""
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "structure_tags", frozenset(self.structure_tags))
        unknown = self.structure_tags - STRUCTURE_TAGS
        if unknown:
            raise ParameterError(f"unknown structure tags {sorted(unknown)}")
        if isinstance(self.body, PiecewiseConstant):
            for label, m in self.body.phase_matrices.items():
                m = np.asarray(m, dtype=float)
                if m.shape != (self.dimension, self.dimension):
                    raise ParameterError(f"phase {label!r} has shape {m.shape}")
                if self.bound is not None and np.linalg.norm(m, 2) > self.bound * (1 + 1e-12):
                    raise ParameterError(f"phase {label!r} violates bound {self.bound}")
                if "upper_triangular" in self.structure_tags and np.any(np.tril(m, -1) != 0):
                    raise ParameterError(f"phase {label!r} is not upper triangular")
                if "diagonal" in self.structure_tags and np.any(m - np.diag(np.diag(m)) != 0):
                    raise ParameterError(f"phase {label!r} is not diagonal")

    @property
    def sequence(self) -> SwitchingSequence:
        return self.body.sequence

    @property
    def horizon(self) -> float:
        return self.sequence.horizon

    def A(self, t: float) -> np.ndarray:
        if isinstance(self.body, General):
            return np.asarray(self.body.func(t), dtype=float)
        return self.body.matrix(self.sequence.segment_of(t))

    def segment_matrix(self, segment: int) -> np.ndarray | None:
        if isinstance(self.body, General):
            return None
        return np.asarray(self.body.matrix(segment), dtype=float)

    def with_sequence(self, seq: SwitchingSequence) -> "LinearSystem":
        return replace(self, body=replace(self.body, sequence=seq))


def scale_shift(sys: LinearSystem, gamma: float, b: float) -> LinearSystem:
    """The system ``x' = (gamma * A(gamma * t) + b I) x``."""
    if not gamma > 0:
        raise ParameterError("gamma must be positive")
    body = sys.body
    seq = replace(body.sequence, scale=body.sequence.scale / gamma)
    eye = np.eye(sys.dimension)
    if isinstance(body, PiecewiseConstant):
        mats = {k: gamma * np.asarray(m, dtype=float) + b * eye for k, m in body.phase_matrices.items()}
        new_body = PiecewiseConstant(seq, mats, body.phase_rule)
    elif isinstance(body, ScalarRule):
        rate = body.rate
        new_body = ScalarRule(seq, lambda j: gamma * rate(j) + b, body.description)
    else:
        func = body.func
        new_body = General(lambda t: gamma * np.asarray(func(gamma * t), dtype=float) + b * eye, seq)
    tags = set(sys.structure_tags)
    bound = None if sys.bound is None else gamma * sys.bound + abs(b)
    if bound is None:
        tags.discard("bounded")
    return LinearSystem(
        sys.dimension, new_body, bound, frozenset(tags), f"{sys.name}|scale={gamma},shift={b}", dict(sys.params)
    )


# ---------------------------------------------------------------------------
# catalog


@dataclass(frozen=True)
class ExampleSpec:
    name: str
    params: Mapping[str, float] = field(default_factory=dict)
    sequence: str | None = None
    horizon_segments: int | None = None
    gaps: tuple[float, ...] = ()

    def __post_init__(self):
        if self.name not in EXAMPLE_NAMES:
            raise ParameterError(f"unknown example {self.name!r}; choose from {', '.join(EXAMPLE_NAMES)}")


DEFAULTS = {
    "remark26": ({}, "custom", 400),
    "prop52": ({"delta": 1.0}, "paper51", 16),
    "diag_pm1": ({}, "custom", 24),
    "remark59": ({"cell": 0.25}, "custom", 160),
    "sec6": ({"alpha": 1.0, "beta": 9.0, "gamma": 2.5, "delta": 1.0}, "dyadic", 12),
    "eps_perturbed": ({"delta": 1.0, "eps": 0.2}, "paper51", 16),
    "product3d": ({"delta": 1.0, "half_width": 0.5}, "paper51", 16),
    "constant": ({"a11": -1.0, "a12": 0.0, "a21": 0.0, "a22": 1.0}, "custom", 20),
}

SEC6_NONLINEAR = {"alpha": 0.05, "beta": 0.4, "gamma": 0.12, "delta": 1.0}


def nonneg_pm1_gaps(n: int) -> tuple[float, ...]:
    """Gaps 1, 1, 2, 2, 4, 4, ...: with +1 first, the integral of a stays >= 0."""
    return tuple(float(2 ** (j // 2)) for j in range(n))


def nonpos_pm1_gaps(n: int) -> tuple[float, ...]:
    """Gaps 1, 2, 1, 2, 2, 4, 4, 8, ...: with +1 first, the integral is <= 0 after T_2."""
    head = [1.0, 2.0, 1.0, 2.0]
    g = head[:]
    j = 4
    while len(g) < n:
        g.append(float(2 ** ((j - 1) // 2)))
        j += 1
    return tuple(g[:n])


def check_sec6(alpha: float, beta: float, gamma: float, delta: float) -> None:
    if min(alpha, beta, gamma, delta) <= 0:
        raise ParameterError("alpha, beta, gamma, delta must be positive")
    if not beta > 2 * gamma + 3 * alpha:
        raise ParameterError(
            f"beta > 2*gamma + 3*alpha fails ({beta:g} <= {2 * gamma + 3 * alpha:g})"
        )
    if not gamma > 2 * alpha:
        raise ParameterError(f"gamma > 2*alpha fails ({gamma:g} <= {2 * alpha:g})")
    if not delta >= 1:
        raise ParameterError(f"delta >= 1 fails ({delta:g} < 1)")


def _alternating(j: int) -> str:
    return "A1" if j % 2 == 0 else "A2"


def _sequence(spec: ExampleSpec, kind: str, n: int, default_gaps=()) -> SwitchingSequence:
    kind = spec.sequence or kind
    n = spec.horizon_segments or n
    gaps = tuple(spec.gaps) or tuple(default_gaps)
    if kind == "custom" and not gaps:
        raise ParameterError("custom sequence needs explicit gaps")
    return SwitchingSequence(kind, n, gaps if kind == "custom" else ())


def _bounded_tags(mats, *extra):
    return max(np.linalg.norm(m, 2) for m in mats), frozenset({"bounded", *extra})


def build_example(spec: ExampleSpec) -> LinearSystem:
    """Construct a catalog system from its spec."""
    base, kind, n = DEFAULTS[spec.name]
    p = {**base, **spec.params}
    name = spec.name
    nseg = spec.horizon_segments or n

    if name == "remark26":
        seq = _sequence(spec, kind, n, [1.0] * nseg)

        def rate(j: int) -> float:
            return float(j // 2) if j % 2 == 0 else -float(j)

        body = ScalarRule(seq, rate, "n on [2n, 2n+1), -(2n+1) on [2n+1, 2n+2)")
        return LinearSystem(1, body, None, {"diagonal", "upper_triangular"}, name, p)

    if name in ("prop52", "eps_perturbed"):
        d = p["delta"]
        e = p.get("eps", 0.0) if name == "eps_perturbed" else 0.0
        mats = {
            "A1": np.array([[-1.0, d], [0.0, -1.0 + e]]),
            "A2": np.array([[-1.0, 0.0], [0.0, e]]),
        }
        seq = _sequence(spec, kind, n)
        M, tags = _bounded_tags(mats.values(), "upper_triangular")
        return LinearSystem(2, PiecewiseConstant(seq, mats, _alternating), M, tags, name, p)

    if name == "diag_pm1":
        mats = {"A1": np.diag([0.0, 1.0]), "A2": np.diag([0.0, -1.0])}
        seq = _sequence(spec, kind, n, nonneg_pm1_gaps(nseg))
        return LinearSystem(
            2, PiecewiseConstant(seq, mats, _alternating), 1.0,
            {"bounded", "diagonal", "upper_triangular"}, name, p,
        )

    if name == "remark59":
        cell = p["cell"]
        seq = _sequence(spec, kind, n, [cell] * nseg)

        def A(t: float) -> np.ndarray:
            return np.array([[0.0, 2.0 * math.exp(t)], [0.0, 1.0]])

        return LinearSystem(2, General(A, seq), None, {"upper_triangular"}, name, p)

    if name == "sec6":
        a, b, g, d = p["alpha"], p["beta"], p["gamma"], p["delta"]
        check_sec6(a, b, g, d)
        mats = {
            "A1": np.array([[-a, d], [0.0, -b]]),
            "A2": np.array([[-a, d], [0.0, g]]),
        }
        # segment 0 = [0,1), segment j = [2**(j-1), 2**j): A1 on even segments
        seq = _sequence(spec, kind, n)
        M, tags = _bounded_tags(mats.values(), "upper_triangular")
        return LinearSystem(2, PiecewiseConstant(seq, mats, _alternating), M, tags, name, p)

    if name == "product3d":
        d, h = p["delta"], p["half_width"]
        mats = {}
        for lab, (a22, a23, a33) in {"A1": (-1.0, d, -1.0), "A2": (-1.0, 0.0, 0.0)}.items():
            for sign, s in (("+", 1.0), ("-", -1.0)):
                m = np.zeros((3, 3))
                m[0, 0] = s * h
                m[1, 1], m[1, 2], m[2, 2] = a22, a23, a33
                mats[lab + sign] = m

        def rule(j: int) -> str:
            return _alternating(j) + ("+" if (j // 2) % 2 == 0 else "-")

        seq = _sequence(spec, kind, n)
        M, tags = _bounded_tags(mats.values(), "upper_triangular")
        return LinearSystem(3, PiecewiseConstant(seq, mats, rule), M, tags, name, p)

    # constant 2x2 (autonomous) system on a uniform partition
    m = np.array([[p["a11"], p["a12"]], [p["a21"], p["a22"]]])
    seq = _sequence(spec, kind, n, [10.0] * nseg)
    tags = {"bounded"}
    if m[1, 0] == 0:
        tags.add("upper_triangular")
        if m[0, 1] == 0:
            tags.add("diagonal")
    return LinearSystem(2, PiecewiseConstant(seq, {"A": m}, lambda j: "A"), float(np.linalg.norm(m, 2)), tags, name, p)


def constant_system(matrix, horizon_segments: int = 20, gap: float = 10.0, name: str = "constant") -> LinearSystem:
    """Autonomous system with a fixed matrix of any dimension."""
    m = np.atleast_2d(np.asarray(matrix, dtype=float))
    d = m.shape[0]
    seq = SwitchingSequence("custom", horizon_segments, (gap,) * horizon_segments)
    tags = {"bounded"}
    if np.all(np.tril(m, -1) == 0):
        tags.add("upper_triangular")
        if np.all(np.triu(m, 1) == 0):
            tags.add("diagonal")
    return LinearSystem(d, PiecewiseConstant(seq, {"A": m}, lambda j: "A"), float(np.linalg.norm(m, 2)), tags, name)


# ---------------------------------------------------------------------------
# plain-text key/value configuration


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


RESERVED_KEYS = ("name", "sequence", "horizon_segments", "gaps")


def parse_config(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for i, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", i)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError("empty key", i)
        if key in out:
            raise ConfigError(f"duplicate key {key!r}", i)
        out[key] = value
    return out


def example_from_config(cfg: Mapping[str, str], exclude=()) -> ExampleSpec:
    if "name" not in cfg:
        raise ConfigError("missing required key 'name'")
    params = {}
    for k, v in cfg.items():
        if k in RESERVED_KEYS or k in exclude:
            continue
        try:
            params[k] = float(v)
        except ValueError:
            raise ConfigError(f"parameter {k!r} is not a number: {v!r}") from None
    gaps = ()
    if "gaps" in cfg:
        try:
            gaps = tuple(float(g) for g in cfg["gaps"].split(","))
        except ValueError:
            raise ConfigError(f"bad gap list {cfg['gaps']!r}") from None
    hs = None
    if "horizon_segments" in cfg:
        try:
            hs = int(cfg["horizon_segments"])
        except ValueError:
            raise ConfigError("horizon_segments must be an integer") from None
    try:
        return ExampleSpec(cfg["name"], params, cfg.get("sequence"), hs, gaps)
    except ParameterError as exc:
        raise ConfigError(str(exc)) from None


def load_example(path) -> ExampleSpec:
    with open(path) as fh:
        return example_from_config(parse_config(fh.read()))
