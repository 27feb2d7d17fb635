"""Problem instances for the coupled p/q-Laplacian Dirichlet system.

A :class:`ProblemSpec` fixes the exponents, the couplings, the box-shaped
domain, the piecewise-constant weight ``f`` and the mesh resolution.
:func:`validate_spec` derives the regime flags (Sobolev subcriticality,
superhomogeneity, sign class of ``f``) that the solvers branch on.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum

import numpy as np

# Supported exponent window for the discrete p-Laplacian machinery.
S_MIN = 1.1
S_MAX = 10.0


class SpecError(ValueError):
    """Invalid problem instance; ``key`` names the offending field."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class Domain:
    """Interval ``[a, b]`` or rectangle ``[a, b] x [c, d]``."""

    bounds: tuple[tuple[float, float], ...]

    def __post_init__(self):
        b = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        object.__setattr__(self, "bounds", b)
        if len(b) not in (1, 2):
            raise SpecError("domain.dim", f"expected 1 or 2, got {len(b)}")
        for lo, hi in b:
            if not (math.isfinite(lo) and math.isfinite(hi)) or hi <= lo:
                raise SpecError("domain.bounds", f"empty or invalid interval [{lo}, {hi}]")

    @property
    def dim(self) -> int:
        return len(self.bounds)

    @property
    def volume(self) -> float:
        return math.prod(hi - lo for lo, hi in self.bounds)

    @classmethod
    def interval(cls, a: float = 0.0, b: float = 1.0) -> Domain:
        return cls(((a, b),))

    @classmethod
    def rectangle(cls, a=0.0, b=1.0, c=0.0, d=1.0) -> Domain:
        return cls(((a, b), (c, d)))


@dataclass(frozen=True)
class WeightPiece:
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    value: float

    def __post_init__(self):
        object.__setattr__(self, "lower", tuple(float(x) for x in self.lower))
        object.__setattr__(self, "upper", tuple(float(x) for x in self.upper))
        object.__setattr__(self, "value", float(self.value))


@dataclass(frozen=True)
class Weight:
    """Piecewise-constant weight over axis-aligned boxes.

    The first piece whose closed box contains a point decides its value;
    points outside every piece take ``default``.
    """

    default: float = 0.0
    pieces: tuple[WeightPiece, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "default", float(self.default))
        object.__setattr__(self, "pieces", tuple(self.pieces))
        for k, pc in enumerate(self.pieces):
            if not math.isfinite(pc.value):
                raise SpecError(f"weight.pieces[{k}].value", "must be finite")
            if len(pc.lower) != len(pc.upper):
                raise SpecError(f"weight.pieces[{k}]", "lower/upper dimension mismatch")
            if any(hi < lo for lo, hi in zip(pc.lower, pc.upper)):
                raise SpecError(f"weight.pieces[{k}]", "upper corner below lower corner")
        if not math.isfinite(self.default):
            raise SpecError("weight.default", "must be finite")

    @classmethod
    def constant(cls, value: float) -> Weight:
        return cls(default=value)

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.full(x.shape[0], self.default)
        done = np.zeros(x.shape[0], dtype=bool)
        for pc in self.pieces:
            lo = np.asarray(pc.lower)
            hi = np.asarray(pc.upper)
            inside = np.all((x >= lo) & (x <= hi), axis=1) & ~done
            out[inside] = pc.value
            done |= inside
        return out

    def measures(self, domain: Domain) -> tuple[float, float, float]:
        """Exact ``(|f > 0|, |f = 0|, |f < 0|)`` inside ``domain``.

        The box edges cut the domain into a product grid of cells on which
        ``f`` is constant, so evaluating at cell centres is exact.
        """
        cuts = []
        for ax, (lo, hi) in enumerate(domain.bounds):
            pts = {lo, hi}
            for pc in self.pieces:
                if len(pc.lower) != domain.dim:
                    raise SpecError("weight.pieces", "dimension does not match domain")
                for c in (pc.lower[ax], pc.upper[ax]):
                    if lo < c < hi:
                        pts.add(c)
            cuts.append(np.array(sorted(pts)))
        plus = zero = minus = 0.0
        for cell in itertools.product(*(range(len(c) - 1) for c in cuts)):
            centre = [0.5 * (cuts[ax][i] + cuts[ax][i + 1]) for ax, i in enumerate(cell)]
            vol = math.prod(cuts[ax][i + 1] - cuts[ax][i] for ax, i in enumerate(cell))
            val = self(centre)[0]
            if val > 0:
                plus += vol
            elif val < 0:
                minus += vol
            else:
                zero += vol
        return plus, zero, minus


@dataclass(frozen=True)
class ProblemSpec:
    p: float
    q: float
    alpha: float
    beta: float
    c1: float = 1.0
    c2: float = 1.0
    domain: Domain = field(default_factory=Domain.interval)
    weight: Weight = field(default_factory=Weight)
    resolution: int = 129

    def __post_init__(self):
        for name in ("p", "q", "alpha", "beta", "c1", "c2"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                raise SpecError(name, f"expected a finite number, got {v!r}")
            object.__setattr__(self, name, float(v))
        if isinstance(self.resolution, bool) or int(self.resolution) != self.resolution:
            raise SpecError("resolution", f"expected an integer, got {self.resolution!r}")
        object.__setattr__(self, "resolution", int(self.resolution))

    @property
    def dim(self) -> int:
        return self.domain.dim

    @property
    def homogeneity_gap(self) -> float:
        """``alpha/p + beta/q - 1``; the fibering and scaling maps need it nonzero."""
        return self.alpha / self.p + self.beta / self.q - 1.0

    def with_couplings(self, c1: float, c2: float) -> ProblemSpec:
        return replace(self, c1=c1, c2=c2)

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "q": self.q,
            "alpha": self.alpha,
            "beta": self.beta,
            "c1": self.c1,
            "c2": self.c2,
            "domain": {"dim": self.dim, "bounds": [list(b) for b in self.domain.bounds]},
            "resolution": self.resolution,
            "weight": {
                "default": self.weight.default,
                "pieces": [
                    {"lower": list(pc.lower), "upper": list(pc.upper), "value": pc.value}
                    for pc in self.weight.pieces
                ],
            },
        }

    def digest(self) -> str:
        """Short stable hash of the instance, used in output manifests."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class WeightClass(str, Enum):
    NONPOSITIVE = "nonpositive"
    NONNEGATIVE = "nonnegative"
    SIGN_CHANGING = "sign-changing"
    ZERO = "zero"


@dataclass(frozen=True)
class RegimeReport:
    sob_ok: bool
    super_pq: bool
    subcritical: bool
    p_star: float
    q_star: float
    weight_class: WeightClass
    interior_plus_zero: bool
    sob_margin: float
    measure_plus: float
    measure_zero: float
    measure_minus: float

    def as_dict(self) -> dict:
        d = asdict(self)
        d["weight_class"] = self.weight_class.value
        return d


def critical_exponents(p: float, q: float, n: int) -> tuple[float, float]:
    """Sobolev critical exponents of W^{1,p} and W^{1,q} in dimension ``n``.

    ``n*s/(n-s)`` below the dimension, ``+inf`` otherwise (including ``s == n``).
    """
    if n not in (1, 2):
        raise ValueError(f"dimension must be 1 or 2, got {n}")

    def crit(s):
        return n * s / (n - s) if s < n else math.inf

    return crit(p), crit(q)


def validate_spec(spec: ProblemSpec, n: int | None = None) -> RegimeReport:
    if n is None:
        n = spec.dim
    for name in ("p", "q"):
        s = getattr(spec, name)
        if s <= 1:
            raise SpecError(name, f"must be > 1, got {s}")
        if not (S_MIN < s <= S_MAX):
            raise SpecError(name, f"supported range is ({S_MIN}, {S_MAX}], got {s}")
    for name in ("c1", "c2"):
        if getattr(spec, name) <= 0:
            raise SpecError(name, f"must be > 0, got {getattr(spec, name)}")
    for name in ("alpha", "beta"):
        if getattr(spec, name) < 1:
            raise SpecError(name, f"must be >= 1, got {getattr(spec, name)}")
    if spec.resolution < 3:
        raise SpecError("resolution", f"need at least 3 nodes per axis, got {spec.resolution}")
    if spec.domain.dim != n:
        raise SpecError("domain.dim", f"domain is {spec.domain.dim}-D but n={n}")

    p_star, q_star = critical_exponents(spec.p, spec.q, n)
    margin = spec.alpha / spec.p + spec.beta / spec.q - 1.0
    crit_sum = (0.0 if math.isinf(p_star) else spec.alpha / p_star) + (
        0.0 if math.isinf(q_star) else spec.beta / q_star
    )
    subcritical = crit_sum < 1.0
    sob_ok = margin > 0 and subcritical

    plus, zero, minus = spec.weight.measures(spec.domain)
    if plus > 0 and minus > 0:
        wc = WeightClass.SIGN_CHANGING
    elif plus > 0:
        wc = WeightClass.NONNEGATIVE
    elif minus > 0:
        wc = WeightClass.NONPOSITIVE
    else:
        wc = WeightClass.ZERO

    return RegimeReport(
        sob_ok=sob_ok,
        super_pq=spec.alpha >= spec.p and spec.beta >= spec.q,
        subcritical=subcritical,
        p_star=p_star,
        q_star=q_star,
        weight_class=wc,
        interior_plus_zero=(plus + zero) > 0,
        sob_margin=margin,
        measure_plus=plus,
        measure_zero=zero,
        measure_minus=minus,
    )
