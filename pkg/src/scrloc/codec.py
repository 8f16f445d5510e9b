"""Invertible cosine encoding of 3D points.

Each coordinate channel ``x`` is mapped to ``[cos(f_1 x), sin(f_1 x), ..., cos(f_F x), sin(f_F x)]``
with geometrically spaced angular frequencies ``f_i = f1 * gamma**(i-1)``. A point is the
concatenation of its three channel encodings (dimension ``6F``).

Decoding is a non-linear least-squares projection back onto the encoding curve, solved by
probing the derivative of the squared distance on a regular lattice, interpolating its zero
crossings and polishing each one with a safeguarded Newton iteration.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .errors import DegeneratePairError, DimensionMismatchError, InfeasibleConstraintError, InvalidParameterError

DEGENERATE_NORM = 1e-12
# Round-trip tolerance of the decoder on noiseless encodings (meters).
DECODER_TOL = 1e-6

_REFINE_MAX_ITER = 20
_REFINE_GRAD_TOL = 1e-10
_REFINE_BRACKET_TOL = 1e-9
# Budget of entries for the (rows x probes) work matrices.
_CHUNK_ENTRIES = 1 << 22


@dataclass(frozen=True)
class FrequencySet:
    """Geometric progression of angular frequencies (radians per meter)."""

    f1: float
    gamma: float
    F: int

    def __post_init__(self):
        if not (math.isfinite(self.f1) and self.f1 > 0):
            raise InvalidParameterError(f"f1 must be > 0, got {self.f1}")
        if not (math.isfinite(self.gamma) and self.gamma > 1):
            raise InvalidParameterError(f"gamma must be > 1, got {self.gamma}")
        if int(self.F) != self.F or self.F < 1:
            raise InvalidParameterError(f"F must be a positive integer, got {self.F}")
        object.__setattr__(self, "F", int(self.F))

    @property
    def frequencies(self) -> np.ndarray:
        return self.f1 * self.gamma ** np.arange(self.F, dtype=np.float64)

    @property
    def periods(self) -> np.ndarray:
        return 2 * np.pi / self.frequencies

    @property
    def lowest_period(self) -> float:
        return float(2 * np.pi / self.f1)

    @property
    def highest_period(self) -> float:
        return float(2 * np.pi / self.frequencies[-1])

    @property
    def channel_dim(self) -> int:
        return 2 * self.F

    @property
    def dim(self) -> int:
        return 6 * self.F

    @property
    def probe_step(self) -> float:
        """Lattice spacing ``pi / (2 f_F)`` used by the decoder."""
        return float(np.pi / (2 * self.frequencies[-1]))

    def to_json(self) -> str:
        # 17 significant digits so the values survive a text round trip bit-exactly.
        return '{"f1": %s, "gamma": %s, "F": %d}' % (format(self.f1, ".17g"), format(self.gamma, ".17g"), self.F)

    @classmethod
    def from_json(cls, text: str) -> "FrequencySet":
        doc = json.loads(text)
        return cls.from_dict(doc)

    @classmethod
    def from_dict(cls, doc: dict) -> "FrequencySet":
        try:
            return cls(float(doc["f1"]), float(doc["gamma"]), int(doc["F"]))
        except KeyError as exc:
            raise InvalidParameterError(f"frequency set is missing key {exc}") from None

    def to_dict(self) -> dict:
        return {"f1": self.f1, "gamma": self.gamma, "F": self.F}


def make_frequency_set(f1: float, gamma: float, F: int) -> FrequencySet:
    return FrequencySet(float(f1), float(gamma), F)


# Values used in the original experiments, keyed by number of frequencies.
PRESETS: dict[int, FrequencySet] = {
    4: FrequencySet(0.020772487794205544, 5.7561020938998690, 4),
    6: FrequencySet(0.017903170262351338, 3.7079736887249526, 6),
    8: FrequencySet(0.031278470093268460, 2.5735254599557535, 8),
}
DEFAULT_FREQUENCIES = PRESETS[6]

# gamma is meaningless with a single frequency but must still satisfy gamma > 1.
_SINGLE_FREQUENCY_GAMMA = 2.0


def sample_frequency_set(
    rng_seed: int,
    p1_range: Sequence[float],
    pf_range: Sequence[float],
    F: int,
) -> FrequencySet:
    """Draw ``(f1, gamma)`` whose extreme periods fall inside the given metric ranges.

    ``P_1`` is drawn log-uniformly from ``p1_range``; ``P_F`` log-uniformly from the part of
    ``pf_range`` strictly below ``P_1``; gamma follows from ``P_1 / P_F = gamma**(F-1)``.
    """
    p1_lo, p1_hi = (float(v) for v in p1_range)
    pf_lo, pf_hi = (float(v) for v in pf_range)
    if F < 1 or int(F) != F:
        raise InvalidParameterError(f"F must be a positive integer, got {F}")
    if min(p1_lo, pf_lo) <= 0 or p1_lo > p1_hi or pf_lo > pf_hi:
        raise InvalidParameterError("period ranges must be positive, ordered intervals")
    rng = np.random.default_rng(rng_seed)

    def log_uniform(lo: float, hi: float) -> float:
        if lo == hi:
            return lo
        return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))

    if F == 1:
        lo, hi = max(p1_lo, pf_lo), min(p1_hi, pf_hi)
        if lo > hi:
            raise InfeasibleConstraintError("with F=1 the two period ranges must intersect")
        p1 = log_uniform(lo, hi)
        return FrequencySet(2 * np.pi / p1, _SINGLE_FREQUENCY_GAMMA, 1)

    if p1_hi <= pf_lo:
        raise InfeasibleConstraintError("no gamma > 1 satisfies the period ranges")
    # Restrict P_1 so that some admissible P_F < P_1 exists.
    p1 = log_uniform(max(p1_lo, np.nextafter(pf_lo, np.inf)), p1_hi)
    pf = log_uniform(pf_lo, min(pf_hi, np.nextafter(p1, 0.0)))
    gamma = (p1 / pf) ** (1.0 / (F - 1))
    if not gamma > 1:
        raise InfeasibleConstraintError("sampled periods collapse to gamma <= 1")
    return FrequencySet(2 * np.pi / p1, float(gamma), int(F))


@dataclass(frozen=True)
class SearchDomain:
    """Admissible decoding range of one coordinate channel, as a union of closed intervals."""

    intervals: tuple[tuple[float, float], ...]

    def __post_init__(self):
        ivs = tuple((float(lo), float(hi)) for lo, hi in self.intervals)
        if not ivs:
            raise InvalidParameterError("search domain needs at least one interval")
        for lo, hi in ivs:
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise InvalidParameterError(f"invalid interval [{lo}, {hi}]")
        object.__setattr__(self, "intervals", ivs)

    @classmethod
    def interval(cls, lo: float, hi: float) -> "SearchDomain":
        return cls(((lo, hi),))

    @classmethod
    def union(cls, intervals: Iterable[Sequence[float]]) -> "SearchDomain":
        """Build a domain from possibly overlapping intervals, merging overlaps."""
        ivs = sorted((float(lo), float(hi)) for lo, hi in intervals)
        merged: list[list[float]] = []
        for lo, hi in ivs:
            if merged and lo <= merged[-1][1]:
                merged[-1][1] = max(merged[-1][1], hi)
            else:
                merged.append([lo, hi])
        return cls(tuple((lo, hi) for lo, hi in merged))

    @property
    def lo(self) -> float:
        return min(lo for lo, _ in self.intervals)

    @property
    def hi(self) -> float:
        return max(hi for _, hi in self.intervals)

    def shifted(self, offset: float) -> "SearchDomain":
        return SearchDomain(tuple((lo + offset, hi + offset) for lo, hi in self.intervals))

    def expanded(self, margin: float) -> "SearchDomain":
        """Grow every interval by ``margin`` times its own length on both sides."""
        return SearchDomain.union((lo - margin * (hi - lo), hi + margin * (hi - lo)) for lo, hi in self.intervals)

    def contains(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        inside = np.zeros(t.shape, dtype=bool)
        for lo, hi in self.intervals:
            inside |= (t >= lo) & (t <= hi)
        return inside

    def clamp(self, t):
        """Project values onto the nearest point of the domain."""
        t = np.asarray(t, dtype=np.float64)
        best = np.full(t.shape, np.nan)
        best_dist = np.full(t.shape, np.inf)
        for lo, hi in self.intervals:
            c = np.clip(t, lo, hi)
            d = np.abs(c - t)
            take = d < best_dist
            best = np.where(take, c, best)
            best_dist = np.where(take, d, best_dist)
        return best

    def to_list(self) -> list[list[float]]:
        return [[lo, hi] for lo, hi in self.intervals]


@dataclass(frozen=True)
class RationalFrequencySet:
    """Frequencies ``a_i / b_i`` expressed in units of radians per unit length."""

    fractions: tuple[Fraction, ...] = field()

    def __post_init__(self):
        fr = tuple(Fraction(f) for f in self.fractions)
        if not fr:
            raise InvalidParameterError("need at least one frequency")
        if any(f <= 0 for f in fr):
            raise InvalidParameterError("frequencies must be positive")
        object.__setattr__(self, "fractions", fr)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, int]]) -> "RationalFrequencySet":
        out = []
        for a, b in pairs:
            if math.gcd(int(a), int(b)) != 1:
                raise InvalidParameterError(f"{a}/{b} is not in lowest terms")
            out.append(Fraction(int(a), int(b)))
        return cls(tuple(out))

    @classmethod
    def from_floats(cls, freqs: Iterable[float]) -> "RationalFrequencySet":
        """Exact rational value of each double, as stored by the hardware."""
        return cls(tuple(Fraction(float(f)) for f in freqs))

    @property
    def numerators(self) -> list[int]:
        return [f.numerator for f in self.fractions]

    @property
    def denominators(self) -> list[int]:
        return [f.denominator for f in self.fractions]


def exact_period(rfs: RationalFrequencySet) -> Fraction:
    """Smallest positive period of the encoding, as a rational multiple of ``2*pi``.

    Python integers are unbounded, so the lcm never overflows.
    """
    lcm_b = math.lcm(*rfs.denominators)
    gcd_a = math.gcd(*rfs.numerators)
    return Fraction(lcm_b, gcd_a)


# --------------------------------------------------------------------------------------------
# Encoding
# --------------------------------------------------------------------------------------------


def encode_channel(x, fs: FrequencySet) -> np.ndarray:
    """Channel encoding of scalar(s) ``x``; output shape ``x.shape + (2F,)``."""
    x = np.asarray(x, dtype=np.float64)
    phase = x[..., None] * fs.frequencies
    out = np.empty(x.shape + (2 * fs.F,), dtype=np.float64)
    out[..., 0::2] = np.cos(phase)
    out[..., 1::2] = np.sin(phase)
    return out


def encode_point(v, fs: FrequencySet) -> np.ndarray:
    """Point encoding of 3-vector(s) ``v``; output shape ``v.shape[:-1] + (6F,)``."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != 3:
        raise DimensionMismatchError(f"expected 3-vectors, got trailing dim {v.shape[-1]}")
    return np.concatenate([encode_channel(v[..., k], fs) for k in range(3)], axis=-1)


def pair_norms(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] % 2:
        raise DimensionMismatchError("encoding length must be even")
    return np.hypot(y[..., 0::2], y[..., 1::2])


def normalize_pairs(y) -> np.ndarray:
    """Scale every consecutive ``(cos, sin)`` pair to unit length.

    Raises :class:`DegeneratePairError` if any pair has norm below 1e-12.
    """
    y = np.asarray(y, dtype=np.float64)
    norms = pair_norms(y)
    if np.any(~(norms >= DEGENERATE_NORM)):
        raise DegeneratePairError("encoding contains a (near-)zero pair")
    return y / np.repeat(norms, 2, axis=-1)


def _check_channel(y, fs: FrequencySet) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != 2 * fs.F:
        raise DimensionMismatchError(f"channel encoding must have length {2 * fs.F}, got {y.shape[-1]}")
    return y


def objective_s(t, y, fs: FrequencySet):
    """Squared distance ``||psi(t) - y||^2`` in amplitude/phase form."""
    y = _check_channel(y, fs)
    amp = pair_norms(y)
    phase = np.arctan2(y[..., 1::2], y[..., 0::2])
    t = np.asarray(t, dtype=np.float64)
    inner = amp * np.cos(t[..., None] * fs.frequencies - phase)
    return fs.F + np.sum(y * y, axis=-1) - 2 * np.sum(inner, axis=-1)


def objective_s_prime(t, y, fs: FrequencySet):
    y = _check_channel(y, fs)
    amp = pair_norms(y)
    phase = np.arctan2(y[..., 1::2], y[..., 0::2])
    t = np.asarray(t, dtype=np.float64)
    f = fs.frequencies
    return 2 * np.sum(f * amp * np.sin(t[..., None] * f - phase), axis=-1)


# --------------------------------------------------------------------------------------------
# Decoding
# --------------------------------------------------------------------------------------------


def _probes(lo: float, hi: float, step: float) -> np.ndarray:
    n_lo = math.ceil(lo / step)
    n_hi = math.floor(hi / step)
    lattice = np.arange(n_lo, n_hi + 1, dtype=np.float64) * step
    lattice = lattice[(lattice > lo) & (lattice < hi)]
    if hi > lo:
        return np.concatenate([[lo], lattice, [hi]])
    return np.array([lo])


def _refine(t_lo, t_hi, t0, yc, ys, f):
    """Safeguarded Newton on S' inside the brackets ``[t_lo, t_hi]`` (S'(lo)<0<S'(hi))."""
    t = t0.copy()
    lo = t_lo.copy()
    hi = t_hi.copy()
    active = np.arange(t.size)
    f2 = f * f
    for _ in range(_REFINE_MAX_ITER):
        if active.size == 0:
            break
        ta = t[active]
        ph = ta[:, None] * f
        c, s = np.cos(ph), np.sin(ph)
        yca, ysa = yc[active], ys[active]
        g = 2 * np.sum(f * (yca * s - ysa * c), axis=1)
        h = 2 * np.sum(f2 * (yca * c + ysa * s), axis=1)
        la, ha = lo[active], hi[active]
        la = np.where(g < 0, ta, la)
        ha = np.where(g > 0, ta, ha)
        lo[active], hi[active] = la, ha
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = ta - g / h
        ok = (h > 0) & (newton > la) & (newton < ha)
        t_new = np.where(ok, newton, 0.5 * (la + ha))
        t[active] = t_new
        done = (np.abs(g) < _REFINE_GRAD_TOL) | ((ha - la) < _REFINE_BRACKET_TOL)
        # keep the converged iterate rather than the last proposal
        t[active[done]] = ta[done]
        active = active[~done]
    return t


def _s_batch(t, yc, ys, f, ysq, F):
    ph = t[:, None] * f
    return F + ysq - 2 * np.sum(yc * np.cos(ph) + ys * np.sin(ph), axis=1)


def _decode_rows(yn: np.ndarray, fs: FrequencySet, domain: SearchDomain) -> tuple[np.ndarray, np.ndarray]:
    """Decode pair-normalized rows; returns (argmin, S at argmin)."""
    M = yn.shape[0]
    f = fs.frequencies
    F = fs.F
    yc, ys = yn[:, 0::2], yn[:, 1::2]
    ysq = np.sum(yn * yn, axis=1)
    best_t = np.full(M, np.nan)
    best_s = np.full(M, np.inf)
    step = fs.probe_step
    for lo, hi in domain.intervals:
        probes = _probes(lo, hi, step)
        P = probes.size
        ph = probes[:, None] * f  # (P, F)
        cp, sp = np.cos(ph).T, np.sin(ph).T  # (F, P)
        rows_per_chunk = max(1, _CHUNK_ENTRIES // max(P, 1))
        for r0 in range(0, M, rows_per_chunk):
            r1 = min(M, r0 + rows_per_chunk)
            c_, s_ = yc[r0:r1], ys[r0:r1]
            s_probe = F + ysq[r0:r1, None] - 2 * (c_ @ cp + s_ @ sp)
            g_probe = 2 * ((c_ * f) @ sp - (s_ * f) @ cp)
            k = np.argmin(s_probe, axis=1)
            idx = np.arange(r1 - r0)
            cand_t = probes[k]
            cand_s = s_probe[idx, k]
            if P > 1:
                rows, cols = np.nonzero((g_probe[:, :-1] < 0) & (g_probe[:, 1:] > 0))
                if rows.size:
                    t0, t1 = probes[cols], probes[cols + 1]
                    # S'' <= 2 sum f_i^2 on normalized input, so a bracket of width h cannot
                    # hold a minimum lower than its smaller endpoint value minus C2 h^2 / 8.
                    slack = 2 * np.sum(f * f) * (t1 - t0) ** 2 / 8 + 1e-12
                    lower = np.minimum(s_probe[rows, cols], s_probe[rows, cols + 1]) - slack
                    keep = lower <= cand_s[rows]
                    rows, cols, t0, t1, lower = rows[keep], cols[keep], t0[keep], t1[keep], lower[keep]
                    g0, g1 = g_probe[rows, cols], g_probe[rows, cols + 1]
                    interp = np.clip(t0 - (t1 - t0) * g0 / (g1 - g0), t0, t1)
                    gr = rows + r0
                    s_interp = _s_batch(interp, yc[gr], ys[gr], f, ysq[gr], F)
                    upper = cand_s.copy()
                    np.minimum.at(upper, rows, s_interp)
                    keep = lower <= upper[rows]
                    rows, t0, t1, interp, gr = rows[keep], t0[keep], t1[keep], interp[keep], gr[keep]
                if rows.size:
                    tr = _refine(t0, t1, interp, yc[gr], ys[gr], f)
                    sr = _s_batch(tr, yc[gr], ys[gr], f, ysq[gr], F)
                    order = np.lexsort((sr, rows))
                    first = np.unique(rows[order], return_index=True)[1]
                    pick = order[first]
                    rr = rows[pick]
                    better = sr[pick] < cand_s[rr]
                    cand_t[rr[better]] = tr[pick][better]
                    cand_s[rr[better]] = sr[pick][better]
            upd = cand_s < best_s[r0:r1]
            best_t[r0:r1][upd] = cand_t[upd]
            best_s[r0:r1][upd] = cand_s[upd]
    return domain.clamp(best_t), best_s


def decode_channels(y, fs: FrequencySet, domain: SearchDomain, return_objective: bool = False):
    """Batch inverse of :func:`encode_channel` over rows of ``y`` (shape ``(..., 2F)``).

    Rows containing a degenerate pair decode to NaN instead of raising.
    """
    y = _check_channel(y, fs)
    shape = y.shape[:-1]
    flat = y.reshape(-1, 2 * fs.F)
    norms = pair_norms(flat)
    ok = np.all(norms >= DEGENERATE_NORM, axis=1)
    t = np.full(flat.shape[0], np.nan)
    s = np.full(flat.shape[0], np.nan)
    if np.any(ok):
        yn = flat[ok] / np.repeat(norms[ok], 2, axis=1)
        t[ok], s[ok] = _decode_rows(yn, fs, domain)
    if return_objective:
        return t.reshape(shape), s.reshape(shape)
    return t.reshape(shape)


def decode_channel(y, fs: FrequencySet, domain: SearchDomain) -> float:
    """Least-squares pre-image of one channel encoding, restricted to ``domain``."""
    y = normalize_pairs(_check_channel(y, fs))
    if y.ndim != 1:
        raise DimensionMismatchError("decode_channel takes a single encoding; use decode_channels")
    t, _ = _decode_rows(y[None, :], fs, domain)
    return float(t[0])


def _as_domains(domains) -> tuple[SearchDomain, SearchDomain, SearchDomain]:
    if isinstance(domains, SearchDomain):
        return (domains, domains, domains)
    doms = tuple(domains)
    if len(doms) != 3:
        raise InvalidParameterError("need one search domain per axis")
    return doms  # type: ignore[return-value]


def decode_points(y, fs: FrequencySet, domains) -> np.ndarray:
    """Batch inverse of :func:`encode_point`; rows with any degenerate channel become NaN."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != fs.dim:
        raise DimensionMismatchError(f"point encoding must have length {fs.dim}, got {y.shape[-1]}")
    doms = _as_domains(domains)
    w = 2 * fs.F
    out = np.stack([decode_channels(y[..., k * w : (k + 1) * w], fs, doms[k]) for k in range(3)], axis=-1)
    out[np.any(np.isnan(out), axis=-1)] = np.nan
    return out


def decode_point(y, fs: FrequencySet, domains) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (fs.dim,):
        raise DimensionMismatchError(f"point encoding must have shape ({fs.dim},), got {y.shape}")
    doms = _as_domains(domains)
    w = 2 * fs.F
    return np.array([decode_channel(y[k * w : (k + 1) * w], fs, doms[k]) for k in range(3)])


# --------------------------------------------------------------------------------------------
# Analysis
# --------------------------------------------------------------------------------------------


@dataclass(frozen=True)
class InjectivityReport:
    min_distance: float
    at_separation: float
    grid_points: int
    frequencies_used: tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "min_distance": self.min_distance,
            "at_separation": self.at_separation,
            "grid_points": self.grid_points,
        }


def injectivity_probe(
    fs: FrequencySet,
    domain: Sequence[float],
    grid_step: float,
    min_separation: float,
    subset: Sequence[int] | None = None,
) -> InjectivityReport:
    """Smallest encoding distance between grid points further apart than ``min_separation``.

    Since ``||psi(a) - psi(b)||^2 = 2F - 2 sum_i cos(f_i (a - b))`` only depends on ``a - b``,
    scanning the grid offsets is equivalent to scanning every pair.
    ``subset`` restricts the encoding to the given (0-based) frequency indices.
    """
    if not grid_step > 0:
        raise InvalidParameterError("grid_step must be positive")
    lo, hi = float(domain[0]), float(domain[1])
    if lo > hi:
        raise InvalidParameterError("domain must satisfy lo <= hi")
    f = fs.frequencies if subset is None else fs.frequencies[list(subset)]
    n = int(math.floor((hi - lo) / grid_step + 1e-9)) + 1
    k = np.arange(1, n)
    delta = k * grid_step
    delta = delta[delta > min_separation]
    if delta.size == 0:
        return InjectivityReport(math.inf, math.nan, n, tuple(f.tolist()))
    d2 = np.zeros(delta.size)
    for fi in f:
        d2 += 2.0 - 2.0 * np.cos(fi * delta)
    j = int(np.argmin(d2))
    return InjectivityReport(float(np.sqrt(max(d2[j], 0.0))), float(delta[j]), n, tuple(f.tolist()))


# --------------------------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------------------------


def reg_loss(v, y_hat, fs: FrequencySet) -> float:
    """l1 distance between the target encoding and the pair-normalized prediction."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y_hat.shape[-1] != fs.dim:
        raise DimensionMismatchError(f"prediction must have length {fs.dim}, got {y_hat.shape[-1]}")
    return float(np.sum(np.abs(encode_point(v, fs) - normalize_pairs(y_hat))))


def scr_loss_from_reg(reg: float, tau: float) -> float:
    if not tau > 0:
        raise InvalidParameterError(f"confidence must be positive, got {tau}")
    return float(tau * reg - math.log(tau))


def scr_loss(v, y_hat, tau: float, fs: FrequencySet) -> float:
    """Confidence-weighted regression loss ``tau * L_reg - log(tau)``."""
    if not tau > 0:
        raise InvalidParameterError(f"confidence must be positive, got {tau}")
    return scr_loss_from_reg(reg_loss(v, y_hat, fs), tau)
