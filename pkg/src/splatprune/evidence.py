"""Descriptor statistics, Beta evidence accumulation and confidence scores."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .errors import DomainError, LengthMismatch, NonConvergence

DEFAULT_GAMMA = 0.25
DEFAULT_Z = 1.0
DEFAULT_Q = 0.05
DEFAULT_PRIOR = (1.0, 1.0)
SCORE_MODES = ("optimistic", "lcb_gaussian", "lcb_exact")
SCORE_BASES = ("retention", "pruning")

# evidence weights: pruning side (w-scaled), pruning self term, retention side
W_S, W_L, W_O_PRUNE, W_U_PRUNE = 0.50, 0.35, 0.20, 0.20
W_O_KEEP, W_U_KEEP = 0.55, 0.50
GRAZING_WEIGHT = 0.25

_FPMIN = 1e-300
_CF_EPS = 1e-16
_CF_MAXIT = 1000


# -- Beta function numerics --------------------------------------------------------

def _betacf(a, b, x):
    """Modified Lentz evaluation of the incomplete-beta continued fraction (vectorized)."""
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = np.ones_like(x)
    d = 1.0 - qab * x / qap
    d = np.where(np.abs(d) < _FPMIN, _FPMIN, d)
    d = 1.0 / d
    h = d.copy()
    active = np.ones(x.shape, dtype=bool)
    for m in range(1, _CF_MAXIT + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = np.where(np.abs(d) < _FPMIN, _FPMIN, d)
        c = 1.0 + aa / c
        c = np.where(np.abs(c) < _FPMIN, _FPMIN, c)
        d = 1.0 / d
        h = np.where(active, h * d * c, h)
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = np.where(np.abs(d) < _FPMIN, _FPMIN, d)
        c = 1.0 + aa / c
        c = np.where(np.abs(c) < _FPMIN, _FPMIN, c)
        d = 1.0 / d
        delta = d * c
        h = np.where(active, h * delta, h)
        active &= np.abs(delta - 1.0) >= _CF_EPS
        if not active.any():
            return h
    raise NonConvergence("incomplete beta continued fraction did not converge")


def reg_inc_beta(x, a, b):
    """Regularized incomplete beta I_x(a, b); broadcasts over array arguments."""
    x, a, b = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (x, a, b)))
    if np.any((x < 0) | (x > 1) | ~np.isfinite(x)) or np.any(~(a > 0)) or np.any(~(b > 0)):
        raise DomainError("reg_inc_beta needs x in [0, 1] and a, b > 0")
    out = np.where(x >= 1.0, 1.0, 0.0)
    inner = (x > 0) & (x < 1)
    if inner.any():
        xi, ai, bi = x[inner], a[inner], b[inner]
        log_front = (gammaln(ai + bi) - gammaln(ai) - gammaln(bi)
                     + ai * np.log(xi) + bi * np.log1p(-xi))
        front = np.exp(log_front)
        direct = xi < (ai + 1.0) / (ai + bi + 2.0)
        val = np.empty_like(xi)
        if direct.any():
            val[direct] = front[direct] * _betacf(ai[direct], bi[direct], xi[direct]) / ai[direct]
        flip = ~direct
        if flip.any():
            val[flip] = 1.0 - front[flip] * _betacf(bi[flip], ai[flip], 1.0 - xi[flip]) / bi[flip]
        out[inner] = np.clip(val, 0.0, 1.0)
    return out if out.ndim else float(out)


def beta_pdf(x, a, b):
    x, a, b = (np.asarray(v, dtype=np.float64) for v in (x, a, b))
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = ((a - 1.0) * np.log(x) + (b - 1.0) * np.log1p(-x)
                - (gammaln(a) + gammaln(b) - gammaln(a + b)))
        return np.where((x > 0) & (x < 1), np.exp(logp), 0.0)


def beta_inv_cdf(q, a, b, tol=1e-8, max_iter=200):
    """Quantile of Beta(a, b): bisection on [0, 1] with safeguarded Newton steps."""
    q, a, b = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (q, a, b)))
    if np.any(~((q > 0) & (q < 1))):
        raise DomainError("beta_inv_cdf needs 0 < q < 1")
    if np.any(~(a > 0)) or np.any(~(b > 0)):
        raise DomainError("beta_inv_cdf needs a, b > 0")
    q, a, b = q.astype(np.float64).copy(), a.copy(), b.copy()
    lo = np.zeros_like(q)
    hi = np.ones_like(q)
    x = np.clip(a / (a + b), 1e-12, 1 - 1e-12)
    resid = reg_inc_beta(x, a, b) - q
    # tighter than tol so the reported bound holds with margin
    target = min(tol, 1e-12)
    for _ in range(max_iter):
        done = (np.abs(resid) <= target) | (hi - lo <= 4e-16 * np.maximum(x, 1e-300))
        if done.all():
            break
        below = resid < 0
        lo = np.where(below & ~done, x, lo)
        hi = np.where(~below & ~done, x, hi)
        pdf = beta_pdf(x, a, b)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = x - resid / pdf
        bisect = 0.5 * (lo + hi)
        ok = np.isfinite(newton) & (newton > lo) & (newton < hi)
        x = np.where(done, x, np.where(ok, newton, bisect))
        resid = np.where(done, resid, reg_inc_beta(x, a, b) - q)
    if np.any(np.abs(resid) > tol):
        raise NonConvergence(f"beta_inv_cdf residual {np.abs(resid).max():.3g} after {max_iter} iterations")
    return x if x.ndim else float(x)


def beta_mean(A, B):
    """Expected pruning probability B / (A + B)."""
    A, B = np.asarray(A, dtype=np.float64), np.asarray(B, dtype=np.float64)
    out = B / (A + B)
    return out if out.ndim else float(out)


def beta_variance(A, B):
    A, B = np.asarray(A, dtype=np.float64), np.asarray(B, dtype=np.float64)
    n = A + B
    out = A * B / (n * n * (n + 1.0))
    return out if out.ndim else float(out)


# -- statistics ----------------------------------------------------------------------

def minmax(x):
    """Scene-wide min-max normalization; a constant field maps to 0.5."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.full_like(x, 0.5)
    return (x - lo) / (hi - lo + 1e-12)


@dataclass
class LocalStats:
    s: np.ndarray  # low-frequency appearance consistency
    l: np.ndarray  # noqa: E741  low geometric contrast
    o: np.ndarray  # opacity
    u: np.ndarray  # geometry uniqueness

    def __len__(self):
        return len(self.s)

    @classmethod
    def neutral(cls, opacity) -> "LocalStats":
        """Opacity-only statistics (s, l, u pinned at 0.5)."""
        o = np.asarray(opacity, dtype=np.float64)
        half = np.full_like(o, 0.5)
        return cls(half.copy(), half.copy(), o, half.copy())

    def interpolate(self, mapping, opacity=None) -> "LocalStats":
        """Splat-level statistics; ``opacity`` replaces the interpolated o when given."""
        from .spatial import interpolate_to_splats

        o = interpolate_to_splats(self.o, mapping) if opacity is None else np.asarray(opacity, dtype=np.float64)
        return LocalStats(interpolate_to_splats(self.s, mapping), interpolate_to_splats(self.l, mapping),
                          o, interpolate_to_splats(self.u, mapping))

    def summary(self) -> dict:
        return {name: {"min": float(v.min()), "mean": float(v.mean()), "max": float(v.max())}
                for name, v in (("s", self.s), ("l", self.l), ("o", self.o), ("u", self.u))}


STAT_MODES = ("neighborhood", "component")


def _neighborhood_spread(block, nbr_idx, squared):
    """Mean per-component spread of ``block`` over each point and its neighbours."""
    group = np.concatenate([block[:, None, :], block[nbr_idx]], axis=1)
    spread = group.var(axis=1) if squared else group.std(axis=1)
    return spread.mean(axis=1)


def local_statistics(descriptors, mean_opacity, nbr_idx, mode: str = "neighborhood") -> LocalStats:
    """Per-voxel s, l, o, u from a :class:`DescriptorTable`.

    ``mode="neighborhood"`` measures how much the geometric (l) and
    appearance (s) blocks vary across a voxel and its neighbours, so a
    homogeneous patch scores high on both.  ``mode="component"`` measures
    the spread across the components of the voxel's own blocks instead.
    """
    if mode not in STAT_MODES:
        raise DomainError(f"unknown statistic mode {mode!r}")
    appearance = np.concatenate([descriptors.power_spectrum, descriptors.appearance_hist], axis=1)
    if mode == "component":
        raw_l = descriptors.geometric.std(axis=1)
        raw_s = appearance.var(axis=1)
    else:
        raw_l = _neighborhood_spread(descriptors.geometric, nbr_idx, squared=False)
        raw_s = _neighborhood_spread(appearance, nbr_idx, squared=True)
    full = descriptors.full()
    if nbr_idx.shape[1]:
        raw_u = np.linalg.norm(full - full[nbr_idx].mean(axis=1), axis=1)
    else:
        raw_u = np.zeros(len(full))
    return LocalStats(
        s=1.0 - minmax(raw_s),
        l=1.0 - minmax(raw_l),
        o=np.asarray(mean_opacity, dtype=np.float64).copy(),
        u=minmax(raw_u),
    )


def pruning_statistic(stats: LocalStats) -> np.ndarray:
    """The evidence weight vector applied directly (no Beta transform)."""
    return (W_S * stats.s + W_L * stats.l + W_O_PRUNE * (1.0 - stats.o)
            + W_U_PRUNE * (1.0 - stats.u))


# -- evidence ------------------------------------------------------------------------

@dataclass
class EvidenceState:
    A: np.ndarray  # retention evidence
    B: np.ndarray  # pruning evidence

    def __len__(self):
        return len(self.A)

    @property
    def mean(self):
        return beta_mean(self.A, self.B)

    @property
    def variance(self):
        return beta_variance(self.A, self.B)


def kernel_weights(dist, bandwidth):
    dist = np.asarray(dist, dtype=np.float64)
    return np.exp(-(dist * dist) / (2.0 * bandwidth * bandwidth))


def accumulate(self_u, nbr_s, nbr_l, nbr_o, nbr_d, bandwidth, prior=DEFAULT_PRIOR, valid=None):
    """Vectorized evidence update over padded ``(P, K)`` neighbour statistics.

    Row sums run left to right in the given column order, so identical
    inputs always produce identical bits.
    """
    w = kernel_weights(nbr_d, bandwidth)
    if valid is not None:
        w = np.where(valid, w, 0.0)
    prune = w * (W_S * nbr_s + W_L * nbr_l + W_O_PRUNE * (1.0 - nbr_o))
    keep = w * (W_O_KEEP * nbr_o)
    self_u = np.asarray(self_u, dtype=np.float64)
    B = prior[1] + _ordered_rowsum(prune) + W_U_PRUNE * (1.0 - self_u)
    A = prior[0] + _ordered_rowsum(keep) + W_U_KEEP * self_u
    return EvidenceState(A, B)


def _ordered_rowsum(m):
    out = np.zeros(m.shape[0])
    for col in range(m.shape[1]):
        out += m[:, col]
    return out


def accumulate_evidence(stats: LocalStats, neighbor_sets, bandwidth, prior=DEFAULT_PRIOR) -> EvidenceState:
    """Evidence update for every entry of ``stats``.

    ``neighbor_sets`` is either a list of ``(index, distance)`` lists or an
    ``(index_table, distance_table)`` pair of equal-shaped arrays.  A
    neighbour at distance 0 receives weight 1, so passing an entry as its
    own neighbour folds its own statistics in.
    """
    if isinstance(neighbor_sets, tuple) and len(neighbor_sets) == 2 and np.ndim(neighbor_sets[0]) == 2:
        idx = np.asarray(neighbor_sets[0], dtype=np.int64)
        dist = np.asarray(neighbor_sets[1], dtype=np.float64)
        valid = None
    else:
        if len(neighbor_sets) != len(stats):
            raise LengthMismatch(f"{len(neighbor_sets)} neighbour sets for {len(stats)} entries")
        width = max((len(ns) for ns in neighbor_sets), default=0)
        idx = np.zeros((len(stats), width), dtype=np.int64)
        dist = np.zeros((len(stats), width))
        valid = np.zeros((len(stats), width), dtype=bool)
        for row, ns in enumerate(neighbor_sets):
            for col, (j, d) in enumerate(ns):
                idx[row, col], dist[row, col], valid[row, col] = j, d, True
    if len(idx) != len(stats):
        raise LengthMismatch(f"{len(idx)} neighbour rows for {len(stats)} entries")
    return accumulate(stats.u, stats.s[idx], stats.l[idx], stats.o[idx], dist, bandwidth, prior, valid)


def grazing_proxy(view, opacity):
    """Camera-aware edge-likeness: (1 - mean |n . view_dir|) scaled by opacity."""
    return (1.0 - np.asarray(view)[:, 4]) * np.asarray(opacity, dtype=np.float64)


# -- scores --------------------------------------------------------------------------

@dataclass
class ScoreRecord:
    mean: np.ndarray      # basis mean (retention or pruning)
    variance: np.ndarray
    score: np.ndarray


def score_splats(evidence: EvidenceState, mode: str = "optimistic", gamma: float = DEFAULT_GAMMA,
                 z: float = DEFAULT_Z, q: float = DEFAULT_Q, basis: str = "retention") -> ScoreRecord:
    if mode not in SCORE_MODES:
        raise DomainError(f"unknown score mode {mode!r}")
    if basis not in SCORE_BASES:
        raise DomainError(f"unknown score basis {basis!r}")
    if gamma < 0 or z < 0:
        raise DomainError("gamma and z must be non-negative")
    A = np.asarray(evidence.A, dtype=np.float64)
    B = np.asarray(evidence.B, dtype=np.float64)
    m = np.asarray(beta_mean(A, B))
    v = np.asarray(beta_variance(A, B))
    c = 1.0 - m if basis == "retention" else m
    if mode == "optimistic":
        score = c + gamma * np.sqrt(v)
    elif mode == "lcb_gaussian":
        score = c - z * np.sqrt(v)
    else:
        # retention confidence ~ Beta(A, B); pruning probability ~ Beta(B, A)
        a, b = (A, B) if basis == "retention" else (B, A)
        score = np.asarray(beta_inv_cdf(q, a, b))
    return ScoreRecord(c, v, score)


__all__ = [
    "reg_inc_beta", "beta_inv_cdf", "beta_pdf", "beta_mean", "beta_variance", "minmax",
    "LocalStats", "local_statistics", "pruning_statistic", "EvidenceState", "accumulate",
    "accumulate_evidence", "kernel_weights", "grazing_proxy", "ScoreRecord", "score_splats",
    "DEFAULT_GAMMA", "DEFAULT_Z", "DEFAULT_Q", "DEFAULT_PRIOR", "SCORE_MODES", "SCORE_BASES", "STAT_MODES",
]
