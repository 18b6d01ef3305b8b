"""Uncertainty-weighted training objective and evaluation metrics.

The loss treats each pseudo-label as a noisy target whose reliability is
summarized by a scalar log-variance e_n (the spatial mean of that source's
predicted log-variance map). Per source the penalty is

    KLD(label_n, prediction) * exp(-e_n) + e_n / 2

summed over sources: high predicted variance down-weights a source's KLD at
the price of the e_n/2 regularizer. For a fixed KLD value k the optimum is
e* = ln(2k), so learned uncertainties track per-source disagreement.

Metrics: KLD (direct summation, natural log, eps inside both logs) and
Pearson CC with population variances. Reports are line-oriented text,
``sample_id<TAB>KLD<TAB>CC``.
"""

import math
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericError, ShapeError, UndefinedCorrelationError
from .maps import AttentionMap

EPS = 1e-12
_SUM_TOL = 1e-6

ArrayLike = Union[AttentionMap, np.ndarray]


def _dist(x: ArrayLike, name: str) -> np.ndarray:
    """Extract a normalized distribution as a float array."""
    values = x.values if isinstance(x, AttentionMap) else np.asarray(x, dtype=np.float64)
    total = values.sum()
    if abs(total - 1.0) > _SUM_TOL:
        raise ShapeError(f"{name} is not normalized (sums to {total!r})")
    return values


def _pair(p: ArrayLike, q: ArrayLike, name_p: str, name_q: str):
    pv, qv = _dist(p, name_p), _dist(q, name_q)
    if pv.shape != qv.shape:
        raise ShapeError(f"{name_p} {pv.shape} vs {name_q} {qv.shape}")
    return pv, qv


def kld(p: ArrayLike, q: ArrayLike, eps: float = EPS) -> float:
    """Kullback-Leibler divergence sum_i p_i (log(p_i+eps) - log(q_i+eps))."""
    pv, qv = _pair(p, q, "p", "q")
    return float((pv * (np.log(pv + eps) - np.log(qv + eps))).sum())


def entropy(p: ArrayLike, eps: float = EPS) -> float:
    pv = _dist(p, "p")
    return float(-(pv * np.log(pv + eps)).sum())


def cross_entropy_spatial(p: ArrayLike, s: ArrayLike, eps: float = EPS) -> float:
    """CE(p, s) = -sum_i p_i log(s_i + eps); equals KLD(p, s) + H(p)."""
    pv, sv = _pair(p, s, "p", "s")
    return float(-(pv * np.log(sv + eps)).sum())


def cc(s: ArrayLike, g: ArrayLike) -> float:
    """Pearson correlation over pixels; undefined for constant inputs."""
    sv = (s.values if isinstance(s, AttentionMap) else np.asarray(s, dtype=np.float64)).reshape(-1)
    gv = (g.values if isinstance(g, AttentionMap) else np.asarray(g, dtype=np.float64)).reshape(-1)
    if sv.shape != gv.shape:
        raise ShapeError(f"cc inputs differ: {sv.shape} vs {gv.shape}")
    sc = sv - sv.mean()
    gc = gv - gv.mean()
    denom = math.sqrt(float((sc * sc).sum()) * float((gc * gc).sum()))
    if denom == 0.0:
        raise UndefinedCorrelationError("correlation undefined for a constant map")
    return float((sc * gc).sum() / denom)


# ---------------------------------------------------------------------------
# uncertainty scalars and the loss
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UncertaintyScalar:
    """Per-source uncertainty: standard deviation u and log-variance e."""

    u: float
    e: float

    def __post_init__(self):
        if not (np.isfinite(self.u) and np.isfinite(self.e)):
            raise NumericError("uncertainty scalar is non-finite")
        if self.u <= 0:
            raise NumericError(f"u must be positive, got {self.u}")
        if abs(self.e - 2.0 * math.log(self.u)) > 1e-12:
            raise NumericError(f"e={self.e} inconsistent with 2 log u={2 * math.log(self.u)}")

    @classmethod
    def from_e(cls, e: float) -> "UncertaintyScalar":
        return cls(u=math.exp(e / 2.0), e=e)


def uncertainty_scalars(e_maps: Iterable) -> List[UncertaintyScalar]:
    """Spatial means of per-pixel log-variance maps -> one scalar each."""
    out = []
    for m in e_maps:
        values = m.data if isinstance(m, Tensor) else np.asarray(m, dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise NumericError("log-variance map contains non-finite values")
        out.append(UncertaintyScalar.from_e(float(values.mean())))
    return out


@dataclass(frozen=True)
class LossBreakdown:
    kld: tuple          # per-source KLD(label_n, S)
    e: tuple            # per-source log variance
    term: tuple         # kld_n * exp(-e_n) + e_n / 2
    total: float

    def __post_init__(self):
        if not (len(self.kld) == len(self.e) == len(self.term)):
            raise ShapeError("loss breakdown fields disagree on source count")
        if abs(self.total - sum(self.term)) > 1e-12:
            raise NumericError("loss total does not match the sum of its terms")


def loss_in_e(k: float, e: float) -> float:
    """Single-source loss as a function of e for fixed KLD k; the minimizer
    is e* = ln(2k)."""
    return k * math.exp(-e) + 0.5 * e


def uncertainty_loss(prediction: ArrayLike, labels: Sequence[ArrayLike],
                     scalars: Sequence[UncertaintyScalar]) -> LossBreakdown:
    """Reference (non-differentiable) evaluation of the full objective."""
    if len(labels) != len(scalars):
        raise ShapeError(f"{len(labels)} labels but {len(scalars)} scalars")
    klds, es, terms = [], [], []
    for label, scalar in zip(labels, scalars):
        k = kld(label, prediction)
        klds.append(k)
        es.append(scalar.e)
        terms.append(loss_in_e(k, scalar.e))
    return LossBreakdown(kld=tuple(klds), e=tuple(es), term=tuple(terms),
                         total=float(sum(terms)))


def training_loss(s: Tensor, label_batches: Sequence[np.ndarray],
                  e_maps: Sequence[Tensor], eps: float = EPS):
    """Differentiable batch loss.

    ``s`` is the predicted distribution [B,1,H,W] (on the tape),
    ``label_batches`` are constant normalized targets of the same shape, and
    ``e_maps`` are the predicted log-variance maps [B,1,H,W]. Label entropy
    enters as a constant, so gradients only flow through log S and e. Returns
    the scalar loss tensor (mean over the batch of the per-sample source sum)
    plus a LossBreakdown of batch means.
    """
    if len(label_batches) != len(e_maps):
        raise ShapeError(f"{len(label_batches)} labels but {len(e_maps)} e-maps")
    if not label_batches:
        raise ShapeError("need at least one source")
    log_s = ad.log(ad.add_scalar(s, eps))
    total = None
    klds, es, terms = [], [], []
    for y, e_map in zip(label_batches, e_maps):
        if y.shape != s.data.shape:
            raise ShapeError(f"label batch {y.shape} vs prediction {s.data.shape}")
        y_logy = (y * np.log(y + eps)).sum(axis=(1, 2, 3))
        kld_b = ad.sub(Tensor(y_logy), ad.sum_per_sample(Tensor(y) * log_s))
        e_b = ad.mean_per_sample(e_map)
        term = ad.add(kld_b * ad.exp(-e_b), 0.5 * e_b)
        total = term if total is None else ad.add(total, term)
        klds.append(float(kld_b.data.mean()))
        es.append(float(e_b.data.mean()))
        terms.append(float(term.data.mean()))
    loss = ad.mean_all(total)
    return loss, LossBreakdown(kld=tuple(klds), e=tuple(es), term=tuple(terms),
                               total=float(sum(terms)))


# ---------------------------------------------------------------------------
# metric reports
# ---------------------------------------------------------------------------

def format_report(rows: Sequence[tuple]) -> str:
    """Rows of (sample_id, kld, cc) -> tab-separated lines; floats use their
    shortest round-trip form."""
    lines = [f"{sid}\t{k!r}\t{c!r}" for sid, k, c in rows]
    return "\n".join(lines) + ("\n" if lines else "")


def parse_report(text: str) -> List[tuple]:
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"bad report line: {line!r}")
        rows.append((parts[0], float(parts[1]), float(parts[2])))
    return rows
